"""MEC server logic, independent of the network runtime.

Frames are appended to an *active* buffer by the broker side.  Every
``t_buffer_ms`` the flush worker swaps the active buffer out, decodes the
frames, inserts them as one batch and evaluates handovers on the batch.
The end-to-end budget the flush has to respect is::

    t_msg = t_send + t_buffer + t_decode + t_insertion < 100 ms
    t_decode + t_insertion < t_buffer
"""

from __future__ import annotations

import collections
import logging
import threading
import time
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from ..cam_codec import CamColumns, decode_batch
from ..geoindex import CellId, GeoPoint, HexGridConfig, cells_in_disc, haversine_m, haversine_m_array
from ..store import (
    BBox,
    CapacityExceeded,
    EdmStore,
    InvalidSpec,
    QueryMode,
    QuerySpec,
    RetentionConfig,
    format_csv,
)
from ..topics import handover_topic, its_response_topic, parse_feed_topic
from .descriptor import MecDescriptor

log = logging.getLogger(__name__)
metrics_log = logging.getLogger("edm.metrics")

DEFAULT_T_BUFFER_MS = 50
DEFAULT_MAX_ACTIVE = 100_000
PROXIMITY_APP = "proximity"

Publisher = Callable[[str, bytes], None]


@dataclass
class BufferState:
    active: list = field(default_factory=list)
    flushing: list = field(default_factory=list)
    t_buffer_ms: int = DEFAULT_T_BUFFER_MS


@dataclass(frozen=True)
class HandoverDirective:
    vehicle_id: int
    target_mec: str
    endpoint: str

    def payload(self) -> bytes:
        return f"mec_id={self.target_mec};endpoint={self.endpoint}".encode()


@dataclass
class VehicleHandover:
    current_mec: str
    last_handover_ms: int


@dataclass
class HandoverState:
    cooldown_ms: int = 5_000
    margin_m: float = 25.0
    vehicles: dict[int, VehicleHandover] = field(default_factory=dict)

    def __post_init__(self):
        if self.cooldown_ms <= 0:
            raise ValueError("cooldown_ms must be > 0")
        if self.margin_m < 0:
            raise ValueError("margin_m must be >= 0")


@dataclass
class FlushReport:
    count: int
    t_decode_ms: float
    t_insertion_ms: float
    budget_ok: bool
    malformed: int = 0
    ts_ms: int = 0
    visible_ms: float = 0.0
    directives: list[HandoverDirective] = field(default_factory=list)

    def log_line(self) -> str:
        return (
            f"flush count={self.count} t_decode={self.t_decode_ms:.3f} "
            f"t_insert={self.t_insertion_ms:.3f} budget_ok={str(self.budget_ok).lower()}"
        )


def evaluate_handover(
    vehicle_id: int, p: GeoPoint, me: MecDescriptor, hs: HandoverState, now_ms: int
) -> HandoverDirective | None:
    """Hysteresis handover rule for one vehicle currently served by ``me``.

    A directive needs the vehicle to be outside our optimal radius by more
    than the margin, inside some neighbor's optimal radius by more than the
    margin, and the per-vehicle cooldown to have elapsed.
    """
    if haversine_m(p, me.position) <= me.r_optimal_m + hs.margin_m:
        return None
    rec = hs.vehicles.get(vehicle_id)
    if rec is not None and now_ms - rec.last_handover_ms <= hs.cooldown_ms:
        return None
    best, best_d = None, None
    for n in me.neighbors:
        d = haversine_m(p, n.position)
        if d < n.r_optimal_m - hs.margin_m and (best is None or (d, n.mec_id) < (best_d, best.mec_id)):
            best, best_d = n, d
    if best is None:
        return None
    hs.vehicles[vehicle_id] = VehicleHandover(best.mec_id, now_ms)
    return HandoverDirective(vehicle_id, best.mec_id, best.broker_endpoint)


def border_cells(me: MecDescriptor, n: MecDescriptor, cfg: HexGridConfig) -> set[CellId]:
    """Cells inside both operating discs."""
    if haversine_m(me.position, n.position) > me.r_operating_m + n.r_operating_m + 2 * cfg.edge_m:
        return set()
    return cells_in_disc(me.position, me.r_operating_m, cfg) & cells_in_disc(n.position, n.r_operating_m, cfg)


# -- ITS query payloads -------------------------------------------------------


def parse_query_payload(payload: bytes | str) -> QuerySpec:
    """Parse ``mode=<latest|all>;window_ms=<n|none>;region=<none|bbox:a,b,c,d|cell:ID>``."""
    text = payload.decode("utf-8") if isinstance(payload, bytes) else payload
    fields = {}
    for item in text.strip().split(";"):
        key, sep, value = item.partition("=")
        if not sep:
            raise InvalidSpec(f"malformed item {item!r}")
        fields[key.strip()] = value.strip()
    unknown = set(fields) - {"mode", "window_ms", "region"}
    if unknown or "mode" not in fields:
        raise InvalidSpec(f"bad query fields {sorted(fields)}")
    try:
        mode = QueryMode(fields["mode"])
    except ValueError:
        raise InvalidSpec(f"bad mode {fields['mode']!r}") from None
    window = fields.get("window_ms", "none")
    try:
        window_ms = None if window == "none" else int(window)
    except ValueError:
        raise InvalidSpec(f"bad window_ms {window!r}") from None
    region_text = fields.get("region", "none")
    region = None
    if region_text.startswith("bbox:"):
        try:
            a, b, c, d = (float(x) for x in region_text[5:].split(","))
        except ValueError:
            raise InvalidSpec(f"bad bbox {region_text!r}") from None
        region = BBox(a, b, c, d)
    elif region_text.startswith("cell:"):
        try:
            region = CellId.parse(region_text[5:])
        except ValueError as exc:
            raise InvalidSpec(str(exc)) from None
    elif region_text != "none":
        raise InvalidSpec(f"bad region {region_text!r}")
    return QuerySpec(mode, window_ms, region)


def format_query_payload(spec: QuerySpec) -> bytes:
    window = "none" if spec.time_window_ms is None else str(spec.time_window_ms)
    r = spec.region
    if r is None:
        region = "none"
    elif isinstance(r, BBox):
        region = f"bbox:{r.lat_min!r},{r.lat_max!r},{r.lon_min!r},{r.lon_max!r}"
    else:
        region = f"cell:{r.encoded}"
    return f"mode={spec.mode.value};window_ms={window};region={region}".encode()


def error_payload(message: str) -> bytes:
    return ("error\n" + message.replace("\n", " ") + "\n").encode()


# -- the server ---------------------------------------------------------------


class MecServer:
    """State and per-tick work of one MEC server.

    ``ingest_cam`` may be called from any thread; ``flush_buffer`` and
    ``prune`` must be called by a single writer.  Queries may run
    concurrently with the writer.
    """

    def __init__(
        self,
        descriptor: MecDescriptor,
        grid: HexGridConfig,
        t_buffer_ms: int = DEFAULT_T_BUFFER_MS,
        retention: RetentionConfig | None = None,
        max_active: int = DEFAULT_MAX_ACTIVE,
        handover: HandoverState | None = None,
        store: EdmStore | None = None,
        publish: Publisher | None = None,
        on_flush: Callable[[FlushReport, CamColumns], None] | None = None,
    ):
        if t_buffer_ms <= 0:
            raise ValueError("t_buffer_ms must be > 0")
        self.descriptor = descriptor
        self.grid = grid
        self.retention = retention if retention is not None else RetentionConfig()
        self.max_active = max_active
        self.handover = handover if handover is not None else HandoverState()
        self.store = store if store is not None else EdmStore()
        self.publish = publish
        self.on_flush = on_flush
        self.buffer = BufferState(t_buffer_ms=t_buffer_ms)
        self._arrivals: list[float] = []
        self._lock = threading.Lock()
        self._topic_info: dict[str, tuple[bool, int] | None] = {}
        self.its_apps: dict[str, Callable[[bytes, int], bytes]] = {PROXIMITY_APP: self._proximity_app}
        self.border: dict[str, set[CellId]] = {}
        # conservation: received == stored + malformed + overflow_drops + capacity_drops + pending
        self.received = 0
        self.accepted = 0
        self.overflow_drops = 0
        self.malformed = 0
        self.stored = 0
        self.capacity_drops = 0
        self.topic_cell_mismatch = 0
        self.mirrored_by_origin: collections.Counter[str] = collections.Counter()
        self.flushes = 0
        self.budget_misses = 0

    @property
    def mec_id(self) -> str:
        return self.descriptor.mec_id

    @property
    def t_buffer_ms(self) -> int:
        return self.buffer.t_buffer_ms

    @property
    def pending(self) -> int:
        return len(self.buffer.active) + len(self.buffer.flushing)

    # -- ingest -----------------------------------------------------------------

    def _classify(self, topic: str) -> tuple[bool, int] | None:
        """(published on our own feed?, cell key named by the topic or -1)."""
        info = self._topic_info.get(topic, False)
        if info is False:
            parsed = parse_feed_topic(topic)
            if parsed is None:
                info = None
            else:
                try:
                    key = CellId.parse(parsed[1]).key
                except ValueError:
                    key = -1
                info = (parsed[0] == self.mec_id, key)
            if len(self._topic_info) > 100_000:
                self._topic_info.clear()
            self._topic_info[topic] = info
        return info

    def ingest_cam(self, raw: bytes, topic: str, arrival_ms: float) -> bool:
        """Queue one raw CAM frame for the next flush.  O(1), never waits on a flush."""
        info = self._classify(topic)
        with self._lock:
            self.received += 1
            if info is None:
                self.malformed += 1
                return False
            active = self.buffer.active
            if len(active) >= self.max_active:
                self.overflow_drops += 1
                return False
            active.append((raw, info[0], info[1]))
            self._arrivals.append(arrival_ms)
            self.accepted += 1
        if not info[0]:
            self.mirrored_by_origin[topic.split("/", 1)[0]] += 1
        return True

    # -- flush ------------------------------------------------------------------

    def swap(self) -> list:
        """Move the active buffer to ``flushing`` and start a fresh active one."""
        with self._lock:
            frames = self.buffer.active
            self.buffer.active = []
            self._arrivals = []
            self.buffer.flushing = frames
        return frames

    def flush_buffer(self, now_ms: int) -> FlushReport:
        return self.process(self.swap(), now_ms)

    def process(self, frames: list, now_ms: int) -> FlushReport:
        t0 = time.perf_counter()
        cols, bad = decode_batch([f[0] for f in frames], self.grid)
        t_decode = (time.perf_counter() - t0) * 1e3
        count = len(cols)
        t_insert = 0.0
        if count:
            try:
                t_insert = self.store.insert_batch(cols, now_ms).t_insertion_ms
            except CapacityExceeded as exc:
                log.warning("%s: %s; dropping batch of %d", self.mec_id, exc, count)
                self.capacity_drops += count
                count = 0
        visible_ms = time.time() * 1e3
        report = FlushReport(
            count=count,
            t_decode_ms=t_decode,
            t_insertion_ms=t_insert,
            budget_ok=t_decode + t_insert < self.t_buffer_ms,
            malformed=bad,
            ts_ms=now_ms,
            visible_ms=visible_ms,
        )
        with self._lock:
            self.malformed += bad
            self.stored += count
            self.buffer.flushing = []
        self.flushes += 1
        if not report.budget_ok:
            self.budget_misses += 1
        if count:
            self._check_topics(frames, cols)
            report.directives = self._handover_pass(frames, cols, now_ms)
        metrics_log.info(report.log_line())
        if self.on_flush is not None:
            self.on_flush(report, cols)
        return report

    def _check_topics(self, frames: list, cols: CamColumns) -> None:
        topic_keys = np.fromiter((f[2] for f in frames), np.int64, len(frames))
        self.topic_cell_mismatch += int(np.count_nonzero(topic_keys[cols.source_index] != cols.cell_key))

    def _handover_pass(self, frames: list, cols: CamColumns, now_ms: int) -> list[HandoverDirective]:
        me = self.descriptor
        if not me.neighbors:
            return []
        src = cols.source_index
        own = np.fromiter((frames[i][1] for i in src.tolist()), bool, len(src))
        dist = haversine_m_array(cols.lat, cols.lon, me.position)
        candidates = np.flatnonzero(own & (dist > me.r_optimal_m + self.handover.margin_m))
        if not candidates.size:
            return []
        # latest frame per vehicle within this batch
        latest: dict[int, int] = {}
        gen = cols.gen_time_ms
        for i in candidates.tolist():
            sid = int(cols.station_id[i])
            j = latest.get(sid)
            if j is None or gen[i] >= gen[j]:
                latest[sid] = i
        out = []
        for sid, i in sorted(latest.items()):
            d = evaluate_handover(sid, GeoPoint(float(cols.lat[i]), float(cols.lon[i])), me, self.handover, now_ms)
            if d is not None:
                out.append(d)
                if self.publish is not None:
                    self.publish(handover_topic(self.mec_id, sid), d.payload())
        return out

    def prune(self, now_ms: int) -> int:
        return self.store.prune(now_ms, self.retention)

    # -- neighbors ----------------------------------------------------------------

    def set_neighbors(self, neighbors: list[MecDescriptor]) -> dict[str, set[CellId]]:
        """Adopt a neighbor list; returns the border cells per neighbor id."""
        neighbors = [n for n in neighbors if n.mec_id != self.mec_id]
        self.descriptor = self.descriptor.with_neighbors(neighbors)
        self.border = {n.mec_id: border_cells(self.descriptor, n, self.grid) for n in neighbors}
        return self.border

    def set_descriptor(self, descriptor: MecDescriptor) -> None:
        self.descriptor = descriptor.with_neighbors(self.descriptor.neighbors)
        self._topic_info.clear()
        self.set_neighbors(list(self.descriptor.neighbors))

    # -- ITS queries ----------------------------------------------------------------

    def _proximity_app(self, payload: bytes, now_ms: int) -> bytes:
        spec = parse_query_payload(payload)
        return format_csv(self.store.query(spec, now_ms)).encode()

    def answer_query(self, topic: str, payload: bytes, now_ms: int) -> tuple[str, bytes] | None:
        """Run an ITS query received on ``<mec>/<app>/query/<vehicle>``; one response per query."""
        parts = topic.split("/")
        if len(parts) != 4 or parts[0] != self.mec_id or parts[2] != "query":
            return None
        _, app_id, _, vehicle = parts
        app = self.its_apps.get(app_id)
        if app is None:
            body = error_payload(f"unknown ITS application {app_id!r}")
        else:
            try:
                body = app(payload, now_ms)
            except (InvalidSpec, ValueError, UnicodeDecodeError) as exc:
                body = error_payload(f"{type(exc).__name__}: {exc}")
        response_topic = its_response_topic(self.mec_id, app_id, vehicle)
        if self.publish is not None:
            self.publish(response_topic, body)
        return response_topic, body

    def conservation(self) -> dict[str, int]:
        with self._lock:
            return {
                "received": self.received,
                "accepted": self.accepted,
                "stored": self.stored,
                "malformed": self.malformed,
                "overflow_drops": self.overflow_drops,
                "capacity_drops": self.capacity_drops,
                "pending": len(self.buffer.active) + len(self.buffer.flushing),
            }
