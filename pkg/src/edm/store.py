"""In-memory time-series store for CAM rows.

Rows arrive in batches; each batch becomes one immutable *segment* whose
rows share the batch timestamp ``ts_ms``.  Segments are kept in time order
and each carries a cell -> row-index map.  Window queries walk back from
the newest segment, cell queries use the per-segment map, and bbox queries
fall back to a vectorized mask.

A single writer (insert/prune) publishes a new segment tuple by rebinding
one attribute, so readers always see a whole number of batches.
"""

from __future__ import annotations

import bisect
import csv
import enum
import io
import itertools
import threading
import time
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .cam_codec import CamColumns, StationType
from .geoindex import CellId, cell_key, split_cell_key

DEFAULT_MAX_ROWS = 2_000_000
DEFAULT_MEMORY_BUDGET = 1 << 20

CSV_HEADER = ("station_id", "ts_ms", "gen_time_ms", "lat", "lon", "type", "heading", "speed", "accel", "cell")


class StoreError(Exception):
    pass


class CapacityExceeded(StoreError):
    pass


class InvalidSpec(StoreError, ValueError):
    pass


@dataclass(frozen=True, slots=True)
class StoredPoint:
    station_id: int
    ts_ms: int
    gen_time_ms: int
    lat: float
    lon: float
    station_type: StationType
    heading_deg: float
    speed_mps: float
    accel_mps2: float
    cell: CellId


@dataclass(frozen=True)
class RetentionConfig:
    window_ms: int = 60_000
    prune_interval_ms: int = 1_000

    def __post_init__(self):
        if self.window_ms < 1_000:
            raise ValueError("window_ms must be >= 1000")
        if not 0 < self.prune_interval_ms <= self.window_ms:
            raise ValueError("prune_interval_ms must be in (0, window_ms]")


class QueryMode(str, enum.Enum):
    latest_per_vehicle = "latest"
    all_points = "all"


@dataclass(frozen=True)
class BBox:
    lat_min: float
    lat_max: float
    lon_min: float
    lon_max: float

    def __post_init__(self):
        if self.lat_min > self.lat_max or self.lon_min > self.lon_max:
            raise InvalidSpec(f"empty bbox {self}")


Region = BBox | CellId | None


@dataclass(frozen=True)
class QuerySpec:
    mode: QueryMode
    time_window_ms: int | None = None
    region: Region = None

    def __post_init__(self):
        object.__setattr__(self, "mode", QueryMode(self.mode))
        if self.mode is QueryMode.latest_per_vehicle and self.region is None:
            raise InvalidSpec("latest_per_vehicle needs a region")
        if self.time_window_ms is not None and self.time_window_ms <= 0:
            raise InvalidSpec("time_window_ms must be > 0")
        if self.region is not None and not isinstance(self.region, (BBox, CellId)):
            raise InvalidSpec(f"unsupported region {self.region!r}")

    # Shorthands for the five benchmark query shapes.
    @classmethod
    def q1(cls, bbox: BBox) -> "QuerySpec":
        return cls(QueryMode.latest_per_vehicle, None, bbox)

    @classmethod
    def q2(cls, cell: CellId) -> "QuerySpec":
        return cls(QueryMode.latest_per_vehicle, None, cell)

    @classmethod
    def q3(cls, window_ms: int) -> "QuerySpec":
        return cls(QueryMode.all_points, window_ms, None)

    @classmethod
    def q4(cls, window_ms: int, bbox: BBox) -> "QuerySpec":
        return cls(QueryMode.all_points, window_ms, bbox)

    @classmethod
    def q5(cls, window_ms: int, cell: CellId) -> "QuerySpec":
        return cls(QueryMode.all_points, window_ms, cell)


@dataclass(frozen=True)
class InsertReport:
    count: int
    t_insertion_ms: float


@dataclass
class StoreMetrics:
    last_insert_ms: float = 0.0
    last_batch_size: int = 0
    rows_live: int = 0
    memory_budget_bytes: int = DEFAULT_MEMORY_BUDGET


_COLUMNS = ("station_id", "gen_time_ms", "lat", "lon", "station_type", "heading_deg", "speed_mps", "accel_mps2", "cell_key")
_DTYPES = (np.int64, np.int64, np.float64, np.float64, np.uint8, np.float64, np.float64, np.float64, np.int64)


class _Segment:
    __slots__ = ("ts_ms", "seq", "cols", "n", "cell_rows")

    def __init__(self, ts_ms: int, seq: int, cols: dict[str, np.ndarray]):
        self.ts_ms = ts_ms
        self.seq = seq
        self.cols = cols
        self.n = len(cols["station_id"])
        keys = cols["cell_key"]
        order = np.argsort(keys, kind="stable")
        uniq, starts = np.unique(keys[order], return_index=True)
        bounds = list(starts) + [self.n]
        self.cell_rows = {int(k): order[bounds[i] : bounds[i + 1]] for i, k in enumerate(uniq)}


def _columns_from_points(points: Sequence[StoredPoint]) -> dict[str, np.ndarray]:
    return {
        "station_id": np.fromiter((p.station_id for p in points), np.int64, len(points)),
        "gen_time_ms": np.fromiter((p.gen_time_ms for p in points), np.int64, len(points)),
        "lat": np.fromiter((p.lat for p in points), np.float64, len(points)),
        "lon": np.fromiter((p.lon for p in points), np.float64, len(points)),
        "station_type": np.fromiter((int(p.station_type) for p in points), np.uint8, len(points)),
        "heading_deg": np.fromiter((p.heading_deg for p in points), np.float64, len(points)),
        "speed_mps": np.fromiter((p.speed_mps for p in points), np.float64, len(points)),
        "accel_mps2": np.fromiter((p.accel_mps2 for p in points), np.float64, len(points)),
        "cell_key": np.fromiter((cell_key(p.cell.q, p.cell.r) for p in points), np.int64, len(points)),
    }


def _columns_from_cam(cols: CamColumns) -> dict[str, np.ndarray]:
    return {name: np.asarray(getattr(cols, name), dtype=dt) for name, dt in zip(_COLUMNS, _DTYPES)}


@dataclass
class ResultColumns:
    """Query result in column form, already in output order."""

    ts_ms: np.ndarray
    cols: dict[str, np.ndarray] = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.ts_ms)


_STATION_TYPES = {int(t): t for t in StationType}


class EdmStore:
    def __init__(self, max_rows: int = DEFAULT_MAX_ROWS, memory_budget_bytes: int = DEFAULT_MEMORY_BUDGET):
        self.max_rows = max_rows
        self.metrics = StoreMetrics(memory_budget_bytes=memory_budget_bytes)
        self._segments: tuple[_Segment, ...] = ()
        self._seq = itertools.count()
        self._write_lock = threading.Lock()
        self._cells: dict[int, CellId] = {}

    # -- writer side ----------------------------------------------------------

    def insert_batch(self, points: Sequence[StoredPoint] | CamColumns, now_ms: int) -> InsertReport:
        """Insert one batch; every row gets ``ts_ms = now_ms``.

        Accepts either a list of :class:`StoredPoint` (their own ``ts_ms`` is
        ignored) or decoded :class:`CamColumns` from the flush path.
        """
        t0 = time.perf_counter()
        n = len(points)
        if n == 0:
            return InsertReport(0, (time.perf_counter() - t0) * 1e3)
        with self._write_lock:
            if self.metrics.rows_live + n > self.max_rows:
                raise CapacityExceeded(f"{self.metrics.rows_live} + {n} rows exceeds cap {self.max_rows}")
            if isinstance(points, CamColumns):
                cols = _columns_from_cam(points)
            else:
                cols = _columns_from_points(points)
            seg = _Segment(int(now_ms), next(self._seq), cols)
            segs = self._segments
            if not segs or segs[-1].ts_ms <= seg.ts_ms:
                self._segments = segs + (seg,)
            else:
                at = bisect.bisect_right([s.ts_ms for s in segs], seg.ts_ms)
                self._segments = segs[:at] + (seg,) + segs[at:]
            elapsed = (time.perf_counter() - t0) * 1e3
            self.metrics.rows_live += n
            self.metrics.last_batch_size = n
            self.metrics.last_insert_ms = elapsed
        return InsertReport(n, elapsed)

    def prune(self, now_ms: int, cfg: RetentionConfig) -> int:
        """Drop every row with ``ts_ms < now_ms - cfg.window_ms``."""
        cutoff = now_ms - cfg.window_ms
        with self._write_lock:
            segs = self._segments
            keep = tuple(s for s in segs if s.ts_ms >= cutoff)
            removed = sum(s.n for s in segs) - sum(s.n for s in keep)
            if removed:
                self._segments = keep
                self.metrics.rows_live -= removed
        return removed

    def clear(self) -> None:
        with self._write_lock:
            self._segments = ()
            self.metrics.rows_live = 0

    def __len__(self) -> int:
        return self.metrics.rows_live

    # -- reader side ----------------------------------------------------------

    def query_columns(self, spec: QuerySpec, now_ms: int) -> ResultColumns:
        segs = self._segments  # snapshot
        if spec.time_window_ms is not None:
            cutoff = now_ms - spec.time_window_ms
            start = len(segs)
            while start > 0 and segs[start - 1].ts_ms >= cutoff:
                start -= 1
            segs = segs[start:]
        region = spec.region
        parts: list[tuple[_Segment, np.ndarray | None]] = []
        if isinstance(region, CellId):
            key = cell_key(region.q, region.r)
            for s in segs:
                rows = s.cell_rows.get(key)
                if rows is not None:
                    parts.append((s, rows))
        elif isinstance(region, BBox):
            for s in segs:
                lat, lon = s.cols["lat"], s.cols["lon"]
                mask = (lat >= region.lat_min) & (lat <= region.lat_max) & (lon >= region.lon_min) & (lon <= region.lon_max)
                rows = np.flatnonzero(mask)
                if rows.size:
                    parts.append((s, rows))
        else:
            parts = [(s, None) for s in segs]

        if not parts:
            return ResultColumns(np.empty(0, np.int64), {c: np.empty(0, dt) for c, dt in zip(_COLUMNS, _DTYPES)})
        cols = {}
        for c in _COLUMNS:
            chunks = [s.cols[c] if rows is None else s.cols[c][rows] for s, rows in parts]
            cols[c] = chunks[0] if len(chunks) == 1 else np.concatenate(chunks)
        ts = np.concatenate([np.full(s.n if rows is None else len(rows), s.ts_ms, np.int64) for s, rows in parts])

        # Concatenation order is (ts_ms, batch order, row order); stable sorts keep it as the last tie-break.
        sid = cols["station_id"]
        if spec.mode is QueryMode.latest_per_vehicle:
            order = np.lexsort((cols["gen_time_ms"], ts, sid))
            sorted_sid = sid[order]
            last = np.ones(len(order), dtype=bool)
            last[:-1] = sorted_sid[1:] != sorted_sid[:-1]
            order = order[last]
        else:
            order = np.argsort(sid, kind="stable")
        return ResultColumns(ts[order], {c: v[order] for c, v in cols.items()})

    def query(self, spec: QuerySpec, now_ms: int) -> list[StoredPoint]:
        return self.materialize(self.query_columns(spec, now_ms))

    def _cell(self, key: int) -> CellId:
        c = self._cells.get(key)
        if c is None:
            if len(self._cells) > 1_000_000:
                self._cells.clear()
            c = self._cells[key] = CellId(*split_cell_key(key))
        return c

    def materialize(self, res: ResultColumns) -> list[StoredPoint]:
        c = res.cols
        types = _STATION_TYPES
        cell = self._cell
        return [
            StoredPoint(sid, ts, gen, lat, lon, types[st], hd, sp, ac, cell(ck))
            for sid, ts, gen, lat, lon, st, hd, sp, ac, ck in zip(
                c["station_id"].tolist(),
                res.ts_ms.tolist(),
                c["gen_time_ms"].tolist(),
                c["lat"].tolist(),
                c["lon"].tolist(),
                c["station_type"].tolist(),
                c["heading_deg"].tolist(),
                c["speed_mps"].tolist(),
                c["accel_mps2"].tolist(),
                c["cell_key"].tolist(),
            )
        ]

    def rows(self) -> list[StoredPoint]:
        """All live rows in storage order."""
        return self.query(QuerySpec(QueryMode.all_points), 0)

    def segment_count(self) -> int:
        return len(self._segments)


def format_csv(points: Iterable[StoredPoint]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_HEADER)
    for p in points:
        w.writerow(
            (
                p.station_id,
                p.ts_ms,
                p.gen_time_ms,
                repr(p.lat),
                repr(p.lon),
                p.station_type.name,
                p.heading_deg,
                p.speed_mps,
                p.accel_mps2,
                p.cell.encoded,
            )
        )
    return buf.getvalue()


def parse_csv(text: str) -> list[StoredPoint]:
    reader = csv.reader(io.StringIO(text))
    header = next(reader, None)
    if tuple(header or ()) != CSV_HEADER:
        raise ValueError(f"unexpected CSV header {header!r}")
    return [
        StoredPoint(
            int(row[0]),
            int(row[1]),
            int(row[2]),
            float(row[3]),
            float(row[4]),
            StationType[row[5]],
            float(row[6]),
            float(row[7]),
            float(row[8]),
            CellId.parse(row[9]),
        )
        for row in reader
        if row
    ]
