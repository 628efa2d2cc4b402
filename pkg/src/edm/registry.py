"""MEC registry: live MEC descriptors, neighbour relation, vehicle login."""

from __future__ import annotations

import asyncio
import logging
import os
import tempfile
import time
from dataclasses import dataclass, field

from .cam_codec import CodecError, decode_cam
from .geoindex import GeoPoint, HexGridConfig, haversine_m
from .mec.descriptor import InvalidDescriptor, MecDescriptor, format_descriptor_lines, parse_descriptor_lines
from .pubsub import Broker, BrokerServer, split_endpoint
from .topics import (
    DEFAULT_REGISTRY_ID,
    login_response_topic,
    mec_login_topic,
    mec_update_topic,
    neighbours_topic,
    vehicle_login_topic,
)

log = logging.getLogger(__name__)

MAX_VEHICLE_ID = 0xFFFFFFFF


class RegistryError(Exception):
    pass


class NoMecAvailable(RegistryError):
    pass


class UnknownMec(RegistryError, KeyError):
    pass


@dataclass
class MecEntry:
    descriptor: MecDescriptor
    last_update_ms: int


@dataclass(frozen=True)
class VehicleRecord:
    vehicle_id: int
    login_position: GeoPoint
    assigned_mec: str
    login_ms: int


@dataclass(frozen=True)
class NeighborNotice:
    """Full neighbour list for ``mec_id`` plus what changed since the last one."""

    mec_id: str
    neighbors: tuple[MecDescriptor, ...]
    gained: frozenset[str] = frozenset()
    lost: frozenset[str] = frozenset()

    def topic(self, registry_id: str = DEFAULT_REGISTRY_ID) -> str:
        return neighbours_topic(registry_id, self.mec_id)

    def payload(self) -> bytes:
        return format_descriptor_lines(self.neighbors)


@dataclass
class RegistryState:
    mecs: dict[str, MecEntry] = field(default_factory=dict)
    next_vehicle_id: int = 1
    vehicles: dict[int, VehicleRecord] = field(default_factory=dict)
    # adjacency as last announced to each MEC
    relation: dict[str, set[str]] = field(default_factory=dict)

    def descriptors(self) -> list[MecDescriptor]:
        return [e.descriptor for e in self.mecs.values()]


def are_neighbors(a: MecDescriptor, b: MecDescriptor) -> bool:
    """Operating discs intersect (strictly)."""
    return a.mec_id != b.mec_id and haversine_m(a.position, b.position) < a.r_operating_m + b.r_operating_m


def neighbor_relation(mecs) -> dict[str, set[str]]:
    """Batch computation of the whole relation, used as the reference."""
    mecs = list(mecs)
    rel = {m.mec_id: set() for m in mecs}
    for i, a in enumerate(mecs):
        for b in mecs[i + 1 :]:
            if are_neighbors(a, b):
                rel[a.mec_id].add(b.mec_id)
                rel[b.mec_id].add(a.mec_id)
    return rel


def best_mec(p: GeoPoint, mecs) -> str:
    """Nearest MEC whose operating disc covers ``p``, else the nearest overall; ties by id."""
    covered = None
    nearest = None
    for m in mecs:
        d = haversine_m(p, m.position)
        key = (d, m.mec_id)
        if nearest is None or key < nearest:
            nearest = key
        if d <= m.r_operating_m and (covered is None or key < covered):
            covered = key
    if nearest is None:
        raise NoMecAvailable("no MEC registered")
    return (covered or nearest)[1]


def _neighbor_list(state: RegistryState, mec_id: str) -> tuple[MecDescriptor, ...]:
    return tuple(sorted((state.mecs[n].descriptor.shallow() for n in state.relation[mec_id]), key=lambda d: d.mec_id))


def _lists(state: RegistryState) -> dict[str, tuple[MecDescriptor, ...]]:
    return {k: _neighbor_list(state, k) for k in state.relation}


def _recompute(
    state: RegistryState, changed: MecDescriptor, old: MecDescriptor | None, before: dict
) -> list[NeighborNotice]:
    """Refresh the relation around ``changed``; notices for every MEC whose list content differs.

    ``before`` holds the lists as they were before ``changed`` was installed.
    """
    prev_rel = {k: set(v) for k, v in state.relation.items()}
    mid = changed.mec_id
    mine = {m.mec_id for m in state.descriptors() if are_neighbors(changed, m)}
    for other in prev_rel.get(mid, set()) - mine:
        state.relation[other].discard(mid)
    for other in mine:
        state.relation[other].add(mid)
    state.relation[mid] = mine
    notices = []
    for k in sorted(state.relation):
        lst = _neighbor_list(state, k)
        if k == mid and old is None or lst != before.get(k):
            prev = prev_rel.get(k, set())
            now = state.relation[k]
            notices.append(NeighborNotice(k, lst, frozenset(now - prev), frozenset(prev - now)))
    return notices


def register_mec(state: RegistryState, d: MecDescriptor, now_ms: int) -> tuple[set[str], list[NeighborNotice]]:
    """MEC login.  A re-login is an update, except the MEC always gets its own list back."""
    if not isinstance(d, MecDescriptor):
        raise InvalidDescriptor(f"not a descriptor: {d!r}")
    d = d.shallow()
    entry = state.mecs.get(d.mec_id)
    old = entry.descriptor if entry else None
    before = _lists(state)
    state.mecs[d.mec_id] = MecEntry(d, now_ms)
    notices = _recompute(state, d, old, before)
    if old is not None and not any(n.mec_id == d.mec_id for n in notices):
        notices.insert(0, NeighborNotice(d.mec_id, _neighbor_list(state, d.mec_id)))
    return set(state.relation[d.mec_id]), notices


def update_mec(state: RegistryState, d: MecDescriptor, now_ms: int) -> list[NeighborNotice]:
    if d.mec_id not in state.mecs:
        raise UnknownMec(d.mec_id)
    d = d.shallow()
    entry = state.mecs[d.mec_id]
    entry.last_update_ms = now_ms
    if entry.descriptor == d:
        return []
    old = entry.descriptor
    before = _lists(state)
    entry.descriptor = d
    return _recompute(state, d, old, before)


def login_vehicle(state: RegistryState, position: GeoPoint, now_ms: int) -> tuple[int, MecDescriptor]:
    if not state.mecs:
        raise NoMecAvailable("no MEC registered")
    if state.next_vehicle_id > MAX_VEHICLE_ID:
        raise RegistryError("vehicle id space exhausted")
    mec_id = best_mec(position, state.descriptors())
    vid = state.next_vehicle_id
    state.next_vehicle_id += 1
    state.vehicles[vid] = VehicleRecord(vid, position, mec_id, now_ms)
    return vid, state.mecs[mec_id].descriptor


def login_response_payload(vehicle_id: int, d: MecDescriptor) -> bytes:
    return f"vehicle_id={vehicle_id};mec_id={d.mec_id};endpoint={d.broker_endpoint}".encode()


# -- snapshot -----------------------------------------------------------------

SNAPSHOT_HEADER = "mec_id,lat,lon,r_opt,r_oper,endpoint,last_update_ms"


def save_snapshot(state: RegistryState, path: str) -> None:
    """Write MECs and the vehicle id counter; atomic replace."""
    lines = [f"# next_vehicle_id={state.next_vehicle_id}", SNAPSHOT_HEADER]
    for mec_id in sorted(state.mecs):
        e = state.mecs[mec_id]
        lines.append(f"{e.descriptor.to_line()},{e.last_update_ms}")
    directory = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".snapshot-")
    with os.fdopen(fd, "w") as f:
        f.write("\n".join(lines) + "\n")
    os.replace(tmp, path)


def load_snapshot(path: str) -> RegistryState:
    state = RegistryState()
    with open(path) as f:
        for line in f:
            line = line.strip()
            if not line or line == SNAPSHOT_HEADER:
                continue
            if line.startswith("# next_vehicle_id="):
                state.next_vehicle_id = int(line.split("=", 1)[1])
                continue
            body, _, last = line.rpartition(",")
            d = MecDescriptor.from_line(body)
            state.mecs[d.mec_id] = MecEntry(d, int(last))
    state.relation = neighbor_relation(state.descriptors())
    return state


# -- runtime -------------------------------------------------------------------


def now_ms() -> int:
    return int(time.time() * 1000)


class RegistryNode:
    """The registry behind its own broker.  All state changes run on the event loop."""

    def __init__(
        self,
        listen: str = "127.0.0.1:0",
        registry_id: str = DEFAULT_REGISTRY_ID,
        snapshot_path: str | None = None,
        snapshot_interval_s: float = 10.0,
        grid: HexGridConfig | None = None,
    ):
        self.listen = listen
        self.registry_id = registry_id
        self.snapshot_path = snapshot_path
        self.snapshot_interval_s = snapshot_interval_s
        # the grid only matters for decoding login CAMs; any origin works
        self.grid = grid if grid is not None else HexGridConfig(GeoPoint(0.0, 0.0))
        self.state = RegistryState()
        if snapshot_path and os.path.exists(snapshot_path):
            self.state = load_snapshot(snapshot_path)
            log.info("registry: restored %d MECs from %s", len(self.state.mecs), snapshot_path)
        self.broker = Broker(name=registry_id)
        self.server: BrokerServer | None = None
        self.rejected_logins = 0
        self._loop: asyncio.AbstractEventLoop | None = None
        self._tasks: list[asyncio.Task] = []

    async def start(self) -> "RegistryNode":
        self._loop = asyncio.get_running_loop()
        host, port = split_endpoint(self.listen)
        self.server = await BrokerServer(self.broker, host, port).start()
        rid = self.registry_id
        s = self.broker.attach_internal(f"{rid}-core", self._on_message)
        for flt in (mec_login_topic(rid), f"{rid}/update/+", vehicle_login_topic(rid)):
            self.broker.subscribe(s, flt)
        if self.snapshot_path:
            self._tasks.append(asyncio.create_task(self._snapshot_loop()))
        return self

    @property
    def endpoint(self) -> str:
        return self.server.endpoint

    async def stop(self) -> None:
        for t in self._tasks:
            t.cancel()
        await asyncio.gather(*self._tasks, return_exceptions=True)
        if self.snapshot_path:
            save_snapshot(self.state, self.snapshot_path)
        if self.server is not None:
            await self.server.stop()

    async def __aenter__(self):
        return await self.start()

    async def __aexit__(self, *exc):
        await self.stop()

    async def _snapshot_loop(self) -> None:
        while True:
            await asyncio.sleep(self.snapshot_interval_s)
            save_snapshot(self.state, self.snapshot_path)

    def _publish(self, topic: str, payload: bytes) -> None:
        # deferred so routing never re-enters the broker from a delivery callback
        self._loop.call_soon(self.broker.publish, topic, payload)

    def _send_notices(self, notices: list[NeighborNotice]) -> None:
        for n in notices:
            self._publish(n.topic(self.registry_id), n.payload())

    def _on_message(self, topic: str, payload: bytes) -> None:
        rid = self.registry_id
        try:
            if topic == vehicle_login_topic(rid):
                self._vehicle_login(payload)
            elif topic == mec_login_topic(rid):
                for d in parse_descriptor_lines(payload):
                    _, notices = register_mec(self.state, d, now_ms())
                    log.info("registry: MEC %s at %s logged in", d.mec_id, d.broker_endpoint)
                    self._send_notices(notices)
            elif topic.startswith(f"{rid}/update/"):
                mec_id = topic.rsplit("/", 1)[1]
                for d in parse_descriptor_lines(payload):
                    if d.mec_id != mec_id:
                        raise InvalidDescriptor(f"update for {d.mec_id} on topic of {mec_id}")
                    entry = self.state.mecs.get(mec_id)
                    changed = entry is None or entry.descriptor != d.shallow()
                    self._send_notices(update_mec(self.state, d, now_ms()))
                    if changed:
                        self._publish(mec_update_topic(rid, mec_id), format_descriptor_lines([d]))
        except (InvalidDescriptor, UnknownMec, ValueError) as exc:
            log.warning("registry: rejected message on %s: %s", topic, exc)

    def _vehicle_login(self, payload: bytes) -> None:
        try:
            cam = decode_cam(payload, self.grid)
        except CodecError as exc:
            self.rejected_logins += 1
            log.warning("registry: bad login CAM: %s", exc)
            return
        try:
            vid, d = login_vehicle(self.state, cam.position, now_ms())
        except NoMecAvailable:
            self.rejected_logins += 1
            log.warning("registry: login of %d refused, no MEC registered", cam.station_id)
            return
        self._publish(login_response_topic(self.registry_id, cam.station_id), login_response_payload(vid, d))
