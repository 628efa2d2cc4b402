"""Simulated vehicle fleet: trajectories, login, 10 Hz CAM publishing, handover."""

from __future__ import annotations

import asyncio
import bisect
import heapq
import logging
import math
import random
import time
from dataclasses import dataclass, field
from typing import Callable, NamedTuple

import numpy as np

from .cam_codec import FRAME_SIZE, CamMessage, StationType, encode_batch, encode_cam, fcd_accelerations, parse_fcd
from .geoindex import CellId, GeoPoint, HexGridConfig, cells_of_arrays
from .pubsub import BrokerClient, BrokerError
from .store import BBox
from .topics import DEFAULT_REGISTRY_ID, feed_topic, handover_topic, login_response_topic, parse_kv, vehicle_login_topic

log = logging.getLogger(__name__)

MIN_RATE_HZ = 1.0
MAX_RATE_HZ = 10.0
SPEED_RANGE = (5.0, 20.0)
_M_PER_DEG = 111_320.0


class RegistryUnreachable(ConnectionError):
    pass


class TargetUnreachable(ConnectionError):
    pass


# -- clock ------------------------------------------------------------------------


class SimClock:
    """Wall clock (``realtime``) or a virtual one advanced by the caller (``accelerated``)."""

    def __init__(self, mode: str = "realtime", factor: float = 1.0, start_ms: int | None = None):
        if mode not in ("realtime", "accelerated"):
            raise ValueError(f"unknown clock mode {mode!r}")
        if factor <= 0:
            raise ValueError("factor must be > 0")
        self.mode = mode
        self.factor = factor
        self._now = start_ms if start_ms is not None else int(time.time() * 1000)

    def now_ms(self) -> int:
        if self.mode == "realtime":
            self._now = max(self._now, int(time.time() * 1000))
        return self._now

    def advance(self, dt_ms: int) -> int:
        if self.mode != "accelerated":
            raise RuntimeError("only an accelerated clock can be advanced")
        if dt_ms < 0:
            raise ValueError("time cannot go backwards")
        self._now += dt_ms
        return self._now


# -- trajectories -------------------------------------------------------------------


@dataclass(frozen=True)
class RouteModel:
    kind: str
    bbox: BBox | None = None
    n_vehicles: int = 0
    speed_range: tuple[float, float] = SPEED_RANGE
    seed: int = 0
    file: str | None = None
    loop: bool = False

    @classmethod
    def synthetic(cls, bbox: BBox, n_vehicles: int, seed: int = 0, speed_range=SPEED_RANGE) -> "RouteModel":
        return cls("synthetic", bbox=bbox, n_vehicles=n_vehicles, seed=seed, speed_range=tuple(speed_range))

    @classmethod
    def fcd_replay(cls, path: str, loop: bool = False) -> "RouteModel":
        return cls("fcd_replay", file=path, loop=loop)

    def __post_init__(self):
        if self.kind == "synthetic":
            if self.bbox is None or self.n_vehicles < 0:
                raise ValueError("synthetic routes need a bbox and n_vehicles >= 0")
            lo, hi = self.speed_range
            if not 0 < lo <= hi:
                raise ValueError(f"bad speed range {self.speed_range}")
        elif self.kind == "fcd_replay":
            if not self.file:
                raise ValueError("fcd_replay needs a file")
        else:
            raise ValueError(f"unknown route kind {self.kind!r}")


class _WaypointSet:
    """Random-waypoint motion for many vehicles, constant speed per leg.

    State lives in arrays so a tick advances every due vehicle at once.  A
    vehicle that reaches its waypoint takes the scalar path and draws its next
    leg from its own RNG, so each trajectory depends only on its seed.
    """

    def __init__(self, bbox: BBox, rngs: list[random.Random], speed_range, t0_ms: int):
        n = len(rngs)
        self.bbox = bbox
        self.rngs = rngs
        self.speed_range = speed_range
        self.lat0 = (bbox.lat_min + bbox.lat_max) / 2
        self.lon0 = (bbox.lon_min + bbox.lon_max) / 2
        self.kx = _M_PER_DEG * math.cos(math.radians(self.lat0))
        self.x = np.empty(n)
        self.y = np.empty(n)
        self.wx = np.empty(n)
        self.wy = np.empty(n)
        self.speed = np.empty(n)
        self.heading = np.zeros(n)
        self.t_ms = np.full(n, t0_ms, dtype=np.int64)
        for i, rng in enumerate(rngs):
            self.x[i], self.y[i] = self._random_point(rng)
            self._new_leg(i)

    def _random_point(self, rng: random.Random) -> tuple[float, float]:
        b = self.bbox
        lat = rng.uniform(b.lat_min, b.lat_max)
        lon = rng.uniform(b.lon_min, b.lon_max)
        return (lon - self.lon0) * self.kx, (lat - self.lat0) * _M_PER_DEG

    def _new_leg(self, i: int) -> None:
        rng = self.rngs[i]
        self.wx[i], self.wy[i] = self._random_point(rng)
        self.speed[i] = rng.uniform(*self.speed_range)
        dx, dy = self.wx[i] - self.x[i], self.wy[i] - self.y[i]
        if dx or dy:
            self.heading[i] = math.degrees(math.atan2(dx, dy)) % 360.0

    def _advance_one(self, i: int, budget: float) -> None:
        while budget > 0:
            dx, dy = self.wx[i] - self.x[i], self.wy[i] - self.y[i]
            dist = math.hypot(dx, dy)
            need = dist / self.speed[i]
            if need > budget:
                f = budget * self.speed[i] / dist
                self.x[i] += dx * f
                self.y[i] += dy * f
                return
            self.x[i], self.y[i] = self.wx[i], self.wy[i]
            budget -= need
            self._new_leg(i)

    def advance(self, idx: np.ndarray, t_ms: int) -> None:
        """Move vehicles ``idx`` (no repeats) forward to ``t_ms``."""
        budget = (t_ms - self.t_ms[idx]) / 1000.0
        self.t_ms[idx] = t_ms
        dx = self.wx[idx] - self.x[idx]
        dy = self.wy[idx] - self.y[idx]
        dist = np.hypot(dx, dy)
        speed = self.speed[idx]
        en_route = dist / speed > budget
        f = np.divide(budget * speed, dist, out=np.zeros_like(dist), where=en_route)
        self.x[idx] += dx * f
        self.y[idx] += dy * f
        for k in np.flatnonzero(~en_route).tolist():
            self._advance_one(int(idx[k]), float(budget[k]))

    def state(self, idx: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
        lat = self.lat0 + self.y[idx] / _M_PER_DEG
        lon = self.lon0 + self.x[idx] / self.kx
        return lat, lon, self.heading[idx] % 360.0, self.speed[idx]


class _Track:
    """Sample-and-hold replay of one FCD vehicle."""

    def __init__(self, times: list[float], states: list[tuple[float, float, float, float]], accels: list[float]):
        self.times = times
        self.states = states
        self.accels = accels

    def at(self, t_s: float) -> tuple[tuple[float, float, float, float], float] | None:
        i = bisect.bisect_right(self.times, t_s) - 1
        if i < 0 or t_s > self.times[-1]:
            return None
        return self.states[i], self.accels[i]


def load_tracks(path: str) -> tuple[dict[str, _Track], float, float]:
    """Per-vehicle tracks from an FCD file plus the first and last timestep time."""
    raw: dict[str, tuple[list, list]] = {}
    first = last = None
    with open(path, "rb") as f:
        for step in parse_fcd(f):
            first = step.time_s if first is None else first
            last = step.time_s
            for v in step.vehicles:
                times, states = raw.setdefault(v.name, ([], []))
                times.append(step.time_s)
                states.append((v.lat, v.lon, v.heading_deg % 360.0, v.speed_mps))
    tracks = {
        name: _Track(times, states, fcd_accelerations([s[3] for s in states], times))
        for name, (times, states) in raw.items()
    }
    return tracks, first or 0.0, last or 0.0


# -- agents ---------------------------------------------------------------------------


@dataclass
class VehicleAgent:
    station_id: int
    position: GeoPoint
    heading_deg: float = 0.0
    speed_mps: float = 0.0
    accel_mps2: float = 0.0
    assigned_mec: str | None = None
    endpoint: str | None = None
    send_rate_hz: float = MAX_RATE_HZ
    t_send_ms: float = 0.0
    station_type: StationType = StationType.car
    name: str = ""
    online: bool = False
    next_send_ms: int = 0
    sent: int = 0
    motion: object = field(default=None, repr=False)
    period_ms: int = field(init=False, repr=False)

    def __post_init__(self):
        if not MIN_RATE_HZ <= self.send_rate_hz <= MAX_RATE_HZ:
            raise ValueError(f"send rate {self.send_rate_hz} Hz outside [1, 10]")
        if self.t_send_ms < 0:
            raise ValueError("t_send_ms must be >= 0")
        self.period_ms = round(1000 / self.send_rate_hz)

    def cam(self, gen_time_ms: int) -> CamMessage:
        p = self.position
        return CamMessage(
            self.station_id, gen_time_ms, p.lat, p.lon, self.station_type,
            self.heading_deg, self.speed_mps, self.accel_mps2,
        )


class Emission(NamedTuple):
    agent: VehicleAgent
    topic: str
    frame: bytes
    gen_time_ms: int
    index: int  # position of the agent in its fleet


class _WaypointRef(NamedTuple):
    motion: _WaypointSet
    row: int


class Fleet:
    """Agents plus a send schedule.  ``step`` emits one CAM per due agent."""

    def __init__(self, agents: list[VehicleAgent], clock: SimClock, grid: HexGridConfig,
                 model: RouteModel | None = None, fcd_origin_s: float = 0.0, fcd_span_s: float = 0.0):
        self.agents = agents
        self.clock = clock
        self.grid = grid
        self.model = model
        self.start_ms = clock.now_ms()
        self._fcd_origin_s = fcd_origin_s
        self._fcd_span_s = fcd_span_s
        self._periods = {a.period_ms for a in agents}
        self._topics: dict[tuple[str, int, int], str] = {}
        # agents driven by one shared waypoint set are moved together
        refs = [a.motion for a in agents if isinstance(a.motion, _WaypointRef)]
        if len({id(r.motion) for r in refs}) > 1:
            raise ValueError("a fleet can share only one waypoint set")
        self._wp = refs[0].motion if refs else None
        self._wp_row = [a.motion.row if isinstance(a.motion, _WaypointRef) else -1 for a in agents]
        # send slots: time -> agent indices due then, plus a heap of the slot times
        self._slots: dict[int, list[int]] = {}
        self._slot_times: list[int] = []
        self.reschedule(self.start_ms)

    def _add(self, t_ms: int, i: int) -> None:
        slot = self._slots.get(t_ms)
        if slot is None:
            self._slots[t_ms] = [i]
            heapq.heappush(self._slot_times, t_ms)
        else:
            slot.append(i)

    def reschedule(self, t0_ms: int) -> None:
        """Spread first sends evenly over one period starting at ``t0_ms`` so load is flat."""
        n = max(1, len(self.agents))
        self._slots = {}
        self._slot_times = []
        for i, a in enumerate(self.agents):
            a.next_send_ms = t0_ms + (i * a.period_ms) // n
            self._add(a.next_send_ms, i)

    def _pop_due(self, now: int) -> list[int]:
        due: list[int] = []
        agents = self.agents
        times = self._slot_times
        while times and times[0] <= now:
            t = heapq.heappop(times)
            for i in self._slots.pop(t):
                a = agents[i]
                # if we fell behind by more than a period, skip the missed slots but keep the phase
                a.next_send_ms = t + a.period_ms * ((now - t) // a.period_ms + 1)
                self._add(a.next_send_ms, i)
                due.append(i)
        return due

    def _update(self, a: VehicleAgent, t_ms: int) -> bool:
        """Move ``a`` (not on the shared waypoint set) to time ``t_ms``; False when it has no state then."""
        m = a.motion
        if not isinstance(m, _Track):
            return True
        t_s = self._fcd_origin_s + (t_ms - self.start_ms) / 1000.0
        if self.model is not None and self.model.loop and self._fcd_span_s > 0:
            t_s = self._fcd_origin_s + (t_s - self._fcd_origin_s) % (self._fcd_span_s + 1.0)
        got = m.at(t_s)
        if got is None:
            return False
        (lat, lon, heading, speed), accel = got
        a.position = GeoPoint(lat, lon)
        a.heading_deg = heading
        a.speed_mps = speed
        a.accel_mps2 = max(-3000.0, min(3000.0, accel))
        return True

    def _move_waypoint_agents(self, idx: list[int], now: int) -> None:
        agents = self.agents
        rows = np.array([self._wp_row[i] for i in idx])
        self._wp.advance(rows, now)
        lat, lon, heading, speed = self._wp.state(rows)
        prev = np.array([agents[i].speed_mps for i in idx])
        period_s = np.array([agents[i].period_ms for i in idx]) / 1000.0
        fresh = np.array([agents[i].sent == 0 for i in idx])
        accel = np.clip(np.where(fresh, 0.0, (speed - prev) / period_s), -3000.0, 3000.0)
        for i, la, lo, h, v, ac in zip(idx, lat.tolist(), lon.tolist(), heading.tolist(), speed.tolist(),
                                       accel.tolist()):
            a = agents[i]
            a.position = GeoPoint.trusted(la, lo)  # inside the route bbox by construction
            a.heading_deg = h
            a.speed_mps = v
            a.accel_mps2 = ac

    def step(self, dt_ms: int = 0) -> list[Emission]:
        """Advance an accelerated clock by ``dt_ms`` and emit frames for all due agents."""
        if dt_ms:
            if any(p % dt_ms for p in self._periods):
                raise ValueError(f"dt_ms {dt_ms} must divide the send period")
            self.clock.advance(dt_ms)
        now = self.clock.now_ms()
        due = self._pop_due(now)
        if not due:
            return []
        agents = self.agents
        wp_row = self._wp_row
        shared = [i for i in due if wp_row[i] >= 0 and agents[i].online]
        if shared:
            self._move_waypoint_agents(shared, now)
        emit = [i for i in due if agents[i].online and (wp_row[i] >= 0 or self._update(agents[i], now))]
        if not emit:
            return []
        due_agents = [agents[i] for i in emit]
        n = len(emit)
        raw = encode_batch(
            [a.station_id for a in due_agents], np.full(n, now), [a.position.lat for a in due_agents],
            [a.position.lon for a in due_agents], [a.station_type for a in due_agents],
            [a.heading_deg for a in due_agents], [a.speed_mps for a in due_agents],
            [a.accel_mps2 for a in due_agents],
        )
        # topic cell from the quantized position, exactly as the receiver will decode it
        q, r = cells_of_arrays(raw["lat"] / 1e7, raw["lon"] / 1e7, self.grid)
        data = raw.tobytes()
        topics = self._topics
        out = []
        for k, (i, a, qq, rr) in enumerate(zip(emit, due_agents, q.tolist(), r.tolist())):
            a.sent += 1
            key = (a.assigned_mec, qq, rr)
            topic = topics.get(key)
            if topic is None:
                topic = topics[key] = feed_topic(a.assigned_mec, CellId(qq, rr).encoded)
            out.append(Emission(a, topic, data[k * FRAME_SIZE : (k + 1) * FRAME_SIZE], now, i))
        return out


def spawn_fleet(model: RouteModel, clock: SimClock, grid: HexGridConfig, rate_hz: float = MAX_RATE_HZ,
                t_send_ms: float = 0.0) -> Fleet:
    """One agent per vehicle of the route model, each with a login nonce as station id."""
    agents = []
    rng = random.Random(f"fleet:{model.seed}")
    if model.kind == "synthetic":
        n = model.n_vehicles
        motion = _WaypointSet(model.bbox, [random.Random(f"{model.seed}:{i}") for i in range(n)],
                              model.speed_range, clock.now_ms())
        lat, lon, heading, speed = motion.state(np.arange(n))
        for i in range(n):
            agents.append(VehicleAgent(
                station_id=rng.getrandbits(32), position=GeoPoint(float(lat[i]), float(lon[i])),
                heading_deg=float(heading[i]), speed_mps=float(speed[i]), send_rate_hz=rate_hz,
                t_send_ms=t_send_ms, name=f"v{i}", motion=_WaypointRef(motion, i),
            ))
        return Fleet(agents, clock, grid, model)
    tracks, first, last = load_tracks(model.file)
    for name in sorted(tracks, key=lambda n: (tracks[n].times[0], n)):
        tr = tracks[name]
        lat, lon, heading, speed = tr.states[0]
        agents.append(VehicleAgent(
            station_id=rng.getrandbits(32), position=GeoPoint(lat, lon), heading_deg=heading, speed_mps=speed,
            send_rate_hz=rate_hz, t_send_ms=t_send_ms, name=name, motion=tr,
        ))
    return Fleet(agents, clock, grid, model, first, last - first)


def parse_directive(payload: bytes) -> tuple[str, str]:
    kv = parse_kv(payload.decode("utf-8"))
    try:
        return kv["mec_id"], kv["endpoint"]
    except KeyError as exc:
        raise ValueError(f"directive lacks {exc.args[0]}") from None


# -- network runtime ----------------------------------------------------------------------


@dataclass
class AgentLink:
    client: BrokerClient | None = None
    retiring: BrokerClient | None = None
    busy: bool = False


class FleetRunner:
    """Drives a :class:`Fleet` against real brokers, one connection per agent."""

    def __init__(
        self,
        fleet: Fleet,
        registry_endpoint: str,
        registry_id: str = DEFAULT_REGISTRY_ID,
        tick_ms: int = 10,
        login_concurrency: int = 64,
        login_timeout_s: float = 5.0,
        on_emit: Callable[[Emission], None] | None = None,
    ):
        self.fleet = fleet
        self.registry_endpoint = registry_endpoint
        self.registry_id = registry_id
        self.tick_ms = tick_ms
        self.login_timeout_s = login_timeout_s
        self.on_emit = on_emit
        self.links = [AgentLink() for _ in fleet.agents]
        self._sem = asyncio.Semaphore(login_concurrency)
        self._stopping = False
        self._tasks: set[asyncio.Task] = set()
        self.published = 0
        self.logins = 0
        self.login_failures = 0
        self.handovers = 0
        self.failed_handovers = 0
        self.lost_connections = 0

    def _spawn(self, coro) -> None:
        t = asyncio.create_task(coro)
        self._tasks.add(t)
        t.add_done_callback(self._tasks.discard)

    # -- login ---------------------------------------------------------------------------

    async def _login_once(self, a: VehicleAgent) -> tuple[int, str, str]:
        nonce = a.station_id
        loop = asyncio.get_running_loop()
        got: asyncio.Future = loop.create_future()

        def on_msg(topic, payload):
            if not got.done():
                got.set_result(payload)

        try:
            reg = await BrokerClient.connect(self.registry_endpoint, f"login-{nonce}", on_message=on_msg,
                                             timeout=self.login_timeout_s)
        except (OSError, asyncio.TimeoutError, BrokerError) as exc:
            raise RegistryUnreachable(f"registry {self.registry_endpoint}: {exc}") from None
        try:
            await reg.subscribe(login_response_topic(self.registry_id, nonce))
            reg.publish(vehicle_login_topic(self.registry_id), encode_cam(a.cam(self.fleet.clock.now_ms())))
            payload = await asyncio.wait_for(got, self.login_timeout_s)
        except (asyncio.TimeoutError, BrokerError) as exc:
            raise RegistryUnreachable(f"no login response: {exc!r}") from None
        finally:
            await reg.close()
        kv = parse_kv(payload.decode("utf-8"))
        return int(kv["vehicle_id"]), kv["mec_id"], kv["endpoint"]

    async def _attach(self, i: int, mec_id: str, endpoint: str) -> BrokerClient:
        a = self.fleet.agents[i]
        client = await BrokerClient.connect(endpoint, f"veh-{a.station_id}",
                                            on_message=lambda t, p: self._on_directive(i, t, p))
        await client.subscribe(handover_topic(mec_id, a.station_id))
        client.on_disconnect = lambda reason: self._on_lost(i, client, reason)
        return client

    async def login(self, i: int) -> None:
        a = self.fleet.agents[i]
        delay = 0.1
        while not self._stopping:
            async with self._sem:
                try:
                    vid, mec_id, endpoint = await self._login_once(a)
                    a.station_id = vid
                    client = await self._attach(i, mec_id, endpoint)
                except (RegistryUnreachable, OSError, asyncio.TimeoutError, BrokerError, KeyError, ValueError) as exc:
                    self.login_failures += 1
                    log.debug("agent %s: login failed: %s", a.name, exc)
                    client = None
            if client is not None:
                a.assigned_mec, a.endpoint = mec_id, endpoint
                self.links[i].client = client
                a.online = True
                self.logins += 1
                return
            await asyncio.sleep(delay)
            delay = min(delay * 2, 5.0)

    async def login_all(self) -> None:
        await asyncio.gather(*(self.login(i) for i in range(len(self.fleet.agents))))

    def _on_lost(self, i: int, client: BrokerClient, reason: str) -> None:
        link = self.links[i]
        if self._stopping or link.client is not client:
            return
        self.lost_connections += 1
        self.fleet.agents[i].online = False
        link.client = None
        log.info("agent %s: connection lost (%s), logging in again", self.fleet.agents[i].name, reason)
        self._spawn(self.login(i))

    # -- handover --------------------------------------------------------------------------

    def _on_directive(self, i: int, topic: str, payload: bytes) -> None:
        self._spawn(self.apply_handover(i, payload))

    async def apply_handover(self, i: int, payload: bytes) -> bool:
        """Make-before-break switch to the directive's target."""
        a = self.fleet.agents[i]
        link = self.links[i]
        try:
            target, endpoint = parse_directive(payload)
        except (ValueError, UnicodeDecodeError) as exc:
            log.warning("agent %s: bad directive %r: %s", a.name, payload, exc)
            return False
        if target == a.assigned_mec or link.busy:
            return False
        link.busy = True
        try:
            try:
                client = await self._attach(i, target, endpoint)
            except (OSError, asyncio.TimeoutError, BrokerError) as exc:
                self.failed_handovers += 1
                log.warning("agent %s: handover target %s unreachable: %s", a.name, target, exc)
                return False
            link.retiring, link.client = link.client, client
            a.assigned_mec, a.endpoint = target, endpoint
            self.handovers += 1
            return True
        finally:
            link.busy = False

    # -- publishing ---------------------------------------------------------------------------

    def _send(self, e: Emission, i: int) -> None:
        link = self.links[i]
        if link.client is None:
            return
        try:
            link.client.publish(e.topic, e.frame)
        except BrokerError:
            return
        self.published += 1
        if self.on_emit is not None:
            self.on_emit(e)
        if link.retiring is not None:
            old, link.retiring = link.retiring, None
            self._spawn(old.close())

    def publish_tick(self, emissions: list[Emission]) -> None:
        loop = asyncio.get_running_loop()
        for e in emissions:
            if e.agent.t_send_ms > 0:
                loop.call_later(e.agent.t_send_ms / 1000.0, self._send, e, e.index)
            else:
                self._send(e, e.index)

    async def run(self, duration_s: float | None = None) -> None:
        """Tick until ``duration_s`` of simulated time has passed (forever if None)."""
        loop = asyncio.get_running_loop()
        clock = self.fleet.clock
        start = clock.now_ms()
        self.fleet.reschedule(start)
        end_ms = None if duration_s is None else start + int(duration_s * 1000)
        tick_s = self.tick_ms / 1000.0
        if clock.mode == "accelerated" and any(a.period_ms % self.tick_ms for a in self.fleet.agents):
            raise ValueError(f"tick_ms {self.tick_ms} must divide the send period")
        next_tick = loop.time()
        while not self._stopping and (end_ms is None or clock.now_ms() < end_ms):
            if clock.mode == "accelerated":
                # emit at the current virtual time, then move it forward
                self.publish_tick(self.fleet.step())
                await asyncio.sleep(tick_s / clock.factor)
                clock.advance(self.tick_ms)
            else:
                self.publish_tick(self.fleet.step())
                next_tick += tick_s
                await asyncio.sleep(max(0.0, next_tick - loop.time()))

    def request_stop(self) -> None:
        self._stopping = True

    async def stop(self) -> None:
        self._stopping = True
        for t in list(self._tasks):
            t.cancel()
        await asyncio.gather(*self._tasks, return_exceptions=True)
        clients = [c for l in self.links for c in (l.client, l.retiring) if c is not None]
        await asyncio.gather(*(c.close() for c in clients), return_exceptions=True)
        for a in self.fleet.agents:
            a.online = False
