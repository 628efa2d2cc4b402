"""Benchmarks: insertion and query cost per batch size, full-stack capacity, broker throughput.

All timing goes through the same ``MecServer.flush_buffer`` and
``EdmStore.query`` calls the running server uses.
"""

from __future__ import annotations

import asyncio
import csv
import gc
import json
import logging
import math
import os
import platform
import sys
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from .cam_codec import FRAME_SIZE, MAGIC, WIRE_DTYPE, CamMessage, StationType, encode_cam
from .geoindex import CellId, GeoPoint, HexGridConfig, cells_within, hex_distance
from .mec.descriptor import MecDescriptor
from .mec.server import MecServer
from .store import BBox, EdmStore, QuerySpec, RetentionConfig

log = logging.getLogger(__name__)

DEFAULT_BATCHES = (100, 1000, 2500, 5000, 10000)
DEFAULT_ORIGIN = GeoPoint(45.0, 7.0)
# virtual time between repetitions and how much history the store keeps
REP_PERIOD_MS = 1000
BENCH_RETENTION = RetentionConfig(window_ms=5000, prune_interval_ms=REP_PERIOD_MS)
QUERY_NAMES = ("q1", "q2", "q3", "q4", "q5")


class EmptySamples(ValueError):
    pass


@dataclass
class LatencyStats:
    n: int
    mean_ms: float
    std_ms: float
    p50_ms: float
    p90_ms: float
    p99_ms: float
    cdf: list[tuple[float, float]] = field(default_factory=list, repr=False)


def percentile_nearest_rank(sorted_samples, p: float) -> float:
    n = len(sorted_samples)
    rank = max(1, math.ceil(p / 100.0 * n))
    return float(sorted_samples[rank - 1])


def summarize(samples) -> LatencyStats:
    """Mean, sample std (n-1), nearest-rank percentiles and the empirical CDF."""
    a = np.sort(np.asarray(samples, dtype=np.float64))
    n = len(a)
    if n == 0:
        raise EmptySamples("no samples")
    std = float(a.std(ddof=1)) if n > 1 else 0.0
    cdf = list(zip(a.tolist(), (np.arange(1, n + 1) / n).tolist()))
    return LatencyStats(
        n=n,
        mean_ms=float(a.mean()),
        std_ms=std,
        p50_ms=percentile_nearest_rank(a, 50),
        p90_ms=percentile_nearest_rank(a, 90),
        p99_ms=percentile_nearest_rank(a, 99),
        cdf=cdf,
    )


def write_cdf(path: str, stats: LatencyStats) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["latency_ms", "fraction"])
        for lat, frac in stats.cdf:
            w.writerow([f"{lat:.4f}", f"{frac:.6f}"])


@dataclass
class BenchConfig:
    batch_sizes: tuple[int, ...] = DEFAULT_BATCHES
    repetitions: int = 1000
    n_cells: int = 20
    memory_budget_bytes: int = 1 << 20
    t_buffer_ms: int = 50
    seed: int = 7
    origin: GeoPoint = DEFAULT_ORIGIN
    cell_area_m2: float = 15000.0

    def __post_init__(self):
        if self.repetitions < 30:
            raise ValueError("need at least 30 repetitions for a meaningful std")
        if self.n_cells < 1:
            raise ValueError("n_cells must be >= 1")
        if any(b < 0 for b in self.batch_sizes):
            raise ValueError("batch sizes must be >= 0")

    @property
    def grid(self) -> HexGridConfig:
        return HexGridConfig(self.origin, self.cell_area_m2)


def _metadata(cfg: BenchConfig, kind: str) -> dict:
    d = asdict(cfg)
    d["origin"] = [cfg.origin.lat, cfg.origin.lon]
    d.update(
        bench=kind,
        rep_period_ms=REP_PERIOD_MS,
        retention_window_ms=BENCH_RETENTION.window_ms,
        python=platform.python_version(),
        machine=platform.machine(),
        processor=platform.processor(),
        cpu_count=os.cpu_count(),
        numpy=np.__version__,
    )
    return d


# -- corpus -----------------------------------------------------------------------


def bench_cells(grid: HexGridConfig, n_cells: int) -> list[CellId]:
    """The ``n_cells`` cells closest to the grid origin cell (compact patch)."""
    home = CellId(0, 0)
    k = 0
    while 3 * k * (k + 1) + 1 < n_cells:
        k += 1
    cells = sorted(cells_within(home, k), key=lambda c: (hex_distance(home, c), c.encoded))
    return cells[:n_cells]


class Corpus:
    """Fixed vehicle positions, vehicles evenly split over the bench cells."""

    def __init__(self, grid: HexGridConfig, cells: list[CellId], n: int, seed: int):
        rng = np.random.default_rng(seed)
        self.n = n
        self.cells = cells
        cell_idx = np.arange(n) % len(cells)
        # uniform in a disc well inside the hexagon, so every vehicle stays in its cell
        radius = 0.4 * grid.edge_m * np.sqrt(rng.random(n))
        angle = rng.random(n) * 2 * np.pi
        lat = np.empty(n)
        lon = np.empty(n)
        for i in range(n):
            c = cells[cell_idx[i]]
            cx, cy = grid.center_xy(c.q, c.r)
            p = grid.unproject(cx + radius[i] * np.cos(angle[i]), cy + radius[i] * np.sin(angle[i]))
            lat[i], lon[i] = p.lat, p.lon
        self.cell_idx = cell_idx
        self.lat = lat
        self.lon = lon
        self.heading = rng.integers(0, 3600, n)
        self.speed = rng.integers(500, 2000, n)
        self.rng = rng

    def frames(self, gen_time_ms: int) -> list[bytes]:
        """One frame per vehicle; gen times spread over the preceding 50 ms."""
        n = self.n
        a = np.zeros(n, dtype=WIRE_DTYPE)
        a["magic"] = int.from_bytes(MAGIC, "little")
        a["station_id"] = np.arange(1, n + 1)
        a["gen_time_ms"] = gen_time_ms - self.rng.integers(0, 50, n)
        a["lat"] = np.round(self.lat * 1e7)
        a["lon"] = np.round(self.lon * 1e7)
        a["station_type"] = int(StationType.car)
        a["heading"] = self.heading
        a["speed"] = self.speed
        raw = a.tobytes()
        return [raw[i : i + FRAME_SIZE] for i in range(0, n * FRAME_SIZE, FRAME_SIZE)]

    def bbox(self) -> BBox:
        if not self.n:
            return BBox(-1.0, 1.0, -1.0, 1.0)
        # bounds of the positions as they travel on the wire (1e-7 degree steps)
        lat = np.round(self.lat * 1e7) / 1e7
        lon = np.round(self.lon * 1e7) / 1e7
        return BBox(float(lat.min()), float(lat.max()), float(lon.min()), float(lon.max()))


def _bench_server(cfg: BenchConfig) -> MecServer:
    d = MecDescriptor("bench", cfg.origin, 500.0, 800.0, "127.0.0.1:1")
    store = EdmStore(memory_budget_bytes=cfg.memory_budget_bytes)
    return MecServer(d, cfg.grid, t_buffer_ms=cfg.t_buffer_ms, retention=BENCH_RETENTION, store=store)


def _feed_and_flush(server: MecServer, corpus: Corpus, topics: list[str], now: int):
    frames = corpus.frames(now)
    for f, i in zip(frames, corpus.cell_idx.tolist()):
        server.ingest_cam(f, topics[i], now)
    return server.flush_buffer(now)


def _topics(cells: list[CellId]) -> list[str]:
    return [f"bench/edm_feed/{c.encoded}" for c in cells]


# -- insertion ----------------------------------------------------------------------

INSERT_HEADER = ["batch_size", "decode_mean_ms", "decode_std_ms", "insert_mean_ms", "insert_std_ms",
                 "total_mean_ms", "total_p99_ms", "realtime"]


@dataclass
class InsertionRow:
    batch_size: int
    decode: LatencyStats | None
    insert: LatencyStats | None
    total: LatencyStats | None
    t_buffer_ms: int

    @property
    def realtime(self) -> bool:
        return self.total is None or self.total.mean_ms < self.t_buffer_ms

    def csv_row(self) -> list:
        if self.total is None:
            return [self.batch_size, 0, 0, 0, 0, 0, 0, "true"]
        f = lambda x: f"{x:.4f}"  # noqa: E731
        return [self.batch_size, f(self.decode.mean_ms), f(self.decode.std_ms), f(self.insert.mean_ms),
                f(self.insert.std_ms), f(self.total.mean_ms), f(self.total.p99_ms), str(self.realtime).lower()]


def run_insertion_bench(cfg: BenchConfig, out_dir: str | None = None) -> list[InsertionRow]:
    grid = cfg.grid
    cells = bench_cells(grid, cfg.n_cells)
    topics = _topics(cells)
    rows = []
    for batch in cfg.batch_sizes:
        if batch == 0:
            rows.append(InsertionRow(0, None, None, None, cfg.t_buffer_ms))
            continue
        corpus = Corpus(grid, cells, batch, cfg.seed)
        server = _bench_server(cfg)
        dec, ins = [], []
        now = 1_700_000_000_000
        for _ in range(cfg.repetitions):
            now += REP_PERIOD_MS
            server.prune(now)
            rep = _feed_and_flush(server, corpus, topics, now)
            dec.append(rep.t_decode_ms)
            ins.append(rep.t_insertion_ms)
        total = np.add(dec, ins)
        row = InsertionRow(batch, summarize(dec), summarize(ins), summarize(total), cfg.t_buffer_ms)
        rows.append(row)
        log.info("insert batch=%d decode=%.3f insert=%.3f", batch, row.decode.mean_ms, row.insert.mean_ms)
        if out_dir:
            write_cdf(os.path.join(out_dir, f"cdf_insert_{batch}.csv"), row.total)
    if out_dir:
        with open(os.path.join(out_dir, "insertion.csv"), "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(INSERT_HEADER)
            for r in rows:
                w.writerow(r.csv_row())
        _write_meta(out_dir, "insertion", _metadata(cfg, "insertion"))
    return rows


# -- queries ---------------------------------------------------------------------------

QUERY_HEADER = ["batch_size"] + [f"{q}_{s}_ms" for q in QUERY_NAMES for s in ("mean", "std")] + ["window_mean_ms"]


@dataclass
class QueryRow:
    batch_size: int
    stats: dict[str, LatencyStats]
    window_mean_ms: float
    result_sizes: dict[str, float]

    def mean(self, q: str) -> float:
        return self.stats[q].mean_ms

    def csv_row(self) -> list:
        out = [self.batch_size]
        for q in QUERY_NAMES:
            out += [f"{self.stats[q].mean_ms:.4f}", f"{self.stats[q].std_ms:.4f}"]
        return out + [f"{self.window_mean_ms:.1f}"]


def query_window_ms(t_insertion_ms: float) -> int:
    return max(100, math.ceil(t_insertion_ms))


def run_query_bench(cfg: BenchConfig, out_dir: str | None = None, cdf_batch: int = 1000) -> list[QueryRow]:
    grid = cfg.grid
    cells = bench_cells(grid, cfg.n_cells)
    topics = _topics(cells)
    cell = cells[0]
    rows = []
    for batch in cfg.batch_sizes:
        corpus = Corpus(grid, cells, batch, cfg.seed)
        bbox = corpus.bbox()
        server = _bench_server(cfg)
        store = server.store
        samples = {q: [] for q in QUERY_NAMES}
        sizes = {q: 0 for q in QUERY_NAMES}
        windows = []
        now = 1_700_000_000_000
        for _ in range(cfg.repetitions):
            now += REP_PERIOD_MS
            server.prune(now)
            rep = _feed_and_flush(server, corpus, topics, now) if batch else None
            window = query_window_ms(rep.t_insertion_ms if rep else 0.0)
            windows.append(window)
            specs = (QuerySpec.q1(bbox), QuerySpec.q2(cell), QuerySpec.q3(window),
                     QuerySpec.q4(window, bbox), QuerySpec.q5(window, cell))
            for name, spec in zip(QUERY_NAMES, specs):
                t0 = time.perf_counter()
                res = store.query(spec, now)
                samples[name].append((time.perf_counter() - t0) * 1e3)
                sizes[name] += len(res)
        row = QueryRow(batch, {q: summarize(s) for q, s in samples.items()}, float(np.mean(windows)),
                       {q: n / cfg.repetitions for q, n in sizes.items()})
        rows.append(row)
        log.info("query batch=%d %s", batch, " ".join(f"{q}={row.mean(q):.3f}" for q in QUERY_NAMES))
        if out_dir and batch == cdf_batch:
            for q in QUERY_NAMES:
                write_cdf(os.path.join(out_dir, f"cdf_query_{q}_{batch}.csv"), row.stats[q])
    if out_dir:
        with open(os.path.join(out_dir, "query.csv"), "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(QUERY_HEADER)
            for r in rows:
                w.writerow(r.csv_row())
        _write_meta(out_dir, "query", _metadata(cfg, "query"))
    return rows


def _write_meta(out_dir: str, kind: str, meta: dict) -> None:
    with open(os.path.join(out_dir, f"meta_{kind}.json"), "w") as f:
        json.dump(meta, f, indent=2, sort_keys=True)


# -- capacity ------------------------------------------------------------------------------


@dataclass
class CapacityReport:
    n_vehicles: int
    rate_hz: float
    t_buffer_ms: int
    t_send_ms: float
    duration_s: float
    frames: int
    expected_frames: int
    latency: LatencyStats | None
    flushes: int
    budget_ok_fraction: float
    overflow_drops: int
    capacity_drops: int
    conservation: dict
    fleet: dict
    malformed_injected: int = 0

    @property
    def drops(self) -> int:
        return self.overflow_drops + self.capacity_drops

    @property
    def conserved(self) -> bool:
        c = self.conservation
        return c["received"] == c["stored"] + c["malformed"] + c["overflow_drops"] + c["capacity_drops"] + c["pending"]

    @property
    def saturated(self) -> bool:
        p99 = self.latency.p99_ms if self.latency else 0.0
        return (
            self.budget_ok_fraction < 0.99
            or p99 >= 100.0
            or self.drops > 0
            or self.frames < 0.95 * self.expected_frames
        )

    def summary(self) -> dict:
        lat = self.latency
        return {
            "n_vehicles": self.n_vehicles,
            "rate_hz": self.rate_hz,
            "t_buffer_ms": self.t_buffer_ms,
            "t_send_ms": self.t_send_ms,
            "duration_s": self.duration_s,
            "frames": self.frames,
            "expected_frames": self.expected_frames,
            "latency_mean_ms": lat.mean_ms if lat else None,
            "latency_p50_ms": lat.p50_ms if lat else None,
            "latency_p90_ms": lat.p90_ms if lat else None,
            "latency_p99_ms": lat.p99_ms if lat else None,
            "flushes": self.flushes,
            "budget_ok_fraction": self.budget_ok_fraction,
            "overflow_drops": self.overflow_drops,
            "capacity_drops": self.capacity_drops,
            "malformed_injected": self.malformed_injected,
            "conserved": self.conserved,
            "saturated": self.saturated,
            "conservation": self.conservation,
            "fleet": self.fleet,
        }


def capacity_bbox(center: GeoPoint, half_side_m: float = 350.0) -> BBox:
    dlat = half_side_m / 111_320.0
    dlon = half_side_m / (111_320.0 * math.cos(math.radians(center.lat)))
    return BBox(center.lat - dlat, center.lat + dlat, center.lon - dlon, center.lon + dlon)


async def _inject_malformed(endpoint: str, mec_id: str, rate_hz: float, stop: asyncio.Event) -> int:
    from .pubsub import BrokerClient

    client = await BrokerClient.connect(endpoint, "malformed-injector")
    junk = [
        (f"{mec_id}/edm_feed/h0_0", b"\x00" * FRAME_SIZE),  # bad magic
        (f"{mec_id}/edm_feed/h0_0", MAGIC + b"\x01\x02"),  # truncated
        (f"{mec_id}/edm_feed", encode_cam(CamMessage(1, 1, 45.0, 7.0))),  # not a feed topic
    ]
    sent = 0
    try:
        while not stop.is_set():
            topic, payload = junk[sent % len(junk)]
            client.publish(topic, payload)
            sent += 1
            await asyncio.sleep(1.0 / rate_hz)
        await client.ping()
    finally:
        await client.close()
    return sent


async def run_capacity_bench_async(
    n_vehicles: int = 2000,
    rate_hz: float = 10.0,
    t_buffer_ms: int = 50,
    duration_s: float = 60.0,
    t_send_ms: float = 0.0,
    out_dir: str | None = None,
    seed: int = 7,
    malformed_rate_hz: float = 0.0,
    flush_in_thread: bool = True,
) -> CapacityReport:
    from .mec.node import MecNode
    from .registry import RegistryNode

    origin = DEFAULT_ORIGIN
    grid = HexGridConfig(origin)
    latencies: list[np.ndarray] = []
    flush_counts: list[int] = []

    def on_flush(report, cols):
        flush_counts.append(report.count)
        if report.count:
            latencies.append(report.visible_ms - cols.gen_time_ms)

    async with RegistryNode() as registry:
        d = MecDescriptor("mec0", origin, 500.0, 800.0, "127.0.0.1:0")
        server = MecServer(d, grid, t_buffer_ms=t_buffer_ms, on_flush=on_flush)
        node = MecNode(server, registry_endpoint=registry.endpoint, flush_in_thread=flush_in_thread)
        await node.start()
        while d.mec_id not in registry.state.mecs:
            await asyncio.sleep(0.02)
        # whatever the calling process allocated before must not slow full collections
        # during the measured run
        gc.collect()
        gc.freeze()
        try:
            b = capacity_bbox(origin)
            cmd = [
                sys.executable, "-m", "edm.cli", "sim",
                "--registry", registry.endpoint,
                "--mode", "synthetic",
                "--n", str(n_vehicles),
                "--bbox", f"{b.lat_min},{b.lat_max},{b.lon_min},{b.lon_max}",
                "--seed", str(seed),
                "--rate", str(rate_hz),
                "--t-send-ms", str(t_send_ms),
                "--duration", str(duration_s),
                "--grid-origin", f"{origin.lat},{origin.lon}",
                "--summary-json",
            ]
            stop_inject = asyncio.Event()
            injector = None
            if malformed_rate_hz > 0:
                injector = asyncio.create_task(_inject_malformed(node.endpoint, d.mec_id, malformed_rate_hz, stop_inject))
            proc = await asyncio.create_subprocess_exec(*cmd, stdout=asyncio.subprocess.PIPE)
            out, _ = await proc.communicate()
            stop_inject.set()
            injected = await injector if injector else 0
            fleet = {}
            for line in out.decode().splitlines():
                if line.startswith("{"):
                    fleet = json.loads(line)
            if proc.returncode != 0:
                log.error("fleet exited with %s", proc.returncode)
            # let the last buffered frames flush
            await asyncio.sleep(3 * t_buffer_ms / 1000.0)
            await node.stop()
        finally:
            gc.unfreeze()
    lat = np.concatenate(latencies) if latencies else np.empty(0)
    flushes = server.flushes
    report = CapacityReport(
        n_vehicles=n_vehicles,
        rate_hz=rate_hz,
        t_buffer_ms=t_buffer_ms,
        t_send_ms=t_send_ms,
        duration_s=duration_s,
        frames=int(lat.size),
        expected_frames=int(n_vehicles * rate_hz * duration_s),
        latency=summarize(lat) if lat.size else None,
        flushes=flushes,
        budget_ok_fraction=(flushes - server.budget_misses) / flushes if flushes else 1.0,
        overflow_drops=server.overflow_drops,
        capacity_drops=server.capacity_drops,
        conservation=server.conservation(),
        fleet=fleet,
        malformed_injected=injected,
    )
    if out_dir:
        with open(os.path.join(out_dir, "capacity.json"), "w") as f:
            json.dump(report.summary(), f, indent=2, sort_keys=True)
        if report.latency:
            write_cdf(os.path.join(out_dir, "cdf_availability.csv"), report.latency)
    return report


def run_capacity_bench(n_vehicles=2000, rate_hz=10.0, t_buffer_ms=50, duration_s=60.0, **kw) -> CapacityReport:
    return asyncio.run(run_capacity_bench_async(n_vehicles, rate_hz, t_buffer_ms, duration_s, **kw))


# -- broker throughput --------------------------------------------------------------------


@dataclass
class ThroughputReport:
    rate: int
    duration_s: float
    publishers: int
    sent: int
    received: int
    gaps: int
    reordered: int
    achieved_rate: float
    dropped_by_broker: int

    def summary(self) -> dict:
        return asdict(self)


async def run_load(
    endpoint: str, rate: int, duration_s: float, publishers: int = 100, tick_ms: int = 5
) -> tuple[int, float]:
    """Publish ``rate`` CAM frames per second spread over ``publishers`` connections.

    Each publisher puts its index in ``station_id`` and a running sequence
    number (from 1) in ``gen_time_ms``, so a receiver can detect gaps.
    """
    from .pubsub import BrokerClient

    clients = [await BrokerClient.connect(endpoint, f"load-{i}") for i in range(publishers)]
    topics = [f"load/edm_feed/h{i % 20}_0" for i in range(publishers)]
    total = int(rate * duration_s)
    loop = asyncio.get_running_loop()
    t0 = loop.time()
    sent = 0
    template = np.zeros(1, dtype=WIRE_DTYPE)
    template["magic"] = int.from_bytes(MAGIC, "little")
    template["lat"] = 450_000_000
    template["lon"] = 70_000_000
    template["station_type"] = int(StationType.car)
    while sent < total:
        due = min(total, int((loop.time() - t0) * rate))
        n = due - sent
        if n > 0:
            a = np.repeat(template, n)
            pubs = (np.arange(sent, due) % publishers)
            a["station_id"] = pubs
            a["gen_time_ms"] = np.arange(sent, due) // publishers + 1
            raw = a.tobytes()
            for k, p in enumerate(pubs.tolist()):
                clients[p].publish(topics[p], raw[k * FRAME_SIZE : (k + 1) * FRAME_SIZE])
            sent = due
        await asyncio.sleep(tick_ms / 1000.0)
    elapsed = loop.time() - t0
    await asyncio.gather(*(c.ping(timeout=30) for c in clients))
    await asyncio.gather(*(c.close() for c in clients))
    return sent, elapsed


async def run_broker_bench_async(rate: int = 20_000, duration_s: float = 60.0, publishers: int = 100,
                                 out_dir: str | None = None) -> ThroughputReport:
    """Broker and one wildcard subscriber in-process, load generator in a subprocess."""
    from .pubsub import Broker, BrokerClient, BrokerServer

    last = [0] * publishers
    counts = {"received": 0, "gaps": 0, "reordered": 0}

    def on_message(topic, payload):
        counts["received"] += 1
        p = int.from_bytes(payload[2:6], "little")
        s = int.from_bytes(payload[6:14], "little")
        if s > last[p] + 1:
            counts["gaps"] += s - last[p] - 1
        elif s <= last[p]:
            counts["reordered"] += 1
        last[p] = max(last[p], s)

    broker = Broker("bench")
    async with BrokerServer(broker) as server:
        sub = await BrokerClient.connect(server.endpoint, "sink", on_message=on_message)
        await sub.subscribe("load/edm_feed/#")
        cmd = [sys.executable, "-m", "edm.cli", "bench", "load", "--broker", server.endpoint,
               "--rate", str(rate), "--duration", str(duration_s), "--publishers", str(publishers)]
        proc = await asyncio.create_subprocess_exec(*cmd, stdout=asyncio.subprocess.PIPE)
        out, _ = await proc.communicate()
        sent, elapsed = 0, 0.0
        for line in out.decode().splitlines():
            key, _, value = line.partition("=")
            if key == "sent":
                sent = int(value)
            elif key == "elapsed":
                elapsed = float(value)
        # the publishers pinged the broker before exiting, so everything is routed;
        # a final ping on the sink flushes what is still in flight to us
        await sub.ping(timeout=30)
        await sub.close()
    # frames missing at the tail also count as gaps
    expected_per_pub = [len(range(p, sent, publishers)) for p in range(publishers)]
    tail = sum(max(0, e - l) for e, l in zip(expected_per_pub, last))
    report = ThroughputReport(
        rate=rate,
        duration_s=duration_s,
        publishers=publishers,
        sent=sent,
        received=counts["received"],
        gaps=counts["gaps"] + tail,
        reordered=counts["reordered"],
        achieved_rate=sent / elapsed if elapsed else 0.0,
        dropped_by_broker=broker.dropped,
    )
    if out_dir:
        with open(os.path.join(out_dir, "broker.json"), "w") as f:
            json.dump(report.summary(), f, indent=2, sort_keys=True)
    return report


def run_broker_bench(rate: int = 20_000, duration_s: float = 60.0, **kw) -> ThroughputReport:
    return asyncio.run(run_broker_bench_async(rate, duration_s, **kw))
