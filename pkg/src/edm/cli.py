"""``edm`` command line: broker, registry, mec, sim and bench."""

from __future__ import annotations

import argparse
import asyncio
import gc
import json
import logging
import os
import signal
import sys
import uuid

from .geoindex import GeoPoint, HexGridConfig
from .topics import DEFAULT_REGISTRY_ID

log = logging.getLogger("edm")

DEFAULT_GRID_ORIGIN = "0,0"


def _latlon(text: str) -> GeoPoint:
    try:
        lat, lon = (float(x) for x in text.split(","))
        return GeoPoint(lat, lon)
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"expected LAT,LON: {exc}") from None


def _bbox(text: str):
    from .store import BBox

    try:
        a, b, c, d = (float(x) for x in text.split(","))
        return BBox(a, b, c, d)
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"expected LAT_MIN,LAT_MAX,LON_MIN,LON_MAX: {exc}") from None


def _int_list(text: str) -> tuple[int, ...]:
    try:
        return tuple(int(x) for x in text.split(",") if x)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma separated integers, got {text!r}") from None


def _grid(args) -> HexGridConfig:
    return HexGridConfig(args.grid_origin, args.cell_area)


async def _serve_until_signal(stop_after: float | None = None) -> None:
    stop = asyncio.Event()
    loop = asyncio.get_running_loop()
    for sig in (signal.SIGINT, signal.SIGTERM):
        loop.add_signal_handler(sig, stop.set)
    if stop_after is None:
        await stop.wait()
    else:
        try:
            await asyncio.wait_for(stop.wait(), stop_after)
        except asyncio.TimeoutError:
            pass


def _freeze_heap() -> None:
    """Keep start-up objects out of later full collections, which otherwise pause the loop."""
    gc.collect()
    gc.freeze()


# -- commands ------------------------------------------------------------------


def cmd_broker(args) -> int:
    from .pubsub import Broker, BrokerServer, split_endpoint

    async def main():
        host, port = split_endpoint(args.listen)
        async with BrokerServer(Broker(max_payload=args.max_payload), host, port) as server:
            _freeze_heap()
            print(f"listening {server.endpoint}", flush=True)
            await _serve_until_signal()

    asyncio.run(main())
    return 0


def cmd_registry(args) -> int:
    from .registry import RegistryNode

    async def main():
        node = RegistryNode(args.listen, args.registry_id, args.snapshot, args.snapshot_interval)
        async with node:
            _freeze_heap()
            print(f"listening {node.endpoint}", flush=True)
            await _serve_until_signal()

    asyncio.run(main())
    return 0


def cmd_mec(args) -> int:
    if args.action == "dump":
        return _mec_dump(args)
    from .mec.descriptor import MecDescriptor
    from .mec.node import MecNode
    from .mec.server import MecServer
    from .store import EdmStore, RetentionConfig

    if args.id is None or args.lat is None or args.lon is None:
        print("edm mec: --id, --lat and --lon are required", file=sys.stderr)
        return 2
    d = MecDescriptor(args.id, GeoPoint(args.lat, args.lon), args.r_opt, args.r_oper, args.broker)
    server = MecServer(
        d,
        _grid(args),
        t_buffer_ms=args.t_buffer_ms,
        retention=RetentionConfig(window_ms=args.retention_ms),
        store=EdmStore(memory_budget_bytes=args.memory_budget),
    )

    async def main():
        node = MecNode(server, registry_endpoint=args.registry, registry_id=args.registry_id,
                       flush_in_thread=not args.inline_flush)
        async with node:
            _freeze_heap()
            print(f"listening {node.endpoint}", flush=True)
            await _serve_until_signal(args.duration)
        log.info("final counters %s", server.conservation())

    asyncio.run(main())
    return 0


def _mec_dump(args) -> int:
    """Ask a running MEC for all live rows through its proximity application."""
    from .mec.server import PROXIMITY_APP
    from .pubsub import BrokerClient
    from .topics import its_query_topic, its_response_topic

    if args.id is None:
        print("edm mec dump: --id is required", file=sys.stderr)
        return 2

    async def main() -> bytes:
        vehicle = f"dump{uuid.uuid4().hex[:8]}"
        got = asyncio.get_running_loop().create_future()
        client = await BrokerClient.connect(args.broker, vehicle,
                                            on_message=lambda t, p: got.done() or got.set_result(p))
        try:
            await client.subscribe(its_response_topic(args.id, PROXIMITY_APP, vehicle))
            client.publish(its_query_topic(args.id, PROXIMITY_APP, vehicle), b"mode=all;window_ms=none;region=none")
            return await asyncio.wait_for(got, 10)
        finally:
            await client.close()

    try:
        body = asyncio.run(main())
    except asyncio.TimeoutError:
        print(f"edm mec dump: no answer from MEC {args.id!r} at {args.broker}", file=sys.stderr)
        return 1
    except OSError as exc:
        print(f"edm mec dump: cannot reach {args.broker}: {exc}", file=sys.stderr)
        return 1
    sys.stdout.write(body.decode())
    return 1 if body.startswith(b"error") else 0


def cmd_sim(args) -> int:
    from .fleet import FleetRunner, RouteModel, SimClock, spawn_fleet

    if args.mode == "synthetic":
        if args.bbox is None:
            print("edm sim: --bbox is required in synthetic mode", file=sys.stderr)
            return 2
        model = RouteModel.synthetic(args.bbox, args.n, seed=args.seed)
    else:
        if not args.file:
            print("edm sim: --file is required in fcd mode", file=sys.stderr)
            return 2
        model = RouteModel.fcd_replay(args.file, loop=args.loop)
    clock = SimClock(args.clock, args.factor)

    async def main():
        fleet = spawn_fleet(model, clock, _grid(args), rate_hz=args.rate, t_send_ms=args.t_send_ms)
        runner = FleetRunner(fleet, args.registry, registry_id=args.registry_id)
        loop = asyncio.get_running_loop()
        for sig in (signal.SIGINT, signal.SIGTERM):
            loop.add_signal_handler(sig, runner.request_stop)
        await runner.login_all()
        log.info("%d agents logged in", runner.logins)
        _freeze_heap()
        await runner.run(args.duration)
        await runner.stop()
        return {
            "agents": len(fleet.agents),
            "logins": runner.logins,
            "login_failures": runner.login_failures,
            "published": runner.published,
            "handovers": runner.handovers,
            "failed_handovers": runner.failed_handovers,
            "lost_connections": runner.lost_connections,
        }

    summary = asyncio.run(main())
    if args.summary_json:
        print(json.dumps(summary, sort_keys=True), flush=True)
    else:
        print(" ".join(f"{k}={v}" for k, v in summary.items()), flush=True)
    return 0


def _ensure_dir(path: str | None) -> None:
    if path:
        os.makedirs(path, exist_ok=True)


def cmd_bench_insert(args) -> int:
    from .bench import BenchConfig, run_insertion_bench

    _ensure_dir(args.out)
    cfg = BenchConfig(batch_sizes=args.batches, repetitions=args.reps, n_cells=args.cells,
                      memory_budget_bytes=args.memory_budget, t_buffer_ms=args.t_buffer_ms, seed=args.seed)
    rows = run_insertion_bench(cfg, args.out)
    for r in rows:
        print(",".join(str(x) for x in r.csv_row()))
    return 0


def cmd_bench_query(args) -> int:
    from .bench import BenchConfig, run_query_bench

    _ensure_dir(args.out)
    cfg = BenchConfig(batch_sizes=args.batches, repetitions=args.reps, n_cells=args.cells,
                      memory_budget_bytes=args.memory_budget, seed=args.seed)
    rows = run_query_bench(cfg, args.out)
    for r in rows:
        print(",".join(str(x) for x in r.csv_row()))
    return 0


def cmd_bench_capacity(args) -> int:
    from .bench import run_capacity_bench

    _ensure_dir(args.out)
    report = run_capacity_bench(args.vehicles, args.rate, args.t_buffer_ms, args.duration,
                                t_send_ms=args.t_send_ms, out_dir=args.out, seed=args.seed,
                                malformed_rate_hz=args.malformed_rate)
    print(json.dumps(report.summary(), indent=2, sort_keys=True))
    return 0


def cmd_bench_broker(args) -> int:
    from .bench import run_broker_bench

    _ensure_dir(args.out)
    report = run_broker_bench(args.rate, args.duration, publishers=args.publishers, out_dir=args.out)
    print(json.dumps(report.summary(), indent=2, sort_keys=True))
    return 0 if report.gaps == 0 else 1


def cmd_bench_load(args) -> int:
    from .bench import run_load

    sent, elapsed = asyncio.run(run_load(args.broker, args.rate, args.duration, args.publishers))
    print(f"sent={sent}\nelapsed={elapsed:.3f}", flush=True)
    return 0


# -- parser --------------------------------------------------------------------


def _add_grid(p: argparse.ArgumentParser) -> None:
    p.add_argument("--grid-origin", type=_latlon, default=_latlon(DEFAULT_GRID_ORIGIN), metavar="LAT,LON",
                   help="projection origin shared by every node of a deployment (default " + DEFAULT_GRID_ORIGIN + ")")
    p.add_argument("--cell-area", type=float, default=15000.0, metavar="M2", help="hexagon area in m^2")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="edm", description="Edge Dynamic Map services and benchmarks")
    parser.add_argument("--log-level", default="WARNING", help="logging level (default %(default)s)")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("broker", help="run a standalone pub/sub broker")
    p.add_argument("--listen", default="127.0.0.1:1883", metavar="HOST:PORT")
    p.add_argument("--max-payload", type=int, default=65536)
    p.set_defaults(func=cmd_broker)

    p = sub.add_parser("registry", help="run the MEC registry")
    p.add_argument("--listen", default="127.0.0.1:1880", metavar="HOST:PORT")
    p.add_argument("--snapshot", metavar="PATH", help="CSV snapshot restored at start and rewritten periodically")
    p.add_argument("--snapshot-interval", type=float, default=10.0, metavar="S")
    p.add_argument("--registry-id", default=DEFAULT_REGISTRY_ID)
    p.set_defaults(func=cmd_registry)

    p = sub.add_parser("mec", help="run a MEC server, or 'dump' the rows of a running one")
    p.add_argument("action", nargs="?", choices=("run", "dump"), default="run")
    p.add_argument("--id")
    p.add_argument("--lat", type=float)
    p.add_argument("--lon", type=float)
    p.add_argument("--r-opt", type=float, default=500.0, metavar="M")
    p.add_argument("--r-oper", type=float, default=800.0, metavar="M")
    p.add_argument("--broker", default="127.0.0.1:1883", metavar="HOST:PORT",
                   help="endpoint to listen on (run) or to query (dump)")
    p.add_argument("--registry", metavar="HOST:PORT")
    p.add_argument("--registry-id", default=DEFAULT_REGISTRY_ID)
    p.add_argument("--t-buffer-ms", type=int, default=50)
    p.add_argument("--retention-ms", type=int, default=60000)
    p.add_argument("--memory-budget", type=int, default=1 << 20, metavar="BYTES")
    p.add_argument("--inline-flush", action="store_true", help="flush on the event loop instead of a worker thread")
    p.add_argument("--duration", type=float, metavar="S", help="exit after this many seconds")
    p.add_argument("--csv", action="store_true", help="dump: CSV output (the only format)")
    _add_grid(p)
    p.set_defaults(func=cmd_mec)

    p = sub.add_parser("sim", help="run a simulated vehicle fleet")
    p.add_argument("--registry", required=True, metavar="HOST:PORT")
    p.add_argument("--registry-id", default=DEFAULT_REGISTRY_ID)
    p.add_argument("--mode", choices=("synthetic", "fcd"), default="synthetic")
    p.add_argument("--n", type=int, default=100, help="synthetic: number of vehicles")
    p.add_argument("--bbox", type=_bbox, metavar="LAT_MIN,LAT_MAX,LON_MIN,LON_MAX")
    p.add_argument("--seed", type=int, default=7)
    p.add_argument("--file", help="fcd: SUMO fcd-export file")
    p.add_argument("--loop", action="store_true", help="fcd: restart the trace when it ends")
    p.add_argument("--rate", type=float, default=10.0, metavar="HZ")
    p.add_argument("--t-send-ms", type=float, default=0.0)
    p.add_argument("--duration", type=float, metavar="S", help="stop after this much simulated time")
    p.add_argument("--clock", choices=("realtime", "accelerated"), default="realtime")
    p.add_argument("--factor", type=float, default=1.0, help="accelerated clock speed-up")
    p.add_argument("--summary-json", action="store_true")
    _add_grid(p)
    p.set_defaults(func=cmd_sim)

    bench = sub.add_parser("bench", help="benchmarks").add_subparsers(dest="bench", required=True)
    for name, func, batches in (("insert", cmd_bench_insert, "100,1000,2500,5000,10000"),
                                ("query", cmd_bench_query, "100,1000,2500,5000,10000")):
        p = bench.add_parser(name)
        p.add_argument("--out", metavar="DIR")
        p.add_argument("--reps", type=int, default=1000)
        p.add_argument("--batches", type=_int_list, default=_int_list(batches))
        p.add_argument("--cells", type=int, default=20)
        p.add_argument("--memory-budget", type=int, default=1 << 20, metavar="BYTES")
        p.add_argument("--t-buffer-ms", type=int, default=50)
        p.add_argument("--seed", type=int, default=7)
        p.set_defaults(func=func)

    p = bench.add_parser("capacity")
    p.add_argument("--vehicles", type=int, default=2000)
    p.add_argument("--rate", type=float, default=10.0)
    p.add_argument("--t-buffer-ms", type=int, default=50)
    p.add_argument("--t-send-ms", type=float, default=0.0)
    p.add_argument("--duration", type=float, default=60.0)
    p.add_argument("--seed", type=int, default=7)
    p.add_argument("--malformed-rate", type=float, default=0.0, metavar="HZ",
                   help="also publish invalid frames at this rate")
    p.add_argument("--out", metavar="DIR")
    p.set_defaults(func=cmd_bench_capacity)

    p = bench.add_parser("broker", help="sustained publish throughput with gap detection")
    p.add_argument("--rate", type=int, default=20000)
    p.add_argument("--duration", type=float, default=60.0)
    p.add_argument("--publishers", type=int, default=100)
    p.add_argument("--out", metavar="DIR")
    p.set_defaults(func=cmd_bench_broker)

    p = bench.add_parser("load", help="load generator used by 'bench broker'")
    p.add_argument("--broker", required=True, metavar="HOST:PORT")
    p.add_argument("--rate", type=int, default=20000)
    p.add_argument("--duration", type=float, default=60.0)
    p.add_argument("--publishers", type=int, default=100)
    p.set_defaults(func=cmd_bench_load)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=args.log_level.upper(), format="%(asctime)s %(name)s %(levelname)s %(message)s")
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
