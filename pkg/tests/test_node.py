import asyncio

from conftest import ORIGIN, east_of, mec
from scenarios import run_crossing, wait_for, write_eastbound_fcd
from edm.cam_codec import CamMessage, encode_cam
from edm.geoindex import HexGridConfig, cell_of
from edm.mec.node import MecNode
from edm.mec.server import MecServer
from edm.pubsub import BrokerClient
from edm.registry import RegistryNode
from edm.topics import feed_topic, its_query_topic, its_response_topic

GRID = HexGridConfig(ORIGIN)


def test_border_crossing_hands_over_once(tmp_path):
    path = str(tmp_path / "east.xml")
    write_eastbound_fcd(path)
    res = asyncio.run(run_crossing(path))
    assert res.border_setup_s < 1.0
    assert res.border_cells["a"] > 0 and res.border_cells["b"] > 0
    assert res.handovers == 1 and res.failed_handovers == 0
    assert [m for m, _ in res.emitted][0] == "a" and [m for m, _ in res.emitted][-1] == "b"
    assert res.switch_gap_ms < 200 and res.gap_ms < 200
    assert res.all_stored_at_target
    # frames near the border reach the other MEC through its mirror subscriptions
    assert res.mirrored["a"] > 0 and res.mirrored["b"] > 0


def test_node_without_registry_serves_feed_and_queries():
    async def go():
        server = MecServer(mec("solo", ORIGIN, endpoint="127.0.0.1:0"), GRID, t_buffer_ms=20)
        async with MecNode(server) as node:
            assert node.endpoint != "127.0.0.1:0" and server.descriptor.broker_endpoint == node.endpoint
            got = []
            v = await BrokerClient.connect(node.endpoint, "veh", on_message=lambda t, p: got.append((t, p)))
            await v.subscribe(its_response_topic("solo", "proximity", 7))
            p = east_of(ORIGIN, 120)
            for i in range(20):
                v.publish(feed_topic("solo", cell_of(p, GRID).encoded), encode_cam(CamMessage(7, 1000 + i, p.lat, p.lon)))
            await v.ping()
            await wait_for(lambda: len(server.store) == 20, 2.0)
            v.publish(its_query_topic("solo", "proximity", 7), b"mode=all;window_ms=none;region=none")
            await wait_for(lambda: got, 2.0)
            await v.close()
            return got, node.border_subscriptions()

    got, border = asyncio.run(go())
    assert border == {}
    lines = got[0][1].decode().splitlines()
    assert len(lines) == 21 and all(line.startswith("7,") for line in lines[1:])


def test_shutdown_drains_buffer():
    async def go():
        server = MecServer(mec("d", ORIGIN, endpoint="127.0.0.1:0"), GRID, t_buffer_ms=10_000)
        node = await MecNode(server).start()
        v = await BrokerClient.connect(node.endpoint, "veh")
        for i in range(50):
            v.publish(feed_topic("d", cell_of(ORIGIN, GRID).encoded), encode_cam(CamMessage(i + 1, 5, ORIGIN.lat, ORIGIN.lon)))
        await v.ping()
        await v.close()
        await asyncio.sleep(0.05)
        await node.stop()
        return server

    server = asyncio.run(go())
    c = server.conservation()
    assert c["pending"] == 0 and c["stored"] == 50 == c["received"]


def test_registry_retry_then_neighbors():
    async def go():
        server = MecServer(mec("late", ORIGIN, endpoint="127.0.0.1:0"), GRID)
        # the registry is not up yet: the node keeps retrying with backoff
        async with RegistryNode() as reg:
            endpoint = reg.endpoint
        node = await MecNode(server, registry_endpoint=endpoint, retry_initial_s=0.05, retry_max_s=0.1).start()
        await wait_for(lambda: node.registry_failures >= 2, 2.0)
        async with RegistryNode(listen=endpoint) as reg:
            other = MecServer(mec("peer", east_of(ORIGIN, 1000), endpoint="127.0.0.1:0"), GRID)
            async with MecNode(other, registry_endpoint=reg.endpoint) as peer:
                await wait_for(lambda: node.border_subscriptions() and peer.border_subscriptions(), 3.0)
                nb = sorted(node.border_subscriptions())
                # a descriptor update goes out on the update topic and reaches the peer
                await node.publish_update(mec("late", ORIGIN, 450, 800, endpoint=node.endpoint))
                await wait_for(lambda: any(n.r_optimal_m == 450 for n in other.descriptor.neighbors), 2.0)
        await node.stop()
        return nb

    assert asyncio.run(go()) == ["peer"]
