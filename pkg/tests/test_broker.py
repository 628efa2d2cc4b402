import asyncio
import random

import pytest

from oracles import all_filters, all_topics, oracle_match
from edm.pubsub import Broker, BrokerClient, BrokerError, BrokerServer
from edm.pubsub.broker import RecordingSession, SubscriptionIndex, _BrokerProtocol
from edm.pubsub.topics import InvalidTopic, topic_matches, validate_filter, validate_topic
from edm.pubsub.wire import (
    MAX_PAYLOAD,
    Frame,
    FrameError,
    FrameReader,
    Kind,
    PayloadTooLarge,
    decode_body,
    encode_frame,
    encode_publish,
)


def test_topic_matching_examples():
    assert topic_matches("mec1/edm_feed/+", "mec1/edm_feed/h3_m2")
    assert topic_matches("a/b", "a/b")
    assert not topic_matches("a/b", "a/b/c")
    assert topic_matches("a/#", "a/b/c")
    assert not topic_matches("a/#", "a")


def test_topic_matching_exhaustive():
    topics = list(all_topics())
    n = 0
    for f in all_filters():
        for t in topics:
            assert topic_matches(f, t) == oracle_match(f.split("/"), t.split("/")), (f, t)
            n += 1
    assert n == 160 * 30  # every valid filter against every topic


def test_subscription_index_exhaustive():
    filters = list(all_filters())
    idx = SubscriptionIndex()
    sessions = {f: RecordingSession(f) for f in filters}
    for f, s in sessions.items():
        idx.add(f, s)
    for t in all_topics():
        got = {s.client_id for s in idx.match(t.split("/"))}
        assert got == {f for f in filters if oracle_match(f.split("/"), t.split("/"))}, t
    # removing everything prunes the trie back to empty
    for f, s in sessions.items():
        idx.remove(f, s)
    assert all(not idx.match(t.split("/")) for t in all_topics())


def test_topic_matching_random_pairs():
    rng = random.Random(21)
    alpha = ["x", "y", "z", "+", "#"]
    for _ in range(10_000):
        fs = [rng.choice(alpha) for _ in range(rng.randint(1, 6))]
        fs = [s if s != "#" else "+" for s in fs[:-1]] + [fs[-1]]
        ts = [rng.choice("xyz") for _ in range(rng.randint(1, 6))]
        assert topic_matches("/".join(fs), "/".join(ts)) == oracle_match(fs, ts)


@pytest.mark.parametrize("bad", ["", "a//b", "a/+", "a/#", "a/b+", "/a", "a/", "x" * 257])
def test_invalid_topics(bad):
    with pytest.raises(InvalidTopic):
        validate_topic(bad)


@pytest.mark.parametrize("bad", ["", "a/#/b", "a/b#", "a+/b", "a//b"])
def test_invalid_filters(bad):
    with pytest.raises(InvalidTopic):
        validate_filter(bad)


# -- wire ---------------------------------------------------------------------


def test_frame_round_trip_and_bytes():
    assert encode_frame(Frame(Kind.PING)) == b"\x00\x00\x00\x01\x06"
    assert encode_frame(Frame(Kind.CONNECT, "ab")) == b"\x00\x00\x00\x05\x01\x00\x02ab"
    assert encode_publish("t/u", b"xy") == b"\x00\x00\x00\x08\x05\x00\x03t/uxy"
    for f in (
        Frame(Kind.CONNECT, "c1"), Frame(Kind.CONNACK), Frame(Kind.SUBSCRIBE, "a/+"), Frame(Kind.SUBACK, "a/+"),
        Frame(Kind.PUBLISH, "a/b", b"\x00\x01"), Frame(Kind.PING), Frame(Kind.PONG), Frame(Kind.DISCONNECT),
        Frame(Kind.DISCONNECT, "bye"), Frame(Kind.UNSUBSCRIBE, "a/#"), Frame(Kind.UNSUBACK, "a/#"),
    ):
        data = encode_frame(f)
        assert decode_body(data[4:]) == f


def test_frame_reader_reassembles_split_stream():
    frames = [encode_publish(f"t/{i}", bytes([i]) * i) for i in range(50)]
    stream = b"".join(frames)
    reader = FrameReader()
    out = []
    rng = random.Random(22)
    pos = 0
    while pos < len(stream):
        k = rng.randint(1, 17)
        out += [bytes(b) for b in reader.feed(stream[pos : pos + k])]
        pos += k
    assert out == [f[4:] for f in frames]


def test_frame_errors():
    with pytest.raises(PayloadTooLarge):
        encode_publish("a", b"x" * (MAX_PAYLOAD + 1))
    with pytest.raises(FrameError):
        decode_body(b"\x63")
    with pytest.raises(FrameError):
        decode_body(b"")
    with pytest.raises(FrameError):
        FrameReader(max_frame=100).feed(b"\x00\x01\x00\x00")


# -- broker core ----------------------------------------------------------------


def connected(broker, cid):
    s = RecordingSession()
    broker.handle_frame(s, Frame(Kind.CONNECT, cid))
    s.outbox.clear()
    return s


def test_connect_connack_and_eviction():
    b = Broker()
    s1 = RecordingSession()
    eff = b.handle_frame(s1, Frame(Kind.CONNECT, "car"))
    assert [e.action for e in eff] == ["reply"] and decode_body(s1.outbox[0][4:]).kind == Kind.CONNACK
    s2 = RecordingSession()
    eff = b.handle_frame(s2, Frame(Kind.CONNECT, "car"))
    assert ("evict", s1) in [(e.action, e.session) for e in eff]
    assert s1.closed and b.sessions["car"] is s2
    assert decode_body(s1.outbox[-1][4:]).kind == Kind.DISCONNECT


def test_publish_before_connect_is_a_violation():
    b = Broker()
    s = RecordingSession()
    eff = b.handle_frame(s, Frame(Kind.PUBLISH, "a", b"x"))
    assert [e.action for e in eff] == ["reply", "close"]
    assert decode_body(s.outbox[0][4:]).kind == Kind.DISCONNECT
    assert s.closed


def test_zero_subscribers():
    b = Broker()
    s = connected(b, "p")
    eff = b.handle_frame(s, Frame(Kind.PUBLISH, "m/edm_feed/h0_0", b"x"))
    assert eff == [] and b.delivered == 0 and b.published == 1


def test_fan_out_two_subscribers():
    b = Broker()
    subs = [connected(b, f"s{i}") for i in range(2)]
    for s in subs:
        b.handle_frame(s, Frame(Kind.SUBSCRIBE, "m/edm_feed/#"))
        s.outbox.clear()
    p = connected(b, "p")
    eff = b.handle_frame(p, Frame(Kind.PUBLISH, "m/edm_feed/h0_0", b"cam"))
    assert len([e for e in eff if e.action == "deliver"]) == 2
    for s in subs:
        assert s.outbox == [encode_publish("m/edm_feed/h0_0", b"cam")]


def test_overlapping_filters_deliver_once():
    b = Broker()
    s = connected(b, "s")
    b.handle_frame(s, Frame(Kind.SUBSCRIBE, "m/+/q"))
    b.handle_frame(s, Frame(Kind.SUBSCRIBE, "m/its/q"))
    b.handle_frame(s, Frame(Kind.SUBSCRIBE, "m/#"))
    s.outbox.clear()
    assert b.publish("m/its/q", b"1") == 1
    assert len(s.outbox) == 1


def test_subscription_active_before_suback():
    b = Broker()
    s = connected(b, "s")
    eff = b.handle_frame(s, Frame(Kind.SUBSCRIBE, "a/b"))
    assert decode_body(s.outbox[0][4:]) == Frame(Kind.SUBACK, "a/b")
    assert b.matching_sessions("a/b") == (s,)
    assert eff[0].action == "reply"


def test_unsubscribe_and_ping():
    b = Broker()
    s = connected(b, "s")
    b.handle_frame(s, Frame(Kind.SUBSCRIBE, "a/+"))
    b.handle_frame(s, Frame(Kind.UNSUBSCRIBE, "a/+"))
    assert b.publish("a/b", b"") == 0
    b.handle_frame(s, Frame(Kind.PING))
    assert decode_body(s.outbox[-1][4:]).kind == Kind.PONG


def test_internal_publish_semantics_and_fifo():
    b = Broker()
    got = []
    sink = b.attach_internal("sink", lambda t, p: got.append(p))
    b.subscribe(sink, "t/#")
    p = connected(b, "ext")
    b.publish("t/x", b"internal-1")
    b.handle_frame(p, Frame(Kind.PUBLISH, "t/x", b"external-1"))
    b.publish("t/x", b"internal-2")
    b.handle_frame(p, Frame(Kind.PUBLISH, "t/y", b"external-2"))
    assert got == [b"internal-1", b"external-1", b"internal-2", b"external-2"]
    with pytest.raises(PayloadTooLarge):
        b.publish("t/x", b"x" * (MAX_PAYLOAD + 1))


def test_raw_fast_path_matches_decoded_path():
    b = Broker()
    s = connected(b, "s")
    b.handle_frame(s, Frame(Kind.SUBSCRIBE, "a/+/c"))
    s.outbox.clear()
    frame = encode_publish("a/b/c", b"payload")
    assert b.route_raw(frame[4:])
    assert s.outbox == [frame]
    # invalid topics fall back to the full decoder
    assert not b.route_raw(encode_publish("a/+/c", b"")[4:])


def test_broker_isolation():
    a, b = Broker("A"), Broker("B")
    sa = connected(a, "s")
    sb = connected(b, "s")
    a.handle_frame(sa, Frame(Kind.SUBSCRIBE, "#"))
    b.handle_frame(sb, Frame(Kind.SUBSCRIBE, "#"))
    a.publish("mecA/edm_feed/h0_0", b"x")
    assert len(sa.outbox) == 2 and len(sb.outbox) == 1  # SUBACK + delivery vs SUBACK only


class _FakeTransport:
    def __init__(self):
        self.data = []

    def write(self, d):
        self.data.append(d)

    def is_closing(self):
        return False

    def close(self):
        pass


def test_bounded_queue_drops_oldest():
    async def go():
        broker = Broker(queue_limit=100)
        proto = _BrokerProtocol(broker, BrokerServer(broker))
        proto.transport = _FakeTransport()
        proto.pause_writing()
        for i in range(150):
            proto.write(bytes([i]))
        assert broker.dropped == 50
        proto.resume_writing()
        await asyncio.sleep(0)
        return b"".join(proto.transport.data)

    assert asyncio.run(go()) == bytes(range(50, 150))


# -- TCP ------------------------------------------------------------------------


def test_tcp_per_publisher_fifo_and_no_loss():
    async def go():
        async with BrokerServer(Broker()) as server:
            got = {}

            def on_msg(topic, payload):
                got.setdefault(topic, []).append(int.from_bytes(payload, "big"))

            sub = await BrokerClient.connect(server.endpoint, "sub", on_message=on_msg)
            await sub.subscribe("pub/+")
            pubs = [await BrokerClient.connect(server.endpoint, f"p{i}") for i in range(5)]
            for seq in range(2000):
                for i, p in enumerate(pubs):
                    p.publish(f"pub/{i}", seq.to_bytes(4, "big"))
            for p in pubs:
                await p.ping()
            await sub.ping()
            for p in pubs:
                await p.close()
            await sub.close()
            return got

    got = asyncio.run(go())
    assert sorted(got) == [f"pub/{i}" for i in range(5)]
    for seqs in got.values():
        assert seqs == list(range(2000))


def test_tcp_second_connect_evicts_first():
    async def go():
        async with BrokerServer(Broker()) as server:
            first = await BrokerClient.connect(server.endpoint, "same")
            second = await BrokerClient.connect(server.endpoint, "same")
            await asyncio.wait_for(first.wait_closed(), 2)
            assert "evicted" in (first.disconnect_reason or "")
            await second.ping()
            await second.close()

    asyncio.run(go())


def test_tcp_protocol_violation_closes_connection():
    async def go():
        async with BrokerServer(Broker()) as server:
            reader, writer = await asyncio.open_connection(*server.endpoint.split(":"))
            writer.write(encode_publish("a/b", b"x"))
            await writer.drain()
            data = await asyncio.wait_for(reader.read(), 2)
            writer.close()
            return data

    data = asyncio.run(go())
    assert decode_body(data[4:]).kind == Kind.DISCONNECT


def test_client_errors_after_close():
    async def go():
        async with BrokerServer(Broker()) as server:
            c = await BrokerClient.connect(server.endpoint, "c")
            await c.close()
            with pytest.raises(BrokerError):
                c.publish("a", b"")

    asyncio.run(go())
