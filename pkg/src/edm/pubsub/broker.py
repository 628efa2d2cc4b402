"""Broker core (transport agnostic) and its asyncio TCP front end."""

from __future__ import annotations

import asyncio
import collections
import logging
from typing import Callable, NamedTuple

from .topics import InvalidTopic, validate_filter, validate_topic
from .wire import (
    _LEN,
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

log = logging.getLogger(__name__)

DEFAULT_QUEUE_LIMIT = 10_000
_CACHE_LIMIT = 100_000


class ProtocolViolation(Exception):
    pass


class Effect(NamedTuple):
    action: str  # "reply", "deliver", "evict" or "close"
    session: "Session"
    frame: Frame | None


class Session:
    """One client attachment.  Subclasses decide how bytes leave the broker."""

    internal = False

    def __init__(self, client_id: str | None = None):
        self.client_id = client_id
        self.filters: set[str] = set()
        self.connected = False
        self.closed = False
        self.order = 0

    def send(self, data: bytes) -> None:
        raise NotImplementedError

    def deliver(self, topic: str, payload: bytes, data: bytes) -> None:
        self.send(data)

    def close(self) -> None:
        self.closed = True

    def __repr__(self):
        return f"<{type(self).__name__} {self.client_id!r}>"


class InternalSession(Session):
    """In-process subscriber; deliveries call ``callback(topic, payload)``."""

    internal = True

    def __init__(self, client_id: str, callback: Callable[[str, bytes], None] | None = None):
        super().__init__(client_id)
        self.callback = callback

    def send(self, data: bytes) -> None:
        pass

    def deliver(self, topic: str, payload: bytes, data: bytes) -> None:
        if self.callback is not None:
            try:
                self.callback(topic, payload)
            except Exception:
                log.exception("internal subscriber %s failed on %s", self.client_id, topic)


class RecordingSession(Session):
    """Keeps every outbound frame; handy for driving the core without sockets."""

    def __init__(self, client_id: str | None = None):
        super().__init__(client_id)
        self.outbox: list[bytes] = []

    def send(self, data: bytes) -> None:
        self.outbox.append(data)


class _Node:
    __slots__ = ("children", "here", "rest")

    def __init__(self):
        self.children: dict[str, _Node] = {}
        self.here: set[Session] = set()  # filters ending at this node
        self.rest: set[Session] = set()  # filters ending in '#' below this node


class SubscriptionIndex:
    """Segment trie over filters; a lookup touches only matching branches."""

    def __init__(self):
        self.root = _Node()

    def add(self, flt: str, session: Session) -> None:
        node = self.root
        for seg in flt.split("/"):
            if seg == "#":
                node.rest.add(session)
                return
            node = node.children.setdefault(seg, _Node())
        node.here.add(session)

    def remove(self, flt: str, session: Session) -> None:
        path = []
        node = self.root
        for seg in flt.split("/"):
            if seg == "#":
                node.rest.discard(session)
                break
            child = node.children.get(seg)
            if child is None:
                return
            path.append((node, seg))
            node = child
        else:
            node.here.discard(session)
        # prune empty branches
        for parent, seg in reversed(path):
            child = parent.children[seg]
            if child.here or child.rest or child.children:
                break
            del parent.children[seg]

    def match(self, segments: list[str]) -> set[Session]:
        out: set[Session] = set()
        n = len(segments)
        stack = [(self.root, 0)]
        while stack:
            node, i = stack.pop()
            if i == n:
                out |= node.here
                continue
            if node.rest:
                out |= node.rest
            child = node.children.get(segments[i])
            if child is not None:
                stack.append((child, i + 1))
            child = node.children.get("+")
            if child is not None:
                stack.append((child, i + 1))
        return out


class Broker:
    def __init__(self, name: str = "broker", max_payload: int = MAX_PAYLOAD, queue_limit: int = DEFAULT_QUEUE_LIMIT):
        self.name = name
        self.max_payload = max_payload
        self.queue_limit = queue_limit
        self.sessions: dict[str, Session] = {}
        self.published = 0
        self.delivered = 0
        self.dropped = 0
        self._route_cache: dict[str, tuple[Session, ...]] = {}
        # raw topic bytes -> (topic, targets) for the TCP publish fast path
        self._raw_cache: dict[bytes, tuple[str, tuple[Session, ...]]] = {}
        self._index = SubscriptionIndex()
        self._order = 0

    def _invalidate(self) -> None:
        self._route_cache.clear()
        self._raw_cache.clear()

    # -- session management -------------------------------------------------

    def attach_internal(self, client_id: str, callback: Callable[[str, bytes], None] | None = None) -> InternalSession:
        session = InternalSession(client_id, callback)
        self.handle_frame(session, Frame(Kind.CONNECT, client_id))
        return session

    def detach(self, session: Session) -> None:
        """Forget a session whose connection is gone."""
        if session.client_id is not None and self.sessions.get(session.client_id) is session:
            del self.sessions[session.client_id]
            for flt in session.filters:
                self._index.remove(flt, session)
            self._invalidate()
        session.connected = False

    def subscribe(self, session: Session, flt: str) -> None:
        validate_filter(flt)
        if flt not in session.filters:
            session.filters.add(flt)
            self._index.add(flt, session)
            self._invalidate()

    def unsubscribe(self, session: Session, flt: str) -> None:
        if flt in session.filters:
            session.filters.discard(flt)
            self._index.remove(flt, session)
            self._invalidate()

    # -- frame handling ------------------------------------------------------

    def handle_frame(self, session: Session, frame: Frame) -> list[Effect]:
        """Apply one inbound frame and return the effects it produced.

        Effects have already been carried out when this returns; the list is
        for callers (and tests) that want to see what happened.
        """
        try:
            effects = self._dispatch(session, frame)
        except (ProtocolViolation, InvalidTopic, FrameError) as exc:
            reason = f"{type(exc).__name__}: {exc}"
            log.info("closing %r: %s", session, reason)
            effects = [Effect("reply", session, Frame(Kind.DISCONNECT, reason)), Effect("close", session, None)]
        for eff in effects:
            if eff.action == "reply":
                eff.session.send(encode_frame(eff.frame))
            elif eff.action in ("close", "evict"):
                self.detach(eff.session)
                eff.session.close()
        return effects

    def _dispatch(self, session: Session, frame: Frame) -> list[Effect]:
        kind = frame.kind
        if kind == Kind.CONNECT:
            if session.connected:
                raise ProtocolViolation("second CONNECT on one session")
            if not frame.client_id:
                raise ProtocolViolation("empty client id")
            effects = []
            prior = self.sessions.get(frame.client_id)
            if prior is not None and prior is not session:
                effects.append(Effect("reply", prior, Frame(Kind.DISCONNECT, "evicted by a newer session")))
                effects.append(Effect("evict", prior, None))
                self.detach(prior)
            session.client_id = frame.client_id
            session.connected = True
            self._order += 1
            session.order = self._order
            self.sessions[frame.client_id] = session
            effects.append(Effect("reply", session, Frame(Kind.CONNACK)))
            return effects
        if not session.connected:
            raise ProtocolViolation(f"{kind.name} before CONNECT")
        if kind == Kind.PUBLISH:
            validate_topic(frame.topic)
            if len(frame.payload) > self.max_payload:
                raise PayloadTooLarge(f"payload of {len(frame.payload)} bytes")
            return self._route(frame.topic, frame.payload, collect=True)
        if kind == Kind.SUBSCRIBE:
            self.subscribe(session, frame.filter)
            return [Effect("reply", session, Frame(Kind.SUBACK, frame.filter))]
        if kind == Kind.UNSUBSCRIBE:
            self.unsubscribe(session, frame.filter)
            return [Effect("reply", session, Frame(Kind.UNSUBACK, frame.filter))]
        if kind == Kind.PING:
            return [Effect("reply", session, Frame(Kind.PONG))]
        if kind == Kind.DISCONNECT:
            return [Effect("close", session, None)]
        raise ProtocolViolation(f"clients may not send {kind.name}")

    # -- routing -------------------------------------------------------------

    def matching_sessions(self, topic: str) -> tuple[Session, ...]:
        hit = self._route_cache.get(topic)
        if hit is None:
            # deliveries go out in connection order
            hit = tuple(sorted(self._index.match(topic.split("/")), key=lambda s: s.order))
            if len(self._route_cache) >= _CACHE_LIMIT:
                self._route_cache.clear()
            self._route_cache[topic] = hit
        return hit

    def _route(self, topic: str, payload: bytes, collect: bool = False) -> list[Effect]:
        self.published += 1
        targets = self.matching_sessions(topic)
        if not targets:
            return []
        data = b"" if all(s.internal for s in targets) else encode_publish(topic, payload)
        for s in targets:
            s.deliver(topic, payload, data)
        self.delivered += len(targets)
        if not collect:
            return []
        frame = Frame(Kind.PUBLISH, topic, payload)
        return [Effect("deliver", s, frame) for s in targets]

    def route_raw(self, body: bytes) -> bool:
        """Fast path for a PUBLISH body from a connected TCP session.

        The outbound frame is the inbound one, so it is forwarded without
        re-encoding.  Returns False when the body needs the full decoder
        (unknown topic that fails validation, oversized payload and so on).
        """
        n = (body[1] << 8) | body[2]
        tb = body[3 : 3 + n]
        hit = self._raw_cache.get(tb)
        if hit is None:
            if 3 + n > len(body):
                return False
            try:
                topic = tb.decode("utf-8")
                validate_topic(topic)
            except (UnicodeDecodeError, InvalidTopic):
                return False
            hit = (topic, self.matching_sessions(topic))
            if len(self._raw_cache) >= _CACHE_LIMIT:
                self._raw_cache.clear()
            self._raw_cache[tb] = hit
        payload = body[3 + n :]
        if len(payload) > self.max_payload:
            return False
        self.published += 1
        topic, targets = hit
        if targets:
            data = None
            for s in targets:
                if s.internal:
                    s.deliver(topic, payload, b"")
                else:
                    if data is None:
                        data = _LEN.pack(len(body)) + body
                    s.send(data)
            self.delivered += len(targets)
        return True

    def publish(self, topic: str, payload: bytes) -> int:
        """Publish from inside the process; returns the number of deliveries."""
        validate_topic(topic)
        if len(payload) > self.max_payload:
            raise PayloadTooLarge(f"payload of {len(payload)} bytes exceeds {self.max_payload}")
        before = self.delivered
        self._route(topic, payload)
        return self.delivered - before


# -- asyncio TCP front end --------------------------------------------------


class TcpSession(Session):
    def __init__(self, proto: "_BrokerProtocol"):
        super().__init__()
        self._proto = proto

    def send(self, data: bytes) -> None:
        self._proto.write(data)

    def close(self) -> None:
        super().close()
        self._proto.close_soon()


class _BrokerProtocol(asyncio.Protocol):
    def __init__(self, broker: Broker, server: "BrokerServer"):
        self.broker = broker
        self.server = server
        self.session = TcpSession(self)
        self.reader = FrameReader(max_frame=broker.max_payload + 1024)
        self.transport: asyncio.Transport | None = None
        self._out: list[bytes] = []
        self._pending: collections.deque[bytes] = collections.deque()
        self._paused = False
        self._flush_scheduled = False
        self._closing = False

    def connection_made(self, transport):
        self.transport = transport
        self.server._connections.add(self)

    def connection_lost(self, exc):
        self.server._connections.discard(self)
        self.broker.detach(self.session)
        self.session.closed = True

    def data_received(self, data: bytes) -> None:
        if self._closing:
            return
        try:
            bodies = self.reader.feed(data)
        except FrameError as exc:
            self._abort(exc)
            return
        broker = self.broker
        handle = broker.handle_frame
        session = self.session
        for body in bodies:
            if body[0] == Kind.PUBLISH and session.connected and len(body) >= 3 and broker.route_raw(body):
                continue
            try:
                frame = decode_body(body)
            except FrameError as exc:
                self._abort(exc)
                return
            handle(session, frame)
            if self._closing:
                return

    def _abort(self, exc: Exception) -> None:
        log.info("bad stream from %r: %s", self.session, exc)
        self.write(encode_frame(Frame(Kind.DISCONNECT, f"{type(exc).__name__}: {exc}")))
        self.broker.detach(self.session)
        self.close_soon()

    def write(self, data: bytes) -> None:
        if self._paused:
            if len(self._pending) >= self.broker.queue_limit:
                self._pending.popleft()
                self.broker.dropped += 1
            self._pending.append(data)
            return
        self._out.append(data)
        if not self._flush_scheduled:
            self._flush_scheduled = True
            asyncio.get_running_loop().call_soon(self._flush)

    def _flush(self) -> None:
        self._flush_scheduled = False
        if self._out and self.transport is not None and not self.transport.is_closing():
            self.transport.write(b"".join(self._out))
        self._out.clear()

    def pause_writing(self):
        self._paused = True

    def resume_writing(self):
        self._paused = False
        while self._pending and not self._paused:
            self.write(self._pending.popleft())

    def close_soon(self) -> None:
        if self._closing:
            return
        self._closing = True

        def _close():
            self._flush()
            if self.transport is not None:
                self.transport.close()

        asyncio.get_running_loop().call_soon(_close)


class BrokerServer:
    """Serves one :class:`Broker` over TCP."""

    def __init__(self, broker: Broker | None = None, host: str = "127.0.0.1", port: int = 0):
        self.broker = broker if broker is not None else Broker()
        self.host = host
        self.port = port
        self._server: asyncio.base_events.Server | None = None
        self._connections: set[_BrokerProtocol] = set()

    async def start(self) -> "BrokerServer":
        loop = asyncio.get_running_loop()
        self._server = await loop.create_server(
            lambda: _BrokerProtocol(self.broker, self), self.host, self.port, backlog=4096, reuse_address=True
        )
        self.port = self._server.sockets[0].getsockname()[1]
        log.info("broker %s listening on %s:%d", self.broker.name, self.host, self.port)
        return self

    @property
    def endpoint(self) -> str:
        return f"{self.host}:{self.port}"

    async def stop(self) -> None:
        if self._server is None:
            return
        self._server.close()
        for proto in list(self._connections):
            proto.write(encode_frame(Frame(Kind.DISCONNECT, "server shutdown")))
            proto.close_soon()
        await asyncio.sleep(0)
        await self._server.wait_closed()
        self._server = None

    async def __aenter__(self):
        return await self.start()

    async def __aexit__(self, *exc):
        await self.stop()
