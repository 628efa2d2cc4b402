"""asyncio client for the broker protocol."""

from __future__ import annotations

import asyncio
import collections
import logging
from typing import Callable

from .wire import Frame, FrameError, FrameReader, Kind, decode_body, encode_frame, encode_publish

log = logging.getLogger(__name__)

MessageHandler = Callable[[str, bytes], None]


class BrokerError(ConnectionError):
    pass


def split_endpoint(endpoint: str) -> tuple[str, int]:
    host, _, port = endpoint.rpartition(":")
    if not host or not port.isdigit():
        raise ValueError(f"endpoint must be HOST:PORT, got {endpoint!r}")
    return host, int(port)


class _ClientProtocol(asyncio.Protocol):
    def __init__(self, client: "BrokerClient"):
        self.client = client
        self.reader = FrameReader()
        self.transport: asyncio.Transport | None = None

    def connection_made(self, transport):
        self.transport = transport

    def data_received(self, data):
        try:
            bodies = self.reader.feed(data)
            for body in bodies:
                self.client._on_frame(decode_body(body))
        except FrameError as exc:
            log.warning("client %s: bad frame from broker: %s", self.client.client_id, exc)
            self.transport.close()

    def connection_lost(self, exc):
        self.client._on_lost(exc)


class BrokerClient:
    """Connection to one broker.

    ``publish`` is fire-and-forget (at-most-once) and goes straight to the
    transport, which buffers whatever the socket does not take at once.
    Acknowledged operations (``subscribe``, ``unsubscribe``, ``ping``) are
    answered in order, so awaiting ``ping`` after publishing means the
    broker has routed everything sent before it.
    """

    def __init__(self, client_id: str, on_message: MessageHandler | None = None):
        self.client_id = client_id
        self.on_message = on_message
        self.on_disconnect: Callable[[str | None], None] | None = None
        self.disconnect_reason: str | None = None
        self._proto: _ClientProtocol | None = None
        self._waiters: collections.deque[tuple[Kind, asyncio.Future]] = collections.deque()
        self._closed = asyncio.Event()
        self.connected = False
        self.received = 0

    @classmethod
    async def connect(
        cls, endpoint: str, client_id: str, on_message: MessageHandler | None = None, timeout: float = 5.0
    ) -> "BrokerClient":
        self = cls(client_id, on_message)
        host, port = split_endpoint(endpoint)
        loop = asyncio.get_running_loop()
        _, proto = await asyncio.wait_for(loop.create_connection(lambda: _ClientProtocol(self), host, port), timeout)
        self._proto = proto
        await asyncio.wait_for(self._request(Frame(Kind.CONNECT, client_id), Kind.CONNACK), timeout)
        self.connected = True
        return self

    # -- inbound ------------------------------------------------------------

    def _on_frame(self, frame: Frame) -> None:
        kind = frame.kind
        if kind == Kind.PUBLISH:
            self.received += 1
            if self.on_message is not None:
                self.on_message(frame.topic, frame.payload)
            return
        if kind == Kind.DISCONNECT:
            self.disconnect_reason = frame.text or "disconnected by broker"
            return
        if self._waiters and self._waiters[0][0] == kind:
            _, fut = self._waiters.popleft()
            if not fut.done():
                fut.set_result(frame)
        else:
            log.warning("client %s: unexpected %s", self.client_id, kind.name)

    def _on_lost(self, exc) -> None:
        self.connected = False
        reason = self.disconnect_reason or (str(exc) if exc else "connection closed")
        while self._waiters:
            _, fut = self._waiters.popleft()
            if not fut.done():
                fut.set_exception(BrokerError(reason))
        self._closed.set()
        if self.on_disconnect is not None:
            self.on_disconnect(reason)

    # -- outbound -----------------------------------------------------------

    def _write(self, data: bytes) -> None:
        proto = self._proto
        if proto is None or proto.transport is None or proto.transport.is_closing():
            raise BrokerError(f"client {self.client_id} is not connected")
        proto.transport.write(data)

    async def _request(self, frame: Frame, reply: Kind) -> Frame:
        fut = asyncio.get_running_loop().create_future()
        self._waiters.append((reply, fut))
        self._write(encode_frame(frame))
        return await fut

    def publish(self, topic: str, payload: bytes) -> None:
        self._write(encode_publish(topic, payload))

    async def subscribe(self, flt: str) -> None:
        await self._request(Frame(Kind.SUBSCRIBE, flt), Kind.SUBACK)

    async def unsubscribe(self, flt: str) -> None:
        await self._request(Frame(Kind.UNSUBSCRIBE, flt), Kind.UNSUBACK)

    async def ping(self, timeout: float | None = None) -> None:
        await asyncio.wait_for(self._request(Frame(Kind.PING), Kind.PONG), timeout)

    async def close(self) -> None:
        if self._proto is None or self._proto.transport is None:
            return
        if not self._proto.transport.is_closing():
            try:
                self._write(encode_frame(Frame(Kind.DISCONNECT)))
            except BrokerError:
                pass
            self._proto.transport.close()
        await self._closed.wait()

    async def wait_closed(self) -> None:
        await self._closed.wait()
