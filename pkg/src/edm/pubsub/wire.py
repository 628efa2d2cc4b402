"""Length-prefixed frames of the broker protocol (see docs/wire.md)."""

from __future__ import annotations

import enum
import struct
from dataclasses import dataclass

MAX_PAYLOAD = 64 * 1024
# kind + topic length + topic + payload, with room to spare
MAX_FRAME = MAX_PAYLOAD + 1024

_LEN = struct.Struct(">I")
_STRLEN = struct.Struct(">H")


class Kind(enum.IntEnum):
    CONNECT = 1
    CONNACK = 2
    SUBSCRIBE = 3
    SUBACK = 4
    PUBLISH = 5
    PING = 6
    PONG = 7
    DISCONNECT = 8
    UNSUBSCRIBE = 9
    UNSUBACK = 10


class FrameError(ValueError):
    pass


class PayloadTooLarge(FrameError):
    pass


@dataclass(frozen=True)
class Frame:
    kind: Kind
    text: str = ""  # client_id, filter, topic or disconnect reason depending on kind
    payload: bytes = b""

    @property
    def client_id(self) -> str:
        return self.text

    @property
    def filter(self) -> str:
        return self.text

    @property
    def topic(self) -> str:
        return self.text


def _string(s: str) -> bytes:
    b = s.encode("utf-8")
    if len(b) > 0xFFFF:
        raise FrameError("string too long")
    return _STRLEN.pack(len(b)) + b


def encode_frame(frame: Frame) -> bytes:
    kind = frame.kind
    if kind == Kind.PUBLISH:
        return encode_publish(frame.topic, frame.payload)
    if kind in (Kind.PING, Kind.PONG):
        body = b""
    elif kind == Kind.CONNACK:
        body = b"\x00"
    elif kind == Kind.DISCONNECT and not frame.text:
        body = b""
    else:
        body = _string(frame.text)
    return _LEN.pack(1 + len(body)) + bytes((kind,)) + body


def encode_publish(topic: str, payload: bytes) -> bytes:
    if len(payload) > MAX_PAYLOAD:
        raise PayloadTooLarge(f"payload of {len(payload)} bytes exceeds {MAX_PAYLOAD}")
    t = topic.encode("utf-8")
    n = 3 + len(t) + len(payload)
    return _LEN.pack(n) + b"\x05" + _STRLEN.pack(len(t)) + t + payload


def decode_body(body: bytes | memoryview) -> Frame:
    """Decode one frame body (the bytes after the length prefix)."""
    if not body:
        raise FrameError("empty frame")
    try:
        kind = Kind(body[0])
    except ValueError:
        raise FrameError(f"unknown frame kind {body[0]}") from None
    if kind in (Kind.PING, Kind.PONG):
        return Frame(kind)
    if kind == Kind.CONNACK:
        return Frame(kind)
    if kind == Kind.DISCONNECT and len(body) == 1:
        return Frame(kind)
    if len(body) < 3:
        raise FrameError(f"{kind.name} frame too short")
    (n,) = _STRLEN.unpack_from(body, 1)
    if 3 + n > len(body):
        raise FrameError(f"{kind.name} string overruns frame")
    try:
        text = bytes(body[3 : 3 + n]).decode("utf-8")
    except UnicodeDecodeError:
        raise FrameError("string is not UTF-8") from None
    if kind == Kind.PUBLISH:
        payload = bytes(body[3 + n :])
        if len(payload) > MAX_PAYLOAD:
            raise PayloadTooLarge(f"payload of {len(payload)} bytes")
        return Frame(kind, text, payload)
    if 3 + n != len(body):
        raise FrameError(f"trailing bytes in {kind.name} frame")
    return Frame(kind, text)


class FrameReader:
    """Incremental splitter: feed stream bytes, get complete frame bodies."""

    def __init__(self, max_frame: int = MAX_FRAME):
        self._buf = bytearray()
        self.max_frame = max_frame

    def feed(self, data: bytes) -> list[bytes]:
        buf = self._buf
        buf += data
        out = []
        pos = 0
        end = len(buf)
        while end - pos >= 4:
            (n,) = _LEN.unpack_from(buf, pos)
            if n > self.max_frame or n == 0:
                raise FrameError(f"bad frame length {n}")
            if end - pos - 4 < n:
                break
            out.append(bytes(buf[pos + 4 : pos + 4 + n]))
            pos += 4 + n
        if pos:
            del buf[:pos]
        return out
