"""Hierarchical topic names and MQTT-style filters ('+' one level, '#' the rest)."""

from __future__ import annotations

MAX_TOPIC_BYTES = 256
_RESERVED = ("/", "+", "#")


class InvalidTopic(ValueError):
    pass


def validate_topic(topic: str) -> list[str]:
    """Return the segments of a concrete topic name or raise InvalidTopic."""
    if len(topic.encode("utf-8")) > MAX_TOPIC_BYTES:
        raise InvalidTopic(f"topic longer than {MAX_TOPIC_BYTES} bytes")
    segments = topic.split("/")
    for seg in segments:
        if not seg:
            raise InvalidTopic(f"empty segment in {topic!r}")
        if "+" in seg or "#" in seg:
            raise InvalidTopic(f"wildcard in topic name {topic!r}")
    return segments


def validate_filter(flt: str) -> list[str]:
    if len(flt.encode("utf-8")) > MAX_TOPIC_BYTES:
        raise InvalidTopic(f"filter longer than {MAX_TOPIC_BYTES} bytes")
    segments = flt.split("/")
    last = len(segments) - 1
    for i, seg in enumerate(segments):
        if not seg:
            raise InvalidTopic(f"empty segment in {flt!r}")
        if seg in ("+", "#"):
            if seg == "#" and i != last:
                raise InvalidTopic(f"'#' must be the last segment in {flt!r}")
            continue
        if "+" in seg or "#" in seg:
            raise InvalidTopic(f"wildcard must be a whole segment in {flt!r}")
    return segments


def segment_ok(seg: str) -> bool:
    """True if ``seg`` can be used verbatim as one topic segment."""
    return bool(seg) and not any(ch in seg for ch in _RESERVED)


def topic_matches(flt: str, topic: str) -> bool:
    """Match a filter against a topic name.

    '+' matches exactly one segment; a trailing '#' matches one or more
    remaining segments.
    """
    fs = flt.split("/")
    ts = topic.split("/")
    n = len(fs)
    if fs[-1] == "#":
        if len(ts) < n:
            return False
        n -= 1
    elif len(ts) != n:
        return False
    for i in range(n):
        if fs[i] != "+" and fs[i] != ts[i]:
            return False
    return True
