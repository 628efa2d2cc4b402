from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

from ..geoindex import GeoPoint
from ..pubsub.client import split_endpoint
from ..pubsub.topics import segment_ok


class InvalidDescriptor(ValueError):
    pass


@dataclass(frozen=True)
class MecDescriptor:
    """Identity, location and coverage of one MEC server.

    ``neighbors`` holds shallow copies (their own ``neighbors`` is empty).
    """

    mec_id: str
    position: GeoPoint
    r_optimal_m: float
    r_operating_m: float
    broker_endpoint: str
    neighbors: tuple["MecDescriptor", ...] = field(default=(), compare=False)

    def __post_init__(self):
        if not segment_ok(self.mec_id) or "," in self.mec_id:
            raise InvalidDescriptor(f"bad mec_id {self.mec_id!r}")
        if not (math.isfinite(self.r_optimal_m) and math.isfinite(self.r_operating_m)):
            raise InvalidDescriptor("radii must be finite")
        if not 0 < self.r_optimal_m < self.r_operating_m:
            raise InvalidDescriptor(f"need 0 < r_optimal ({self.r_optimal_m}) < r_operating ({self.r_operating_m})")
        try:
            split_endpoint(self.broker_endpoint)
        except ValueError as exc:
            raise InvalidDescriptor(str(exc)) from None
        if any(n.mec_id == self.mec_id for n in self.neighbors):
            raise InvalidDescriptor("a MEC cannot list itself as a neighbor")

    def shallow(self) -> "MecDescriptor":
        return replace(self, neighbors=()) if self.neighbors else self

    def with_neighbors(self, neighbors) -> "MecDescriptor":
        return replace(self, neighbors=tuple(n.shallow() for n in neighbors))

    def to_line(self) -> str:
        p = self.position
        return f"{self.mec_id},{p.lat!r},{p.lon!r},{self.r_optimal_m!r},{self.r_operating_m!r},{self.broker_endpoint}"

    @classmethod
    def from_line(cls, line: str) -> "MecDescriptor":
        parts = line.strip().split(",")
        if len(parts) != 6:
            raise InvalidDescriptor(f"expected 6 fields, got {len(parts)}: {line!r}")
        mec_id, lat, lon, r_opt, r_oper, endpoint = parts
        try:
            return cls(mec_id, GeoPoint(float(lat), float(lon)), float(r_opt), float(r_oper), endpoint)
        except ValueError as exc:
            raise InvalidDescriptor(str(exc)) from None


def format_descriptor_lines(descriptors) -> bytes:
    return "".join(d.to_line() + "\n" for d in sorted(descriptors, key=lambda d: d.mec_id)).encode()


def parse_descriptor_lines(payload: bytes) -> list[MecDescriptor]:
    return [MecDescriptor.from_line(line) for line in payload.decode("utf-8").splitlines() if line.strip()]
