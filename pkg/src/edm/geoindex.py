"""Fixed-resolution hexagonal cells over a local equirectangular projection.

Every deployment shares one :class:`HexGridConfig`; cell ids travel inside
topic names, so two processes must agree on the origin and the cell area.

Cells are pointy-top hexagons in axial ``(q, r)`` coordinates.  The encoded
form is ``h<q>_<r>`` with each integer in lowercase base 36 and negative
values prefixed by ``m`` (``h3_m2`` is ``q=3, r=-2``).  Since ``m`` is
also the digit 22, a non-negative value whose digits start with ``m`` gets
a leading ``0`` (22 is ``0m``), which keeps the encoding bijective.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterable

import numpy as np

EARTH_RADIUS_M = 6371008.8
MAX_ABS_LAT = 85.0

_B36 = "0123456789abcdefghijklmnopqrstuvwxyz"
_SQRT3 = math.sqrt(3.0)
_AXIAL_NEIGHBORS = ((1, 0), (-1, 0), (0, 1), (0, -1), (1, -1), (-1, 1))
# relative slack when two candidate centers are equally near (edge points)
_TIE_EPS = 1e-9


class OutOfProjectionDomain(ValueError):
    """Latitude outside the band where the local projection is defined."""


def normalize_lon(lon: float) -> float:
    """Map a longitude into [-180, 180); values already in range are returned unchanged."""
    if -180.0 <= lon < 180.0:
        return lon
    return ((lon + 180.0) % 360.0) - 180.0


@dataclass(frozen=True, slots=True)
class GeoPoint:
    lat: float
    lon: float

    def __post_init__(self):
        if not (math.isfinite(self.lat) and math.isfinite(self.lon)):
            raise ValueError(f"non-finite coordinate: {self.lat}, {self.lon}")
        if not -90.0 <= self.lat <= 90.0:
            raise ValueError(f"latitude out of range: {self.lat}")
        if not -180.0 <= self.lon <= 180.0:
            raise ValueError(f"longitude out of range: {self.lon}")
        object.__setattr__(self, "lon", normalize_lon(self.lon))

    @classmethod
    def trusted(cls, lat: float, lon: float) -> "GeoPoint":
        """Build without validation, for coordinates already known to be in range."""
        p = object.__new__(cls)
        object.__setattr__(p, "lat", lat)
        object.__setattr__(p, "lon", lon)
        return p


def haversine_m(a: GeoPoint, b: GeoPoint) -> float:
    lat1, lat2 = math.radians(a.lat), math.radians(b.lat)
    dlat = lat2 - lat1
    dlon = math.radians(b.lon - a.lon)
    h = math.sin(dlat / 2) ** 2 + math.cos(lat1) * math.cos(lat2) * math.sin(dlon / 2) ** 2
    return 2 * EARTH_RADIUS_M * math.asin(min(1.0, math.sqrt(h)))


def haversine_m_array(lat, lon, ref: GeoPoint) -> np.ndarray:
    """Vectorized great-circle distance from ``ref`` to each (lat, lon)."""
    lat1 = math.radians(ref.lat)
    lat2 = np.radians(np.asarray(lat, dtype=np.float64))
    dlat = lat2 - lat1
    dlon = np.radians(np.asarray(lon, dtype=np.float64) - ref.lon)
    h = np.sin(dlat / 2) ** 2 + math.cos(lat1) * np.cos(lat2) * np.sin(dlon / 2) ** 2
    return 2 * EARTH_RADIUS_M * np.arcsin(np.minimum(1.0, np.sqrt(h)))


def _b36(n: int) -> str:
    if n < 0:
        return "m" + _b36(-n)
    if n == 0:
        return "0"
    out = []
    while n:
        n, d = divmod(n, 36)
        out.append(_B36[d])
    if out[-1] == "m":
        out.append("0")
    return "".join(reversed(out))


def _parse_b36(s: str) -> int:
    neg = s.startswith("m")
    body = s[1:] if neg else s
    if not body or any(ch not in _B36 for ch in body):
        raise ValueError(f"bad base-36 integer {s!r}")
    if neg and body == "0":
        raise ValueError(f"non-canonical base-36 integer {s!r}")
    if len(body) > 1 and body[0] == "0" and body[1] != "m":
        raise ValueError(f"non-canonical base-36 integer {s!r}")
    value = int(body, 36)
    if _b36(value) != body:
        raise ValueError(f"non-canonical base-36 integer {s!r}")
    return -value if neg else value


@dataclass(frozen=True, slots=True)
class CellId:
    q: int
    r: int

    @property
    def encoded(self) -> str:
        return f"h{_b36(self.q)}_{_b36(self.r)}"

    def __str__(self) -> str:
        return self.encoded

    @classmethod
    def parse(cls, text: str) -> "CellId":
        if not text.startswith("h") or text.count("_") != 1:
            raise ValueError(f"not a cell id: {text!r}")
        q, r = text[1:].split("_")
        return cls(_parse_b36(q), _parse_b36(r))

    @property
    def key(self) -> int:
        return cell_key(self.q, self.r)

    @classmethod
    def from_key(cls, key: int) -> "CellId":
        return cls(*split_cell_key(key))


_KEY_BIAS = 1 << 31


def cell_key(q, r):
    """Pack int32 axial coordinates into one signed int64 (scalars or arrays)."""
    return q * (1 << 32) + (r + _KEY_BIAS)


def split_cell_key(key: int) -> tuple[int, int]:
    key = int(key)
    return key >> 32, (key & 0xFFFFFFFF) - _KEY_BIAS


@dataclass(frozen=True)
class HexGridConfig:
    origin: GeoPoint
    cell_area_m2: float = 15000.0
    edge_m: float = field(init=False)

    def __post_init__(self):
        if not self.cell_area_m2 > 0:
            raise ValueError("cell_area_m2 must be positive")
        if abs(self.origin.lat) >= MAX_ABS_LAT:
            raise OutOfProjectionDomain(f"origin latitude {self.origin.lat}")
        # regular hexagon: area = 3*sqrt(3)/2 * edge^2
        object.__setattr__(self, "edge_m", math.sqrt(2.0 * self.cell_area_m2 / (3.0 * _SQRT3)))

    @property
    def center_spacing_m(self) -> float:
        """Distance between adjacent cell centers (equals flat-to-flat width)."""
        return _SQRT3 * self.edge_m

    @property
    def vertex_diameter_m(self) -> float:
        return 2.0 * self.edge_m

    @property
    def _m_per_deg_lat(self) -> float:
        return EARTH_RADIUS_M * math.pi / 180.0

    @property
    def _m_per_deg_lon(self) -> float:
        return self._m_per_deg_lat * math.cos(math.radians(self.origin.lat))

    def project(self, p: GeoPoint) -> tuple[float, float]:
        """(lat, lon) -> local planar (x east, y north) in meters."""
        if abs(p.lat) >= MAX_ABS_LAT:
            raise OutOfProjectionDomain(f"latitude {p.lat} outside +/-{MAX_ABS_LAT}")
        dlon = normalize_lon(p.lon - self.origin.lon)
        return dlon * self._m_per_deg_lon, (p.lat - self.origin.lat) * self._m_per_deg_lat

    def unproject(self, x: float, y: float) -> GeoPoint:
        lat = self.origin.lat + y / self._m_per_deg_lat
        if abs(lat) >= MAX_ABS_LAT:
            raise OutOfProjectionDomain(f"latitude {lat} outside +/-{MAX_ABS_LAT}")
        lon = normalize_lon(self.origin.lon + x / self._m_per_deg_lon)
        return GeoPoint(lat, lon)

    def center_xy(self, q: int, r: int) -> tuple[float, float]:
        s = self.edge_m
        return s * _SQRT3 * (q + r / 2.0), s * 1.5 * r

    def hexagon_xy(self, c: CellId) -> list[tuple[float, float]]:
        """Vertices of a cell in the projected plane, counter-clockwise."""
        cx, cy = self.center_xy(c.q, c.r)
        s = self.edge_m
        return [
            (cx + s * math.cos(math.radians(60 * i - 30)), cy + s * math.sin(math.radians(60 * i - 30)))
            for i in range(6)
        ]


def _axial_round(fq: float, fr: float) -> tuple[int, int]:
    x, z = fq, fr
    y = -x - z
    rx, ry, rz = round(x), round(y), round(z)
    dx, dy, dz = abs(rx - x), abs(ry - y), abs(rz - z)
    if dx > dy and dx > dz:
        rx = -ry - rz
    elif dy <= dz:
        rz = -rx - ry
    return int(rx), int(rz)


def _nearest_cell(x: float, y: float, cfg: HexGridConfig) -> CellId:
    s = cfg.edge_m
    fq = (_SQRT3 / 3.0 * x - y / 3.0) / s
    fr = (2.0 / 3.0 * y) / s
    q0, r0 = _axial_round(fq, fr)
    best: list[tuple[float, CellId]] = []
    for dq, dr in ((0, 0),) + _AXIAL_NEIGHBORS:
        cx, cy = cfg.center_xy(q0 + dq, r0 + dr)
        best.append(((x - cx) ** 2 + (y - cy) ** 2, CellId(q0 + dq, r0 + dr)))
    dmin = min(d for d, _ in best)
    tol = _TIE_EPS * s * s
    tied = [c for d, c in best if d <= dmin + tol]
    return min(tied, key=lambda c: c.encoded)


def cell_of(p: GeoPoint, cfg: HexGridConfig) -> CellId:
    """The cell containing ``p``; edge points go to the smaller encoding."""
    x, y = cfg.project(p)
    return _nearest_cell(x, y, cfg)


def cells_of_arrays(lat, lon, cfg: HexGridConfig) -> tuple[np.ndarray, np.ndarray]:
    """Vectorized :func:`cell_of`; returns axial ``(q, r)`` int64 arrays.

    Rows that sit on (or within float noise of) a cell boundary are resolved
    through the scalar path so both routes agree on the tie-break.
    """
    lat = np.asarray(lat, dtype=np.float64)
    lon = np.asarray(lon, dtype=np.float64)
    if lat.size and np.any(np.abs(lat) >= MAX_ABS_LAT):
        raise OutOfProjectionDomain("latitude outside projection band")
    dlon = np.mod(lon - cfg.origin.lon + 180.0, 360.0) - 180.0
    x = dlon * cfg._m_per_deg_lon
    y = (lat - cfg.origin.lat) * cfg._m_per_deg_lat
    s = cfg.edge_m
    fq = (_SQRT3 / 3.0 * x - y / 3.0) / s
    fr = (2.0 / 3.0 * y) / s
    fy = -fq - fr
    rq, rr, ry = np.round(fq), np.round(fr), np.round(fy)
    dq, dr, dy = np.abs(rq - fq), np.abs(rr - fr), np.abs(ry - fy)
    fix_q = (dq > dy) & (dq > dr)
    fix_r = ~fix_q & (dy <= dr)
    rq = np.where(fix_q, -ry - rr, rq)
    rr = np.where(fix_r, -rq - ry, rr)
    q = rq.astype(np.int64)
    r = rr.astype(np.int64)

    cx = s * _SQRT3 * (q + r / 2.0)
    cy = s * 1.5 * r
    d0 = (x - cx) ** 2 + (y - cy) ** 2
    tol = _TIE_EPS * s * s
    ambiguous = np.zeros(q.shape, dtype=bool)
    for ddq, ddr in _AXIAL_NEIGHBORS:
        nx = s * _SQRT3 * ((q + ddq) + (r + ddr) / 2.0)
        ny = s * 1.5 * (r + ddr)
        ambiguous |= (x - nx) ** 2 + (y - ny) ** 2 <= d0 + tol
    if ambiguous.any():
        for i in np.flatnonzero(ambiguous):
            c = _nearest_cell(float(x[i]), float(y[i]), cfg)
            q[i], r[i] = c.q, c.r
    return q, r


def neighbors(c: CellId) -> set[CellId]:
    return {CellId(c.q + dq, c.r + dr) for dq, dr in _AXIAL_NEIGHBORS}


def hex_distance(a: CellId, b: CellId) -> int:
    dq, dr = a.q - b.q, a.r - b.r
    return (abs(dq) + abs(dr) + abs(dq + dr)) // 2


def cell_center(c: CellId, cfg: HexGridConfig) -> GeoPoint:
    return cfg.unproject(*cfg.center_xy(c.q, c.r))


def cells_within(c: CellId, k: int) -> Iterable[CellId]:
    """All cells at hex distance <= k from ``c``."""
    for dq in range(-k, k + 1):
        for dr in range(max(-k, -dq - k), min(k, -dq + k) + 1):
            yield CellId(c.q + dq, c.r + dr)


def cells_in_disc(center: GeoPoint, radius_m: float, cfg: HexGridConfig) -> set[CellId]:
    """Cells whose center lies within ``radius_m`` (great-circle) of ``center``."""
    if radius_m < 0:
        raise ValueError("radius_m must be >= 0")
    home = cell_of(center, cfg)
    # ring k centers are >= 1.5*k*edge away in the plane; pad for projection error
    k = int(math.ceil((radius_m * 1.05 + cfg.edge_m) / (1.5 * cfg.edge_m))) + 1
    out = set()
    for c in cells_within(home, k):
        try:
            cc = cell_center(c, cfg)
        except OutOfProjectionDomain:
            continue
        if haversine_m(center, cc) <= radius_m:
            out.add(c)
    return out
