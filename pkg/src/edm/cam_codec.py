"""Fixed 34-byte CAM wire profile and a streaming SUMO FCD reader.

Layout (little-endian), see docs/wire.md::

    0  magic        2B  0xCA 0x01
    2  station_id   u32
    6  gen_time_ms  u64
    14 lat          i32  1e-7 degree
    18 lon          i32  1e-7 degree
    22 station_type u8   ETSI station type code
    23 heading      u16  0.1 degree, < 3600
    25 speed        u16  0.01 m/s
    27 accel        i16  0.1 m/s^2
    29 reserved     5B   zero
"""

from __future__ import annotations

import enum
import math
import struct
import xml.etree.ElementTree as ET
from dataclasses import dataclass
from typing import IO, Iterator, Sequence

import numpy as np

from .geoindex import CellId, GeoPoint, HexGridConfig, OutOfProjectionDomain, cell_key, cell_of, cells_of_arrays

MAGIC = b"\xca\x01"
FRAME_SIZE = 34

_LAYOUT = struct.Struct("<2sIQiiBHHh5x")
assert _LAYOUT.size == FRAME_SIZE

WIRE_DTYPE = np.dtype(
    {
        "names": ["magic", "station_id", "gen_time_ms", "lat", "lon", "station_type", "heading", "speed", "accel"],
        "formats": ["<u2", "<u4", "<u8", "<i4", "<i4", "u1", "<u2", "<u2", "<i2"],
        "offsets": [0, 2, 6, 14, 18, 22, 23, 25, 27],
        "itemsize": FRAME_SIZE,
    }
)
_MAGIC_U16 = int.from_bytes(MAGIC, "little")


class StationType(enum.IntEnum):
    """Subset of ETSI station types, with their ETSI codes."""

    other = 0
    motorcycle = 4
    car = 5
    bus = 6
    truck = 8
    rsu = 15


_STATION_CODES = np.array(sorted(int(t) for t in StationType), dtype=np.uint8)


class CodecError(ValueError):
    pass


class InvalidField(CodecError):
    pass


class TruncatedFrame(CodecError):
    pass


class BadMagic(CodecError):
    pass


class FieldOutOfRange(CodecError):
    pass


@dataclass(frozen=True, slots=True)
class CamMessage:
    station_id: int
    gen_time_ms: int
    lat: float
    lon: float
    station_type: StationType = StationType.car
    heading_deg: float = 0.0
    speed_mps: float = 0.0
    accel_mps2: float = 0.0
    cell: CellId | None = None

    @property
    def position(self) -> GeoPoint:
        return GeoPoint(self.lat, self.lon)


def _quantize(m: CamMessage) -> tuple[int, int, int, int, int, int, int, int]:
    if not 0 <= m.station_id <= 0xFFFFFFFF:
        raise InvalidField(f"station_id {m.station_id}")
    if not 0 < m.gen_time_ms <= 0xFFFFFFFFFFFFFFFF:
        raise InvalidField(f"gen_time_ms {m.gen_time_ms}")
    for name in ("lat", "lon", "heading_deg", "speed_mps", "accel_mps2"):
        if not math.isfinite(getattr(m, name)):
            raise InvalidField(f"{name} is not finite")
    if not -90.0 <= m.lat <= 90.0:
        raise InvalidField(f"lat {m.lat}")
    if not -180.0 <= m.lon < 180.0:
        raise InvalidField(f"lon {m.lon}")
    if not 0.0 <= m.heading_deg < 360.0:
        raise InvalidField(f"heading {m.heading_deg}")
    try:
        stype = StationType(m.station_type)
    except ValueError:
        raise InvalidField(f"station_type {m.station_type!r}") from None
    speed = round(m.speed_mps * 100)
    if m.speed_mps < 0 or speed > 0xFFFF:
        raise InvalidField(f"speed {m.speed_mps}")
    accel = round(m.accel_mps2 * 10)
    if not -0x8000 <= accel <= 0x7FFF:
        raise InvalidField(f"accel {m.accel_mps2}")
    lon = round(m.lon * 1e7)
    if lon >= 1_800_000_000:  # rounds up onto the antimeridian
        lon -= 3_600_000_000
    heading = round(m.heading_deg * 10) % 3600
    return m.station_id, m.gen_time_ms, round(m.lat * 1e7), lon, int(stype), heading, speed, accel


def encode_cam(m: CamMessage) -> bytes:
    return _LAYOUT.pack(MAGIC, *_quantize(m))


def encode_batch(
    station_id, gen_time_ms, lat, lon, station_type, heading_deg, speed_mps, accel_mps2
) -> np.ndarray:
    """Vectorized :func:`encode_cam`; returns a ``WIRE_DTYPE`` array (``.tobytes()`` for the wire).

    Quantization and validation match the scalar encoder; any invalid row
    raises InvalidField for the whole batch.
    """
    sid = np.asarray(station_id, dtype=np.int64)
    gen = np.asarray(gen_time_ms, dtype=np.int64)
    lat = np.asarray(lat, dtype=np.float64)
    lon = np.asarray(lon, dtype=np.float64)
    stype = np.asarray(station_type, dtype=np.int64)
    heading = np.asarray(heading_deg, dtype=np.float64)
    speed = np.asarray(speed_mps, dtype=np.float64)
    accel = np.asarray(accel_mps2, dtype=np.float64)
    n = len(sid)
    out = np.zeros(n, dtype=WIRE_DTYPE)
    if not n:
        return out
    with np.errstate(invalid="ignore"):
        speed_q = np.round(speed * 100)
        accel_q = np.round(accel * 10)
        checks = (
            ("station_id", (sid >= 0) & (sid <= 0xFFFFFFFF)),
            ("gen_time_ms", gen > 0),
            ("lat", np.isfinite(lat) & (lat >= -90.0) & (lat <= 90.0)),
            ("lon", np.isfinite(lon) & (lon >= -180.0) & (lon < 180.0)),
            ("heading", np.isfinite(heading) & (heading >= 0.0) & (heading < 360.0)),
            ("station_type", np.isin(stype, _STATION_CODES)),
            ("speed", np.isfinite(speed) & (speed >= 0) & (speed_q <= 0xFFFF)),
            ("accel", np.isfinite(accel) & (accel_q >= -0x8000) & (accel_q <= 0x7FFF)),
        )
    for name, ok in checks:
        if not ok.all():
            i = int(np.flatnonzero(~ok)[0])
            raise InvalidField(f"{name} invalid in row {i}")
    lon_q = np.round(lon * 1e7).astype(np.int64)
    lon_q[lon_q >= 1_800_000_000] -= 3_600_000_000
    out["magic"] = _MAGIC_U16
    out["station_id"] = sid
    out["gen_time_ms"] = gen
    out["lat"] = np.round(lat * 1e7)
    out["lon"] = lon_q
    out["station_type"] = stype
    out["heading"] = np.round(heading * 10).astype(np.int64) % 3600
    out["speed"] = speed_q
    out["accel"] = accel_q
    return out


def decode_cam(data: bytes, grid: HexGridConfig) -> CamMessage:
    """Decode one frame; the cell is recomputed from the decoded position."""
    if len(data) != FRAME_SIZE:
        raise TruncatedFrame(f"expected {FRAME_SIZE} bytes, got {len(data)}")
    magic, sid, gen, lat_q, lon_q, stype, heading, speed, accel = _LAYOUT.unpack(data)
    if magic != MAGIC:
        raise BadMagic(magic.hex())
    if gen == 0:
        raise FieldOutOfRange("gen_time_ms is zero")
    if not -900_000_000 <= lat_q <= 900_000_000:
        raise FieldOutOfRange(f"lat quantum {lat_q}")
    if not -1_800_000_000 <= lon_q < 1_800_000_000:
        raise FieldOutOfRange(f"lon quantum {lon_q}")
    if heading >= 3600:
        raise FieldOutOfRange(f"heading quantum {heading}")
    try:
        station_type = StationType(stype)
    except ValueError:
        raise FieldOutOfRange(f"station type {stype}") from None
    lat, lon = lat_q / 1e7, lon_q / 1e7
    try:
        cell = cell_of(GeoPoint(lat, lon), grid)
    except OutOfProjectionDomain:
        raise FieldOutOfRange(f"latitude {lat} outside the grid domain") from None
    return CamMessage(sid, gen, lat, lon, station_type, heading / 10, speed / 100, accel / 10, cell)


@dataclass
class CamColumns:
    """Column-oriented batch of decoded CAMs (one numpy array per field)."""

    station_id: np.ndarray
    gen_time_ms: np.ndarray
    lat: np.ndarray
    lon: np.ndarray
    station_type: np.ndarray
    heading_deg: np.ndarray
    speed_mps: np.ndarray
    accel_mps2: np.ndarray
    cell_key: np.ndarray
    # position of each row in the frame list given to decode_batch
    source_index: np.ndarray | None = None

    def __len__(self) -> int:
        return len(self.station_id)


def decode_batch(frames: Sequence[bytes], grid: HexGridConfig) -> tuple[CamColumns, int]:
    """Decode many frames at once.

    Applies exactly the validation of :func:`decode_cam`; frames that would
    raise there are skipped here.  Returns the decoded columns and the number
    of rejected frames.
    """
    index = [i for i, f in enumerate(frames) if len(f) == FRAME_SIZE]
    if len(index) == len(frames):
        good = frames
        source = np.arange(len(frames))
    else:
        good = [frames[i] for i in index]
        source = np.array(index, dtype=np.int64)
    rejected = len(frames) - len(good)
    raw = np.frombuffer(b"".join(good), dtype=WIRE_DTYPE)
    lat_q = raw["lat"]
    lon_q = raw["lon"]
    ok = (
        (raw["magic"] == _MAGIC_U16)
        & (raw["gen_time_ms"] != 0)
        & (np.abs(lat_q.astype(np.int64)) < 850_000_000)
        & (lon_q >= -1_800_000_000)
        & (lon_q < 1_800_000_000)
        & (raw["heading"] < 3600)
        & np.isin(raw["station_type"], _STATION_CODES)
    )
    if not ok.all():
        rejected += int(np.count_nonzero(~ok))
        raw = raw[ok]
        source = source[ok]
    lat = raw["lat"] / 1e7
    lon = raw["lon"] / 1e7
    q, r = cells_of_arrays(lat, lon, grid)
    cols = CamColumns(
        station_id=raw["station_id"].astype(np.int64),
        gen_time_ms=raw["gen_time_ms"].astype(np.int64),
        lat=lat,
        lon=lon,
        station_type=raw["station_type"].copy(),
        heading_deg=raw["heading"] / 10.0,
        speed_mps=raw["speed"] / 100.0,
        accel_mps2=raw["accel"] / 10.0,
        cell_key=cell_key(q, r),
        source_index=source,
    )
    return cols, rejected


# --- SUMO floating car data -------------------------------------------------


class FcdError(ValueError):
    pass


class XmlSyntax(FcdError):
    pass


class MissingAttribute(FcdError):
    def __init__(self, name: str, where: str = ""):
        super().__init__(f"missing attribute {name!r}{' on ' + where if where else ''}")
        self.name = name


class NonMonotonicTime(FcdError):
    pass


class ProjectedCoordinates(FcdError):
    """The file carries projected x/y meters instead of geo coordinates."""


@dataclass(frozen=True)
class FcdVehicle:
    name: str
    lat: float
    lon: float
    heading_deg: float
    speed_mps: float


@dataclass(frozen=True)
class FcdTimestep:
    time_s: float
    vehicles: tuple[FcdVehicle, ...]


def _attr(elem: ET.Element, name: str, where: str) -> str:
    value = elem.get(name)
    if value is None:
        raise MissingAttribute(name, where)
    return value


def _float(elem: ET.Element, name: str, where: str) -> float:
    text = _attr(elem, name, where)
    try:
        value = float(text)
    except ValueError:
        raise FcdError(f"attribute {name}={text!r} on {where} is not a number") from None
    if not math.isfinite(value):
        raise FcdError(f"attribute {name}={text!r} on {where} is not finite")
    return value


def parse_fcd(stream: IO) -> Iterator[FcdTimestep]:
    """Yield timesteps from a geo-variant ``fcd-export`` document, streaming.

    ``x`` is longitude and ``y`` latitude.  Elements other than ``vehicle``
    inside a timestep (persons, containers) are ignored.
    """
    last_time = None
    depth = 0
    try:
        for event, elem in ET.iterparse(stream, events=("start", "end")):
            if event == "start":
                depth += 1
                if depth == 1 and elem.tag != "fcd-export":
                    raise FcdError(f"root element is <{elem.tag}>, expected <fcd-export>")
                continue
            depth -= 1
            if elem.tag != "timestep" or depth != 1:
                continue
            t = _float(elem, "time", "timestep")
            if last_time is not None and t <= last_time:
                raise NonMonotonicTime(f"timestep {t} after {last_time}")
            last_time = t
            seen = set()
            vehicles = []
            for v in elem.iter("vehicle"):
                name = _attr(v, "id", f"vehicle at t={t}")
                where = f"vehicle {name} at t={t}"
                if name in seen:
                    raise FcdError(f"duplicate vehicle {name!r} at t={t}")
                seen.add(name)
                lon = _float(v, "x", where)
                lat = _float(v, "y", where)
                if not (-90.0 <= lat <= 90.0 and -180.0 <= lon <= 180.0):
                    raise ProjectedCoordinates(
                        f"{where}: x={lon}, y={lat} are not lon/lat; export with --fcd-output.geo"
                    )
                vehicles.append(
                    FcdVehicle(name, lat, lon, _float(v, "angle", where) % 360.0, _float(v, "speed", where))
                )
            elem.clear()
            yield FcdTimestep(t, tuple(vehicles))
    except ET.ParseError as exc:
        raise XmlSyntax(str(exc)) from None


def fcd_accelerations(speeds: Sequence[float], times_s: Sequence[float]) -> list[float]:
    """Finite-difference acceleration; the first sample gets 0."""
    out = [0.0]
    for i in range(1, len(speeds)):
        dt = times_s[i] - times_s[i - 1]
        out.append((speeds[i] - speeds[i - 1]) / dt if dt > 0 else 0.0)
    return out
