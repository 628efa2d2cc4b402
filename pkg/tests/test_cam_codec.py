import io
import os
import random
import time

import numpy as np
import pytest

from oracles import assert_round_trip, random_message
from edm.cam_codec import (
    FRAME_SIZE,
    MAGIC,
    BadMagic,
    CamMessage,
    CodecError,
    FcdError,
    FieldOutOfRange,
    InvalidField,
    MissingAttribute,
    NonMonotonicTime,
    ProjectedCoordinates,
    StationType,
    TruncatedFrame,
    XmlSyntax,
    decode_batch,
    decode_cam,
    encode_batch,
    encode_cam,
    fcd_accelerations,
    parse_fcd,
)
from edm.geoindex import GeoPoint, HexGridConfig, cell_key, cell_of

WORLD = HexGridConfig(GeoPoint(0.0, 0.0))


def test_frame_size_and_zero_fields():
    m = CamMessage(7, 1, 0.0, 0.0, StationType.car, 0.0, 0.0, 0.0)
    b = encode_cam(m)
    assert len(b) == FRAME_SIZE == 34
    assert b[:2] == MAGIC
    assert b[14:22] == bytes(8)  # lat, lon
    assert b[23:29] == bytes(6)  # heading, speed, accel
    assert b[29:] == bytes(5)  # reserved


def test_bit_exact_layout():
    m = CamMessage(0x01020304, 0x1122334455667788, 45.1234567, -7.5, StationType.bus, 90.0, 12.34, -1.5)
    b = encode_cam(m)
    assert b.hex() == (
        "ca01" "04030201" "8877665544332211"
        + (451234567).to_bytes(4, "little", signed=True).hex()
        + (-75000000).to_bytes(4, "little", signed=True).hex()
        + "06" + (900).to_bytes(2, "little").hex() + (1234).to_bytes(2, "little").hex()
        + (-15).to_bytes(2, "little", signed=True).hex() + "00" * 5
    )


def test_round_trip_10000_random_messages():
    rng = random.Random(11)
    for _ in range(10_000):
        m = random_message(rng)
        d = decode_cam(encode_cam(m), WORLD)
        assert_round_trip(m, d)
        assert d.cell == cell_of(GeoPoint(d.lat, d.lon), WORLD)


def test_cell_recomputed_not_trusted():
    grid = HexGridConfig(GeoPoint(45.0, 7.0))
    m = CamMessage(1, 5, 45.001, 7.002, cell=None)
    d = decode_cam(encode_cam(m), grid)
    assert d.cell == cell_of(GeoPoint(d.lat, d.lon), grid)


def test_heading_rounding_wraps_to_zero():
    d = decode_cam(encode_cam(CamMessage(1, 1, 0.0, 0.0, heading_deg=359.97)), WORLD)
    assert d.heading_deg == 0.0


@pytest.mark.parametrize(
    "kw",
    [
        {"station_id": -1},
        {"station_id": 2**32},
        {"gen_time_ms": 0},
        {"lat": 90.5},
        {"lon": 180.0},
        {"heading_deg": 360.0},
        {"heading_deg": -0.1},
        {"speed_mps": -1.0},
        {"speed_mps": float("nan")},
        {"speed_mps": 700.0},
        {"accel_mps2": 4000.0},
        {"station_type": 99},
    ],
)
def test_invalid_fields_rejected(kw):
    base = dict(station_id=1, gen_time_ms=1, lat=0.0, lon=0.0)
    base.update(kw)
    with pytest.raises(InvalidField):
        encode_cam(CamMessage(**base))
    with pytest.raises(InvalidField):
        encode_batch(*([v] for v in (
            base["station_id"], base["gen_time_ms"], base["lat"], base["lon"],
            int(base.get("station_type", StationType.car)), base.get("heading_deg", 0.0),
            base.get("speed_mps", 0.0), base.get("accel_mps2", 0.0),
        )))


def test_decode_errors():
    good = encode_cam(CamMessage(1, 1, 1.0, 1.0))
    with pytest.raises(TruncatedFrame):
        decode_cam(good[:33], WORLD)
    with pytest.raises(TruncatedFrame):
        decode_cam(good + b"\0", WORLD)
    with pytest.raises(BadMagic):
        decode_cam(b"\xca\x02" + good[2:], WORLD)
    bad_heading = good[:23] + (3600).to_bytes(2, "little") + good[25:]
    with pytest.raises(FieldOutOfRange):
        decode_cam(bad_heading, WORLD)


def test_fuzz_random_bytes_never_crash():
    rng = np.random.default_rng(12)
    blobs = [rng.bytes(FRAME_SIZE) for _ in range(5000)]
    # half of them get a valid magic so deeper checks run
    blobs += [MAGIC + rng.bytes(FRAME_SIZE - 2) for _ in range(5000)]
    ok = 0
    for b in blobs:
        try:
            decode_cam(b, WORLD)
            ok += 1
        except CodecError:
            pass
    cols, rejected = decode_batch(blobs, WORLD)
    assert len(cols) == ok and rejected == len(blobs) - ok


def test_batch_decode_matches_scalar():
    rng = random.Random(13)
    frames = [encode_cam(random_message(rng)) for _ in range(2000)]
    frames[5] = frames[5][:20]
    frames[9] = b"\0" * FRAME_SIZE
    cols, rejected = decode_batch(frames, WORLD)
    assert rejected == 2
    expected = []
    for i, f in enumerate(frames):
        try:
            expected.append((i, decode_cam(f, WORLD)))
        except CodecError:
            pass
    assert cols.source_index.tolist() == [i for i, _ in expected]
    for k, (_, m) in enumerate(expected):
        assert cols.station_id[k] == m.station_id
        assert cols.gen_time_ms[k] == m.gen_time_ms
        assert cols.lat[k] == m.lat and cols.lon[k] == m.lon
        assert cols.heading_deg[k] == m.heading_deg
        assert cols.speed_mps[k] == m.speed_mps
        assert cols.accel_mps2[k] == m.accel_mps2
        assert cols.cell_key[k] == cell_key(m.cell.q, m.cell.r)


def test_encode_batch_matches_scalar():
    rng = random.Random(14)
    msgs = [random_message(rng) for _ in range(3000)]
    arr = encode_batch(
        [m.station_id for m in msgs], [m.gen_time_ms for m in msgs], [m.lat for m in msgs],
        [m.lon for m in msgs], [int(m.station_type) for m in msgs], [m.heading_deg for m in msgs],
        [m.speed_mps for m in msgs], [m.accel_mps2 for m in msgs],
    )
    assert arr.tobytes() == b"".join(encode_cam(m) for m in msgs)


def test_decode_1000_within_budget():
    rng = random.Random(15)
    grid = HexGridConfig(GeoPoint(45.0, 7.0))
    frames = [encode_cam(random_message(rng, lat_band=50.0)) for _ in range(1000)]
    decode_batch(frames, grid)
    best = float("inf")
    for _ in range(5):
        t0 = time.perf_counter()
        decode_batch(frames, grid)
        best = min(best, (time.perf_counter() - t0) * 1e3)
    assert best <= 25.0


# -- FCD ---------------------------------------------------------------------

ONE = """<?xml version="1.0"?>
<fcd-export>
  <timestep time="0.00">
    <vehicle id="veh0" x="13.4" y="52.0" angle="90.0" type="car" speed="8.0" pos="1" lane="a" slope="0"/>
  </timestep>
</fcd-export>
"""


def test_fcd_single_record():
    steps = list(parse_fcd(io.StringIO(ONE)))
    assert len(steps) == 1
    v = steps[0].vehicles[0]
    assert (steps[0].time_s, v.name, v.lat, v.lon, v.heading_deg, v.speed_mps) == (0.0, "veh0", 52.0, 13.4, 90.0, 8.0)


def test_fcd_empty_document():
    assert list(parse_fcd(io.StringIO("<fcd-export/>"))) == []


def test_fcd_finite_difference_acceleration():
    doc = "<fcd-export>" + "".join(
        f'<timestep time="{t}"><vehicle id="a" x="13.4" y="52.0" angle="0" speed="{s}"/></timestep>'
        for t, s in ((0.0, 10.0), (0.1, 11.0), (0.2, 12.5))
    ) + "</fcd-export>"
    steps = list(parse_fcd(io.StringIO(doc)))
    speeds = [s.vehicles[0].speed_mps for s in steps]
    acc = fcd_accelerations(speeds, [s.time_s for s in steps])
    assert acc[1:] == pytest.approx([10.0, 15.0])


def test_fcd_errors():
    with pytest.raises(XmlSyntax):
        list(parse_fcd(io.StringIO("<fcd-export><timestep time='0'>")))
    with pytest.raises(MissingAttribute) as exc:
        list(parse_fcd(io.StringIO('<fcd-export><timestep time="0"><vehicle id="a" x="1" y="2" angle="0"/></timestep></fcd-export>')))
    assert exc.value.name == "speed"
    with pytest.raises(NonMonotonicTime):
        list(parse_fcd(io.StringIO('<fcd-export><timestep time="1"/><timestep time="1"/></fcd-export>')))
    with pytest.raises(ProjectedCoordinates):
        list(parse_fcd(io.StringIO('<fcd-export><timestep time="0"><vehicle id="a" x="4512.3" y="881.0" angle="0" speed="1"/></timestep></fcd-export>')))
    with pytest.raises(FcdError):
        list(parse_fcd(io.StringIO("<other/>")))


def test_fcd_is_streaming():
    # the first timestep is yielded before the parser reaches the broken tail
    doc = '<fcd-export><timestep time="0"><vehicle id="a" x="1" y="2" angle="0" speed="1"/></timestep><timestep time="1"><oops'
    it = parse_fcd(io.StringIO(doc))
    assert next(it).time_s == 0.0
    with pytest.raises(XmlSyntax):
        next(it)


def test_fcd_fuzz_only_typed_errors():
    rng = random.Random(16)
    base = ONE.encode()
    for _ in range(500):
        b = bytearray(base)
        for _ in range(rng.randint(1, 8)):
            b[rng.randrange(len(b))] = rng.randrange(256)
        try:
            list(parse_fcd(io.BytesIO(bytes(b))))
        except FcdError:
            pass


def test_example_fcd_file_parses():
    path = os.path.join(os.path.dirname(__file__), "data", "routes.xml")
    steps = list(parse_fcd(open(path, "rb")))
    assert len(steps) > 1
    assert {v.name for s in steps for v in s.vehicles} == {"a", "b", "c"}
