import math
import random

import numpy as np
import pytest

from conftest import ORIGIN, east_of
from oracles import containing_cells, random_points_in_disc
from edm.geoindex import (
    CellId,
    GeoPoint,
    HexGridConfig,
    OutOfProjectionDomain,
    cell_center,
    cell_of,
    cells_in_disc,
    cells_of_arrays,
    cells_within,
    haversine_m,
    hex_distance,
    neighbors,
)


def test_origin_maps_to_origin_cell(grid):
    assert cell_of(ORIGIN, grid) == CellId(0, 0)


def test_points_one_meter_apart_share_cell(grid):
    c = cell_center(CellId(4, -3), grid)
    assert cell_of(c, grid) == cell_of(east_of(c, 1.0), grid)


def test_containment_against_point_in_polygon_oracle(grid):
    for p in random_points_in_disc(ORIGIN, 2000.0, 10_000, seed=1):
        got = cell_of(p, grid)
        x, y = grid.project(p)
        holders = containing_cells(x, y, grid)
        assert holders, p
        assert got in holders
        # ties go to the smaller encoding
        assert got == min(holders, key=lambda c: c.encoded)


def test_edge_points_tie_break_to_smaller_encoding(grid):
    # midpoint between the centers of (0,0) and (1,0) lies on their shared edge
    ax, ay = grid.center_xy(0, 0)
    bx, by = grid.center_xy(1, 0)
    p = grid.unproject((ax + bx) / 2, (ay + by) / 2)
    assert cell_of(p, grid) == min(CellId(0, 0), CellId(1, 0), key=lambda c: c.encoded)
    # a hexagon vertex is shared by three cells
    vx, vy = grid.hexagon_xy(CellId(0, 0))[1]
    x, y = grid.project(grid.unproject(vx, vy))
    holders = containing_cells(x, y, grid)
    assert len(holders) == 3
    assert cell_of(grid.unproject(vx, vy), grid) == min(holders, key=lambda c: c.encoded)


def test_vectorized_lookup_matches_scalar(grid):
    pts = random_points_in_disc(ORIGIN, 5000.0, 5000, seed=2)
    # add exact edge midpoints so the tie path is exercised
    for q in range(-3, 3):
        ax, ay = grid.center_xy(q, 0)
        bx, by = grid.center_xy(q + 1, 0)
        pts.append(grid.unproject((ax + bx) / 2, (ay + by) / 2))
    q, r = cells_of_arrays([p.lat for p in pts], [p.lon for p in pts], grid)
    for p, qq, rr in zip(pts, q.tolist(), r.tolist()):
        assert CellId(qq, rr) == cell_of(p, grid)


def test_out_of_projection_domain(grid):
    with pytest.raises(OutOfProjectionDomain):
        cell_of(GeoPoint(85.0, 0.0), grid)
    with pytest.raises(OutOfProjectionDomain):
        cell_of(GeoPoint(-89.0, 0.0), grid)
    with pytest.raises(OutOfProjectionDomain):
        HexGridConfig(GeoPoint(86.0, 0.0))


def test_geopoint_validation_and_normalization():
    assert GeoPoint(0.0, 180.0).lon == -180.0
    for bad in ((91.0, 0.0), (0.0, 181.0), (math.nan, 0.0), (0.0, math.inf)):
        with pytest.raises(ValueError):
            GeoPoint(*bad)


def test_neighbors_of_origin():
    assert neighbors(CellId(0, 0)) == {
        CellId(1, 0), CellId(-1, 0), CellId(0, 1), CellId(0, -1), CellId(1, -1), CellId(-1, 1)
    }


def test_neighbor_symmetry_and_irreflexivity():
    rng = random.Random(3)
    for _ in range(1000):
        c = CellId(rng.randint(-10_000, 10_000), rng.randint(-10_000, 10_000))
        ns = neighbors(c)
        assert len(ns) == 6
        assert c not in ns
        for n in ns:
            assert c in neighbors(n)
            assert hex_distance(c, n) == 1


def test_center_round_trip(grid):
    rng = random.Random(4)
    for _ in range(1000):
        # cells within 50 km of the origin
        c = CellId(rng.randint(-380, 380), rng.randint(-380, 380))
        x, y = grid.center_xy(c.q, c.r)
        if math.hypot(x, y) > 50_000:
            continue
        assert cell_of(cell_center(c, grid), grid) == c


def test_adjacent_center_spacing(grid):
    d = grid.center_spacing_m
    rng = random.Random(5)
    for _ in range(200):
        c = CellId(rng.randint(-200, 200), rng.randint(-200, 200))
        for n in neighbors(c):
            dist = haversine_m(cell_center(c, grid), cell_center(n, grid))
            assert 0.9 * d <= dist <= 1.1 * d


def test_default_cell_geometry(grid):
    area = 3 * math.sqrt(3) / 2 * grid.edge_m ** 2
    assert area == pytest.approx(15000.0)
    # flat-to-flat width is the "distance between edges"; stays under 135 m
    assert grid.center_spacing_m == pytest.approx(131.6, abs=0.1)
    assert grid.center_spacing_m <= 135.0
    # corner-to-corner span of the planar hexagon
    assert grid.vertex_diameter_m == pytest.approx(151.96, abs=0.05)


def test_measured_cell_width_on_the_ground(grid):
    # the projected hexagon keeps its flat-to-flat width on the sphere within 0.5 %
    c = CellId(30, -12)
    v = grid.hexagon_xy(c)
    mid = lambda a, b: grid.unproject((a[0] + b[0]) / 2, (a[1] + b[1]) / 2)
    for i in range(3):
        w = haversine_m(mid(v[i], v[i + 1]), mid(v[i + 3], v[(i + 4) % 6]))
        assert w == pytest.approx(grid.center_spacing_m, rel=5e-3)


def test_encoding_examples_and_bijection():
    assert CellId(3, -2).encoded == "h3_m2"
    assert CellId(0, 0).encoded == "h0_0"
    assert CellId(36, -37).encoded == "h10_m11"
    # 22 is the digit "m"; the leading zero keeps it apart from the sign
    assert CellId(22, -22).encoded == "h0m_m0m"
    assert CellId.parse("hm2_0") == CellId(-2, 0)
    assert CellId.parse("h0m2_0") == CellId(794, 0)
    rng = random.Random(6)
    seen = {}
    for _ in range(5000):
        c = CellId(rng.randint(-2**31, 2**31 - 1), rng.randint(-2**31, 2**31 - 1))
        s = c.encoded
        assert not set(s) & {"/", "+", "#"}
        assert s == s.lower()
        assert CellId.parse(s) == c
        assert seen.setdefault(s, c) == c
        assert CellId.from_key(c.key) == c


@pytest.mark.parametrize("text", ["", "h", "h1", "x1_2", "h1_2_3", "hm0_1", "h01_1", "h1_Z", "h1_", "hm_0", "h00m_0", "hm00m_1", "h0n_0"])
def test_parse_rejects_non_canonical(text):
    with pytest.raises(ValueError):
        CellId.parse(text)


def test_cell_keys_order_and_fit_int64():
    keys = np.array([CellId(q, r).key for q in (-2**31, -1, 0, 1, 2**31 - 1) for r in (-2**31, 0, 2**31 - 1)])
    assert keys.dtype == np.int64
    assert len(set(keys.tolist())) == len(keys)


def test_determinism_across_instances():
    a = HexGridConfig(GeoPoint(45.0, 7.0))
    b = HexGridConfig(GeoPoint(45.0, 7.0))
    for p in random_points_in_disc(ORIGIN, 3000.0, 500, seed=7):
        assert cell_of(p, a).encoded.encode() == cell_of(p, b).encoded.encode()


def test_disc_degenerate_radius(grid):
    c = cell_center(CellId(2, 1), grid)
    assert cells_in_disc(c, 0.0, grid) == {CellId(2, 1)}
    off = east_of(c, 10.0)
    assert cells_in_disc(off, 0.0, grid) == set()
    with pytest.raises(ValueError):
        cells_in_disc(c, -1.0, grid)


def test_disc_matches_exhaustive_scan(grid):
    for radius in (500.0, 800.0, 1234.0):
        got = cells_in_disc(ORIGIN, radius, grid)
        k = int(radius / grid.center_spacing_m) + 4
        expect = {c for c in cells_within(CellId(0, 0), k) if haversine_m(ORIGIN, cell_center(c, grid)) <= radius}
        assert got == expect


def test_disc_500m_count(grid):
    # area ratio pi*500^2/15000 gives about 52 cells; the exact count at the default grid is 55
    n = len(cells_in_disc(ORIGIN, 500.0, grid))
    assert n == 55
    assert abs(n - math.pi * 500.0 ** 2 / 15000.0) < 8


def test_disc_monotone(grid):
    centre = east_of(ORIGIN, 333.0)
    small = cells_in_disc(centre, 400.0, grid)
    large = cells_in_disc(centre, 800.0, grid)
    assert small <= large
    prev = set()
    for r in range(0, 1000, 50):
        cur = cells_in_disc(centre, float(r), grid)
        assert prev <= cur
        prev = cur


def test_geopoint_keeps_in_range_coordinates_exact():
    for lon in (6.996, -179.99999, 0.1, 179.9999999):
        assert GeoPoint(12.5, lon).lon == lon
    assert GeoPoint(0.0, 180.0).lon == -180.0
