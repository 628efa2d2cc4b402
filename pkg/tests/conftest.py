import math

import pytest

from edm.geoindex import GeoPoint, HexGridConfig
from edm.mec.descriptor import MecDescriptor

ORIGIN = GeoPoint(45.0, 7.0)
M_PER_DEG = 6371008.8 * math.pi / 180.0


def east_of(p: GeoPoint, meters: float) -> GeoPoint:
    """Point ``meters`` due east of ``p`` (small-distance approximation)."""
    return GeoPoint(p.lat, p.lon + meters / (M_PER_DEG * math.cos(math.radians(p.lat))))


def north_of(p: GeoPoint, meters: float) -> GeoPoint:
    return GeoPoint(p.lat + meters / M_PER_DEG, p.lon)


def mec(mec_id: str, position: GeoPoint, r_opt=500.0, r_oper=800.0, endpoint="127.0.0.1:1") -> MecDescriptor:
    return MecDescriptor(mec_id, position, r_opt, r_oper, endpoint)


@pytest.fixture
def grid() -> HexGridConfig:
    return HexGridConfig(ORIGIN)


# one line per acceptance criterion, printed at the end of the run
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1])):
            terminalreporter.write_line(line)
