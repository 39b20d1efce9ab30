import math
import os

for _var in ("OPENBLAS_NUM_THREADS", "OMP_NUM_THREADS", "MKL_NUM_THREADS"):
    os.environ.setdefault(_var, "1")

import pytest  # noqa: E402

from scanloc.dataset import ScanRecord  # noqa: E402
from scanloc.geometry import PlanarPose  # noqa: E402
from scanloc.synthworld import generate_scene, simulate_scan  # noqa: E402


@pytest.fixture(scope="session")
def scene():
    return generate_scene(3, extent=120.0, n_primitives=160)


@pytest.fixture(scope="session")
def line_records(scene):
    """Nine scans along the right-hand road straight, 1 m apart, varied headings."""
    recs = []
    for i in range(9):
        pose = PlanarPose(36.0, -4.0 + i, math.pi / 2 + 0.3 * math.sin(i))
        recs.append(ScanRecord(i, simulate_scan(scene, pose), pose, float(i)))
    return recs


def pytest_terminal_summary(terminalreporter):
    import sys

    mod = sys.modules.get("test_acceptance")
    if mod is not None and mod.RESULTS:
        terminalreporter.section("acceptance criteria")
        for line in mod.RESULTS:
            terminalreporter.write_line(line)
