import numpy as np
import pytest

from splatview import scenegen
from splatview.cloud import SphereCloud, radius_param_for
from splatview.geometry import Camera, look_at


def random_cloud(rng, n=200, dim=3, depth=(1.5, 2.5), radius=(0.005, 0.03)):
    pos = rng.uniform([-0.5, -0.5, depth[0]], [0.5, 0.5, depth[1]], (n, 3))
    return SphereCloud(pos, rng.uniform(0, 1, (n, dim)),
                       radius_param_for(rng.uniform(*radius, n)))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def cam():
    return Camera(80.0, 80.0, 32.0, 32.0, 64, 64)


@pytest.fixture
def cloud(rng):
    return random_cloud(rng)


@pytest.fixture(scope="session")
def fixture_small():
    return scenegen.make_fixture(7, n_targets=2, size=48)


@pytest.fixture(scope="session")
def side_camera():
    return Camera(80.0, 80.0, 32.0, 32.0, 64, 64, look_at((0.3, 0.1, -0.2), (0.0, 0.0, 2.0),
                                                            up=(0.0, -1.0, 0.0)))


ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[2].rstrip(":"))):
            terminalreporter.write_line(line)
