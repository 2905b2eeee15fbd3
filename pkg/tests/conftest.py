import numpy as np
import pytest

from localpower.grid import GridSpec, make_grid, product_state
from localpower.potentials import PotentialAssembly


def gaussian(x, center=0.0, width=1.0, momentum=0.0):
    """Amplitude whose density has standard deviation ``width``."""
    return np.exp(-((x - center) ** 2) / (4.0 * width**2) + 1j * momentum * x)


@pytest.fixture
def grid1():
    return make_grid(GridSpec(1, 256, 40.0))


@pytest.fixture
def grid2():
    return make_grid(GridSpec(2, 64, 24.0))


@pytest.fixture
def free1(grid1):
    return PotentialAssembly(grid1)


@pytest.fixture
def packet1(grid1):
    return product_state(grid1, [gaussian(grid1.x, -1.0, 1.0, 0.7)])


@pytest.fixture
def pair_state(grid2):
    x = grid2.x
    return product_state(grid2, [gaussian(x, -2.5, 1.0, 0.4), gaussian(x, 2.0, 0.8, -0.3)])


@pytest.fixture(scope="session")
def box_state():
    from localpower.verify import box_ground_state

    return box_ground_state()


@pytest.fixture(scope="session")
def harmonic_state():
    from localpower.verify import harmonic_ground_state

    return harmonic_ground_state(128, 20.0)


ACCEPTANCE_LINES: list[str] = []


@pytest.fixture(scope="session")
def acceptance_log():
    return ACCEPTANCE_LINES


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
