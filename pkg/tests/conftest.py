import numpy as np
import pytest

from detlab.equilibrium import equilibrium_qp
from detlab.weights import GINIBRE, Circle, Disk, build_grid


@pytest.fixture(scope="session")
def disk2_64():
    return build_grid(Disk(0, 2.0), 64, "area")


@pytest.fixture(scope="session")
def disk2_128():
    return build_grid(Disk(0, 2.0), 128, "area")


@pytest.fixture(scope="session")
def circle_256():
    return build_grid(Circle(0, 1.0), 256, "arclength")


@pytest.fixture(scope="session")
def ginibre_eq_64(disk2_64):
    return equilibrium_qp(disk2_64, GINIBRE, "fs", tol=1e-9)


@pytest.fixture(scope="session")
def ginibre_eq_128(disk2_128):
    return equilibrium_qp(disk2_128, GINIBRE, "fs", tol=1e-6)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


ACCEPTANCE_LINES = {}


@pytest.fixture
def criterion():
    """Record one PASS/FAIL line for an acceptance criterion."""
    def record(number, ok, detail):
        ACCEPTANCE_LINES[number] = f"criterion {number}: {'PASS' if ok else 'FAIL'}  {detail}"
        print(ACCEPTANCE_LINES[number])
        return ok
    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for n in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(ACCEPTANCE_LINES[n])
