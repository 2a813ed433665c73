import sys

import numpy as np
import pytest

from schloegl.actuation import build_actuators
from schloegl.fem import build_grid, neumann_eigenbasis
from schloegl.ocp import ObservationQ

Z0_SOURCE = "-4+8*cos(2*pi*x**2)"


@pytest.fixture(scope="session")
def desk():
    """Reference desk-scale setup: 251 nodes on (0, 1), nu = 0.1, four actuators at r = 0.1."""
    grid, ops = build_grid(251, 1.0, 0.1)
    fam = build_actuators(4, 0.1, grid, ops)
    Q = ObservationQ(ops, neumann_eigenbasis(grid, ops, 20))
    z0 = -4.0 + 8.0 * np.cos(2.0 * np.pi * grid.x ** 2)
    return grid, ops, fam, Q, z0


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance") or sys.modules.get("tests.test_acceptance")
    results = getattr(mod, "RESULTS", None)
    if not results:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(results):
        terminalreporter.write_line(results[key])
