import numpy as np
import pytest

from polarcontrol.dynamics import SystemParams
from polarcontrol.spectral import PotentialFn, SpatialGrid


@pytest.fixture(scope="session")
def grid():
    return SpatialGrid(1999)


@pytest.fixture(scope="session")
def x(grid):
    return PotentialFn.builtin("linear 1", grid)


@pytest.fixture(scope="session")
def x2(grid):
    return PotentialFn.builtin("quadratic 1", grid)


@pytest.fixture(scope="session")
def zero(grid):
    return PotentialFn.zero(grid)


@pytest.fixture(scope="session")
def tilted(grid, x, x2):
    """V = 5x, mu1 = x, mu2 = x^2 at K = 12: the workhorse system of the test suite."""
    return SystemParams.build(PotentialFn.builtin("linear 5", grid), x, x2, 12)


@pytest.fixture(scope="session")
def free_dipole(zero, x, x2):
    """V = 0, mu1 = x, mu2 = x^2 at K = 12."""
    return SystemParams.build(zero, x, x2, 12)


@pytest.fixture
def rng():
    return np.random.default_rng(20240601)
