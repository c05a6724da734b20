import numpy as np
import pytest

from psipde.core import Grid, SimSpec, SystemKind
from psipde.simulate import simulate


@pytest.fixture(scope="session")
def burgers_grid() -> Grid:
    return Grid(-1.0, 1.0, 129, 0.0, 1.0, 101)


@pytest.fixture(scope="session")
def burgers_clean(burgers_grid):
    spec = SimSpec(SystemKind.BURGERS1D, burgers_grid, {"nu": 0.01 / np.pi})
    return simulate(spec)


@pytest.fixture(scope="session")
def kdv_clean():
    grid = Grid(-1.0, 1.0, 257, 0.0, 1.0, 201)
    spec = SimSpec(SystemKind.KDV, grid, {"advection": -1.0, "dispersion": -0.0025})
    return simulate(spec)


@pytest.fixture(scope="session")
def burgers2d_clean():
    grid = Grid(-1.0, 1.0, 65, 0.0, 1.0, 51, y_min=-1.0, y_max=1.0, n_y=65)
    spec = SimSpec(
        SystemKind.BURGERS2D, grid, {"advection": -1.0, "diffusion": 0.01}
    )
    return simulate(spec)
