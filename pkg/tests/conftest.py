import functools
import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from krflow import flow  # noqa: E402
from krflow import geometry as geo  # noqa: E402

# flow runs shared by the acceptance and module tests
RUNS = {
    "cp1": flow.FlowConfig(preset="cp1", amplitude=0.2, t_max=30.0, dt=0.05, cadence=10),
    "cp1_257": flow.FlowConfig(preset="cp1", N=257, amplitude=0.2, t_max=30.0, dt=0.05, cadence=10),
    "blowup3": flow.FlowConfig(preset="blowup3", amplitude=0.2, symmetrize=True, t_max=30.0, dt=0.05, cadence=20),
    "p1xp1": flow.FlowConfig(preset="p1xp1", amplitude=0.2, symmetrize=True, t_max=30.0, dt=0.05, cadence=20),
    "blowup1": flow.FlowConfig(preset="blowup1", symmetrize=True, t_max=30.0, dt=0.05, cadence=20),
}
CONVERGING = ("cp1", "cp1_257", "blowup3", "p1xp1")


@functools.lru_cache(maxsize=None)
def flow_run(name):
    return flow.run(RUNS[name])


@pytest.fixture(scope="session")
def runs():
    return flow_run


@functools.lru_cache(maxsize=None)
def problem(preset, N=None, order=6, reference="guillemin", L=None, tail_tol=1e-5):
    model = geo.build_model(preset)
    grid = geo.make_grid(model, L, N, order)
    return model, grid, geo.build_reference(model, grid, reference, tail_tol)


@pytest.fixture
def setup():
    return problem


def random_potential(grid, ref, rng, amplitude=0.1, n_bumps=3):
    """Symmetrized admissible bump potential with random shape."""
    n = grid.n
    p = geo.gaussian_bumps(grid, rng.uniform(-1.5, 1.5, (n_bumps, n)), rng.uniform(1.0, 1.6, n_bumps),
                           rng.uniform(-1.0, 1.0, n_bumps))
    p = geo.symmetrize(p, ref.perms)
    p *= amplitude / np.abs(p).max()
    return p * geo.admissible_scale(p, ref, 0.5)
