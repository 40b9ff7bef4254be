import numpy as np
import pytest
from hypothesis import settings

from stochdecomp.microgrid import shipped_instance
from stochdecomp.model import (
    CouplingSubspace,
    DiscreteDistribution,
    Lattice,
    NoiseModel,
    ProblemInstance,
    TimeGrid,
    UnitSpec,
)

settings.register_profile("default", max_examples=40, deadline=None)
settings.load_profile("default")


def toy_unit(name="u", controls=(-1.0, 1.0, 3), cost=None, theta=None, dyn=None, final=None,
             states=(0.0, 1.0, 2), coupling_dim=1):
    """Scalar unit on small lattices; defaults: L = u^2, Theta = u, x' = x, K = 0."""
    cost = cost or (lambda t, x, u, w: np.asarray(u, float)[..., 0] ** 2 + 0 * np.asarray(w)[..., 0])
    theta = theta or (lambda t, x, u: np.asarray(u, float))
    dyn = dyn or (lambda t, x, u, w: np.broadcast_arrays(np.asarray(x, float), np.asarray(w, float))[0])
    final = final or (lambda x: np.zeros(np.shape(x)[:-1]))
    return UnitSpec(name, Lattice(*states), Lattice(*controls), dyn, cost, final, theta,
                    coupling_dim)


def toy_instance(units, horizon=1, coupling=None, noise=None, x0=None):
    dims = [u.coupling_dim for u in units]
    if coupling is None:
        coupling = CouplingSubspace.uncoupled(dims)
    if noise is None:
        noise = [[DiscreteDistribution.point(0.0)] * horizon for _ in units]
    if x0 is None:
        x0 = [[u.states_at(0).lower[0]] for u in units]
    return ProblemInstance(TimeGrid(horizon), units, NoiseModel(noise), coupling, x0)


@pytest.fixture(scope="session")
def micro2():
    return shipped_instance("micro-2")


@pytest.fixture(scope="session")
def micro3():
    return shipped_instance("micro-3")


@pytest.fixture(scope="session")
def meso6():
    return shipped_instance("meso-6")
