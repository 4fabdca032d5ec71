import numpy as np
import pytest

from ocorobust.convexsets import HPolytope, Zonotope
from ocorobust.plant import (
    ModelConfig,
    QuadraticCost,
    build_model,
    build_tightening,
    steady_state_manifold,
)


@pytest.fixture(scope="session")
def scalar_bundle():
    """1-D plant: A=1, B=1, K=-0.5, box sets."""
    cfg = ModelConfig(
        a=[[1.0]], b=[[1.0]], k=[[-0.5]], mu=2,
        x_set=HPolytope.box([-2.0], [2.0]),
        u_set=HPolytope.box([-1.0], [1.0]),
        w_set=Zonotope.box([0.1]),
        v_set=Zonotope.box([0.05]),
    )
    model = build_model(cfg)
    tables = build_tightening(model)
    manifold = steady_state_manifold(model, model.p_rpi, shrink=0.99)
    return model, tables, manifold


@pytest.fixture(scope="session")
def di_bundle():
    """Disturbed double integrator, the generic 2-state test system."""
    cfg = ModelConfig(
        a=[[1.0, 0.1], [0.0, 1.0]], b=[[0.005], [0.1]], k=[[-1.5, -2.425]], mu=6,
        x_set=HPolytope.box([-3.0, -2.0], [3.0, 2.0]),
        u_set=HPolytope.box([-4.0], [4.0]),
        w_set=Zonotope.box([0.02, 0.02]),
        v_set=Zonotope.box([0.01, 0.01]),
    )
    model = build_model(cfg)
    tables = build_tightening(model)
    manifold = steady_state_manifold(model, model.p_rpi, shrink=0.99)
    return model, tables, manifold


@pytest.fixture(scope="session")
def di_cost():
    return QuadraticCost([[1.0, 0.0], [0.0, 1.0]], [[0.5]], [-0.6, 0.0], [0.0])


def random_spd(rng, n, scale=1.0):
    m = rng.standard_normal((n, n))
    return m.T @ m + scale * np.eye(n)


def box_vertices(z):
    """All corners of a zonotope (exponential; tests keep the order small)."""
    q = z.order
    pts = []
    for mask in range(2 ** q):
        signs = np.array([1.0 if mask & (1 << j) else -1.0 for j in range(q)])
        pts.append(z.center + z.generators @ signs)
    return np.asarray(pts)
