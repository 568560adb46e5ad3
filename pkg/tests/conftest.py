import numpy as np
import pytest

from magelastic.mesh import build_mesh
from magelastic.optim import project_saturation


def random_state(rng, mesh, amp=0.03):
    """Nodal y near the identity (Dirichlet nodes untouched) and random unit M."""
    y = mesh.nodes + amp * rng.standard_normal(mesh.nodes.shape) * mesh.h.min()
    y[mesh.dirichlet_mask] = mesh.nodes[mesh.dirichlet_mask]
    M = project_saturation(rng.standard_normal(mesh.nodes.shape))
    return y, M


def tangent_direction(rng, M):
    v = rng.standard_normal(M.shape)
    return v - np.sum(v * M, axis=1, keepdims=True) * M


def central_difference(f, x, v, eps=1e-6):
    return (f(x + eps * v) - f(x - eps * v)) / (2 * eps)


def rel_err(a, b):
    return abs(a - b) / max(abs(a), abs(b), 1e-300)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture
def unit_mesh():
    return build_mesh((1.0, 1.0), (4, 4))


ALL_FACES = ("x0-", "x0+", "x1-", "x1+")


def toy_problem(H_c=0.2, h=(0.3, 0.6), shear=0.4, M_prev=(1.0, 0.0)):
    """One clamped, sheared element with uniform fields and no stray field.

    Only the angle of the (uniform) magnetization is free, so the exact
    incremental objective can be brute-forced over a dense angular grid.
    """
    from magelastic.evolution import Model
    from magelastic.material import Loads, MaterialParams
    from magelastic.mesh import State, uniform_magnetization

    mesh = build_mesh((1.0, 1.0), (1, 1), dirichlet=ALL_FACES)
    y = mesh.nodes.copy()
    y[:, 0] += shear * mesh.nodes[:, 1]
    params = MaterialParams(beta1=0.5, beta2=0.3, gamma=0.2, H_c=H_c)
    model = Model(mesh, params, Loads(2, h=[(0.0, list(h))]))
    q_prev = State(mesh, y, uniform_magnetization(mesh, M_prev))
    return model, q_prev


def toy_grid_minimum(model, q_prev, t=1.0, n=10_000):
    """Minimum of E(t, q) + D(q, q_prev) over uniform M at n equispaced angles."""
    from magelastic.evolution import dissipation

    best = np.inf
    for th in np.arange(n) * (2 * np.pi / n):
        M = np.tile([np.cos(th), np.sin(th)], (model.mesh.n_nodes, 1))
        q = q_prev.replace(M=M)
        best = min(best, model.energy(t, q) + dissipation(q, q_prev, model.params.H_c))
    return best


_ACCEPTANCE = {}


@pytest.fixture(scope="session")
def acceptance():
    """Criterion number -> (passed, detail); printed in the terminal summary."""
    return _ACCEPTANCE


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.write_sep("=", "acceptance criteria")
    for n in range(1, 13):
        ok, detail = _ACCEPTANCE.get(n, (False, "not evaluated (test errored or was deselected)"))
        terminalreporter.write_line(f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}")
