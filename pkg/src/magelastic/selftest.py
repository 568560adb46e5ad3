"""Fast invariant checks bundled with the package (``magelastic selftest``)."""

from __future__ import annotations

import numpy as np

from .evolution import dissipation
from .magnetostatics import solve_potential
from .material import MaterialParams, elastic_density, elastic_terms, exchange_terms
from .mesh import (
    State,
    box_around,
    build_mesh,
    ciarlet_necas_residual,
    identity_deformation,
    rasterize_magnetization,
    uniform_magnetization,
)
from .optim import penalty_terms, project_saturation


def random_rotation(rng, d):
    Q, R = np.linalg.qr(rng.standard_normal((d, d)))
    Q = Q * np.sign(np.diag(R))
    if np.linalg.det(Q) < 0:
        Q[:, 0] = -Q[:, 0]
    return Q


def wrapped_strip(n=24, turns=1.5, radius=2.0):
    """A strip wound more than once around a circle: locally orientation preserving, globally folded."""
    mesh = build_mesh((2 * np.pi * radius * turns, 0.5), (n, 2))
    x = mesh.nodes
    theta = x[:, 0] / radius
    r = radius - x[:, 1]
    y = np.stack([r * np.cos(theta), r * np.sin(theta)], axis=1)
    return mesh, y


def _check_frame(rng, n=1000):
    p = MaterialParams(beta1=0.3, beta2=0.2, gamma=0.5)
    worst = 0.0
    for _ in range(n):
        F = np.eye(2) + 0.3 * rng.standard_normal((2, 2))
        if np.linalg.det(F) <= 0.2:
            continue
        m = project_saturation(rng.standard_normal((1, 2)))[0]
        R = random_rotation(rng, 2)
        w1 = elastic_density(F, m, p)[0]
        w2 = elastic_density(R @ F, R @ m, p)[0]
        worst = max(worst, abs(w1 - w2) / (1 + abs(w1)))
    return worst <= 1e-12, f"max relative deviation {worst:.2e}"


def _check_gradient(rng):
    mesh = build_mesh((1.0, 1.0), (3, 3))
    p = MaterialParams(beta1=0.2, beta2=0.1, gamma=0.3)
    y = mesh.nodes + 0.03 * rng.standard_normal(mesh.nodes.shape)
    M = project_saturation(rng.standard_normal(y.shape))

    def f(yy):
        return elastic_terms(mesh, yy, M, p)[0] + exchange_terms(mesh, yy, M, p.alpha)[0] + penalty_terms(mesh, yy, 10.0)[0]

    g = elastic_terms(mesh, y, M, p)[1] + exchange_terms(mesh, y, M, p.alpha)[1] + penalty_terms(mesh, y, 10.0)[1]
    v = rng.standard_normal(y.shape)
    eps = 1e-6
    fd = (f(y + eps * v) - f(y - eps * v)) / (2 * eps)
    an = float(np.sum(g * v))
    err = abs(fd - an) / max(abs(an), 1e-12)
    return err <= 1e-5, f"directional derivative relative error {err:.2e}"


def _check_rasterization(rng):
    mesh = build_mesh((1.0, 1.0), (8, 8))
    box = box_around(mesh, 3.0, 48)
    A = np.array([[1.0, 0.3], [0.0, 1.0]])
    y = mesh.nodes @ A.T
    M = project_saturation(rng.standard_normal(y.shape))
    cells = rasterize_magnetization(mesh, y, M, box)
    lhs = cells.reshape(-1, 2).sum(axis=0) * box.cell_volume
    rhs = mesh.lumped_mass @ M
    err = float(np.abs(lhs - rhs).max() / max(np.abs(rhs).max(), 1e-12))
    neg = rasterize_magnetization(mesh, y, -M, box)
    return err <= 1e-2 and np.array_equal(neg, -cells), f"integral mismatch {err:.2e}"


def _check_magnetostatics(rng):
    cellM = rng.standard_normal((24, 24, 2))
    s1 = solve_potential(cellM, 0.1)
    s2 = solve_potential(2.0 * cellM, 0.1)
    ok = s1.energy >= 0 and abs(s2.energy - 4 * s1.energy) <= 1e-8 * s2.energy
    return ok, f"energy {s1.energy:.6e}, scaled ratio {s2.energy / s1.energy:.10f}"


def _check_cn(rng):
    mesh = build_mesh((1.0, 1.0), (6, 6))
    r_id = ciarlet_necas_residual(mesh, identity_deformation(mesh))
    y = mesh.nodes.copy()
    y[:, 0] += 0.3 * mesh.nodes[:, 1]
    r_shear = ciarlet_necas_residual(mesh, y)
    fm, fy = wrapped_strip()
    r_fold = ciarlet_necas_residual(fm, fy)
    ok = r_id == 0 and r_shear == 0 and r_fold > 0.1
    return ok, f"identity {r_id}, shear {r_shear}, folded {r_fold:.3f}"


def _check_dissipation(rng):
    mesh = build_mesh((1.0, 1.0), (4, 4))
    y = identity_deformation(mesh)
    q1 = State(mesh, y, uniform_magnetization(mesh, [1, 0]))
    q2 = State(mesh, y, uniform_magnetization(mesh, [-1, 0]))
    dval = dissipation(q1, q2, 1.0)
    return abs(dval - 2.0) <= 1e-12 and dissipation(q1, q1, 1.0) == 0.0, f"D(e1, -e1) = {dval:.15f}"


def _check_density_values(rng):
    p = MaterialParams()
    w2 = elastic_density(2 * np.eye(2), np.array([1.0, 0.0]), p)[0]
    w1 = elastic_density(np.eye(2), np.array([0.0, 1.0]), p)[0]
    return abs(w2 - 60.0) <= 1e-12 and abs(w1) <= 1e-12, f"W(2I) = {w2}, W(I) = {w1}"


CHECKS = (
    ("density values", _check_density_values),
    ("frame indifference", _check_frame),
    ("energy gradients", _check_gradient),
    ("rasterization", _check_rasterization),
    ("magnetostatic scaling", _check_magnetostatics),
    ("non-interpenetration", _check_cn),
    ("dissipation", _check_dissipation),
)


def run_selftest(seed=0):
    """Run every check; returns a list of (name, passed, detail)."""
    results = []
    for name, fn in CHECKS:
        rng = np.random.default_rng(seed)
        try:
            ok, detail = fn(rng)
        except Exception as exc:  # a crash is a failed check, reported not raised
            ok, detail = False, f"{type(exc).__name__}: {exc}"
        results.append((name, bool(ok), detail))
    return results
