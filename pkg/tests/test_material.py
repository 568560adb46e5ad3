import numpy as np
import pytest

from magelastic.errors import DegenerateDeformationError
from magelastic.magnetostatics import magnetization_sensitivity, solve_potential
from magelastic.material import (
    Kinematics,
    Loads,
    MaterialParams,
    PiecewiseLinear,
    elastic_density,
    elastic_energy,
    elastic_terms,
    energy_gradient,
    energy_ledger,
    energy_time_derivative,
    energy_time_integral,
    exchange_energy,
    exchange_terms,
    load_potential,
    polyconvex_density,
    total_energy,
)
from magelastic.mesh import Rasterization, box_around, build_mesh, identity_deformation, uniform_magnetization
from magelastic.optim import project_saturation

from conftest import central_difference, random_state, rel_err, tangent_direction

FULL = MaterialParams(mu=1.3, p=4.5, beta1=0.4, beta2=0.25, gamma=0.7, alpha=0.2)


def random_F(rng, d, spread=0.3, floor=0.3):
    while True:
        F = np.eye(d) + spread * rng.standard_normal((d, d))
        if np.linalg.det(F) > floor:
            return F


def unit(rng, d):
    v = rng.standard_normal(d)
    return v / np.linalg.norm(v)


def test_density_reference_values():
    p = MaterialParams()
    assert elastic_density(np.eye(2), np.array([1.0, 0.0]), p)[0] == 0.0
    assert elastic_density(2 * np.eye(2), np.array([0.6, 0.8]), p)[0] == pytest.approx(60.0, rel=1e-14)
    assert FULL.offset(2) == pytest.approx(1.3 * 2**2.25 + 0.7 * 2 + 0.4 + 0.25)
    assert abs(elastic_density(np.eye(3), unit(np.random.default_rng(1), 3), FULL)[0]) <= 1e-13


def test_density_rejects_degenerate():
    with pytest.raises(DegenerateDeformationError):
        elastic_density(np.diag([1.0, 0.05]), np.array([1.0, 0.0]), FULL)


@pytest.mark.parametrize("d", [2, 3])
def test_density_gradients_fd(rng, d):
    for _ in range(10):
        F = random_F(rng, d)
        m = unit(rng, d)
        W, P, dm = elastic_density(F, m, FULL, with_m_grad=True)
        V = rng.standard_normal((d, d))
        fd = central_difference(lambda X: elastic_density(X, m, FULL)[0], F, V)
        assert rel_err(fd, np.sum(P * V)) <= 1e-6
        v = rng.standard_normal(d)
        fd = central_difference(lambda x: elastic_density(F, x, FULL)[0], m, v)
        assert rel_err(fd, dm @ v) <= 1e-6


def test_density_matches_polyconvex_form(rng):
    for d in (2, 3):
        F = random_F(rng, d)
        m = unit(rng, d)
        cof = np.linalg.det(F) * np.linalg.inv(F).T
        assert polyconvex_density(F, cof, m, FULL) == pytest.approx(elastic_density(F, m, FULL)[0], rel=1e-13)


def test_density_stack_matches_single(rng):
    Fs = np.stack([random_F(rng, 2) for _ in range(5)])
    ms = np.stack([unit(rng, 2) for _ in range(5)])
    W, P = elastic_density(Fs, ms, FULL)
    for k in range(5):
        w, p = elastic_density(Fs[k], ms[k], FULL)
        assert W[k] == pytest.approx(w, rel=1e-14)
        assert np.allclose(P[k], p, rtol=1e-13)


def test_elastic_energy_examples(rng):
    mesh = build_mesh((1.0, 2.0), (3, 4))
    M = project_saturation(rng.standard_normal(mesh.nodes.shape))
    assert abs(elastic_energy(mesh, identity_deformation(mesh), M, MaterialParams(beta1=0.3))) <= 1e-14
    A = np.array([[1.0, 0.3], [0.0, 1.0]])
    m = np.array([0.6, 0.8])
    Mu = np.tile(m, (mesh.n_nodes, 1))
    E = elastic_energy(mesh, mesh.nodes @ A.T, Mu, FULL)
    assert E == pytest.approx(mesh.volume * elastic_density(A, m, FULL)[0], rel=1e-13)


def smooth_state(mesh):
    x = mesh.nodes
    y = x.copy()
    y[:, 0] += 0.05 * np.sin(np.pi * x[:, 1])
    th = 0.8 * x[:, 0] + 0.3 * x[:, 1] ** 2
    M = np.stack([np.cos(th), np.sin(th)], axis=1)
    return y, M


def test_elastic_energy_refinement():
    p = MaterialParams(beta1=0.3, gamma=0.2)
    vals = []
    for n in (8, 16):
        mesh = build_mesh((1.0, 1.0), (n, n))
        vals.append(elastic_energy(mesh, *smooth_state(mesh), p))
    assert abs(vals[1] - vals[0]) <= 0.01 * abs(vals[1])


def test_exchange_examples():
    mesh = build_mesh((1.0, 1.0), (6, 6))
    y = identity_deformation(mesh)
    assert exchange_energy(mesh, y, uniform_magnetization(mesh, [1, 1]), 0.3) <= 1e-28
    # identity: alpha * direct Dirichlet energy of the interpolant
    th = 1.3 * mesh.nodes[:, 0]
    M = np.stack([np.cos(th), np.sin(th)], axis=1)
    G = np.stack([Gk @ M for Gk in mesh.grad_ops], axis=2)
    direct = float(mesh.weights @ np.sum(G * G, axis=(1, 2)))
    assert exchange_energy(mesh, y, M, 0.3) == pytest.approx(0.3 * direct, rel=1e-13)
    # y = diag(2, 1/2) x scales the x1 column of grad M by 1/2
    ys = mesh.nodes * np.array([2.0, 0.5])
    assert exchange_energy(mesh, ys, M, 1.0) == pytest.approx(0.25 * direct, rel=1e-12)


def _state_fd(f, g, x, rng, tangent=None):
    v = rng.standard_normal(x.shape) if tangent is None else tangent_direction(rng, tangent)
    return rel_err(central_difference(f, x, v), float(np.sum(g * v)))


def test_elastic_and_exchange_gradients_fd(rng):
    mesh = build_mesh((1.0, 1.0), (4, 4))
    for _ in range(5):
        y, M = random_state(rng, mesh, amp=0.1)
        _, gy, gM = elastic_terms(mesh, y, M, FULL)
        assert _state_fd(lambda v: elastic_terms(mesh, v, M, FULL)[0], gy, y, rng) <= 1e-6
        assert _state_fd(lambda v: elastic_terms(mesh, y, v, FULL)[0], gM, M, rng) <= 1e-6
        _, gy, gM = exchange_terms(mesh, y, M, 0.2)
        assert _state_fd(lambda v: exchange_terms(mesh, v, M, 0.2)[0], gy, y, rng) <= 1e-6
        assert _state_fd(lambda v: exchange_terms(mesh, y, v, 0.2)[0], gM, M, rng) <= 1e-6


def test_exchange_gradient_3d_fd(rng):
    mesh = build_mesh((1.0, 1.0, 1.0), (2, 2, 2))
    y, M = random_state(rng, mesh, amp=0.1)
    _, gy, gM = exchange_terms(mesh, y, M, 0.2)
    assert _state_fd(lambda v: exchange_terms(mesh, v, M, 0.2)[0], gy, y, rng) <= 1e-6
    _, gy, gM = elastic_terms(mesh, y, M, FULL)
    assert _state_fd(lambda v: elastic_terms(mesh, v, M, FULL)[0], gy, y, rng) <= 1e-6


def test_piecewise_linear_loads():
    h = PiecewiseLinear([(0.0, [1.0, 0.0]), (1.0, [-1.0, 0.0]), (2.0, [-1.0, 1.0])], 2)
    assert np.allclose(h(0.5), [0, 0])
    assert np.allclose(h.rate(0.5), [-2, 0])
    assert np.allclose(h.rate(1.0), [0, 1])  # right slope at a knot
    assert np.allclose(h.rate(2.0), [0, 1])
    with pytest.raises(ValueError):
        h(2.5)
    with pytest.raises(ValueError):
        PiecewiseLinear([(0.0, [1, 0]), (0.0, [0, 1])], 2)
    with pytest.raises(ValueError):
        PiecewiseLinear([(0.0, [1, 0, 0])], 2)
    c = PiecewiseLinear([(0.0, [3.0, 4.0])], 2)
    assert np.allclose(c(17.0), [3, 4]) and np.allclose(c.rate(5.0), 0)


def test_load_potential_examples(rng):
    mesh = build_mesh((1.0, 1.0), (3, 3), traction=("x0+",))
    y = identity_deformation(mesh)
    M = uniform_magnetization(mesh, [1, 0])
    assert load_potential(0.0, mesh, y, M, Loads.zero(2)) == 0.0
    loads = Loads(2, h=[(0.0, [1.0, 0.0])])
    assert load_potential(0.0, mesh, y, M, loads) == pytest.approx(1.0, rel=1e-14)
    assert load_potential(0.0, mesh, y, -M, loads) == -load_potential(0.0, mesh, y, M, loads)
    # body force on y = x: int x_1 = 1/2; traction on x0+: int_{x1=1} y_1 = 1
    loads = Loads(2, f=[(0.0, [1.0, 0.0])], g=[(0.0, [2.0, 0.0])])
    assert load_potential(0.0, mesh, y, M, loads) == pytest.approx(0.5 + 2.0, rel=1e-13)


def test_time_derivative_examples(rng):
    mesh = build_mesh((1.0, 1.0), (3, 3), traction=("x1+",))
    y, M = random_state(rng, mesh)
    const = Loads(2, h=[(0.0, [0.3, 0.2])], f=[(0.0, [0.1, 0.0])])
    assert energy_time_derivative(0.4, mesh, y, M, const) == 0.0
    ramp = Loads(2, h=[(0.0, [0.0, 0.0]), (1.0, [1.0, 0.0])])
    Mu = uniform_magnetization(mesh, [1, 0])
    assert energy_time_derivative(0.3, mesh, y, Mu, ramp) == pytest.approx(-1.0, rel=1e-14)

    loads = Loads(2, h=[(0.0, [1.0, 0.2]), (1.0, [-1.0, 0.5])], f=[(0.0, [0.0, 0.0]), (1.0, [0.3, -0.1])],
                  g=[(0.0, [0.1, 0.1]), (1.0, [0.4, 0.0])])
    p = MaterialParams()

    def E(t):
        return total_energy(t, mesh, y, M, p, loads, 0.0)

    t, dt = 0.37, 1e-5
    fd = (E(t + dt) - E(t - dt)) / (2 * dt)
    assert abs(fd - energy_time_derivative(t, mesh, y, M, loads)) <= 1e-8
    integral = energy_time_integral(0.2, 0.7, mesh, y, M, loads)
    assert integral == pytest.approx(E(0.7) - E(0.2), rel=1e-12)


def test_total_energy_examples(rng):
    mesh = build_mesh((1.0, 1.0), (4, 4))
    y = identity_deformation(mesh)
    M = uniform_magnetization(mesh, [0, 1])
    assert total_energy(0.0, mesh, y, M, MaterialParams(beta1=0.3), Loads.zero(2), 0.123) == pytest.approx(0.123, abs=1e-14)
    y, M = random_state(rng, mesh, amp=0.2)
    loads = Loads(2, h=[(0.0, [1.0, 0.0]), (1.0, [-1.0, 0.0])])
    shifted = Loads(2, h=[(5.0, [1.0, 0.0]), (6.0, [-1.0, 0.0])])
    assert total_energy(0.3, mesh, y, M, FULL, loads, 0.2) == total_energy(5.3, mesh, y, M, FULL, shifted, 0.2)
    led = energy_ledger(0.3, mesh, y, M, FULL, loads, 0.2, kappa=50.0)
    parts = led.elastic + led.exchange + led.magnetostatic - led.load + led.penalty
    assert abs(parts - led.total) <= 1e-12 * (1 + abs(led.total))
    assert led.penalty > 0


def test_energy_gradient_masks_and_projects(rng):
    mesh = build_mesh((1.0, 1.0), (4, 4))
    y, M = random_state(rng, mesh, amp=0.2)
    loads = Loads(2, h=[(0.0, [0.5, 0.1])])
    gy, gM = energy_gradient(0.0, mesh, y, M, FULL, loads)
    assert np.all(gy[mesh.dirichlet_mask] == 0)
    assert np.abs(np.sum(gM * M, axis=1)).max() <= 1e-13


def test_energy_gradient_stationary_state():
    # uniform dilation sI where the penalty pressure balances mu p |F|^(p-2) F,
    # with uniform M parallel to the field: every nodal force vanishes
    from scipy.optimize import brentq

    mesh = build_mesh((1.0, 1.0), (4, 4))
    p = MaterialParams(beta1=0.0, gamma=0.3)
    kappa = 100.0

    def stress(s):
        return p.mu * p.p * (2 * s * s) ** (p.p / 2 - 1) + 2 * p.gamma + 2 * kappa * (s * s - 1)

    s = brentq(stress, 0.5, 1.0, xtol=1e-15)
    loads = Loads(2, h=[(0.0, [0.0, 0.7])])
    y = s * mesh.nodes
    gy, gM = energy_gradient(0.0, mesh, y, uniform_magnetization(mesh, [0, 1]), p, loads, kappa=kappa)
    assert np.abs(gy).max() <= 1e-8 and np.abs(gM).max() <= 1e-8


def test_frozen_field_total_gradient_fd(rng):
    mesh = build_mesh((1.0, 1.0), (6, 6), traction=("x0+",))
    box = box_around(mesh, 3.0, 42)
    loads = Loads(2, h=[(0.0, [0.5, 0.2]), (1.0, [0.1, 0.4])], f=[(0.0, [0.1, 0.0])], g=[(0.0, [0.0, 0.2])])
    for _ in range(3):
        y, M = random_state(rng, mesh, amp=0.2)
        raster = Rasterization(mesh, y, box)

        def frozen(yy, MM):
            e_ms = solve_potential(raster.apply(MM), box.h, FULL.mu0, tol=1e-12).energy
            return total_energy(0.4, mesh, yy, MM, FULL, loads, e_ms, kappa=30.0)

        sol = solve_potential(raster.apply(M), box.h, FULL.mu0, tol=1e-12)
        gy, gM = energy_gradient(0.4, mesh, y, M, FULL, loads, magnetization_sensitivity(sol, raster), kappa=30.0)
        v = rng.standard_normal(y.shape)
        v[mesh.dirichlet_mask] = 0
        assert rel_err(central_difference(lambda z: frozen(z, M), y, v), np.sum(gy * v)) <= 1e-5
        w = tangent_direction(rng, M)
        assert rel_err(central_difference(lambda z: frozen(y, z), M, w), np.sum(gM * w)) <= 1e-5


def test_kinematics_reuse(rng):
    mesh = build_mesh((1.0, 1.0), (3, 3))
    y, M = random_state(rng, mesh)
    _, M2 = random_state(rng, mesh)
    k = Kinematics(mesh, y, M).with_magnetization(M2)
    assert np.array_equal(k.Mq, Kinematics(mesh, y, M2).Mq)
    assert exchange_terms(mesh, y, M2, 0.1, k)[0] == exchange_terms(mesh, y, M2, 0.1)[0]


def test_params_validation():
    with pytest.raises(ValueError, match="p must exceed d"):
        MaterialParams(p=2.0).validate(2)
    with pytest.raises(ValueError):
        MaterialParams(alpha=0.0).validate(2)
    with pytest.raises(ValueError):
        MaterialParams(H_c=-1.0).validate(2)
    MaterialParams(p=3.5).validate(3)
