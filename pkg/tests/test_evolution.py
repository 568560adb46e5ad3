import numpy as np
import pytest

from magelastic.errors import ContinuationError, MeshMismatchError
from magelastic.evolution import (
    AuditConfig,
    CompetitorSampler,
    Model,
    Trajectory,
    dissipation,
    energy_balance_audit,
    incremental_step,
    relax,
    run_evolution,
    stability_audit,
    switching_time,
    variation,
)
from magelastic.material import Loads, MaterialParams
from magelastic.mesh import State, box_around, build_mesh, identity_deformation, uniform_magnetization
from magelastic.optim import SolverOptions, project_saturation

from conftest import random_state


def _states(rng, mesh, n):
    return [State(mesh, *random_state(rng, mesh, 0.1)) for _ in range(n)]


def test_dissipation_examples(unit_mesh):
    y = identity_deformation(unit_mesh)
    a = State(unit_mesh, y, uniform_magnetization(unit_mesh, [1, 0]))
    b = State(unit_mesh, y, uniform_magnetization(unit_mesh, [-1, 0]))
    assert dissipation(a, a, 1.0) == 0.0
    assert dissipation(a, b, 1.0) == pytest.approx(2.0, abs=1e-14)
    assert dissipation(a, b, 0.25) == pytest.approx(0.5, abs=1e-14)


def test_dissipation_is_a_metric(rng):
    mesh = build_mesh((1.0, 1.0), (3, 3))
    worst_sym = worst_tri = 0.0
    for _ in range(1000):
        a, b, c = _states(rng, mesh, 3)
        dab, dba = dissipation(a, b, 1.0), dissipation(b, a, 1.0)
        worst_sym = max(worst_sym, abs(dab - dba))
        worst_tri = max(worst_tri, dab - dissipation(a, c, 1.0) - dissipation(c, b, 1.0))
        assert dab >= 0
    assert worst_sym <= 1e-12 and worst_tri <= 1e-12


def test_dissipation_mesh_mismatch(rng):
    a = _states(rng, build_mesh((1.0, 1.0), (3, 3)), 1)[0]
    b = _states(rng, build_mesh((1.0, 1.0), (4, 4)), 1)[0]
    with pytest.raises(MeshMismatchError):
        dissipation(a, b, 1.0)


def _jump_trajectory(costs):
    tr = Trajectory()
    tr.times = list(np.linspace(0, 1, len(costs) + 1))
    tr.d_step = [0.0] + list(costs)
    return tr


def test_variation_examples():
    tr = _jump_trajectory([0.0, 0.0, 0.0, 0.0])
    assert variation(tr, 0.0, 1.0) == 0.0
    tr = _jump_trajectory([0.0, 0.3, 0.0, 0.0])
    assert variation(tr, 0.0, 1.0) == 0.3
    assert variation(tr, 0.5, 1.0) == 0.0
    tr = _jump_trajectory([0.0, 0.3, 0.2, 0.0])
    assert variation(tr, 0.0, 1.0) == pytest.approx(0.5)
    for t in tr.times:
        assert variation(tr, 0.0, t) + variation(tr, t, 1.0) == pytest.approx(variation(tr, 0.0, 1.0))
    with pytest.raises(ValueError):
        variation(tr, 0.5, 0.2)
    with pytest.raises(ValueError):
        variation(tr, 0.0, 1.5)


def _static_model(H_c=0.1, h=(0.0, 0.0), box=False, n=6):
    mesh = build_mesh((1.0, 1.0), (n, n))
    params = MaterialParams(beta1=0.05, gamma=0.1, H_c=H_c, kappa_inc=1e3)
    return Model(mesh, params, Loads(2, h=[(0.0, list(h))]), box_around(mesh, 3.0, 32) if box else None)


def test_step_with_constant_loads_keeps_stationary_state():
    model = _static_model(h=(0.2, 0.1), box=True)
    q0 = State(model.mesh, identity_deformation(model.mesh), uniform_magnetization(model.mesh, [0.0, 1.0]))
    q, diag = relax(model, 0.0, q0)
    res = incremental_step(model, 0.5, q, diag["kappa"])
    assert np.linalg.norm(res.state.M - q.M) <= 1e-6 * np.sqrt(model.mesh.n_nodes)
    assert np.linalg.norm(res.state.y - q.y) <= 1e-6 * np.sqrt(model.mesh.n_nodes)


def test_step_certificate(rng):
    model = _static_model(H_c=0.05, h=(-0.5, 0.2), box=True)
    mesh = model.mesh
    q_prev = State(mesh, identity_deformation(mesh), project_saturation(rng.standard_normal((mesh.n_nodes, 2))))
    res = incremental_step(model, 1.0, q_prev)
    lhs = model.energy(1.0, res.state, res.kappa) + dissipation(res.state, q_prev, model.params.H_c)
    assert lhs <= model.energy(1.0, q_prev, res.kappa) + 1e-6 * (1 + abs(lhs))
    assert res.dissipation > 0 and not res.fallback


def test_stability_audit_identity_and_flip():
    model = _static_model(H_c=0.3)
    q = State(model.mesh, identity_deformation(model.mesh), uniform_magnetization(model.mesh, [1, 0]))
    flip = stability_audit(model, 0.0, q, sampler=CompetitorSampler(n=1))
    assert flip.worst_kind == "flip"
    # no field, even W: energies tie and r is the flip cost 2 H_c |Omega|
    assert flip.worst == pytest.approx(2 * 0.3, rel=1e-12)
    same = stability_audit(model, 0.0, q, sampler=CompetitorSampler(n=2), earlier=[q])
    assert same.worst == 0.0 and same.worst_kind == "history"


def test_stability_audit_detects_unstable_state():
    model = _static_model(H_c=0.01, h=(-1.0, 0.0))
    q = State(model.mesh, identity_deformation(model.mesh), uniform_magnetization(model.mesh, [1, 0]))
    res = stability_audit(model, 0.0, q, sampler=CompetitorSampler(n=50), rng=np.random.default_rng(1))
    assert res.worst < -1.0


def test_constant_trajectory_balance():
    model = _static_model(H_c=0.1)
    q0 = State(model.mesh, identity_deformation(model.mesh), uniform_magnetization(model.mesh, [1, 0]))
    traj, report = run_evolution(model, np.linspace(0, 1, 5), q0, audit=AuditConfig(competitors=20))
    assert traj.var_cum[-1] == 0.0
    assert variation(traj, 0.0, 1.0) == 0.0
    assert max(abs(g) for g in report.upper_gap) <= 1e-12
    assert abs(report.two_sided_gap) <= 1e-12
    assert report.passed, report.failures
    for q in traj.states:
        assert np.allclose(q.M, traj.states[0].M, atol=1e-12)


def test_energy_balance_audit_flags_energy_creation():
    tr = Trajectory()
    tr.totals, tr.prev_totals = [0.0, 1.0], [0.0, 0.0]
    tr.d_step, tr.dtE_integral, tr.dtE_integral_new = [0.0, 0.0], [0.0, 0.5], [0.0, 0.5]
    tr.states = [None, None]
    upper, lower, fails = energy_balance_audit(tr)
    assert upper == [0.0, 0.5] and fails == [(1, 0.5)]


def _ramp_model(H_c, n=8, cells=32):
    mesh = build_mesh((1.0, 1.0), (n, n))
    params = MaterialParams(mu=1.0, p=4.0, alpha=0.1, beta1=0.02, H_c=H_c, kappa_inc=1e4)
    loads = Loads(2, h=[(0.0, [1.0, 0.1]), (1.0, [-1.0, 0.1])])
    return Model(mesh, params, loads, box_around(mesh, 3.5, cells))


def test_hysteresis_delay_small():
    times = np.linspace(0, 1, 41)
    switch = {}
    for H_c in (0.0, 0.1):
        model = _ramp_model(H_c)
        q0 = State(model.mesh, identity_deformation(model.mesh), uniform_magnetization(model.mesh, [1, 0]))
        traj, report = run_evolution(model, times, q0, audit=AuditConfig(competitors=0))
        assert report.passed, report.failures
        switch[H_c] = switching_time(traj)
        if H_c > 0:
            assert traj.var_cum[-1] > 0
    assert switch[0.0] is not None and switch[0.1] is not None
    assert switch[0.1] > switch[0.0]


def test_halving_steps_with_constant_loads():
    model = _static_model(H_c=0.05, h=(0.3, -0.4), box=True)
    mesh = model.mesh
    q0 = State(mesh, identity_deformation(mesh), uniform_magnetization(mesh, [1, 0]))
    finals = []
    for N in (4, 8):
        traj, _ = run_evolution(model, np.linspace(0, 1, N + 1), q0, audit=AuditConfig(competitors=0),
                                relax_initial=False)
        finals.append(traj.states[-1])
    diff = np.sqrt(np.sum((finals[0].y - finals[1].y) ** 2) + np.sum((finals[0].M - finals[1].M) ** 2))
    assert diff <= 1e-6


def test_partial_trajectory_on_failure():
    mesh = build_mesh((1.0, 1.0), (4, 4))
    model = Model(mesh, MaterialParams(kappa_inc=1.0), Loads(2, f=[(0.0, [0.0, 0.0]), (1.0, [5.0, 0.0])]))
    q0 = State(mesh, identity_deformation(mesh), uniform_magnetization(mesh, [1, 0]))
    opts = SolverOptions(kappa_max=1.0, tol_incomp=1e-8)
    with pytest.raises(ContinuationError) as exc:
        run_evolution(model, np.linspace(0, 1, 5), q0, opts, AuditConfig(competitors=0), relax_initial=False)
    partial = exc.value.trajectory
    assert len(partial) == 1 and partial.times == [0.0]
    assert len(exc.value.report.det_residual) == 1


def test_run_evolution_is_deterministic():
    model = _ramp_model(0.05, n=4, cells=16)
    q0 = State(model.mesh, identity_deformation(model.mesh), uniform_magnetization(model.mesh, [1, 0]))
    runs = [run_evolution(model, np.linspace(0, 1, 4), q0, audit=AuditConfig(competitors=10), seed=7)
            for _ in range(2)]
    assert runs[0][0].totals == runs[1][0].totals
    assert runs[0][1].stability == runs[1][1].stability


def test_run_evolution_rejects_bad_partition():
    model = _static_model()
    q0 = State(model.mesh, identity_deformation(model.mesh), uniform_magnetization(model.mesh, [1, 0]))
    with pytest.raises(ValueError):
        run_evolution(model, [0.0, 0.5, 0.5], q0)
