"""Dissipation, incremental time stepping and energetic-solution audits.

Each time step minimises E(t_k, q) + D(q, q_{k-1}) from the warm start
q_{k-1}.  The minimiser is local, so global stability is not guaranteed
by construction; it is checked after the fact against sampled competitor
states and reported alongside the discrete energy balance.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .errors import DegenerateDeformationError, MagelasticError
from .magnetostatics import magnetization_sensitivity, solve_potential
from .material import (
    Kinematics,
    MaterialParams,
    elastic_terms,
    energy_ledger,
    energy_time_integral,
    exchange_terms,
    load_gradients,
    load_potential,
)
from .mesh import Rasterization, State, check_same_mesh, ciarlet_necas_residual, deformation_gradients, det_small, probe_grid
from .optim import SolverOptions, elastic_preconditioner, minimize, penalty_terms, project_saturation, smoothed_dissipation

log = logging.getLogger(__name__)


def dissipation(q1, q2, H_c):
    """D(q1, q2) = H_c int |M1 - M2| over the reference body (M_i = m_i o y_i)."""
    check_same_mesh(q1, q2)
    mesh = q1.mesh
    dq = mesh.interp @ (q1.M - q2.M)
    return float(H_c * (mesh.weights @ np.linalg.norm(dq, axis=1)))


def l1_distance(q1, q2):
    return dissipation(q1, q2, 1.0)


@dataclass
class Model:
    """Everything that defines the energy functional except the state and time."""

    mesh: object
    params: MaterialParams
    loads: object
    box: object = None
    samples: int = 4

    def raster(self, y):
        if self.box is None:
            return None
        return Rasterization(self.mesh, y, self.box, self.samples)

    def stray(self, M, raster):
        if raster is None:
            return 0.0, None
        sol = solve_potential(raster.apply(M), self.box.h, self.params.mu0)
        return sol.energy, sol

    def ledger(self, t, q, kappa=None, raster=None, kin=None):
        raster = raster if raster is not None else self.raster(q.y)
        e_ms, _ = self.stray(q.M, raster)
        return energy_ledger(t, self.mesh, q.y, q.M, self.params, self.loads, e_ms, kappa, kin)

    def energy(self, t, q, kappa=None, raster=None, kin=None):
        return self.ledger(t, q, kappa, raster, kin).total


class StepProblem:
    """Objective of one incremental minimization, E(t, q) + D_eps(q, q_prev).

    With ``M_prev=None`` the dissipation is dropped (static problem).  The
    magnetostatic energy is exact in M for the current geometry and is held
    fixed while y moves; ``set_geometry`` re-rasterizes the body.
    """

    def __init__(self, model, t, M_prev=None, kappa=None):
        self.model = model
        self.mesh = model.mesh
        self.t = t
        self.M_prev = M_prev
        self.kappa = model.params.kappa_inc if kappa is None else kappa
        self._precond = {}
        self._geom_y = None
        ly, lM = load_gradients(t, self.mesh, model.loads)
        self._load_y, self._load_M = ly, lM
        self._stray_key = None

    def _dissipation(self, M):
        p = self.model.params
        if self.M_prev is None or p.H_c == 0:
            return 0.0, 0.0
        return smoothed_dissipation(self.mesh, M, self.M_prev, p.H_c, p.eps_dis)

    def _stray(self, M):
        if self._stray_key is not None and np.array_equal(self._stray_key, M):
            return self._stray_val
        e, sol = self.model.stray(M, self.raster)
        grad = 0.0 if sol is None else magnetization_sensitivity(sol, self.raster)
        self._stray_key = M.copy()
        self._stray_val = (e, grad)
        return self._stray_val

    def set_geometry(self, y):
        if self._geom_y is not None and np.array_equal(self._geom_y, y):
            return
        self._geom_y = y.copy()
        self.raster = self.model.raster(y)
        self._stray_key = None
        self._geom_kin = Kinematics(self.mesh, y, np.zeros_like(y))
        self._pen = None

    def y_preconditioner(self):
        if self.kappa not in self._precond:
            self._precond[self.kappa] = elastic_preconditioner(self.mesh, self.model.params, self.kappa)
        return self._precond[self.kappa]

    def y_block(self, y, M):
        p = self.model.params
        kin = Kinematics(self.mesh, y, M)
        e_el, gy_el, _ = elastic_terms(self.mesh, y, M, p, kin)
        e_ex, gy_ex, _ = exchange_terms(self.mesh, y, M, p.alpha, kin)
        e_pen, gy_pen = penalty_terms(self.mesh, y, self.kappa, kin)
        e_ms, _ = self._stray(M)
        e_dis, _ = self._dissipation(M)
        load = load_potential(self.t, self.mesh, y, M, self.model.loads)
        f = e_el + e_ex + e_pen + e_ms + e_dis - load
        g = gy_el + gy_ex + gy_pen - self._load_y
        g[self.mesh.dirichlet_mask] = 0.0
        return f, g

    def m_block(self, y, M):
        p = self.model.params
        self.set_geometry(y)
        kin = self._geom_kin.with_magnetization(M)
        e_el, _, gM_el = elastic_terms(self.mesh, y, M, p, kin)
        e_ex, _, gM_ex = exchange_terms(self.mesh, y, M, p.alpha, kin)
        if self._pen is None:
            self._pen = penalty_terms(self.mesh, y, self.kappa, kin, grad=False)[0]
        e_ms, g_ms = self._stray(M)
        e_dis, g_dis = self._dissipation(M)
        load = load_potential(self.t, self.mesh, y, M, self.model.loads)
        f = e_el + e_ex + self._pen + e_ms + e_dis - load
        return f, gM_el + gM_ex + g_ms + g_dis - self._load_M

    def value(self, y, M):
        self.set_geometry(y)
        kin = self._geom_kin.with_magnetization(M)
        p = self.model.params
        e_el = elastic_terms(self.mesh, y, M, p, kin, grad=False)[0]
        e_ex = exchange_terms(self.mesh, y, M, p.alpha, kin, grad=False)[0]
        e_pen = penalty_terms(self.mesh, y, self.kappa, kin, grad=False)[0]
        e_ms, _ = self._stray(M)
        e_dis, _ = self._dissipation(M)
        return e_el + e_ex + e_pen + e_ms + e_dis - load_potential(self.t, self.mesh, y, M, self.model.loads)


def relax(model, t, q, kappa=None, options=None):
    """Static minimization of E(t, .) from q (no dissipation)."""
    problem = StepProblem(model, t, None, kappa)
    y, M, diag = minimize(problem, q.y, q.M, options or SolverOptions())
    return State(q.mesh, y, M), diag


@dataclass
class StepResult:
    state: State
    energy: float
    energy_prev: float
    dissipation: float
    kappa: float
    fallback: bool
    diagnostics: dict


def incremental_step(model, t_k, q_prev, kappa=None, options=None):
    """One step of the incremental scheme, certified against the warm start.

    The smoothed minimiser is compared with q_prev on the exact functional
    (fresh stray-field solve, unsmoothed dissipation) and the better of the
    two is returned, so E(t_k, q_k) + D(q_k, q_prev) <= E(t_k, q_prev) holds.
    Ties within roundoff keep q_prev, so stationary steps are exactly constant.
    """
    options = options or SolverOptions()
    problem = StepProblem(model, t_k, q_prev.M, kappa)
    y, M, diag = minimize(problem, q_prev.y, q_prev.M, options)
    kappa = problem.kappa
    cand = State(q_prev.mesh, y, M)
    e_new = model.energy(t_k, cand, kappa)
    e_old = model.energy(t_k, q_prev, kappa)
    d = dissipation(cand, q_prev, model.params.H_c)
    fallback = False
    # keep the warm start unless the candidate improves beyond roundoff
    if e_new + d > e_old - 1e-14 * (1.0 + abs(e_old)):
        fallback = True
        cand, e_new, d = q_prev.copy(), e_old, 0.0
    return StepResult(cand, e_new, e_old, d, kappa, fallback, diag)


# -- competitor sampling ---------------------------------------------------


def _rotation(rng, d, angle=None):
    if d == 2:
        a = rng.uniform(-np.pi, np.pi) if angle is None else angle
        c, s = np.cos(a), np.sin(a)
        return np.array([[c, -s], [s, c]])
    A = rng.standard_normal((3, 3))
    Q, R = np.linalg.qr(A)
    Q = Q * np.sign(np.diag(R))
    if np.linalg.det(Q) < 0:
        Q[:, 0] = -Q[:, 0]
    return Q


@dataclass
class CompetitorSampler:
    """Random competitor states for the global stability test."""

    n: int = 200
    history: int = 10

    def generate(self, rng, q, earlier=()):
        mesh = q.mesh
        d = mesh.d
        out = [("flip", q.replace(M=-q.M))]
        for prev in list(earlier)[-self.history:]:
            out.append(("history", prev))
        lo = q.y.min(axis=0)
        span = np.maximum(q.y.max(axis=0) - lo, 1e-12)
        kinds = ("rotate", "nodal", "smooth", "shear", "shear+rotate")
        i = 0
        while len(out) < self.n:
            kind = kinds[i % len(kinds)]
            i += 1
            if kind == "rotate":
                R = _rotation(rng, d)
                out.append((kind, q.replace(M=q.M @ R.T)))
            elif kind == "nodal":
                sigma = 10 ** rng.uniform(-3, 0)
                out.append((kind, q.replace(M=project_saturation(q.M + sigma * rng.standard_normal(q.M.shape)))))
            elif kind == "smooth":
                k = rng.integers(1, 4, size=d)
                phase = rng.uniform(0, 2 * np.pi, size=d)
                amp = 10 ** rng.uniform(-2, 0.3)
                wave = np.sin(np.pi * ((q.y - lo) / span) @ k + phase[0])
                pert = amp * wave[:, None] * rng.standard_normal(d)[None, :]
                out.append((kind, q.replace(M=project_saturation(q.M + pert))))
            else:
                i_ax, j_ax = rng.choice(d, size=2, replace=False)
                amp = 10 ** rng.uniform(-4, -1.3) * span[j_ax]
                k = rng.integers(1, 4)
                y = q.y.copy()
                y[:, j_ax] += amp * np.sin(np.pi * k * (q.y[:, i_ax] - lo[i_ax]) / span[i_ax])
                y[mesh.dirichlet_mask] = q.y[mesh.dirichlet_mask]
                M = q.M @ _rotation(rng, d, rng.normal(0, 0.3) if d == 2 else None).T if kind == "shear+rotate" else q.M
                out.append((kind, State(mesh, y, M)))
        return out[: self.n]


@dataclass
class StabilityResult:
    worst: float
    worst_kind: str
    evaluated: int
    skipped: int


def stability_audit(model, t, q, kappa=None, sampler=None, rng=None, earlier=(), energy=None):
    """min over competitors of E(t, q~) + D(q, q~) - E(t, q); >= -tol means stable."""
    sampler = sampler or CompetitorSampler()
    rng = rng if rng is not None else np.random.default_rng(0)
    raster = model.raster(q.y)
    kin = Kinematics(model.mesh, q.y, q.M)
    e0 = model.energy(t, q, kappa, raster, kin) if energy is None else energy
    worst, worst_kind = np.inf, ""
    evaluated = skipped = 0
    for kind, cand in sampler.generate(rng, q, earlier):
        same_y = cand.y is q.y or np.array_equal(cand.y, q.y)
        try:
            if same_y:
                e = model.energy(t, cand, kappa, raster, kin.with_magnetization(cand.M))
            else:
                e = model.energy(t, cand, kappa)
        except (DegenerateDeformationError, MagelasticError):
            skipped += 1
            continue
        r = e + dissipation(q, cand, model.params.H_c) - e0
        evaluated += 1
        if r < worst:
            worst, worst_kind = r, kind
    return StabilityResult(float(worst), worst_kind, evaluated, skipped)


# -- trajectories ----------------------------------------------------------


def apriori_quantities(mesh, q, p):
    """(||grad y||_{L^p}, int |grad M F^-1|^2, max nodal |M|)."""
    F = deformation_gradients(mesh, q.y)
    nF = np.sqrt(np.einsum("qij,qij->q", F, F))
    lp = float((mesh.weights @ nF**p) ** (1.0 / p))
    ex = exchange_terms(mesh, q.y, q.M, 1.0, grad=False)[0]
    return lp, ex, float(np.linalg.norm(q.M, axis=1).max())


@dataclass
class Trajectory:
    """Discrete trajectory q_0..q_N on a partition with its per-step ledger."""

    times: list = field(default_factory=list)
    states: list = field(default_factory=list)
    ledgers: list = field(default_factory=list)
    totals: list = field(default_factory=list)
    prev_totals: list = field(default_factory=list)
    d_step: list = field(default_factory=list)
    dtE_integral: list = field(default_factory=list)
    dtE_integral_new: list = field(default_factory=list)
    kappa: list = field(default_factory=list)
    fallback: list = field(default_factory=list)
    diagnostics: list = field(default_factory=list)

    def __len__(self):
        return len(self.states)

    @property
    def var_cum(self):
        return np.cumsum(self.d_step).tolist()


def variation(traj, s, t):
    """Var(D, q; s, t) for the stored piecewise-constant trajectory: sum of step costs in (s, t]."""
    times = np.asarray(traj.times)
    if s > t or s < times[0] - 1e-12 or t > times[-1] + 1e-12:
        raise ValueError(f"interval [{s}, {t}] outside trajectory [{times[0]}, {times[-1]}]")
    sel = (times > s) & (times <= t)
    return float(np.sum(np.asarray(traj.d_step)[sel]))


@dataclass
class AuditConfig:
    competitors: int = 200
    stride: int = 1
    history: int = 10
    tol_stab_rel: float = 1e-3
    tol_bal_rel: float = 1e-6
    tol_step_rel: float = 1e-6
    cn_cells_per_element: int = 2


@dataclass
class AuditReport:
    stability: list = field(default_factory=list)
    stability_kind: list = field(default_factory=list)
    upper_gap: list = field(default_factory=list)
    lower_gap: list = field(default_factory=list)
    cumulative_upper_gap: float = 0.0
    cumulative_lower_gap: float = 0.0
    grad_y_Lp: list = field(default_factory=list)
    exchange_integral: list = field(default_factory=list)
    max_M: list = field(default_factory=list)
    bv_cum: list = field(default_factory=list)
    det_residual: list = field(default_factory=list)
    cn_residual: list = field(default_factory=list)
    failures: list = field(default_factory=list)

    @property
    def two_sided_gap(self):
        return self.cumulative_lower_gap - self.cumulative_upper_gap

    @property
    def passed(self):
        return not self.failures


def energy_balance_audit(traj, tol_rel=1e-6):
    """Per-step discrete upper estimate and the cumulative two-sided energy gap.

    upper_k = E(t_k,q_k) + D_k - E(t_{k-1},q_{k-1}) - int d_tE(., q_{k-1})  (<= tol)
    lower_k = same with q_k inside the time integral (>= 0 when q_{k-1} is stable)
    """
    upper, lower, fails = [0.0], [0.0], []
    for k in range(1, len(traj)):
        inc = traj.totals[k] + traj.d_step[k] - traj.prev_totals[k]
        up = inc - traj.dtE_integral[k]
        lo = inc - traj.dtE_integral_new[k]
        upper.append(up)
        lower.append(lo)
        if up > tol_rel * (1 + abs(traj.totals[k])):
            fails.append((k, up))
    return upper, lower, fails


def _audit_state(model, traj, k, cfg, report, rng, kappa, energy):
    q = traj.states[k]
    mesh = model.mesh
    lp, ex, mx = apriori_quantities(mesh, q, model.params.p)
    report.grad_y_Lp.append(lp)
    report.exchange_integral.append(ex)
    report.max_M.append(mx)
    prev_bv = report.bv_cum[-1] if report.bv_cum else 0.0
    report.bv_cum.append(prev_bv + (l1_distance(q, traj.states[k - 1]) if k else 0.0))
    J = det_small(deformation_gradients(mesh, q.y))
    report.det_residual.append(float(np.abs(J - 1).max()))
    report.cn_residual.append(ciarlet_necas_residual(mesh, q.y, probe_grid(mesh, q.y, cfg.cn_cells_per_element)))
    if cfg.competitors > 0 and k % cfg.stride == 0:
        res = stability_audit(
            model, traj.times[k], q, kappa, CompetitorSampler(cfg.competitors, cfg.history), rng,
            traj.states[max(0, k - cfg.history):k], energy,
        )
        report.stability.append(res.worst)
        report.stability_kind.append(res.worst_kind)
        if res.worst < -cfg.tol_stab_rel * (1 + abs(energy)):
            report.failures.append(("stability", k, res.worst))
    else:
        report.stability.append(float("nan"))
        report.stability_kind.append("")


def run_evolution(model, times, q0, options=None, audit=None, seed=0, relax_initial=True, callback=None):
    """Incremental minimization over the partition ``times`` with per-step audits.

    Returns (Trajectory, AuditReport).  On a failed step the partial
    trajectory is kept and the error is re-raised with ``trajectory`` and
    ``report`` attributes attached.
    """
    options = options or SolverOptions()
    cfg = audit or AuditConfig()
    times = [float(t) for t in times]
    if len(times) < 1 or np.any(np.diff(times) <= 0):
        raise ValueError("time partition must be strictly increasing")
    mesh = model.mesh
    kappa = model.params.kappa_inc
    traj = Trajectory()
    report = AuditReport()

    def rng_for(k):
        return np.random.default_rng([int(seed), k])

    q = q0
    diag = {}
    if relax_initial:
        problem = StepProblem(model, times[0], None, kappa)
        y, M, diag = minimize(problem, q.y, q.M, options)
        kappa = problem.kappa
        q = State(mesh, y, M)
    led = model.ledger(times[0], q, kappa)
    traj.times.append(times[0])
    traj.states.append(q)
    traj.ledgers.append(led)
    traj.totals.append(led.total)
    traj.prev_totals.append(led.total)
    traj.d_step.append(0.0)
    traj.dtE_integral.append(0.0)
    traj.dtE_integral_new.append(0.0)
    traj.kappa.append(kappa)
    traj.fallback.append(False)
    traj.diagnostics.append(diag)
    _audit_state(model, traj, 0, cfg, report, rng_for(0), kappa, led.total)
    if report.failures:
        report.failures[-1] = ("initial-stability",) + tuple(report.failures[-1][1:])
    if callback:
        callback(0, traj, report)

    try:
        for k in range(1, len(times)):
            t0, t1 = times[k - 1], times[k]
            qp = traj.states[-1]
            step = incremental_step(model, t1, qp, kappa, options)
            if step.kappa != kappa:
                prev_total = model.energy(t0, qp, step.kappa)
            else:
                prev_total = traj.totals[-1]
            kappa = step.kappa
            q = step.state
            led = model.ledger(t1, q, kappa)
            traj.times.append(t1)
            traj.states.append(q)
            traj.ledgers.append(led)
            traj.totals.append(led.total)
            traj.prev_totals.append(prev_total)
            traj.d_step.append(step.dissipation)
            traj.dtE_integral.append(energy_time_integral(t0, t1, mesh, qp.y, qp.M, model.loads))
            traj.dtE_integral_new.append(energy_time_integral(t0, t1, mesh, q.y, q.M, model.loads))
            traj.kappa.append(kappa)
            traj.fallback.append(step.fallback)
            traj.diagnostics.append(step.diagnostics)
            cert = led.total + step.dissipation - step.energy_prev
            if cert > cfg.tol_step_rel * (1 + abs(led.total)):
                report.failures.append(("certificate", k, cert))
            _audit_state(model, traj, k, cfg, report, rng_for(k), kappa, led.total)
            if callback:
                callback(k, traj, report)
            log.debug("step %d t=%.4f E=%.10g D=%.3g fallback=%s", k, t1, led.total, step.dissipation, step.fallback)
    except MagelasticError as exc:
        _finish(traj, report, cfg, options.tol_incomp)
        exc.trajectory = traj
        exc.report = report
        raise
    _finish(traj, report, cfg, options.tol_incomp)
    return traj, report


def _finish(traj, report, cfg, tol_incomp=1e-3):
    report.failures.extend(constraint_failures(traj, report, tol_incomp))
    upper, lower, fails = energy_balance_audit(traj, cfg.tol_bal_rel)
    report.upper_gap = upper
    report.lower_gap = lower
    report.cumulative_upper_gap = float(np.sum(upper))
    report.cumulative_lower_gap = float(np.sum(lower))
    for k, gap in fails:
        report.failures.append(("balance", k, gap))


def mean_magnetization(mesh, q):
    return (mesh.lumped_mass @ q.M) / mesh.volume


def switching_time(traj, axis=0):
    """First time at which the mean of M along ``axis`` becomes negative (None if never)."""
    for t, q in zip(traj.times, traj.states):
        if mean_magnetization(q.mesh, q)[axis] < 0:
            return t
    return None


def trajectory_from_states(model, times, states, kappas):
    """Recompute the full ledger of a stored trajectory."""
    traj = Trajectory()
    mesh = model.mesh
    for k, (t, q, kappa) in enumerate(zip(times, states, kappas)):
        led = model.ledger(t, q, kappa)
        traj.times.append(float(t))
        traj.states.append(q)
        traj.ledgers.append(led)
        traj.totals.append(led.total)
        traj.kappa.append(kappa)
        traj.fallback.append(False)
        traj.diagnostics.append({})
        if k == 0:
            traj.prev_totals.append(led.total)
            traj.d_step.append(0.0)
            traj.dtE_integral.append(0.0)
            traj.dtE_integral_new.append(0.0)
            continue
        t0, qp = traj.times[k - 1], traj.states[k - 1]
        same = kappa == traj.kappa[k - 1]
        traj.prev_totals.append(traj.totals[k - 1] if same else model.energy(t0, qp, kappa))
        traj.d_step.append(dissipation(q, qp, model.params.H_c))
        traj.dtE_integral.append(energy_time_integral(t0, t, mesh, qp.y, qp.M, model.loads))
        traj.dtE_integral_new.append(energy_time_integral(t0, t, mesh, q.y, q.M, model.loads))
    return traj


def audit_trajectory(model, traj, audit=None, seed=0, tol_incomp=1e-3):
    """Full audit of an existing trajectory (same sampler seeding as run_evolution)."""
    cfg = audit or AuditConfig()
    report = AuditReport()
    for k in range(len(traj)):
        _audit_state(model, traj, k, cfg, report, np.random.default_rng([int(seed), k]), traj.kappa[k],
                     traj.totals[k])
        if k:
            cert = traj.totals[k] + traj.d_step[k] - model.energy(traj.times[k], traj.states[k - 1], traj.kappa[k])
            if cert > cfg.tol_step_rel * (1 + abs(traj.totals[k])):
                report.failures.append(("certificate", k, cert))
    _finish(traj, report, cfg, tol_incomp)
    return report


def constraint_failures(traj, report, tol_incomp=1e-3, tol_cn=1e-3):
    """Constraint violations of accepted states as (kind, step, value) tuples."""
    out = []
    for k, q in enumerate(traj.states):
        dev = float(np.abs(np.linalg.norm(q.M, axis=1) - 1).max())
        if dev > 1e-12:
            out.append(("saturation", k, dev))
        if report.det_residual[k] > tol_incomp:
            out.append(("incompressibility", k, report.det_residual[k]))
        if report.cn_residual[k] > tol_cn:
            out.append(("ciarlet-necas", k, report.cn_residual[k]))
    return out
