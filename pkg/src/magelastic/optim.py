"""Constraint handling and the block quasi-Newton minimizer.

Incompressibility is a quadratic penalty with continuation in its weight,
saturation is kept by projecting onto the unit sphere after every step,
and the dissipation is smoothed by sqrt(|dM|^2 + eps^2) - eps.
"""

from __future__ import annotations

from collections import deque
from dataclasses import asdict, dataclass

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .errors import (
    ContinuationError,
    DegenerateDeformationError,
    DegenerateStateError,
    LineSearchError,
)
from .mesh import DET_FLOOR, check_determinants, deformation_gradients, det_small, inv_small, scatter_gradient


@dataclass(frozen=True)
class SolverOptions:
    max_outer: int = 60
    max_inner: int = 300
    tol_grad: float = 1e-7
    backtrack: float = 0.5
    armijo: float = 1e-4
    memory: int = 10
    kappa_growth: float = 10.0
    kappa_max: float = 1e8
    tol_incomp: float = 1e-3
    det_floor: float = DET_FLOOR
    max_backtracks: int = 50
    max_step_M: float = 0.2

    def validate(self):
        for name, value in asdict(self).items():
            if not value > 0:
                raise ValueError(f"solver option {name} must be positive")
        if not 0 < self.backtrack < 1:
            raise ValueError("backtracking factor must lie in (0, 1)")
        if not 0 < self.armijo < 1:
            raise ValueError("sufficient-decrease constant must lie in (0, 1)")
        if self.kappa_growth <= 1:
            raise ValueError("kappa_growth must exceed 1")

    def replace(self, **kw):
        return SolverOptions(**{**asdict(self), **kw})


def penalty_terms(mesh, y, kappa, kin=None, grad=True):
    """kappa int (det grad y - 1)^2 and its nodal gradient (via d det F / dF = cof F)."""
    if kin is not None:
        J, Finv = kin.J, kin.Finv
    else:
        F = deformation_gradients(mesh, y)
        J = det_small(F)
        check_determinants(mesh, J)
        Finv = inv_small(F, J)
    w = mesh.weights
    r = J - 1.0
    E = kappa * float(w @ (r * r))
    if not grad:
        return E, None
    cof = J[:, None, None] * np.swapaxes(Finv, -1, -2)
    gy = scatter_gradient(mesh, (2 * kappa * w * r)[:, None, None] * cof)
    return E, gy


def incompressibility_penalty(mesh, y, kappa):
    return penalty_terms(mesh, y, kappa)


def project_saturation(M):
    M = np.asarray(M, dtype=float)
    n = np.linalg.norm(M, axis=1, keepdims=True)
    if np.any(n == 0):
        raise DegenerateStateError(f"zero magnetization at node(s) {np.flatnonzero(n[:, 0] == 0)[:5].tolist()}")
    return M / n


def tangent_project(M, G):
    return G - np.sum(G * M, axis=1, keepdims=True) * M


def smoothed_dissipation(mesh, M, M_prev, H_c, eps):
    """H_c int (sqrt(|M - M_prev|^2 + eps^2) - eps) with its nodal M-gradient."""
    dq = mesh.interp @ (M - M_prev)
    s = np.sqrt(np.sum(dq * dq, axis=1) + eps * eps)
    w = mesh.weights
    value = H_c * float(w @ (s - eps))
    grad = mesh.interp_T @ ((H_c * w / s)[:, None] * dq)
    return value, grad


def elastic_preconditioner(mesh, params, kappa):
    """Factorised reference-configuration stiffness on the free displacement dofs.

    K = int c1 |grad v|^2 + c2 (div v)^2 with c1, c2 the isotropic tangent
    moduli of mu|F|^p + gamma|cof F|^2 + penalty at F = I.  Returns a
    callable acting on (n_nodes, d) arrays (zero on Dirichlet nodes), or
    None when every node is fixed.
    """
    d, p = mesh.d, params.p
    c1 = params.mu * p * d ** (p / 2 - 1) + 2 * params.gamma + 2 * params.beta1 / d
    c2 = params.mu * p * (p - 2) * d ** (p / 2 - 2) + 2 * kappa
    free = ~mesh.dirichlet_mask
    if not free.any():
        return None
    W = sp.diags(mesh.weights)
    lap = sum(G.T @ W @ G for G in mesh.grad_ops)
    blocks = [[None] * d for _ in range(d)]
    for i in range(d):
        for k in range(d):
            blk = c2 * (mesh.grad_ops[i].T @ W @ mesh.grad_ops[k])
            if i == k:
                blk = blk + c1 * lap
            blocks[i][k] = blk
    K = sp.bmat(blocks, format="csc")
    keep = np.tile(free, d)
    K = K[keep][:, keep].tocsc()
    solve = spla.factorized(K)
    nn = mesh.n_nodes

    def apply(r):
        x = np.zeros((d, nn))
        rr = r.T.reshape(-1)[keep]
        x.reshape(-1)[keep] = solve(rr)
        return x.T.copy()

    return apply


def _two_loop(g, S, Y, rho, precond, gamma):
    q = g.copy()
    alphas = []
    for s, yv, r in zip(reversed(S), reversed(Y), reversed(rho)):
        a = r * np.vdot(s, q)
        alphas.append(a)
        q -= a * yv
    z = gamma * (precond(q) if precond else q)
    for (s, yv, r), a in zip(zip(S, Y, rho), reversed(alphas)):
        b = r * np.vdot(yv, z)
        z += (a - b) * s
    return z


@dataclass
class BlockResult:
    x: np.ndarray
    f: float
    grad_norm: float
    iterations: int
    evaluations: int
    status: str
    history: list


def lbfgs(fun, x0, tangent, retract, norm, tol, options, precond=None, max_step=None, maxiter=None):
    """Limited-memory quasi-Newton descent with Armijo backtracking.

    When a trial value is within roundoff of the current one the step is
    judged by the approximate Armijo condition on the directional
    derivative, so the gradient tolerance stays reachable near a minimiser.

    ``fun(x) -> (f, grad)`` may raise DegenerateDeformationError or
    DegenerateStateError (also from ``retract``) for inadmissible trials, which the line search treats as a rejection.
    ``tangent(x, v)`` projects onto admissible directions, ``retract(x, v)``
    maps a tangent step back onto the constraint set, ``max_step(d)``
    caps the first trial step length.
    """
    maxiter = options.max_inner if maxiter is None else maxiter
    x = x0
    f, g = fun(x)
    g = tangent(x, g)
    S, Y, rho = deque(maxlen=options.memory), deque(maxlen=options.memory), deque(maxlen=options.memory)
    gamma = 1.0
    history = [f]
    evals = 1
    status = "converged"
    it = 0
    stalls = 0
    restarted = False
    while True:
        gn = norm(g)
        if gn <= tol:
            status = "converged"
            break
        if it >= maxiter:
            status = "maxiter"
            break
        d = -_two_loop(g, S, Y, rho, precond, gamma)
        d = tangent(x, d)
        slope = float(np.vdot(g, d))
        if not slope < 0:
            S.clear(), Y.clear(), rho.clear()
            gamma = 1.0
            d = tangent(x, -(precond(g) if precond else g))
            slope = float(np.vdot(g, d))
        noise = 1e-13 * (1.0 + abs(f))
        alpha = 1.0
        if max_step is not None and not S:
            alpha = min(1.0, max_step(d))
        accepted = False
        for _ in range(options.max_backtracks):
            try:
                xt = retract(x, alpha * d)
                ft, gt = fun(xt)
                evals += 1
            except (DegenerateDeformationError, DegenerateStateError):
                evals += 1
                alpha *= options.backtrack
                continue
            if ft <= f + options.armijo * alpha * slope:
                accepted = True
                break
            # near a minimiser f differences drown in roundoff; then use the
            # approximate Armijo test on the directional derivative instead
            if ft <= f + noise and float(np.vdot(tangent(xt, gt), d)) <= (2 * options.armijo - 1) * slope:
                accepted = True
                break
            alpha *= options.backtrack
        if not accepted:
            if S:
                S.clear(), Y.clear(), rho.clear()
                gamma = 1.0
                continue
            status = "linesearch"
            break
        gt = tangent(xt, gt)
        s = tangent(xt, xt - x)
        yv = gt - tangent(xt, g)
        sy = float(np.vdot(s, yv))
        if sy > 1e-12 * np.sqrt(np.vdot(s, s) * np.vdot(yv, yv)):
            S.append(s)
            Y.append(yv)
            rho.append(1.0 / sy)
            Hy = precond(yv) if precond else yv
            gamma = sy / float(np.vdot(yv, Hy))
        progress = f - ft > 1e-15 * (1.0 + abs(f)) or norm(gt) < 0.9 * gn
        x, f, g = xt, ft, gt
        history.append(f)
        it += 1
        if not progress:
            stalls += 1
            if stalls >= 3:
                if restarted:
                    status = "stalled"
                    break
                # stale curvature pairs can stall the descent; retry once from scratch
                S.clear(), Y.clear(), rho.clear()
                gamma = 1.0
                restarted, stalls = True, 0
        else:
            stalls = 0
            restarted = False
    return BlockResult(x, f, norm(g), it, evals, status, history)


def force_density_norm(mesh, mask=None):
    """max_a |g_a| / m_a with m_a the lumped nodal mass."""
    inv_mass = 1.0 / mesh.lumped_mass

    def norm(g):
        v = np.linalg.norm(g, axis=1) * inv_mass
        if mask is not None:
            v = v[~mask]
        return float(v.max()) if v.size else 0.0

    return norm


def minimize(problem, y0, M0, options=None):
    """Alternating block minimization of ``problem`` from the feasible point (y0, M0).

    ``problem`` supplies ``mesh``, a mutable ``kappa``, ``set_geometry(y)``,
    ``y_block(y, M)``, ``m_block(y, M)``, ``value(y, M)`` and
    ``y_preconditioner()``.  The y-block treats the magnetostatic energy as
    frozen; geometry is refreshed before every M-block.  The penalty weight
    is raised until max |det grad y - 1| <= tol_incomp.

    Returns (y, M, diagnostics).
    """
    options = options or SolverOptions()
    mesh = problem.mesh
    y = np.array(y0, dtype=float)
    M = project_saturation(M0)
    J = det_small(deformation_gradients(mesh, y))
    check_determinants(mesh, J, options.det_floor)

    fixed = mesh.dirichlet_mask
    ynorm = force_density_norm(mesh, fixed)
    mnorm = force_density_norm(mesh)

    def y_tangent(_, v):
        v = v.copy()
        v[fixed] = 0.0
        return v

    def y_retract(x, v):
        return x + v

    def m_retract(x, v):
        return project_saturation(x + v)

    def m_max_step(dM):
        big = np.linalg.norm(dM, axis=1).max()
        return options.max_step_M / big if big > 0 else 1.0

    hmin = float(mesh.h.min())

    def y_max_step(dy):
        big = np.linalg.norm(dy, axis=1).max()
        return 0.25 * hmin / big if big > 0 else 1.0

    diag = {"outer": 0, "y_iterations": 0, "M_iterations": 0, "evaluations": 0, "kappa": problem.kappa,
            "objective": [], "objective_kappa": [], "status": "converged", "continuations": 0}
    while True:
        problem.set_geometry(y)
        f = problem.value(y, M)
        diag["objective"].append(f)
        diag["objective_kappa"].append(problem.kappa)
        precond = problem.y_preconditioner()
        converged = False
        for outer in range(options.max_outer):
            moved = 0
            if not fixed.all():
                res = lbfgs(lambda v: problem.y_block(v, M), y, y_tangent, y_retract, ynorm,
                            options.tol_grad, options, precond=precond, max_step=y_max_step)
                diag["y_iterations"] += res.iterations
                diag["evaluations"] += res.evaluations
                moved += res.iterations
                y = res.x
                y_status = res.status
                problem.set_geometry(y)
            else:
                y_status = "converged"
            res = lbfgs(lambda v: problem.m_block(y, v), M, tangent_project, m_retract, mnorm,
                        options.tol_grad, options, max_step=m_max_step)
            diag["M_iterations"] += res.iterations
            diag["evaluations"] += res.evaluations
            moved += res.iterations
            M = res.x
            f = problem.value(y, M)
            diag["objective"].append(f)
            diag["objective_kappa"].append(problem.kappa)
            diag["outer"] += 1
            if moved == 0:
                converged = True
                break
            if res.status == "linesearch" and res.grad_norm > 1e3 * options.tol_grad:
                raise LineSearchError(
                    f"magnetization line search collapsed at gradient {res.grad_norm:.3e}", dict(diag)
                )
            if y_status == "linesearch":
                _, gy = problem.y_block(y, M)
                gn = ynorm(y_tangent(y, gy))
                if gn > 1e3 * options.tol_grad:
                    raise LineSearchError(f"deformation line search collapsed at gradient {gn:.3e}", dict(diag))
            if res.status in ("stalled", "linesearch") and y_status in ("stalled", "linesearch", "converged"):
                converged = True
                break
        if not converged:
            diag["status"] = "maxouter"
        J = det_small(deformation_gradients(mesh, y))
        diag["det_residual"] = float(np.abs(J - 1).max())
        if diag["det_residual"] <= options.tol_incomp:
            break
        new_kappa = problem.kappa * options.kappa_growth
        if new_kappa > options.kappa_max:
            raise ContinuationError(
                f"|det grad y - 1| = {diag['det_residual']:.3e} exceeds {options.tol_incomp} at kappa_max",
                dict(diag),
            )
        problem.kappa = new_kappa
        diag["kappa"] = new_kappa
        diag["continuations"] += 1
    diag["final_objective"] = diag["objective"][-1]
    return y, M, diag
