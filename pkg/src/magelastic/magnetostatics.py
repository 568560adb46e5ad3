"""Stray-field potential on a Dirichlet box.

Discrete problem (cell-centred potential u, staggered face gradients):

    minimise  sum_f w_f [ mu0/2 (Du)_f^2 - m_f (Du)_f ]

where (Du)_f is the normal difference quotient across face f, m_f the
normal component of the face-averaged magnetization, and w_f the dual
volume (h^d inside, h^d/2 on the box boundary where the neighbour is the
ghost value -u).  The Euler-Lagrange equation mu0 D^T W D u = D^T W m is
the finite-volume form of div(-mu0 grad u + chi m) = 0 with u = 0 on the
box boundary, and the minimum value gives the energy (mu0/2) sum w |Du|^2.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import fft

from .errors import SolverError


@dataclass
class StrayFieldSolution:
    u: np.ndarray
    face_grad: list
    energy: float
    iterations: int
    residual: float
    h: float
    mu0: float
    cell_magnetization: np.ndarray = field(repr=False, default=None)

    @property
    def field(self):
        """Cell-centred stray field -grad u (average of the two adjacent faces)."""
        comps = []
        for k, g in enumerate(self.face_grad):
            lo = np.take(g, np.arange(g.shape[k] - 1), axis=k)
            hi = np.take(g, np.arange(1, g.shape[k]), axis=k)
            comps.append(-0.5 * (lo + hi))
        return np.stack(comps, axis=-1)


def _pad_ghost(a, axis, ghost):
    pad = [(0, 0)] * a.ndim
    pad[axis] = (1, 1)
    if ghost == "odd":
        out = np.pad(a, pad)
        lo = [slice(None)] * a.ndim
        lo[axis] = 0
        src = [slice(None)] * a.ndim
        src[axis] = 1
        out[tuple(lo)] = -out[tuple(src)]
        hi = [slice(None)] * a.ndim
        hi[axis] = -1
        src[axis] = -2
        out[tuple(hi)] = -out[tuple(src)]
        return out
    return np.pad(a, pad)


def face_gradients(u, h):
    """(Du)_f per axis; axis k array has n+1 entries along k."""
    return [np.diff(_pad_ghost(u, k, "odd"), axis=k) / h for k in range(u.ndim)]


def face_weights(shape, axis, h):
    d = len(shape)
    w = np.full(tuple(n + (1 if k == axis else 0) for k, n in enumerate(shape)), h**d)
    ends = [slice(None)] * d
    ends[axis] = [0, shape[axis]]
    w[tuple(ends)] *= 0.5
    return w


def face_magnetization(cellM):
    """Normal magnetization on faces: mean of the two adjacent cells (vacuum outside)."""
    d = cellM.ndim - 1
    out = []
    for k in range(d):
        padded = _pad_ghost(cellM[..., k], k, "zero")
        lo = np.take(padded, np.arange(padded.shape[k] - 1), axis=k)
        hi = np.take(padded, np.arange(1, padded.shape[k]), axis=k)
        out.append(0.5 * (lo + hi))
    return out


def face_magnetization_adjoint(face_values, shape):
    d = len(shape)
    out = np.zeros(tuple(shape) + (d,))
    for k, fv in enumerate(face_values):
        lo = np.take(fv, np.arange(shape[k]), axis=k)
        hi = np.take(fv, np.arange(1, shape[k] + 1), axis=k)
        out[..., k] = 0.5 * (lo + hi)
    return out


def divergence_adjoint(face_values, h):
    """D^T applied to face values (cells x), including the odd-ghost boundary rows."""
    d = face_values[0].ndim
    out = 0.0
    for k, fv in enumerate(face_values):
        n = fv.shape[k] - 1
        lo = np.take(fv, np.arange(n), axis=k)
        hi = np.take(fv, np.arange(1, n + 1), axis=k)
        term = (lo - hi) / h
        # ghost -u at both ends doubles the boundary-face coefficient
        first = [slice(None)] * d
        first[k] = 0
        last = [slice(None)] * d
        last[k] = n - 1
        term[tuple(first)] += np.take(fv, 0, axis=k) / h
        term[tuple(last)] -= np.take(fv, n, axis=k) / h
        out = out + term
    return out


def apply_operator(u, h, mu0):
    """mu0 D^T W D u."""
    shape = u.shape
    grads = face_gradients(u, h)
    return mu0 * divergence_adjoint([face_weights(shape, k, h) * g for k, g in enumerate(grads)], h)


def rhs(cellM, h):
    shape = cellM.shape[:-1]
    mf = face_magnetization(cellM)
    return divergence_adjoint([face_weights(shape, k, h) * m for k, m in enumerate(mf)], h)


class SpectralPreconditioner:
    """Exact inverse of the Dirichlet-ghost Laplacian via DST-II in every axis."""

    def __init__(self, shape, h, mu0):
        d = len(shape)
        lam = 0.0
        for k, n in enumerate(shape):
            ev = 2.0 - 2.0 * np.cos(np.pi * np.arange(1, n + 1) / n)
            sh = [1] * d
            sh[k] = n
            lam = lam + ev.reshape(sh)
        self.eigs = mu0 * h ** (d - 2) * lam

    def __call__(self, r):
        return fft.idstn(fft.dstn(r, type=2) / self.eigs, type=2)


def conjugate_gradient(apply, b, precond=None, tol=1e-8, maxiter=2000, x0=None):
    """Preconditioned CG on arrays of any shape.  Returns (x, iterations, relative residual)."""
    bnorm = np.sqrt(np.vdot(b, b))
    x = np.zeros_like(b) if x0 is None else x0.copy()
    if bnorm == 0.0:
        return np.zeros_like(b), 0, 0.0
    r = b - apply(x) if x0 is not None else b.copy()
    z = precond(r) if precond else r
    p = z.copy()
    rz = np.vdot(r, z)
    rel = np.sqrt(np.vdot(r, r)) / bnorm
    it = 0
    while rel > tol and it < maxiter:
        Ap = apply(p)
        alpha = rz / np.vdot(p, Ap)
        x += alpha * p
        r -= alpha * Ap
        it += 1
        rel = np.sqrt(np.vdot(r, r)) / bnorm
        if rel <= tol:
            break
        z = precond(r) if precond else r
        rz_new = np.vdot(r, z)
        p = z + (rz_new / rz) * p
        rz = rz_new
    return x, it, float(rel)


_precond_cache = {}


def solve_potential(cellM, h, mu0=1.0, tol=1e-8, maxiter=5000, precondition=True):
    """Solve the box potential problem for a rasterized magnetization ``cellM`` (n^d x d)."""
    cellM = np.asarray(cellM, dtype=float)
    if not np.all(np.isfinite(cellM)):
        raise ValueError("cell magnetization must be finite")
    shape = cellM.shape[:-1]
    b = rhs(cellM, h)
    pc = None
    if precondition:
        key = (shape, float(h), float(mu0))
        pc = _precond_cache.get(key)
        if pc is None:
            pc = _precond_cache[key] = SpectralPreconditioner(shape, h, mu0)
    u, it, rel = conjugate_gradient(lambda v: apply_operator(v, h, mu0), b, pc, tol, maxiter)
    if rel > tol:
        raise SolverError(
            f"potential solve did not converge: residual {rel:.3e} after {it} iterations",
            {"iterations": it, "residual": rel},
        )
    grads = face_gradients(u, h)
    sol = StrayFieldSolution(u, grads, 0.0, it, rel, h, mu0, cellM)
    sol.energy = magnetostatic_energy(sol)
    return sol


def magnetostatic_energy(sol):
    """Midpoint rule for (mu0/2) int |grad u|^2 on the staggered faces."""
    shape = sol.u.shape
    total = 0.0
    for k, g in enumerate(sol.face_grad):
        total += np.sum(face_weights(shape, k, sol.h) * g * g)
    return 0.5 * sol.mu0 * float(total)


def cell_sensitivity(sol):
    """d(energy)/d(cellM): the face field mu0 grad u mapped back to cells."""
    shape = sol.u.shape
    weighted = [face_weights(shape, k, sol.h) * g for k, g in enumerate(sol.face_grad)]
    return face_magnetization_adjoint(weighted, shape)


def magnetization_sensitivity(sol, raster):
    """Nodal gradient of the magnetostatic energy w.r.t. M at fixed geometry."""
    if raster.box.shape != sol.u.shape or not np.isclose(raster.box.h, sol.h):
        raise ValueError("rasterization geometry does not match the potential solution")
    return raster.adjoint(cell_sensitivity(sol))
