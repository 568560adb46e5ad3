"""Stored energy, loads and the time-dependent energy functional.

The default elastic density is

    W(F, m) = mu |F|^p + gamma |cof F|^2 + beta1 |F^T m|^2 + beta2 |(cof F)^T m|^2 - W0

with Frobenius norms and W0 chosen so that W(I, m) = 0 for unit m.  Each
term is a convex function of (F, cof F) for fixed m, invariant under
(F, m) -> (RF, Rm) and even in m.

The elastic density is evaluated at the unit direction of the interpolated
magnetization at each quadrature point; all other terms use the interpolant
itself.  All integrals over the deformed body are pulled back to the reference
mesh using det grad y = 1, so the Zeeman term is int_Omega h . M and the
exchange term is alpha int_Omega |grad M F^-1|^2.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from .errors import DegenerateDeformationError, DegenerateStateError
from .mesh import (
    DET_FLOOR,
    check_determinants,
    deformation_gradients,
    det_small,
    inv_small,
    nodal_gradients,
    scatter_gradient,
)
from .optim import penalty_terms, tangent_project


@dataclass(frozen=True)
class MaterialParams:
    mu: float = 1.0
    p: float = 4.0
    beta1: float = 0.0
    beta2: float = 0.0
    gamma: float = 0.0
    alpha: float = 0.1
    mu0: float = 1.0
    H_c: float = 0.0
    kappa_inc: float = 1.0e4
    eps_dis: float = 1.0e-4

    def validate(self, d):
        if not self.p > d:
            raise ValueError(f"p must exceed d (p = {self.p}, d = {d})")
        for name in ("mu", "alpha", "mu0", "kappa_inc", "eps_dis"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        for name in ("beta1", "beta2", "gamma", "H_c"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")

    def offset(self, d):
        """W0 = W(I, m) before normalisation (independent of the unit vector m)."""
        return self.mu * d ** (self.p / 2) + self.gamma * d + self.beta1 + self.beta2

    def replace(self, **kw):
        return MaterialParams(**{**asdict(self), **kw})


class PiecewiseLinear:
    """Vector-valued piecewise-linear function of time given by knots (t_i, v_i)."""

    def __init__(self, knots, dim):
        if not knots:
            knots = [(0.0, [0.0] * dim)]
        ts = np.array([float(k[0]) for k in knots])
        vs = np.array([np.asarray(k[1], dtype=float) for k in knots])
        if vs.shape != (len(ts), dim):
            raise ValueError(f"load values must have {dim} components")
        if np.any(np.diff(ts) <= 0):
            raise ValueError("load knots must be strictly increasing")
        self.t = ts
        self.v = vs
        self.dim = dim

    @property
    def constant(self):
        return len(self.t) == 1

    def _check(self, t):
        if self.constant:
            return
        if t < self.t[0] - 1e-12 or t > self.t[-1] + 1e-12:
            raise ValueError(f"time {t} outside load knots [{self.t[0]}, {self.t[-1]}]")

    def __call__(self, t):
        self._check(t)
        if self.constant:
            return self.v[0].copy()
        return np.array([np.interp(t, self.t, self.v[:, k]) for k in range(self.dim)])

    def rate(self, t):
        """Slope on the knot interval containing t; right derivative at interior knots."""
        self._check(t)
        if self.constant:
            return np.zeros(self.dim)
        i = int(np.searchsorted(self.t, t, side="right")) - 1
        i = min(max(i, 0), len(self.t) - 2)
        return (self.v[i + 1] - self.v[i]) / (self.t[i + 1] - self.t[i])

    def to_knots(self):
        return [[float(t), [float(x) for x in v]] for t, v in zip(self.t, self.v)]


class Loads:
    """Spatially uniform applied field h, body force f and traction g on Gamma_t."""

    def __init__(self, d, h=(), f=(), g=()):
        self.d = d
        self.h = PiecewiseLinear(list(h), d)
        self.f = PiecewiseLinear(list(f), d)
        self.g = PiecewiseLinear(list(g), d)

    @classmethod
    def zero(cls, d):
        return cls(d)

    def knot_times(self):
        return sorted({float(t) for fn in (self.h, self.f, self.g) for t in fn.t if not fn.constant})


def _frob2(A):
    return np.einsum("...ij,...ij->...", A, A)


def polyconvex_density(F, H, m, params):
    """W^(F, H, m) with H standing in for cof F; convex in (F, H) for fixed m."""
    F = np.asarray(F, dtype=float)
    H = np.asarray(H, dtype=float)
    m = np.asarray(m, dtype=float)
    Ftm = np.einsum("...ji,...j->...i", F, m)
    Htm = np.einsum("...ji,...j->...i", H, m)
    return (
        params.mu * _frob2(F) ** (params.p / 2)
        + params.gamma * _frob2(H)
        + params.beta1 * np.einsum("...i,...i->...", Ftm, Ftm)
        + params.beta2 * np.einsum("...i,...i->...", Htm, Htm)
        - params.offset(F.shape[-1])
    )


def elastic_density(F, m, params, with_m_grad=False, J=None, Finv=None):
    """W(F, m) and dW/dF for one matrix or a stack (..., d, d) with m (..., d).

    Returns (W, dW/dF) or (W, dW/dF, dW/dm).  ``J`` and ``Finv`` may be
    passed in when already known.
    """
    F = np.asarray(F, dtype=float)
    m = np.asarray(m, dtype=float)
    d = F.shape[-1]
    if J is None:
        J = det_small(F)
        if np.any(J <= DET_FLOOR):
            flat = np.atleast_1d(J).ravel()
            i = int(np.argmin(flat))
            raise DegenerateDeformationError(flat[i], {"index": i}, DET_FLOOR)
    if Finv is None:
        Finv = inv_small(F, J)
    FinvT = np.swapaxes(Finv, -1, -2)
    C = J[..., None, None] * FinvT
    mu, p = params.mu, params.p

    nF2 = _frob2(F)
    W = mu * nF2 ** (p / 2)
    P = (mu * p * nF2 ** (p / 2 - 1))[..., None, None] * F

    if params.gamma:
        nC2 = _frob2(C)
        W = W + params.gamma * nC2
        CtC = np.swapaxes(C, -1, -2) @ C
        P = P + 2 * params.gamma * (nC2[..., None, None] * FinvT - FinvT @ CtC)

    Ftm = np.einsum("...ji,...j->...i", F, m)
    W = W + params.beta1 * np.einsum("...i,...i->...", Ftm, Ftm)
    P = P + 2 * params.beta1 * m[..., :, None] * Ftm[..., None, :]
    dm = 2 * params.beta1 * np.einsum("...ij,...j->...i", F, Ftm)

    if params.beta2:
        v = np.einsum("...ji,...j->...i", C, m)
        W = W + params.beta2 * np.einsum("...i,...i->...", v, v)
        A = m[..., :, None] * v[..., None, :]
        AC = np.einsum("...ij,...ij->...", A, C)
        P = P + 2 * params.beta2 * (AC[..., None, None] * FinvT - FinvT @ np.swapaxes(A, -1, -2) @ C)
        dm = dm + 2 * params.beta2 * np.einsum("...ij,...j->...i", C, v)

    W = W - params.offset(d)
    if with_m_grad:
        return W, P, dm
    return W, P


class Kinematics:
    """Quadrature-point quantities of a state shared by all energy terms."""

    def __init__(self, mesh, y, M, det_floor=DET_FLOOR):
        self.mesh = mesh
        self.F = deformation_gradients(mesh, y)
        self.J = det_small(self.F)
        check_determinants(mesh, self.J, det_floor)
        self.Finv = inv_small(self.F, self.J)
        self.Mq = mesh.interp @ M
        self.gradM = nodal_gradients(mesh, M)

    def with_magnetization(self, M):
        """Same geometry, new M (skips the determinant and inverse work)."""
        kin = object.__new__(Kinematics)
        kin.mesh, kin.F, kin.J, kin.Finv = self.mesh, self.F, self.J, self.Finv
        kin.Mq = self.mesh.interp @ M
        kin.gradM = nodal_gradients(self.mesh, M)
        return kin


def elastic_terms(mesh, y, M, params, kin=None, grad=True):
    """Elastic energy and its nodal gradients (dE/dy, dE/dM); gradients are None if not ``grad``."""
    kin = kin or Kinematics(mesh, y, M)
    # W is evaluated at the unit direction of the interpolated magnetization
    n = np.linalg.norm(kin.Mq, axis=1)
    if n.min() < 1e-12:
        raise DegenerateStateError(f"interpolated magnetization vanishes at quadrature point {int(np.argmin(n))}")
    m = kin.Mq / n[:, None]
    W, P, dm = elastic_density(kin.F, m, params, True, kin.J, kin.Finv)
    w = mesh.weights
    E = float(w @ W)
    if not grad:
        return E, None, None
    dm = (dm - np.sum(dm * m, axis=1, keepdims=True) * m) / n[:, None]
    gy = scatter_gradient(mesh, w[:, None, None] * P)
    gM = mesh.interp_T @ (w[:, None] * dm)
    return E, gy, gM


def elastic_energy(mesh, y, M, params):
    return elastic_terms(mesh, y, M, params, grad=False)[0]


def exchange_terms(mesh, y, M, alpha, kin=None, grad=True):
    """alpha int |grad M F^-1|^2 and its gradients."""
    kin = kin or Kinematics(mesh, y, M)
    H = kin.gradM @ kin.Finv
    w = mesh.weights
    E = alpha * float(w @ _frob2(H))
    if not grad:
        return E, None, None
    FinvT = np.swapaxes(kin.Finv, -1, -2)
    dG = 2 * alpha * (H @ FinvT)
    dF = -(np.swapaxes(H, -1, -2) @ dG)
    gM = scatter_gradient(mesh, w[:, None, None] * dG)
    gy = scatter_gradient(mesh, w[:, None, None] * dF)
    return E, gy, gM


def exchange_energy(mesh, y, M, alpha):
    return exchange_terms(mesh, y, M, alpha, grad=False)[0]


def load_potential(t, mesh, y, M, loads):
    """L = int h.M + int f.y + int_{Gamma_t} g.y (subtracted from the energy)."""
    h, f, g = loads.h(t), loads.f(t), loads.g(t)
    return _load_value(mesh, y, M, h, f, g)


def _load_value(mesh, y, M, h, f, g):
    m = mesh.lumped_mass
    return float(h @ (m @ M) + f @ (m @ y) + g @ (mesh.traction_weights @ y))


def load_gradients(t, mesh, loads):
    """(dL/dy, dL/dM) nodal arrays; L is linear so these are state independent."""
    h, f, g = loads.h(t), loads.f(t), loads.g(t)
    m = mesh.lumped_mass
    gy = np.outer(m, f) + np.outer(mesh.traction_weights, g)
    gM = np.outer(m, h)
    return gy, gM


def energy_time_derivative(t, mesh, y, M, loads):
    """Explicit time derivative of the energy at fixed state (right slope at knots)."""
    return -_load_value(mesh, y, M, loads.h.rate(t), loads.f.rate(t), loads.g.rate(t))


def energy_time_integral(t0, t1, mesh, y, M, loads):
    """int_{t0}^{t1} d_t E(theta, q) dtheta at fixed q, exact for piecewise-linear loads."""
    dh = loads.h(t1) - loads.h(t0)
    df = loads.f(t1) - loads.f(t0)
    dg = loads.g(t1) - loads.g(t0)
    return -_load_value(mesh, y, M, dh, df, dg)


@dataclass
class EnergyLedger:
    elastic: float
    exchange: float
    magnetostatic: float
    load: float
    penalty: float

    @property
    def total(self):
        return self.elastic + self.exchange + self.magnetostatic - self.load + self.penalty


def energy_ledger(t, mesh, y, M, params, loads, stray_energy, kappa=None, kin=None):
    kin = kin or Kinematics(mesh, y, M)
    kappa = params.kappa_inc if kappa is None else kappa
    return EnergyLedger(
        elastic=elastic_terms(mesh, y, M, params, kin, grad=False)[0],
        exchange=exchange_terms(mesh, y, M, params.alpha, kin, grad=False)[0],
        magnetostatic=float(stray_energy),
        load=load_potential(t, mesh, y, M, loads),
        penalty=penalty_terms(mesh, y, kappa, kin, grad=False)[0],
    )


def total_energy(t, mesh, y, M, params, loads, stray_energy, kappa=None):
    return energy_ledger(t, mesh, y, M, params, loads, stray_energy, kappa).total


def energy_gradient(t, mesh, y, M, params, loads, stray_sensitivity=None, kappa=None, project=True):
    """Nodal gradients (dE/dy masked on Dirichlet nodes, dE/dM tangent-projected).

    ``stray_sensitivity`` is the frozen-field nodal gradient of the
    magnetostatic energy w.r.t. M (None means no stray field); its
    y-sensitivity is taken as zero.
    """
    kappa = params.kappa_inc if kappa is None else kappa
    kin = Kinematics(mesh, y, M)
    _, gy_e, gM_e = elastic_terms(mesh, y, M, params, kin)
    _, gy_x, gM_x = exchange_terms(mesh, y, M, params.alpha, kin)
    _, gy_p = penalty_terms(mesh, y, kappa, kin)
    ly, lM = load_gradients(t, mesh, loads)
    gy = gy_e + gy_x + gy_p - ly
    gM = gM_e + gM_x - lM
    if stray_sensitivity is not None:
        gM = gM + stray_sensitivity
    gy[mesh.dirichlet_mask] = 0.0
    if project:
        gM = tangent_project(M, gM)
    return gy, gM
