"""Structured multilinear meshes, state fields and deformed-configuration geometry.

Nodes and elements are numbered lexicographically with axis 0 varying
fastest.  Element-local node ``a`` sits at the corner whose offset along
axis ``k`` is bit ``k`` of ``a``.  All per-quadrature-point arrays are
flattened as ``element * nq + q``.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

from .errors import BoxOverflowError, DegenerateDeformationError, MeshMismatchError

DET_FLOOR = 0.1
GAUSS = 1.0 / np.sqrt(3.0)


def parse_face(name):
    """'x1+' -> (1, +1).  Faces are named by axis index and side."""
    if len(name) < 3 or name[0] != "x" or name[-1] not in "+-":
        raise ValueError(f"bad boundary face name {name!r}; expected e.g. 'x0-' or 'x1+'")
    return int(name[1:-1]), (1 if name[-1] == "+" else -1)


def shape_functions(xi):
    """Multilinear shape functions and their reference gradients.

    xi: (npts, d) points in [-1, 1]^d.  Returns N (npts, 2^d) and
    dN/dxi (npts, 2^d, d).
    """
    xi = np.atleast_2d(np.asarray(xi, dtype=float))
    npts, d = xi.shape
    na = 2**d
    signs = np.array([[2 * ((a >> k) & 1) - 1 for k in range(d)] for a in range(na)], dtype=float)
    factors = 0.5 * (1.0 + xi[:, None, :] * signs[None, :, :])  # (npts, na, d)
    N = np.prod(factors, axis=2)
    dN = np.empty((npts, na, d))
    for k in range(d):
        others = np.delete(factors, k, axis=2)
        dN[:, :, k] = 0.5 * signs[None, :, k] * np.prod(others, axis=2)
    return N, dN


class ReferenceMesh:
    """Axis-aligned box Omega = prod [0, extents[k]] split into multilinear elements.

    Besides geometry this precomputes the sparse operators used everywhere
    else: ``interp`` maps nodal values to quadrature points and
    ``grad_ops[j]`` maps nodal values to their x_j-derivative at quadrature
    points.  Every element has the same shape, so one reference gradient
    table serves the whole mesh.
    """

    def __init__(self, extents, counts, dirichlet=("x0-",), traction=()):
        extents = tuple(float(e) for e in extents)
        counts = tuple(int(c) for c in counts)
        d = len(extents)
        if d not in (2, 3) or len(counts) != d:
            raise ValueError("mesh must be 2D or 3D with one count per axis")
        if any(e <= 0 for e in extents):
            raise ValueError(f"extents must be positive, got {extents}")
        if any(c < 1 for c in counts):
            raise ValueError(f"element counts must be >= 1, got {counts}")
        dirichlet = tuple(dirichlet)
        traction = tuple(traction)
        if not dirichlet:
            raise ValueError("Dirichlet boundary must contain at least one face")
        for f in dirichlet + traction:
            axis, _ = parse_face(f)
            if axis >= d:
                raise ValueError(f"face {f!r} does not exist in {d}D")
        if set(dirichlet) & set(traction):
            raise ValueError(f"Dirichlet and traction faces overlap: {sorted(set(dirichlet) & set(traction))}")

        self.d = d
        self.extents = extents
        self.counts = counts
        self.dirichlet_faces = dirichlet
        self.traction_faces = traction
        self.h = np.array(extents) / np.array(counts)
        self.node_shape = tuple(c + 1 for c in counts)
        self.n_nodes = int(np.prod(self.node_shape))
        self.n_elements = int(np.prod(counts))
        self.volume = float(np.prod(extents))

        # node coordinates, axis 0 fastest
        idx = np.unravel_index(np.arange(self.n_nodes), self.node_shape, order="F")
        self.node_index = np.stack(idx, axis=1)
        self.nodes = self.node_index * self.h[None, :]

        eidx = np.stack(np.unravel_index(np.arange(self.n_elements), counts, order="F"), axis=1)
        na = 2**d
        offsets = np.array([[(a >> k) & 1 for k in range(d)] for a in range(na)])
        corner = eidx[:, None, :] + offsets[None, :, :]
        self.elements = np.ravel_multi_index(
            tuple(corner[..., k] for k in range(d)), self.node_shape, order="F"
        )

        # 2-point Gauss per axis
        self.quad_ref = np.array(list(itertools.product((-GAUSS, GAUSS), repeat=d)))[:, ::-1]
        self.nq = len(self.quad_ref)
        self.element_volume = float(np.prod(self.h))
        N, dN = shape_functions(self.quad_ref)
        self.shape_values = N
        self.shape_grads = dN * (2.0 / self.h)[None, None, :]
        self.quad_weights = np.full(self.nq, self.element_volume / self.nq)
        self.weights = np.tile(self.quad_weights, self.n_elements)

        nqt = self.n_elements * self.nq
        rows = np.repeat(np.arange(nqt), na)
        cols = np.repeat(self.elements, self.nq, axis=0).ravel()
        self.interp = sp.csr_matrix(
            (np.tile(N.ravel(), self.n_elements), (rows, cols)), shape=(nqt, self.n_nodes)
        )
        self.grad_ops = [
            sp.csr_matrix(
                (np.tile(self.shape_grads[:, :, j].ravel(), self.n_elements), (rows, cols)),
                shape=(nqt, self.n_nodes),
            )
            for j in range(d)
        ]
        self.interp_T = self.interp.T.tocsr()
        self.grad_ops_T = [G.T.tocsr() for G in self.grad_ops]
        self.lumped_mass = self.interp_T @ self.weights

        self.dirichlet_mask = self.face_mask(dirichlet)
        self.traction_weights = self._face_weights(traction)

    def __repr__(self):
        return f"ReferenceMesh(extents={self.extents}, counts={self.counts})"

    @property
    def n_quad(self):
        return self.n_elements * self.nq

    def face_mask(self, faces):
        mask = np.zeros(self.n_nodes, dtype=bool)
        for f in faces:
            axis, side = parse_face(f)
            target = 0 if side < 0 else self.counts[axis]
            mask |= self.node_index[:, axis] == target
        return mask

    def _face_weights(self, faces):
        """Nodal weights w_a = int_{faces} N_a ds (exact tensor trapezoid)."""
        w = np.zeros(self.n_nodes)
        for f in faces:
            axis, side = parse_face(f)
            target = 0 if side < 0 else self.counts[axis]
            on = self.node_index[:, axis] == target
            weight = np.ones(self.n_nodes)
            for k in range(self.d):
                if k == axis:
                    continue
                i = self.node_index[:, k]
                edge = (i == 0) | (i == self.counts[k])
                weight *= np.where(edge, 0.5, 1.0) * self.h[k]
            w += np.where(on, weight, 0.0)
        return w

    def face_area(self, faces):
        total = 0.0
        for f in faces:
            axis, _ = parse_face(f)
            total += np.prod([self.extents[k] for k in range(self.d) if k != axis])
        return float(total)

    def same_as(self, other):
        return self is other or (
            self.extents == other.extents
            and self.counts == other.counts
            and self.dirichlet_faces == other.dirichlet_faces
            and self.traction_faces == other.traction_faces
        )


def build_mesh(extents, counts, dirichlet=("x0-",), traction=()):
    return ReferenceMesh(extents, counts, dirichlet, traction)


@dataclass
class State:
    """A magnetoelastic state q = (y, M) with M = m o y on the reference mesh.

    ``y`` and ``M`` are (n_nodes, d) arrays.  Instances are treated as
    immutable; operations return new states.
    """

    mesh: ReferenceMesh
    y: np.ndarray
    M: np.ndarray

    def __post_init__(self):
        self.y = np.asarray(self.y, dtype=float)
        self.M = np.asarray(self.M, dtype=float)
        shape = (self.mesh.n_nodes, self.mesh.d)
        if self.y.shape != shape or self.M.shape != shape:
            raise ValueError(f"state arrays must have shape {shape}, got {self.y.shape} and {self.M.shape}")

    def copy(self):
        return State(self.mesh, self.y.copy(), self.M.copy())

    def replace(self, y=None, M=None):
        return State(self.mesh, self.y if y is None else y, self.M if M is None else M)


def identity_deformation(mesh):
    return mesh.nodes.copy()


def uniform_magnetization(mesh, direction):
    v = np.asarray(direction, dtype=float)
    if v.shape != (mesh.d,):
        raise ValueError(f"direction must have {mesh.d} components")
    n = np.linalg.norm(v)
    if n == 0:
        raise ValueError("magnetization direction must be nonzero")
    return np.tile(v / n, (mesh.n_nodes, 1))


def det_small(F):
    """Determinant of a stack (..., d, d) with d in {2, 3} (closed form)."""
    if F.shape[-1] == 2:
        return F[..., 0, 0] * F[..., 1, 1] - F[..., 0, 1] * F[..., 1, 0]
    return np.einsum("...i,...i->...", F[..., 0, :], np.cross(F[..., 1, :], F[..., 2, :]))


def cof_small(F):
    """Cofactor matrix (det F) F^-T of a stack of 2x2 or 3x3 matrices."""
    if F.shape[-1] == 2:
        C = np.empty_like(F)
        C[..., 0, 0] = F[..., 1, 1]
        C[..., 0, 1] = -F[..., 1, 0]
        C[..., 1, 0] = -F[..., 0, 1]
        C[..., 1, 1] = F[..., 0, 0]
        return C
    r0, r1, r2 = F[..., 0, :], F[..., 1, :], F[..., 2, :]
    return np.stack([np.cross(r1, r2), np.cross(r2, r0), np.cross(r0, r1)], axis=-2)


def inv_small(F, J=None):
    J = det_small(F) if J is None else J
    return np.swapaxes(cof_small(F), -1, -2) / J[..., None, None]


def check_same_mesh(a, b):
    if not a.mesh.same_as(b.mesh):
        raise MeshMismatchError(f"states live on different meshes: {a.mesh} vs {b.mesh}")


def nodal_gradients(mesh, values):
    """Gradient of the interpolant of nodal vector values at every quadrature point.

    Returns (n_quad, d_out, d) with entry [q, i, j] = d values_i / d x_j.
    """
    return np.stack([G @ values for G in mesh.grad_ops], axis=2)


def deformation_gradients(mesh, y):
    return nodal_gradients(mesh, y)


def deformation_gradient(mesh, y, element, quad_point):
    """F at one quadrature point of one element."""
    if not 0 <= element < mesh.n_elements or not 0 <= quad_point < mesh.nq:
        raise IndexError(f"element {element} / quadrature point {quad_point} out of range")
    ynodes = y[mesh.elements[element]]
    return ynodes.T @ mesh.shape_grads[quad_point]


def scatter_gradient(mesh, P):
    """Adjoint of :func:`nodal_gradients`: sum_q P[q] : dF_q/d(nodal values)."""
    out = mesh.grad_ops_T[0] @ P[:, :, 0]
    for j in range(1, mesh.d):
        out += mesh.grad_ops_T[j] @ P[:, :, j]
    return out


def check_determinants(mesh, J, floor=DET_FLOOR):
    if J.size and J.min() <= floor:
        q = int(np.argmin(J))
        raise DegenerateDeformationError(
            J[q], {"element": q // mesh.nq, "quad_point": q % mesh.nq}, floor
        )


def pullback_gradient(F, G, det_floor=DET_FLOOR):
    """Deformed-configuration gradient G F^-1 of a field whose reference gradient is G.

    Works on single matrices or stacks (..., d, d).
    """
    F = np.asarray(F, dtype=float)
    G = np.asarray(G, dtype=float)
    J = np.linalg.det(F)
    if np.any(J <= det_floor):
        flat = np.atleast_1d(J).ravel()
        i = int(np.argmin(flat))
        raise DegenerateDeformationError(flat[i], {"index": i}, det_floor)
    return G @ np.linalg.inv(F)


@dataclass(frozen=True)
class BoxGrid:
    """Cubic Cartesian grid of n^d cells of size h with lower corner ``origin``."""

    origin: tuple
    h: float
    n: int

    @property
    def d(self):
        return len(self.origin)

    @property
    def shape(self):
        return (self.n,) * self.d

    @property
    def cell_volume(self):
        return self.h**self.d

    def cell_centers(self):
        c = np.asarray(self.origin) + (np.arange(self.n) + 0.5)[:, None] * self.h
        grids = np.meshgrid(*[c[:, k] for k in range(self.d)], indexing="ij")
        return np.stack(grids, axis=-1)

    def contains(self, points, margin=0.0):
        p = np.asarray(points)
        lo = np.asarray(self.origin) + margin
        hi = np.asarray(self.origin) + self.n * self.h - margin
        return bool(np.all(p >= lo) and np.all(p <= hi))

    def translated(self, shift):
        return BoxGrid(tuple(np.asarray(self.origin) + np.asarray(shift)), self.h, self.n)


def box_around(mesh, padding=3.5, cells=64, center=None):
    """Box centred on the reference body with a margin of ``padding`` body sizes per side.

    The body size is the largest reference extent, so the box side is
    ``size * (1 + 2 * padding)``.
    """
    if padding < 2:
        raise ValueError(f"box padding must be >= 2 body sizes, got {padding}")
    size = max(mesh.extents)
    side = size * (1.0 + 2.0 * padding)
    if center is None:
        center = 0.5 * np.array(mesh.extents)
    origin = tuple(float(c) for c in np.asarray(center) - 0.5 * side)
    return BoxGrid(origin, side / cells, int(cells))


def _cell_index(box, points):
    idx = np.floor((points - np.asarray(box.origin)) / box.h).astype(np.int64)
    if idx.size and (idx.min() < 0 or idx.max() >= box.n):
        raise BoxOverflowError("deformed body leaves the embedding box")
    return idx


_sample_cache = {}


def sample_operator(mesh, samples):
    """Sparse map nodal values -> values at s^d interior sample points per element."""
    key = (id(mesh), int(samples))
    hit = _sample_cache.get(key)
    if hit is not None and hit[0] is mesh:
        return hit[1]
    d, s = mesh.d, int(samples)
    pts1 = -1.0 + (2.0 * np.arange(s) + 1.0) / s
    xi = np.array(list(itertools.product(pts1, repeat=d)))[:, ::-1]
    N, _ = shape_functions(xi)
    ns, na = N.shape
    rows = np.repeat(np.arange(mesh.n_elements * ns), na)
    cols = np.repeat(mesh.elements, ns, axis=0).ravel()
    S = sp.csr_matrix((np.tile(N.ravel(), mesh.n_elements), (rows, cols)), shape=(mesh.n_elements * ns, mesh.n_nodes))
    _sample_cache[key] = (mesh, S)
    return S


class Rasterization:
    """Linear map nodal M -> cell averages of chi m on a box, for a fixed deformation.

    Each element is sampled at s^d points carrying reference volume |e|/s^d
    (equal to deformed volume when det grad y = 1); a sample deposits its
    interpolated M into the box cell containing its deformed position.
    """

    def __init__(self, mesh, y, box, samples=4):
        if box.d != mesh.d:
            raise MeshMismatchError("box and mesh dimensions differ")
        self.box = box
        self.mesh = mesh
        self.samples = int(samples)
        self.sampler = sample_operator(mesh, samples)
        idx = _cell_index(box, self.sampler @ y)
        self.cells = np.ravel_multi_index(tuple(idx.T), box.shape)
        self.weight = mesh.element_volume / self.samples**mesh.d / box.cell_volume

    @property
    def matrix(self):
        """Explicit sparse (cells x nodes) form of the deposit."""
        n = self.sampler.shape[0]
        P = sp.csr_matrix((np.full(n, self.weight), (self.cells, np.arange(n))), shape=(self.box.n**self.mesh.d, n))
        return (P @ self.sampler).tocsr()

    def apply(self, M):
        Ms = self.sampler @ M
        ncell = self.box.n**self.mesh.d
        out = np.stack([np.bincount(self.cells, Ms[:, k], ncell) for k in range(Ms.shape[1])], axis=1)
        return (self.weight * out).reshape(self.box.shape + (self.mesh.d,))

    def adjoint(self, cell_values):
        c = cell_values.reshape(-1, self.mesh.d)
        return self.sampler.T @ (self.weight * c[self.cells])


def rasterize_magnetization(mesh, y, M, box, samples=4):
    return Rasterization(mesh, y, box, samples).apply(M)


def probe_grid(mesh, y, cells_per_element=2):
    """Probe BoxGrid covering the deformed image with cells finer than the elements."""
    lo = y.min(axis=0)
    hi = y.max(axis=0)
    h = float(mesh.h.min()) / cells_per_element
    # irrational offset keeps probe centres off element faces
    lo = lo - 2 * h - h * (np.sqrt(2.0) - 1.0) / 7.0
    n = int(np.ceil((hi - lo).max() / h)) + 4
    return BoxGrid(tuple(lo), h, n)


def _invert_elements(ynodes, z, iters=30):
    """Newton solve of x(xi) = z on multilinear elements, vectorised over pairs."""
    npair, na, d = ynodes.shape
    xi = np.zeros((npair, d))
    active = np.arange(npair)
    for _ in range(iters):
        yn = ynodes[active]
        N, dN = shape_functions(xi[active])
        r = np.einsum("pa,pad->pd", N, yn) - z[active]
        jac = np.einsum("pai,paj->pij", yn, dN)
        step = np.linalg.solve(jac, r[..., None])[..., 0]
        new = np.clip(xi[active] - step, -3.0, 3.0)
        xi[active] = new
        # converged pairs and pairs pinned far outside the element drop out
        done = (np.abs(step).max(axis=1) < 1e-14) | (np.abs(new).max(axis=1) >= 3.0)
        active = active[~done]
        if active.size == 0:
            break
    N, _ = shape_functions(xi)
    resid = np.linalg.norm(np.einsum("pa,pad->pd", N, ynodes) - z, axis=1)
    return xi, resid


def coverage_multiplicity(mesh, y, probe):
    """Number of deformed elements containing each probe cell centre."""
    d = mesh.d
    J = det_small(deformation_gradients(mesh, y))
    check_determinants(mesh, J, 0.0)
    ynodes = y[mesh.elements]
    origin = np.asarray(probe.origin)
    lo = np.floor((ynodes.min(axis=1) - origin) / probe.h - 0.5).astype(int)
    hi = np.ceil((ynodes.max(axis=1) - origin) / probe.h - 0.5).astype(int)
    if lo.min() < 0 or hi.max() >= probe.n:
        raise BoxOverflowError("deformed body leaves the probe grid")
    span = hi - lo + 1
    offs = np.array(list(itertools.product(*[range(m) for m in span.max(axis=0)])))
    cand = lo[:, None, :] + offs[None, :, :]
    valid = np.all(cand <= hi[:, None, :], axis=2)
    e_idx, o_idx = np.nonzero(valid)
    cells = cand[e_idx, o_idx]
    centers = origin + (cells + 0.5) * probe.h
    xi, resid = _invert_elements(ynodes[e_idx], centers)
    tol = 1e-12
    inside = np.all((xi >= -1.0 - tol) & (xi < 1.0 - tol), axis=1) & (resid < 1e-9 * max(1.0, probe.h))
    flat = np.ravel_multi_index(tuple(cells[inside].T), probe.shape)
    return np.bincount(flat, minlength=probe.n**d).reshape(probe.shape)


def ciarlet_necas_residual(mesh, y, probe=None):
    """Overlap fraction (|covered with multiplicity| - |covered once|) / |Omega|."""
    if probe is None:
        probe = probe_grid(mesh, y)
    mult = coverage_multiplicity(mesh, y, probe)
    extra = np.maximum(mult - 1, 0).sum() * probe.cell_volume
    return float(extra / mesh.volume)
