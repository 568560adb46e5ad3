"""Trace CSV, VTK legacy field snapshots and the saved-state archive."""

from __future__ import annotations

import csv
import io
from pathlib import Path

import numpy as np

from .mesh import State, deformation_gradients, det_small

TRACE_COLUMNS = (
    "step", "t", "E_total", "E_elastic", "E_exchange", "E_magnetostatic", "E_load", "E_penalty",
    "D_step", "Var_cum", "dtE_integral", "upper_gap", "stability_residual", "det_residual_max",
    "cn_residual", "bv_cum",
)

# VTK corner order for local node numbering by offset bits
_VTK_ORDER = {2: (0, 1, 3, 2), 3: (0, 1, 3, 2, 4, 5, 7, 6)}
_VTK_TYPE = {2: 9, 3: 12}


def _fmt(x):
    return format(float(x), ".16e")


def trace_rows(traj, report):
    var = traj.var_cum
    n = len(traj)
    for k in range(n):
        led = traj.ledgers[k]

        def series(values):
            return values[k] if k < len(values) else float("nan")

        yield [str(k)] + [_fmt(v) for v in (
            traj.times[k], led.total, led.elastic, led.exchange, led.magnetostatic, led.load, led.penalty,
            traj.d_step[k], var[k], traj.dtE_integral[k], series(report.upper_gap),
            series(report.stability), series(report.det_residual), series(report.cn_residual),
            series(report.bv_cum),
        )]


def write_trace(traj, report, path):
    """One CSV row per step with the fixed column schema (17 significant digits, LF endings)."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(TRACE_COLUMNS)
    for row in trace_rows(traj, report):
        w.writerow(row)
    with open(path, "w", encoding="ascii", newline="") as fh:
        fh.write(buf.getvalue())


def read_trace(path):
    """Trace CSV -> dict column -> numpy array (validates the header)."""
    with open(path, encoding="ascii", newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows or tuple(rows[0]) != TRACE_COLUMNS:
        raise ValueError(f"{path}: not a trace file (unexpected header)")
    data = np.array([[float(v) for v in r] for r in rows[1:]], dtype=float).reshape(-1, len(TRACE_COLUMNS))
    return {c: data[:, i] for i, c in enumerate(TRACE_COLUMNS)}


def element_mean_det(mesh, y):
    J = det_small(deformation_gradients(mesh, y))
    return J.reshape(mesh.n_elements, mesh.nq).mean(axis=1)


def _points3(P):
    if P.shape[1] == 2:
        P = np.hstack([P, np.zeros((len(P), 1))])
    return P


def write_fields(q, path, reference=False):
    """VTK legacy ASCII unstructured grid: POINTS = y (or reference nodes), VECTORS M, CELL detF."""
    mesh = q.mesh
    d = mesh.d
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    pts = _points3(mesh.nodes if reference else q.y)
    M = _points3(q.M)
    conn = mesh.elements[:, _VTK_ORDER[d]]
    na = conn.shape[1]
    detF = element_mean_det(mesh, q.y)
    lines = [
        "# vtk DataFile Version 3.0",
        "magelastic state (" + ("reference" if reference else "deformed") + " configuration)",
        "ASCII",
        "DATASET UNSTRUCTURED_GRID",
        f"POINTS {mesh.n_nodes} double",
    ]
    lines += [" ".join(_fmt(v) for v in p) for p in pts]
    lines.append(f"CELLS {mesh.n_elements} {mesh.n_elements * (na + 1)}")
    lines += [f"{na} " + " ".join(str(i) for i in c) for c in conn]
    lines.append(f"CELL_TYPES {mesh.n_elements}")
    lines += [str(_VTK_TYPE[d])] * mesh.n_elements
    lines += [f"CELL_DATA {mesh.n_elements}", "SCALARS detF double 1", "LOOKUP_TABLE default"]
    lines += [_fmt(v) for v in detF]
    lines += [f"POINT_DATA {mesh.n_nodes}", "VECTORS M double"]
    lines += [" ".join(_fmt(v) for v in m) for m in M]
    with open(path, "w", encoding="ascii", newline="") as fh:
        fh.write("\n".join(lines) + "\n")


def write_potential(sol, box, path):
    """Cell-centred potential u and |grad u|^2 as VTK structured points."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    shape = sol.u.shape
    d = len(shape)
    dims = list(shape) + [1] * (3 - d)
    origin = [o + 0.5 * box.h for o in box.origin] + [0.0] * (3 - d)
    spacing = [box.h] * d + [1.0] * (3 - d)
    g2 = np.sum(sol.field**2, axis=-1)
    n = int(np.prod(shape))
    lines = [
        "# vtk DataFile Version 3.0",
        "magelastic stray-field potential",
        "ASCII",
        "DATASET STRUCTURED_POINTS",
        "DIMENSIONS " + " ".join(str(v) for v in dims),
        "ORIGIN " + " ".join(_fmt(v) for v in origin),
        "SPACING " + " ".join(_fmt(v) for v in spacing),
        f"POINT_DATA {n}",
        "SCALARS u double 1",
        "LOOKUP_TABLE default",
    ]
    # VTK structured points run x fastest
    lines += [_fmt(v) for v in sol.u.ravel(order="F")]
    lines += ["SCALARS grad_u_sq double 1", "LOOKUP_TABLE default"]
    lines += [_fmt(v) for v in g2.ravel(order="F")]
    with open(path, "w", encoding="ascii", newline="") as fh:
        fh.write("\n".join(lines) + "\n")


def save_states(traj, path):
    """Archive of the trajectory states (times, y, M, kappa) for later re-audit."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    np.savez(
        path,
        times=np.asarray(traj.times),
        y=np.stack([q.y for q in traj.states]),
        M=np.stack([q.M for q in traj.states]),
        kappa=np.asarray(traj.kappa),
    )


def load_states(path, mesh):
    with np.load(path) as z:
        times, ys, Ms, kappa = z["times"], z["y"], z["M"], z["kappa"]
    if ys.shape[1:] != (mesh.n_nodes, mesh.d):
        raise ValueError(f"{path}: states do not match the scenario mesh")
    return list(times), [State(mesh, y, M) for y, M in zip(ys, Ms)], list(kappa)
