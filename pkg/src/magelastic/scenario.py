"""JSON scenario files: parsing, validation, defaults and round-trip serialization."""

from __future__ import annotations

import copy
import json
import math
from dataclasses import dataclass, field, fields
from pathlib import Path

import numpy as np

from .errors import ScenarioError
from .evolution import AuditConfig, Model
from .material import Loads, MaterialParams
from .mesh import State, box_around, build_mesh, identity_deformation, parse_face, uniform_magnetization
from .optim import SolverOptions, project_saturation

SECTIONS = ("mesh", "box", "material", "loads", "time", "initial", "solver", "audit", "output", "seed")
REQUIRED = ("mesh", "material", "time")

MESH_DEFAULTS = {"extents": None, "counts": None, "dirichlet": ["x0-"], "traction": []}
BOX_DEFAULTS = {"enabled": True, "padding": 3.5, "cells": 64, "samples": 4}
LOADS_DEFAULTS = {"h": [], "f": [], "g": []}
TIME_DEFAULTS = {"T": 1.0, "N": None, "knots": None}
INITIAL_DEFAULTS = {"M_direction": None, "M_file": None, "y_file": None, "relax": True}
OUTPUT_DEFAULTS = {"dir": "out", "trace": "trace.csv", "states": "states.npz", "fields": True, "field_stride": 0,
                   "potential": False}


def _dataclass_defaults(cls):
    return {f.name: f.default for f in fields(cls)}


def _check_keys(section, given, allowed):
    if not isinstance(given, dict):
        raise ScenarioError(f"section '{section}' must be a JSON object")
    unknown = sorted(set(given) - set(allowed))
    if unknown:
        raise ScenarioError(f"unknown key(s) in '{section}': {', '.join(repr(k) for k in unknown)}")


def _merge(section, given, defaults):
    given = {} if given is None else given
    _check_keys(section, given, defaults)
    out = copy.deepcopy(defaults)
    out.update(copy.deepcopy(given))
    return out


def _number(section, key, value, positive=False, nonneg=False, integer=False):
    where = f"{section}.{key}"
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        raise ScenarioError(f"{where} must be a number, got {value!r}")
    if not math.isfinite(value):
        raise ScenarioError(f"{where} must be finite")
    if integer and int(value) != value:
        raise ScenarioError(f"{where} must be an integer, got {value!r}")
    if positive and not value > 0:
        raise ScenarioError(f"{where} must be positive, got {value!r}")
    if nonneg and value < 0:
        raise ScenarioError(f"{where} must be non-negative, got {value!r}")
    return int(value) if integer else float(value)


def _vector(where, value, d):
    if not isinstance(value, (list, tuple)) or len(value) != d:
        raise ScenarioError(f"{where} must be a list of {d} numbers")
    return [_number(where, str(i), v) for i, v in enumerate(value)]


@dataclass
class Scenario:
    """Validated scenario with every default filled in."""

    mesh: dict
    box: dict
    material: dict
    loads: dict
    time: dict
    initial: dict
    solver: dict
    audit: dict
    output: dict
    seed: int = 0
    base_dir: Path = field(default_factory=Path.cwd, repr=False, compare=False)

    @property
    def d(self):
        return len(self.mesh["extents"])

    def build_mesh(self):
        m = self.mesh
        return build_mesh(m["extents"], m["counts"], tuple(m["dirichlet"]), tuple(m["traction"]))

    def material_params(self):
        return MaterialParams(**self.material)

    def build_loads(self):
        return Loads(self.d, **{k: [(t, v) for t, v in self.loads[k]] for k in ("h", "f", "g")})

    def build_box(self, mesh):
        if not self.box["enabled"]:
            return None
        return box_around(mesh, self.box["padding"], self.box["cells"])

    def model(self, mesh=None):
        mesh = mesh or self.build_mesh()
        return Model(mesh, self.material_params(), self.build_loads(), self.build_box(mesh), self.box["samples"])

    def times(self):
        t = self.time
        if t["knots"] is not None:
            return np.array(t["knots"], dtype=float)
        return np.linspace(0.0, t["T"], t["N"] + 1)

    def solver_options(self):
        return SolverOptions(**self.solver)

    def audit_config(self):
        return AuditConfig(**self.audit)

    def resolve(self, path):
        p = Path(path)
        return p if p.is_absolute() else self.base_dir / p

    def initial_state(self, mesh):
        ini = self.initial
        d = mesh.d
        shape = (mesh.n_nodes, d)
        if ini["y_file"] is not None:
            y = _load_nodal(self.resolve(ini["y_file"]), shape, "initial.y_file")
        else:
            y = identity_deformation(mesh)
        if ini["M_file"] is not None:
            M = project_saturation(_load_nodal(self.resolve(ini["M_file"]), shape, "initial.M_file"))
        else:
            direction = ini["M_direction"] or [1.0] + [0.0] * (d - 1)
            M = uniform_magnetization(mesh, direction)
        return State(mesh, y, M)

    def to_dict(self):
        return {
            "mesh": copy.deepcopy(self.mesh),
            "box": dict(self.box),
            "material": dict(self.material),
            "loads": copy.deepcopy(self.loads),
            "time": copy.deepcopy(self.time),
            "initial": copy.deepcopy(self.initial),
            "solver": dict(self.solver),
            "audit": dict(self.audit),
            "output": dict(self.output),
            "seed": self.seed,
        }

    def dumps(self):
        return json.dumps(self.to_dict(), indent=2) + "\n"

    def save(self, path):
        Path(path).write_text(self.dumps(), encoding="utf-8")


def _load_nodal(path, shape, key):
    if not path.exists():
        raise ScenarioError(f"{key}: file not found: {path}")
    try:
        arr = np.load(path) if path.suffix == ".npy" else np.loadtxt(path, ndmin=2)
    except (OSError, ValueError) as exc:
        raise ScenarioError(f"{key}: cannot read {path}: {exc}") from exc
    if arr.shape != shape:
        raise ScenarioError(f"{key}: expected an array of shape {shape}, got {arr.shape}")
    return arr.astype(float)


def _knots(section, key, value, d):
    if not isinstance(value, list):
        raise ScenarioError(f"{section}.{key} must be a list of [t, [v...]] knots")
    out = []
    for i, k in enumerate(value):
        if not isinstance(k, (list, tuple)) or len(k) != 2:
            raise ScenarioError(f"{section}.{key}[{i}] must be [t, [v...]]")
        out.append([_number(section, f"{key}[{i}].t", k[0]), _vector(f"{section}.{key}[{i}]", k[1], d)])
    ts = [k[0] for k in out]
    if any(b <= a for a, b in zip(ts, ts[1:])):
        raise ScenarioError(f"{section}.{key}: knot times must be strictly increasing")
    return out


def scenario_from_dict(doc, base_dir=None):
    """Validate a parsed scenario document and apply defaults."""
    if not isinstance(doc, dict):
        raise ScenarioError("scenario must be a JSON object")
    unknown = sorted(set(doc) - set(SECTIONS))
    if unknown:
        raise ScenarioError(f"unknown top-level key(s): {', '.join(repr(k) for k in unknown)}")
    for key in REQUIRED:
        if key not in doc:
            raise ScenarioError(f"missing required section '{key}'")

    mesh = _merge("mesh", doc["mesh"], MESH_DEFAULTS)
    if mesh["extents"] is None or mesh["counts"] is None:
        raise ScenarioError("mesh.extents and mesh.counts are required")
    if not isinstance(mesh["extents"], list) or len(mesh["extents"]) not in (2, 3):
        raise ScenarioError("mesh.extents must list 2 or 3 lengths")
    d = len(mesh["extents"])
    mesh["extents"] = [_number("mesh", "extents", v, positive=True) for v in mesh["extents"]]
    if not isinstance(mesh["counts"], list) or len(mesh["counts"]) != d:
        raise ScenarioError(f"mesh.counts must list {d} element counts")
    mesh["counts"] = [_number("mesh", "counts", v, positive=True, integer=True) for v in mesh["counts"]]
    for key in ("dirichlet", "traction"):
        if not isinstance(mesh[key], list) or not all(isinstance(f, str) for f in mesh[key]):
            raise ScenarioError(f"mesh.{key} must be a list of face names such as 'x0-'")
        for f in mesh[key]:
            try:
                axis, _ = parse_face(f)
            except ValueError as exc:
                raise ScenarioError(f"mesh.{key}: {exc}") from exc
            if axis >= d:
                raise ScenarioError(f"mesh.{key}: face {f!r} does not exist in {d}D")
    if not mesh["dirichlet"]:
        raise ScenarioError("mesh.dirichlet must tag at least one face")
    if set(mesh["dirichlet"]) & set(mesh["traction"]):
        raise ScenarioError("mesh.dirichlet and mesh.traction must be disjoint")

    box = _merge("box", doc.get("box"), BOX_DEFAULTS)
    if not isinstance(box["enabled"], bool):
        raise ScenarioError("box.enabled must be true or false")
    box["padding"] = _number("box", "padding", box["padding"], positive=True)
    if box["padding"] < 2:
        raise ScenarioError("box.padding must be >= 2 (body sizes per side)")
    box["cells"] = _number("box", "cells", box["cells"], positive=True, integer=True)
    box["samples"] = _number("box", "samples", box["samples"], positive=True, integer=True)

    material = _merge("material", doc["material"], _dataclass_defaults(MaterialParams))
    for key in material:
        material[key] = _number("material", key, material[key])
    try:
        MaterialParams(**material).validate(d)
    except ValueError as exc:
        raise ScenarioError(f"material: {exc}") from exc

    loads = _merge("loads", doc.get("loads"), LOADS_DEFAULTS)
    for key in ("h", "f", "g"):
        loads[key] = _knots("loads", key, loads[key], d)

    time = _merge("time", doc["time"], TIME_DEFAULTS)
    if time["knots"] is not None:
        if not isinstance(time["knots"], list) or len(time["knots"]) < 2:
            raise ScenarioError("time.knots must list at least two times")
        ks = [_number("time", "knots", v) for v in time["knots"]]
        if any(b <= a for a, b in zip(ks, ks[1:])):
            raise ScenarioError("time.knots must be strictly increasing")
        if ks[0] != 0.0:
            raise ScenarioError("time.knots must start at 0")
        time["knots"] = ks
        time["T"] = ks[-1]
        time["N"] = len(ks) - 1
    else:
        if time["N"] is None:
            raise ScenarioError("time needs either N (number of steps) or knots")
        time["T"] = _number("time", "T", time["T"], positive=True)
        time["N"] = _number("time", "N", time["N"], positive=True, integer=True)
    T = time["T"]
    for key in ("h", "f", "g"):
        ks = loads[key]
        if len(ks) > 1 and (ks[0][0] > 1e-12 or ks[-1][0] < T - 1e-12):
            raise ScenarioError(f"loads.{key}: knots [{ks[0][0]}, {ks[-1][0]}] do not cover [0, {T}]")

    initial = _merge("initial", doc.get("initial"), INITIAL_DEFAULTS)
    if initial["M_direction"] is not None:
        initial["M_direction"] = _vector("initial.M_direction", initial["M_direction"], d)
        if not any(initial["M_direction"]):
            raise ScenarioError("initial.M_direction must be nonzero")
    for key in ("M_file", "y_file"):
        if initial[key] is not None and not isinstance(initial[key], str):
            raise ScenarioError(f"initial.{key} must be a path string")
    if not isinstance(initial["relax"], bool):
        raise ScenarioError("initial.relax must be true or false")

    solver = _merge("solver", doc.get("solver"), _dataclass_defaults(SolverOptions))
    ints = {"max_outer", "max_inner", "memory", "max_backtracks"}
    for key in solver:
        solver[key] = _number("solver", key, solver[key], integer=key in ints)
    try:
        SolverOptions(**solver).validate()
    except ValueError as exc:
        raise ScenarioError(f"solver: {exc}") from exc

    audit = _merge("audit", doc.get("audit"), _dataclass_defaults(AuditConfig))
    for key in audit:
        integer = key in ("competitors", "stride", "history", "cn_cells_per_element")
        audit[key] = _number("audit", key, audit[key], nonneg=True, integer=integer)
    if audit["stride"] < 1 or audit["cn_cells_per_element"] < 1:
        raise ScenarioError("audit.stride and audit.cn_cells_per_element must be >= 1")

    output = _merge("output", doc.get("output"), OUTPUT_DEFAULTS)
    for key in ("dir", "trace", "states"):
        if not isinstance(output[key], str) or not output[key]:
            raise ScenarioError(f"output.{key} must be a non-empty string")
    for key in ("fields", "potential"):
        if not isinstance(output[key], bool):
            raise ScenarioError(f"output.{key} must be true or false")
    output["field_stride"] = _number("output", "field_stride", output["field_stride"], nonneg=True, integer=True)

    seed = doc.get("seed", 0)
    if isinstance(seed, bool) or not isinstance(seed, int) or not 0 <= seed < 2**64:
        raise ScenarioError("seed must be an integer in [0, 2^64)")

    sc = Scenario(mesh, box, material, loads, time, initial, solver, audit, output, seed,
                  Path(base_dir) if base_dir else Path.cwd())
    for key in ("M_file", "y_file"):
        if initial[key] is not None and not sc.resolve(initial[key]).exists():
            raise ScenarioError(f"initial.{key}: file not found: {sc.resolve(initial[key])}")
    return sc


def loads_scenario_text(text, base_dir=None, name="<string>"):
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ScenarioError(f"{name}: JSON parse error at line {exc.lineno}, column {exc.colno}: {exc.msg}") from exc
    return scenario_from_dict(doc, base_dir)


def load_scenario(path):
    path = Path(path)
    if not path.is_file():
        raise ScenarioError(f"scenario file not found: {path}")
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise ScenarioError(f"cannot read scenario {path}: {exc}") from exc
    return loads_scenario_text(text, path.parent.resolve(), str(path))


def hysteresis_scenario(H_c=0.05, N=100, n=32, cells=64, competitors=200, seed=0):
    """The standard field-reversal scenario used by the acceptance suite and demos."""
    doc = {
        "mesh": {"extents": [1.0, 1.0], "counts": [n, n], "dirichlet": ["x0-"]},
        "box": {"padding": 3.5, "cells": cells},
        "material": {"mu": 1.0, "p": 4.0, "alpha": 0.1, "beta1": 0.02, "H_c": H_c, "kappa_inc": 1.0e4},
        "loads": {"h": [[0.0, [1.0, 0.1]], [1.0, [-1.0, 0.1]]]},
        "time": {"T": 1.0, "N": N},
        "initial": {"M_direction": [1.0, 0.0]},
        "audit": {"competitors": competitors},
        "seed": seed,
    }
    return scenario_from_dict(doc)
