"""Batch command line: run, minimize, audit, selftest.

Exit codes: 0 success, 1 invalid input, 2 solver failure, 3 audit failure.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np

from .errors import MagelasticError, ScenarioError
from .evolution import audit_trajectory, run_evolution, trajectory_from_states
from .magnetostatics import solve_potential
from .output import load_states, read_trace, save_states, write_fields, write_potential, write_trace
from .scenario import load_scenario
from .selftest import run_selftest

EXIT_OK, EXIT_INPUT, EXIT_SOLVER, EXIT_AUDIT = 0, 1, 2, 3

log = logging.getLogger("magelastic")

# columns recomputed from saved states during re-audit
_LEDGER_COLUMNS = ("E_total", "E_elastic", "E_exchange", "E_magnetostatic", "E_load", "E_penalty", "D_step",
                   "Var_cum", "dtE_integral")


def _setup_logging(quiet):
    handler = logging.StreamHandler(sys.stderr)
    handler.setFormatter(logging.Formatter("%(message)s"))
    log.handlers[:] = [handler]
    log.setLevel(logging.WARNING if quiet else logging.INFO)
    log.propagate = False


def _load(args):
    sc = load_scenario(args.scenario)
    if args.seed is not None:
        if not 0 <= args.seed < 2**64:
            raise ScenarioError("--seed must lie in [0, 2^64)")
        sc.seed = args.seed
    out = Path(args.out) if args.out else sc.resolve(sc.output["dir"])
    return sc, out


def _report_failures(report):
    for kind, k, value in report.failures:
        log.warning("audit failure: %s at step %d (value %.3e)", kind, k, value)


def _write_outputs(sc, model, traj, report, out, trace_name):
    out.mkdir(parents=True, exist_ok=True)
    write_trace(traj, report, out / trace_name)
    save_states(traj, out / sc.output["states"])
    (out / "scenario.json").write_text(sc.dumps(), encoding="utf-8")
    if sc.output["fields"]:
        stride = sc.output["field_stride"]
        last = len(traj) - 1
        steps = sorted({last} | (set(range(0, last + 1, stride)) if stride else set()))
        for k in steps:
            write_fields(traj.states[k], out / f"state_{k:04d}.vtk")
            write_fields(traj.states[k], out / f"state_{k:04d}_ref.vtk", reference=True)
    if sc.output["potential"] and model.box is not None:
        q = traj.states[-1]
        sol = solve_potential(model.raster(q.y).apply(q.M), model.box.h, model.params.mu0)
        write_potential(sol, model.box, out / "potential_final.vtk")


def _progress(k, traj, report):
    stab = report.stability[-1]
    log.info("step %4d  t=%.6f  E=% .10e  D=%.3e  stab=%s%s", k, traj.times[k], traj.totals[k], traj.d_step[k],
             "-" if np.isnan(stab) else f"{stab:.3e}", "  (kept previous state)" if traj.fallback[k] else "")


def _evolve(sc, out, times, trace_name):
    model = sc.model()
    q0 = sc.initial_state(model.mesh)
    try:
        traj, report = run_evolution(model, times, q0, sc.solver_options(), sc.audit_config(), sc.seed,
                                     sc.initial["relax"], _progress)
    except MagelasticError as exc:
        log.error("solver failure: %s", exc)
        partial = getattr(exc, "trajectory", None)
        if partial is not None and len(partial):
            _write_outputs(sc, model, partial, exc.report, out, trace_name)
            log.error("partial trajectory (%d states) written to %s", len(partial), out)
        return EXIT_SOLVER
    _write_outputs(sc, model, traj, report, out, trace_name)
    log.info("wrote %s (%d steps); Var = %.6e, cumulative two-sided energy gap = %.3e", out / trace_name,
             len(traj) - 1, traj.var_cum[-1], report.two_sided_gap)
    if report.failures:
        _report_failures(report)
        return EXIT_AUDIT
    return EXIT_OK


def cmd_run(args):
    sc, out = _load(args)
    return _evolve(sc, out, sc.times(), sc.output["trace"])


def cmd_minimize(args):
    sc, out = _load(args)
    sc.initial["relax"] = True
    return _evolve(sc, out, [float(sc.times()[0])], "minimize.csv")


def cmd_audit(args):
    sc, _ = _load(args)
    trace_path = Path(args.trace)
    if not trace_path.is_file():
        raise ScenarioError(f"trace file not found: {trace_path}")
    try:
        trace = read_trace(trace_path)
    except ValueError as exc:
        raise ScenarioError(str(exc)) from exc
    states_path = trace_path.parent / sc.output["states"]
    model = sc.model()
    cfg = sc.audit_config()
    tol = sc.solver_options().tol_incomp
    if not states_path.is_file():
        raise ScenarioError(f"saved states not found next to the trace: {states_path}")
    try:
        times, states, kappas = load_states(states_path, model.mesh)
    except (ValueError, OSError, KeyError) as exc:
        raise ScenarioError(f"cannot read saved states {states_path}: {exc}") from exc
    if len(times) != len(trace["step"]):
        raise ScenarioError(f"trace has {len(trace['step'])} rows but {len(times)} saved states")
    traj = trajectory_from_states(model, times, states, kappas)
    report = audit_trajectory(model, traj, cfg, sc.seed, tol)
    mismatches = []
    recomputed = {
        "E_total": traj.totals, "E_elastic": [l.elastic for l in traj.ledgers],
        "E_exchange": [l.exchange for l in traj.ledgers], "E_magnetostatic": [l.magnetostatic for l in traj.ledgers],
        "E_load": [l.load for l in traj.ledgers], "E_penalty": [l.penalty for l in traj.ledgers],
        "D_step": traj.d_step, "Var_cum": traj.var_cum, "dtE_integral": traj.dtE_integral,
    }
    for col in _LEDGER_COLUMNS:
        a, b = np.asarray(recomputed[col]), trace[col]
        err = np.abs(a - b) / (1.0 + np.abs(b))
        if err.max() > 1e-9:
            mismatches.append((col, int(np.argmax(err)), float(err.max())))
    for col, k, err in mismatches:
        log.warning("trace column %s disagrees with the saved states at step %d (relative %.3e)", col, k, err)
    _report_failures(report)
    worst = np.nanmin(report.stability) if report.stability else float("nan")
    log.info("re-audited %d states: worst stability residual %.3e, max |det-1| %.3e, max CN residual %.3e",
             len(traj), worst, max(report.det_residual), max(report.cn_residual))
    return EXIT_AUDIT if (mismatches or report.failures) else EXIT_OK


def cmd_selftest(args):
    results = run_selftest(args.seed or 0)
    for name, ok, detail in results:
        print(f"{'PASS' if ok else 'FAIL'}  {name}: {detail}")
    return EXIT_OK if all(ok for _, ok, _ in results) else EXIT_AUDIT


def build_parser():
    parser = argparse.ArgumentParser(prog="magelastic", description=__doc__.splitlines()[0])
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--out", help="output directory (overrides output.dir)")
    common.add_argument("--seed", type=int, help="random seed (overrides the scenario)")
    common.add_argument("--quiet", action="store_true", help="only report warnings and errors")
    sub = parser.add_subparsers(dest="command", required=True)
    p = sub.add_parser("run", parents=[common], help="full incremental evolution with audits")
    p.add_argument("scenario")
    p.set_defaults(func=cmd_run)
    p = sub.add_parser("minimize", parents=[common], help="single static minimization at t = 0")
    p.add_argument("scenario")
    p.set_defaults(func=cmd_minimize)
    p = sub.add_parser("audit", parents=[common], help="re-audit a saved trace and its states")
    p.add_argument("scenario")
    p.add_argument("trace")
    p.set_defaults(func=cmd_audit)
    p = sub.add_parser("selftest", parents=[common], help="run the built-in invariant checks")
    p.set_defaults(func=cmd_selftest)
    return parser


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_INPUT
    _setup_logging(args.quiet)
    try:
        return args.func(args)
    except ScenarioError as exc:
        log.error("error: %s", exc)
        return EXIT_INPUT
    except MagelasticError as exc:
        log.error("solver failure: %s", exc)
        return EXIT_SOLVER


if __name__ == "__main__":
    sys.exit(main())
