"""Command line: ``mv-equilibrium {solve,verify,uniqueness,sweep}``.

Exit codes: 0 pass, 1 certification failure, 2 input error, 3 solver error.
"""
from __future__ import annotations

import argparse
import csv
import dataclasses
import itertools
import json
import logging
import sys
import time
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from . import verify as V
from .bsde import (
    PositivityError,
    PreconditionError,
    SingularityError,
    StepSizeError,
    check_h3,
    solve_equilibrium,
)
from .equilibrium import Strategy, propagate_wealth, strategy_values
from .lattice import AdaptedProcess, LatticeMode, PathDependenceError
from .market import HypothesisViolation, MarketModel, Scenario, ScenarioError, build_market
from .scenario import parse_scenario

log = logging.getLogger("mv_equilibrium")

EXIT_OK, EXIT_CERT, EXIT_INPUT, EXIT_SOLVER = 0, 1, 2, 3
ORACLE_MAX_N = 10
SOLVER_ERRORS = (PositivityError, SingularityError, StepSizeError, PreconditionError)
SWEEP_PARAMS = ("N", "r_amp", "b_amp", "sigma_amp", "beta", "gamma1", "gamma2")
DEFAULT_SWEEP = {"r_amp": [0.0, 0.0025, 0.005, 0.01, 0.02], "gamma1": [0.5, 1.0, 2.0]}


class InputError(Exception):
    pass


def _fmt(x) -> str:
    return format(float(x), ".17g")


def _write_csv(path: Path, header, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([_fmt(v) if isinstance(v, (float, np.floating)) else v for v in row])


def _node_rows(grid, k):
    return enumerate(grid.node_labels(k))


def _jsonable(obj):
    if isinstance(obj, dict):
        return {k: _jsonable(v) for k, v in obj.items() if not isinstance(v, AdaptedProcess)}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, (np.floating, np.integer)):
        return obj.item()
    if isinstance(obj, np.bool_):
        return bool(obj)
    return obj


# -- scenario handling --------------------------------------------------------


def load(args) -> tuple[Scenario, MarketModel]:
    if not args.scenario:
        raise InputError("--scenario is required")
    sc = parse_scenario(args.scenario)
    if args.steps is not None:
        sc = dataclasses.replace(sc, N=args.steps)
    if args.full_tree:
        sc = dataclasses.replace(sc, mode=LatticeMode.FULL_TREE.value)
    try:
        grid = sc.grid()
    except ValueError as exc:
        raise InputError(str(exc)) from None
    return sc, build_market(sc, grid)


def _solve(m: MarketModel, perturb_theta: float = 0.0):
    sol = solve_equilibrium(m)
    if perturb_theta:
        sol = dataclasses.replace(sol, Theta=sol.Theta + float(perturb_theta))
    return sol


def _solver_summary(m, sol) -> dict:
    h3 = check_h3(sol, m)
    return {
        "branch": sol.branch,
        "theta0": float(sol.Theta[0][0]),
        "phi0": float(sol.Phi[0][0]),
        "u0": float(sol.Theta[0][0] * m.x0 + sol.Phi[0][0]),
        "max_abs_theta": sol.Theta.max_abs(),
        "max_abs_phi": sol.Phi.max_abs(),
        "min_P1": sol.P1.min(),
        "r_deterministic": m.r_deterministic,
        "h3": dataclasses.asdict(h3),
        "info": _jsonable(sol.info),
    }


def write_theta_phi(path: Path, m, sol) -> None:
    grid, N = m.grid, m.grid.N
    header = ["k", "level_or_path", "Theta", "Phi", *(f"P{i}" for i in range(1, 6)), *(f"L{i}" for i in range(1, 6))]
    rows = []
    for k in range(N + 1):
        for j, label in _node_rows(grid, k):
            head = [sol.Theta[k][j], sol.Phi[k][j]] if k < N else ["", ""]
            lam = [L[k][j] for L in sol.L] if k < N else [""] * 5
            rows.append([k, label, *head, *(P[k][j] for P in sol.P), *lam])
    _write_csv(path, header, rows)


# -- commands ---------------------------------------------------------------


def cmd_solve(args, report: dict) -> int:
    sc, m = load(args)
    report["scenario"] = sc.to_dict()
    t0 = time.perf_counter()
    sol = _solve(m)
    report["timing"]["solve_s"] = time.perf_counter() - t0
    report["solver"] = _solver_summary(m, sol)
    write_theta_phi(args.out / "theta_phi.csv", m, sol)
    return EXIT_OK


def _oracle_equivalence(sc: Scenario, m_full: MarketModel, sol_full) -> dict:
    """Compare a full-tree run against the recombining run lifted by level."""
    try:
        m_rec = build_market(sc, sc.grid(mode=LatticeMode.RECOMBINING.value))
    except ScenarioError as exc:
        return {"skipped": f"coefficients are not Markovian ({exc})"}
    sol_rec = solve_equilibrium(m_rec)
    g = m_full.grid
    dev = {}
    for name in ("Theta", "Phi", "P1", "P2", "P3", "P4", "P5", "L1", "L2", "L3", "L4", "L5"):
        dev[name] = (getattr(sol_rec, name).lift(g) - getattr(sol_full, name)).max_abs()
    # first-order coefficient: recombining G1 X + G2 versus enumerated spike costs
    res = V.first_order_residuals(m_rec, sol_rec)
    s = Strategy.operator(g, sol_full.Theta, sol_full.Phi)
    X = propagate_wealth(m_full, s).X
    a_dev = b_dev = 0.0
    for k in range(g.N):
        fit = V.quotient_fit(m_full, s, k)
        pred = res.G1.lift(g)[k] * X[k] + res.G2.lift(g)[k]
        a_dev = max(a_dev, float(np.max(np.abs(fit.A - pred))))
        _, b_rec = V.MomentSweep(m_rec, Strategy.operator(m_rec.grid, sol_rec.Theta, sol_rec.Phi)).spike_coefficients(k, np.zeros(k + 1))
        b_dev = max(b_dev, float(np.max(np.abs(fit.B - b_rec[g.levels(k)]))))
    dev["first_order_A"] = a_dev
    dev["second_order_B"] = b_dev
    return {"max_deviation": max(dev.values()), "deviations": dev}


def cmd_verify(args, report: dict) -> int:
    sc, m = load(args)
    report["scenario"] = sc.to_dict()
    t0 = time.perf_counter()
    sol = _solve(m, args.perturb_theta)
    t1 = time.perf_counter()
    rep = V.certify(m, sol, sc.tolerances)
    report["timing"].update(solve_s=t1 - t0, certify_s=time.perf_counter() - t1)
    report["solver"] = _solver_summary(m, sol)
    report["perturb_theta"] = args.perturb_theta
    checks = rep.checks()
    h3 = check_h3(sol, m)
    checks["h3_identities"] = max(h3.max_p_identity, h3.max_lambda_identity) <= sc.tolerances["residual"]
    cert = {"summary": rep.summary(), "checks": checks, "passed": all(checks.values())}
    if rep.anchors is not None:
        cert["wealth_anchors"] = list(rep.anchors)

    raw_res = rep.raw_res
    if raw_res is None:
        try:
            s = Strategy.operator(m.grid, sol.Theta, sol.Phi)
            raw_res = V.raw_strategy_residual(m, strategy_values(s, propagate_wealth(m, s)))
        except PathDependenceError:
            cert["raw_residual_note"] = "wealth does not recombine; rerun with --full-tree for per-path values"
    if raw_res is not None:
        cert["summary"]["max_abs_raw_residual"] = raw_res.max_abs()
    report["certification"] = cert

    rows = []
    for k in range(m.grid.N):
        for j, label in _node_rows(m.grid, k):
            rows.append([
                k, label, rep.G1[k][j], rep.G2[k][j],
                raw_res[k][j] if raw_res is not None else "",
                rep.min_quotient[k][j], rep.B[k][j], rep.B_predicted[k][j],
            ])
    _write_csv(args.out / "residuals.csv",
               ["k", "level_or_path", "G1", "G2", "thm32_residual", "min_quotient", "B_measured", "B_predicted"], rows)
    write_theta_phi(args.out / "theta_phi.csv", m, sol)

    if m.grid.full_tree and m.grid.N <= ORACLE_MAX_N:
        oracle = _oracle_equivalence(sc, m, sol)
        report["oracle_equivalence"] = oracle
        if "max_deviation" in oracle and not args.perturb_theta:
            cert["checks"]["oracle_equivalence"] = oracle["max_deviation"] <= 1e-12 * max(1.0, sol.P1.max_abs())
            cert["passed"] = all(cert["checks"].values())
    return EXIT_OK if cert["passed"] else EXIT_CERT


def _read_u0(path: Path, grid) -> AdaptedProcess:
    """CSV with columns ``k, level_or_path, u`` covering every node at times ``0..N-1``."""
    vals = {}
    try:
        with open(path, newline="") as fh:
            for row in csv.DictReader(fh):
                vals[(int(row["k"]), row["level_or_path"])] = float(row["u"])
    except (OSError, KeyError, ValueError) as exc:
        raise InputError(f"u0 file {path}: {exc}") from None
    slices = []
    for k in range(grid.N):
        try:
            slices.append([vals[(k, lab)] for lab in grid.node_labels(k)])
        except KeyError as exc:
            raise InputError(f"u0 file {path}: missing node {exc.args[0]}") from None
    return AdaptedProcess(grid, slices)


def cmd_uniqueness(args, report: dict) -> int:
    args.full_tree = True  # raw strategies generate path-dependent wealth
    sc, m = load(args)
    report["scenario"] = sc.to_dict()
    sol = _solve(m)
    s_star = Strategy.operator(m.grid, sol.Theta, sol.Phi)
    u_star = strategy_values(s_star, propagate_wealth(m, s_star))
    if args.u0 == "zero":
        u0 = AdaptedProcess.zeros(m.grid, m.grid.N)
    elif args.u0 == "equilibrium":
        u0 = u_star
    else:
        u0 = _read_u0(Path(args.u0), m.grid)
    t0 = time.perf_counter()
    at_star = V.uniqueness_diagnostics(m, u_star, sol).sup_norms()
    at_start = V.uniqueness_diagnostics(m, u0, sol).sup_norms()
    fp = V.fixed_point_refine(m, u0, sol, max_iter=args.max_iter, tol=args.tol)
    report["timing"]["uniqueness_s"] = time.perf_counter() - t0
    dist = (fp.u - u_star).max_abs()
    tol = sc.tolerances["residual"]
    checks = {
        "diagnostics_vanish_at_equilibrium": max(at_star.values()) <= tol,
        "fixed_point_converged": fp.converged,
        "limit_is_equilibrium": dist <= max(args.tol, tol) * 100,
    }
    report["solver"] = _solver_summary(m, sol)
    report["uniqueness"] = {
        "u0": args.u0, "diagnostics_at_equilibrium": at_star, "diagnostics_at_u0": at_start,
        "converged": fp.converged, "iterations": fp.iterations,
        "final_gap": fp.history[-1][1] if fp.history else 0.0,
        "distance_to_equilibrium": dist, "checks": checks, "passed": all(checks.values()),
    }
    rows = [[0, float("nan"), at_start["Ybar"]]] + [list(h) for h in fp.history]
    _write_csv(args.out / "iterates.csv", ["iteration", "sup_gap", "sup_Ybar"], rows)
    return EXIT_OK if all(checks.values()) else EXIT_CERT


def _base(spec) -> float:
    if isinstance(spec, dict) and set(spec) <= {"base", "walk"}:
        return float(spec.get("base", 0.0))
    if isinstance(spec, (int, float)):
        return float(spec)
    raise InputError("sweeps need numeric or {base, walk} coefficients in the template")


def _walk(spec) -> float:
    return float(spec.get("walk", 0.0)) if isinstance(spec, dict) else 0.0


def _sweep_cell(sc: Scenario, cell: dict) -> dict:
    out = dict(cell)
    try:
        kw = {}
        r, b, sig = sc.r, sc.b, sc.sigma
        if "r_amp" in cell:
            r = {"base": _base(r), "walk": cell["r_amp"]}
        if "b_amp" in cell:
            b = {"base": _base(b), "walk": cell["b_amp"]}
        if "sigma_amp" in cell:
            sig = {"base": _base(sig), "walk": cell["sigma_amp"]}
        if "beta" in cell:
            b = {"base": _base(r) + cell["beta"], "walk": _walk(r)}
        for key in ("gamma1", "gamma2"):
            if key in cell:
                kw[key] = cell[key]
        if "N" in cell:
            kw["N"] = int(cell["N"])
        m = build_market(dataclasses.replace(sc, r=r, b=b, sigma=sig, **kw))
        sol = solve_equilibrium(m)
        out.update(status="ok", branch=sol.branch, max_abs_theta=sol.Theta.max_abs(),
                   theta0=float(sol.Theta[0][0]), phi0=float(sol.Phi[0][0]), error="")
    except (InputError, ValueError, *SOLVER_ERRORS) as exc:
        out.update(status="error", branch="", max_abs_theta="", theta0="", phi0="", error=str(exc))
    return out


def _parse_ranges(specs) -> dict:
    if not specs:
        return dict(DEFAULT_SWEEP)
    ranges = {}
    for spec in specs:
        name, _, values = spec.partition("=")
        name = name.strip()
        if name not in SWEEP_PARAMS or not values:
            raise InputError(f"--grid expects NAME=v1,v2,... with NAME in {', '.join(SWEEP_PARAMS)}; got {spec!r}")
        try:
            vals = [float(v) for v in values.split(",")]
        except ValueError:
            raise InputError(f"--grid {name}: values must be numbers") from None
        if not all(np.isfinite(vals)):
            raise InputError(f"--grid {name}: values must be finite")
        ranges[name] = vals
    return ranges


def cmd_sweep(args, report: dict) -> int:
    if not args.scenario:
        raise InputError("--scenario is required")
    sc = parse_scenario(args.scenario)
    if args.steps is not None:
        sc = dataclasses.replace(sc, N=args.steps)
    if args.full_tree:
        sc = dataclasses.replace(sc, mode=LatticeMode.FULL_TREE.value)
    ranges = _parse_ranges(args.grid)
    names = list(ranges)
    cells = [dict(zip(names, combo)) for combo in itertools.product(*ranges.values())]
    t0 = time.perf_counter()
    with ThreadPoolExecutor(max_workers=args.jobs) as pool:
        results = list(pool.map(lambda c: _sweep_cell(sc, c), cells))
    report["timing"]["sweep_s"] = time.perf_counter() - t0
    report["scenario"] = sc.to_dict()
    cols = [*names, "status", "branch", "max_abs_theta", "theta0", "phi0", "error"]
    _write_csv(args.out / "sweep.csv", cols, [[res[c] for c in cols] for res in results])
    report["sweep"] = {
        "ranges": ranges, "cells": len(results),
        "errors": sum(res["status"] != "ok" for res in results),
    }
    return EXIT_OK


# -- entry point ----------------------------------------------------------------


def _global_flags(p, suppress: bool) -> None:
    d = (lambda v: argparse.SUPPRESS) if suppress else (lambda v: v)
    p.add_argument("--scenario", default=d(None), help="scenario JSON file")
    p.add_argument("--full-tree", action="store_true", default=d(False), help="use the path-enumerating lattice")
    p.add_argument("--out", type=Path, default=d(Path(".")), help="output directory")
    p.add_argument("--seed", type=int, default=d(None), help="reserved; the lattice computations are exact")
    p.add_argument("--steps", type=int, default=d(None), help="override grid.N from the scenario")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mv-equilibrium", description=__doc__.splitlines()[0])
    _global_flags(parser, suppress=False)
    parser.add_argument("-v", "--verbose", action="store_true")
    common = argparse.ArgumentParser(add_help=False)
    _global_flags(common, suppress=True)
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("solve", parents=[common], help="solve for the equilibrium operator")
    p = sub.add_parser("verify", parents=[common], help="solve and certify")
    p.add_argument("--perturb-theta", type=float, default=0.0, help="add a constant to Theta before certifying")
    p = sub.add_parser("uniqueness", parents=[common], help="uniqueness diagnostics and fixed-point refinement")
    p.add_argument("--u0", default="zero", help="zero, equilibrium, or a CSV file (k, level_or_path, u)")
    p.add_argument("--max-iter", type=int, default=50)
    p.add_argument("--tol", type=float, default=1e-8)
    p = sub.add_parser("sweep", parents=[common], help="max|Theta| over a parameter grid")
    p.add_argument("--grid", action="append", metavar="NAME=v1,v2",
                   help=f"sweep axis, repeatable; NAME in {', '.join(SWEEP_PARAMS)}")
    p.add_argument("--jobs", type=int, default=None, help="worker threads")
    return parser


COMMANDS = {"solve": cmd_solve, "verify": cmd_verify, "uniqueness": cmd_uniqueness, "sweep": cmd_sweep}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_INPUT if exc.code else EXIT_OK
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    report = {"command": args.command, "seed": args.seed, "timing": {}}
    t0 = time.perf_counter()
    try:
        args.out.mkdir(parents=True, exist_ok=True)
        code = COMMANDS[args.command](args, report)
    except (InputError, ScenarioError, HypothesisViolation, PathDependenceError) as exc:
        log.error("input error: %s", exc)
        report["error"] = {"kind": "input", "message": str(exc)}
        code = EXIT_INPUT
    except SOLVER_ERRORS as exc:
        log.error("solver error: %s", exc)
        report["error"] = {"kind": "solver", "message": str(exc)}
        code = EXIT_SOLVER
    except OSError as exc:
        log.error("i/o error: %s", exc)
        report["error"] = {"kind": "input", "message": str(exc)}
        code = EXIT_INPUT
    report["timing"]["total_s"] = time.perf_counter() - t0
    report["exit_code"] = code
    if "scenario" in report:
        report["tolerances"] = report["scenario"]["tolerances"]
    try:
        with open(args.out / "report.json", "w") as fh:
            json.dump(_jsonable(report), fh, indent=2, allow_nan=True)
    except OSError as exc:
        log.error("cannot write report: %s", exc)
        code = code or EXIT_INPUT
    if code:
        print(f"{args.command}: exit {code}" + (f" ({report['error']['message']})" if "error" in report else ""), file=sys.stderr)
    return code


if __name__ == "__main__":
    sys.exit(main())
