"""Command-line entry points and output artifacts.

Verbs: ``plan``, ``propagate``, ``validate`` and ``compare``.  Every CSV uses
a fixed header, dot decimals and 17-significant-digit floats; JSON files
hold only seed-determined values so that re-runs are byte-identical.  Wall
times go to a separate ``timing.json``.
"""

from __future__ import annotations

import argparse
import csv
import json
import math
import sys
import time
from dataclasses import replace
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np

from .basis import build_basis
from .mc import Plan, validate
from .pipeline import (
    PlanOutcome,
    gpc_setup,
    run_plan,
    seed_trajectory,
    validation_setup,
)
from .projection import linear_covariance_propagation, moments_from_gpc, propagate_gpc
from .scenario import METHODS, TERMINAL_KINDS, Scenario, ScenarioError, dumps_scenario, load_scenario

EXIT_OK = 0
EXIT_INPUT = 2
EXIT_NOT_CONVERGED = 3

LOG_COLUMNS = (
    "iteration", "attempt", "radius_x", "radius_u", "solver_status",
    "solver_iterations", "cost", "step", "slack", "max_correction",
)


def fmt(v) -> str:
    """Locale-independent cell text; floats use 17 significant digits."""
    if v is None:
        return ""
    if isinstance(v, (bool, np.bool_)):
        return "1" if v else "0"
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        return format(float(v), ".17g")
    return str(v)


def write_csv(path: Path, header: Sequence[str], rows: Iterable[Sequence]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([fmt(v) for v in row])


def _clean(v):
    if isinstance(v, dict):
        return {k: _clean(x) for k, x in v.items()}
    if isinstance(v, (list, tuple)):
        return [_clean(x) for x in v]
    if isinstance(v, (np.floating, float)):
        return None if not math.isfinite(float(v)) else float(v)
    if isinstance(v, np.integer):
        return int(v)
    return v


def write_json(path: Path, data: dict) -> None:
    path.write_text(json.dumps(_clean(data), indent=2) + "\n", encoding="utf-8")


def read_csv(path: Path) -> tuple[list[str], list[list[str]]]:
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise ValueError(f"{path} is empty")
    return rows[0], rows[1:]


# -- plan ---------------------------------------------------------------------


def trajectory_rows(out: PlanOutcome, dt: float) -> list[list]:
    T, d_x = out.means.shape
    d_u = out.controls.shape[1] if out.controls.ndim == 2 else 0
    rows = []
    for k in range(T):
        u = list(out.controls[k]) if k < T - 1 else [None] * d_u
        rows.append([k * dt] + list(out.means[k]) + list(out.stds[k]) + u)
    return rows


def trajectory_header(d_x: int, d_u: int) -> list[str]:
    return (
        ["t"]
        + [f"mean_{i + 1}" for i in range(d_x)]
        + [f"std_{i + 1}" for i in range(d_x)]
        + [f"u_{i + 1}" for i in range(d_u)]
    )


def plan_summary(sc: Scenario, out: PlanOutcome, seed: int) -> dict:
    return {
        "scenario": sc.name,
        "status": out.status,
        "cost": out.cost,
        "iterations": out.iterations,
        "method": out.method,
        "flavor": out.flavor,
        "eps_col": out.eps_col,
        "p_gpc": out.p_gpc,
        "d_xi": out.basis.d_xi,
        "horizon": sc.horizon,
        "dt": sc.dt,
        "seed": seed,
        "seed_source": out.seed_source,
        "max_collision_margin": out.max_collision_margin,
        "terminal_kind": sc.terminal.kind,
        "terminal_slack": out.terminal_slack,
    }


def write_plan(out_dir: Path, sc: Scenario, out: PlanOutcome, seed: int, wall: float) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "scenario.json").write_text(dumps_scenario(sc), encoding="utf-8")
    d_x = out.means.shape[1]
    d_u = out.controls.shape[1]
    write_csv(out_dir / "trajectory.csv", trajectory_header(d_x, d_u), trajectory_rows(out, sc.dt))
    n = out.gpc_trajectory.shape[1]
    write_csv(
        out_dir / "coefficients.csv",
        ["t"] + [f"c_{i + 1}" for i in range(n)],
        ([k * sc.dt] + list(row) for k, row in enumerate(out.gpc_trajectory)),
    )
    write_csv(
        out_dir / "iterations.csv",
        LOG_COLUMNS,
        ([rec.get(c) for c in LOG_COLUMNS] for rec in out.iteration_log),
    )
    write_json(out_dir / "summary.json", plan_summary(sc, out, seed))
    write_json(out_dir / "timing.json", {"wall_time_s": wall})


def _scenario_with(sc: Scenario, args) -> Scenario:
    changes = {}
    if getattr(args, "method", None):
        changes["method"] = args.method
    if getattr(args, "pgc", None) is not None:
        changes["p_gpc"] = args.pgc
    flavors = getattr(args, "flavor", None)
    if flavors and "," not in flavors:
        changes["flavor"] = flavors
    if getattr(args, "eps", None) is not None:
        changes["eps_col"] = args.eps
    terminal = getattr(args, "terminal", None)
    if terminal:
        changes["terminal"] = replace(sc.terminal, kind=terminal)
    return sc.with_overrides(**changes) if changes else sc


def cmd_plan(args) -> int:
    sc = _scenario_with(load_scenario(args.scenario), args)
    t0 = time.perf_counter()
    out = run_plan(sc, seed=args.seed)
    wall = time.perf_counter() - t0
    write_plan(Path(args.out), sc, out, args.seed, wall)
    print(f"{sc.name}: {out.status} cost={out.cost:.6g} iterations={out.iterations}")
    return EXIT_OK if out.converged else EXIT_NOT_CONVERGED


# -- propagate ----------------------------------------------------------------


def read_controls(path: Path, d_u: int, n_steps: int) -> np.ndarray:
    """Columns ``u_1..u_du`` of a CSV; rows with empty control cells are skipped."""
    header, rows = read_csv(path)
    names = [f"u_{i + 1}" for i in range(d_u)]
    missing = [n for n in names if n not in header]
    if missing:
        raise ValueError(f"controls file lacks columns {missing}")
    cols = [header.index(n) for n in names]
    data = [[float(r[c]) for c in cols] for r in rows if all(r[c] != "" for c in cols)]
    arr = np.array(data, dtype=float).reshape(-1, d_u)
    if arr.shape[0] != n_steps:
        raise ValueError(f"controls file has {arr.shape[0]} rows, expected {n_steps}")
    return arr


def propagate_moments(sc: Scenario, controls: np.ndarray, n_rollouts: int, seed: int, p_gpc=None) -> dict:
    """gPC, linear-covariance and Monte-Carlo moments under fixed controls."""
    setup = gpc_setup(sc, p_gpc)
    X = propagate_gpc(setup.dynamics, setup.X0, controls, sc.dt)
    g_mean, g_cov = moments_from_gpc(X, setup.basis)
    x0 = np.array(sc.x0_mean)
    l_mean, l_cov = linear_covariance_propagation(
        setup.model, x0, np.diag(np.square(sc.x0_stdev)), controls, sc.dt
    )
    vs = validation_setup(sc, setup.model)
    vs = replace(vs, obstacles=(), substeps=1, goal_mean=None, c_terminal=None)
    T = controls.shape[0] + 1
    if n_rollouts:
        stats = validate(Plan(X, controls, setup.basis), vs, n_rollouts, seed, mode="open", keep_trajectories=True)
        traj = stats.trajectories
        m_mean = traj.mean(axis=0)
        m_std = traj.std(axis=0, ddof=1) if n_rollouts > 1 else np.zeros_like(m_mean)
    else:
        m_mean = np.full((T, setup.model.d_x), np.nan)
        m_std = np.full((T, setup.model.d_x), np.nan)
    diag = lambda c: np.sqrt(np.maximum(np.diagonal(c, axis1=1, axis2=2), 0.0))  # noqa: E731
    return {
        "gpc_mean": g_mean,
        "gpc_std": diag(g_cov),
        "lin_mean": l_mean,
        "lin_std": diag(l_cov),
        "mc_mean": m_mean,
        "mc_std": m_std,
    }


MOMENT_KEYS = ("gpc_mean", "gpc_std", "lin_mean", "lin_std", "mc_mean", "mc_std")


def cmd_propagate(args) -> int:
    sc = _scenario_with(load_scenario(args.scenario), args)
    model = sc.build_model()
    n_steps = sc.horizon - 1
    if args.controls:
        controls = read_controls(Path(args.controls), model.d_u, n_steps)
    else:
        controls = np.zeros((n_steps, model.d_u))
    n = sc.propagate_rollouts if args.rollouts is None else args.rollouts
    t0 = time.perf_counter()
    mom = propagate_moments(sc, controls, n, args.seed)
    wall = time.perf_counter() - t0
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    d_x = model.d_x
    header = ["t"] + [f"{key}_{i + 1}" for key in MOMENT_KEYS for i in range(d_x)]
    rows = (
        [k * sc.dt] + [v for key in MOMENT_KEYS for v in mom[key][k]]
        for k in range(sc.horizon)
    )
    write_csv(out_dir / "moments.csv", header, rows)
    write_json(out_dir / "summary.json", {"scenario": sc.name, "p_gpc": sc.p_gpc, "rollouts": n, "seed": args.seed})
    write_json(out_dir / "timing.json", {"wall_time_s": wall})
    print(f"{sc.name}: moments for {sc.horizon} steps, {n} rollouts")
    return EXIT_OK


# -- validate -----------------------------------------------------------------


def load_plan(plan_dir: Path, sc: Scenario) -> Plan:
    """Rebuild a :class:`Plan` from ``coefficients.csv``, ``trajectory.csv`` and ``summary.json``."""
    for name in ("coefficients.csv", "trajectory.csv", "summary.json"):
        if not (plan_dir / name).exists():
            raise FileNotFoundError(f"plan artifact {plan_dir / name} missing")
    summary = json.loads((plan_dir / "summary.json").read_text(encoding="utf-8"))
    basis = build_basis(int(summary["p_gpc"]), int(summary["d_xi"]))
    _, rows = read_csv(plan_dir / "coefficients.csv")
    X = np.array([[float(v) for v in r[1:]] for r in rows])
    model = sc.build_model()
    if X.shape != (sc.horizon, model.d_x * basis.n_terms):
        raise ValueError("plan does not match the scenario")
    controls = read_controls(plan_dir / "trajectory.csv", model.d_u, sc.horizon - 1)
    return Plan(X, controls, basis)


ROLLOUT_HEADER = ("rollout", "collided", "min_clearance", "terminal_value", "terminal_violation", "cost")


def write_stats(out_dir: Path, stats, sc: Scenario, extra: dict) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    write_json(out_dir / "stats.json", {**stats.summary(), **extra})
    c = sc.terminal.c_f
    write_csv(
        out_dir / "rollouts.csv",
        ROLLOUT_HEADER,
        (
            [i, stats.collided[i], stats.min_clearance[i], stats.terminal_value[i], stats.terminal_value[i] > c, stats.costs[i]]
            for i in range(stats.n_rollouts)
        ),
    )


def cmd_validate(args) -> int:
    plan_dir = Path(args.plan)
    if args.scenario:
        sc = load_scenario(args.scenario)
    elif (plan_dir / "scenario.json").exists():
        sc = load_scenario(plan_dir / "scenario.json")
    else:
        raise FileNotFoundError(f"no scenario given and none found in {plan_dir}")
    plan = load_plan(plan_dir, sc)
    n = sc.validation.rollouts if args.rollouts is None else args.rollouts
    t0 = time.perf_counter()
    stats = validate(plan, validation_setup(sc), n, args.seed, mode=sc.validation.mode)
    wall = time.perf_counter() - t0
    out_dir = Path(args.out) if args.out else plan_dir
    write_stats(out_dir, stats, sc, {"seed": args.seed, "mode": sc.validation.mode})
    write_json(out_dir / "validate_timing.json", {"wall_time_s": wall})
    s = stats.summary()
    print(f"{sc.name}: {s['collisions']}/{s['n']} collisions, {s['terminal_violations']} terminal violations")
    return EXIT_OK


# -- compare ------------------------------------------------------------------

COMPARE_HEADER = (
    "flavor", "eps_col", "status", "cost", "iterations", "max_collision_margin",
    "rollouts", "collisions", "collision_fraction", "terminal_violations", "error",
)


def run_compare(
    sc: Scenario,
    risks: Sequence[float],
    flavors: Sequence[str],
    n_rollouts: int,
    seed: int,
    method: Optional[str] = None,
    progress=None,
) -> list[dict]:
    """Plan (and optionally validate) every ``(flavor, risk)`` cell from one shared seed."""
    model = sc.build_model()
    init = seed_trajectory(sc, model, seed)
    vs = validation_setup(sc, model)
    cells = []
    for flavor in flavors:
        for eps in risks:
            cell = {"flavor": flavor, "eps_col": float(eps), "rollouts": n_rollouts}
            try:
                out = run_plan(sc, seed=seed, method=method, flavor=flavor, eps_col=eps, initial=init)
                cell.update(
                    status=out.status,
                    cost=out.cost,
                    iterations=out.iterations,
                    max_collision_margin=out.max_collision_margin,
                )
                if n_rollouts:
                    st = validate(out.plan(), vs, n_rollouts, seed, mode=sc.validation.mode)
                    cell.update(
                        collisions=st.collisions,
                        collision_fraction=st.collisions / n_rollouts,
                        terminal_violations=st.terminal_violations,
                    )
            except Exception as exc:  # a failed cell must not stop the sweep
                cell.update(status="Error", error=f"{type(exc).__name__}: {exc}")
            cells.append(cell)
            if progress:
                progress(cell)
    return cells


def _pivot(cells: list[dict], risks, flavors, key: str) -> list[list]:
    table = {(c["flavor"], c["eps_col"]): c.get(key) for c in cells}
    return [[float(r)] + [table.get((f, float(r))) for f in flavors] for r in risks]


def cmd_compare(args) -> int:
    sc = _scenario_with(load_scenario(args.scenario), args)
    risks = [float(r) for r in args.risks.split(",")] if args.risks else [sc.eps_col]
    flavors = args.flavor.split(",") if args.flavor else ["dr", "gaussian"]
    for f in flavors:
        if f not in ("dr", "gaussian"):
            raise ScenarioError("flavor", f"unknown flavor '{f}'")
    for r in risks:
        sc.with_overrides(eps_col=r)  # validates the range
    n = sc.validation.rollouts if args.rollouts is None else args.rollouts
    t0 = time.perf_counter()
    cells = run_compare(
        sc, risks, flavors, n, args.seed, args.method,
        progress=lambda c: print(f"  {c['flavor']} eps={c['eps_col']}: {c.get('status')} cost={c.get('cost')} collisions={c.get('collisions')}"),
    )
    wall = time.perf_counter() - t0
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "scenario.json").write_text(dumps_scenario(sc), encoding="utf-8")
    write_csv(out_dir / "compare.csv", COMPARE_HEADER, ([c.get(k) for k in COMPARE_HEADER] for c in cells))
    write_csv(out_dir / "cost_table.csv", ["eps_col"] + [f"cost_{f}" for f in flavors], _pivot(cells, risks, flavors, "cost"))
    write_csv(
        out_dir / "collision_table.csv",
        ["eps_col"] + [f"collisions_{f}" for f in flavors],
        _pivot(cells, risks, flavors, "collisions"),
    )
    write_json(out_dir / "summary.json", {"scenario": sc.name, "seed": args.seed, "rollouts": n, "cells": cells})
    write_json(out_dir / "timing.json", {"wall_time_s": wall})
    ok = all(c.get("status") == "Converged" for c in cells)
    return EXIT_OK if ok else EXIT_NOT_CONVERGED


# -- entry point --------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="gpcscp", description="Chance-constrained gPC trajectory planning.")
    sub = p.add_subparsers(dest="verb", required=True)

    def common(sp, out_required=True):
        sp.add_argument("--scenario", help="scenario file or bundled name (e.g. fig5)")
        sp.add_argument("--out", required=out_required, help="output directory")
        sp.add_argument("--seed", type=int, default=0)

    sp = sub.add_parser("plan", help="plan a trajectory distribution")
    common(sp)
    sp.add_argument("--method", choices=METHODS)
    sp.add_argument("--pgc", type=int, help="gPC degree override")
    sp.add_argument("--flavor", choices=("dr", "gaussian"))
    sp.add_argument("--eps", type=float, help="collision risk override")
    sp.add_argument("--terminal", choices=TERMINAL_KINDS, help="terminal variance constraint override")
    sp.set_defaults(func=cmd_plan)

    sp = sub.add_parser("propagate", help="compare gPC, linear-covariance and Monte-Carlo moments")
    common(sp)
    sp.add_argument("--controls", help="CSV with u_1..u_du columns (default: zero controls)")
    sp.add_argument("--rollouts", type=int)
    sp.add_argument("--pgc", type=int)
    sp.set_defaults(func=cmd_propagate)

    sp = sub.add_parser("validate", help="Monte-Carlo validation of a plan directory")
    common(sp, out_required=False)
    sp.add_argument("--plan", required=True, help="directory written by 'plan'")
    sp.add_argument("--rollouts", type=int)
    sp.set_defaults(func=cmd_validate)

    sp = sub.add_parser("compare", help="risk sweep over constraint flavors")
    common(sp)
    sp.add_argument("--risks", help="comma-separated collision risks")
    sp.add_argument("--flavor", help="comma-separated flavors (default dr,gaussian)")
    sp.add_argument("--method", choices=METHODS)
    sp.add_argument("--pgc", type=int)
    sp.add_argument("--rollouts", type=int)
    sp.set_defaults(func=cmd_compare)
    return p


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    if args.verb != "validate" and not args.scenario:
        print("error: --scenario is required", file=sys.stderr)
        return EXIT_INPUT
    try:
        return args.func(args)
    except (ScenarioError, FileNotFoundError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
