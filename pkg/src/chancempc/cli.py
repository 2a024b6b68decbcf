"""Command-line entry points.

Subcommands:

* ``plan``         receding-horizon run; trajectory CSV + summary JSON + figure
* ``mc``           closed-loop Monte Carlo; report JSON + envelope CSV + figure
* ``audit-approx`` approximation-vs-exact grid; CSV + figure
* ``crosscheck``   branch-and-bound vs exhaustive search on one instance

Exit codes: 0 success, 2 infeasible problem, 1 usage or schema error.
"""

from __future__ import annotations

import argparse
import csv
import json
import sys
from pathlib import Path

import numpy as np

from . import figures
from .micp import BnBConfig, exhaustive_search, solve_bnb
from .probit_cones import enforced_table_params, exact_composition, psi_eval
from .scenario_io import ScenarioError, load_scenario
from .smpc import Planner, RunRecord, Scenario, monte_carlo, receding_horizon_run

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_INFEASIBLE = 2


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--scenario", required=True, help="scenario JSON path")
    p.add_argument("--formulation", choices=["inv", "root", "log"],
                   help="override the scenario's probit formulation")
    p.add_argument("--solver", choices=["bnb", "exhaustive"], default="bnb")
    p.add_argument("--seed", type=int, help="disturbance seed (default: scenario seed)")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--no-figures", action="store_true",
                   help="skip figure rendering, write delimited output only")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="chancempc",
        description="Chance-constrained SMPC with risk allocation and "
                    "feedback-gain selection")
    sub = parser.add_subparsers(dest="command", required=True)

    p_plan = sub.add_parser("plan", help="receding-horizon run")
    _add_common(p_plan)
    p_plan.add_argument("--steps", type=int, required=True)

    p_mc = sub.add_parser("mc", help="closed-loop Monte Carlo validation")
    _add_common(p_mc)
    p_mc.add_argument("--steps", type=int, help="steps per run (default: horizon)")
    p_mc.add_argument("--runs", type=int, required=True)
    p_mc.add_argument("--keep-trajectories", type=int, default=100)

    p_audit = sub.add_parser("audit-approx", help="approximation audit grid")
    p_audit.add_argument("--formulation", choices=["inv", "root", "log"],
                         required=True)
    p_audit.add_argument("--grid-size", type=int, default=2000)
    p_audit.add_argument("--out", required=True)
    p_audit.add_argument("--no-figures", action="store_true")

    p_cross = sub.add_parser("crosscheck",
                             help="branch-and-bound vs exhaustive search")
    _add_common(p_cross)
    return parser


def _load(args) -> Scenario:
    scenario = load_scenario(args.scenario)
    if getattr(args, "formulation", None):
        scenario = Scenario(
            model=scenario.model, horizon=scenario.horizon,
            stay_in=scenario.stay_in, target=scenario.target,
            input_set=scenario.input_set, xi=scenario.xi,
            gamma_input=scenario.gamma_input,
            gamma_terminal=scenario.gamma_terminal, weights=scenario.weights,
            gain_grid=scenario.gain_grid, x0=scenario.x0,
            formulation=args.formulation, seed=scenario.seed,
            stay_out=scenario.stay_out)
    return scenario


def write_trajectory_csv(record: RunRecord, n_x: int, n_u: int,
                         path: Path) -> None:
    header = (["step"] + [f"x{j}" for j in range(n_x)]
              + [f"u{j}" for j in range(n_u)]
              + ["deltaIndex", "gammaSum", "objective"])
    with path.open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for rec in record.steps:
            writer.writerow([rec.step] + [repr(float(v)) for v in rec.x]
                            + [repr(float(v)) for v in rec.u]
                            + [rec.delta_index, repr(float(rec.gamma.sum())),
                               repr(float(rec.objective))])


def cmd_plan(args) -> int:
    scenario = _load(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    seed = args.seed if args.seed is not None else scenario.seed
    record = receding_horizon_run(
        scenario, args.steps, solver_mode=args.solver,
        w_generator=np.random.RandomState(seed))
    write_trajectory_csv(record, scenario.model.n_x, scenario.model.n_u,
                         out / "trajectory.csv")
    summary = {
        "scenario": str(args.scenario),
        "formulation": scenario.formulation,
        "solver": args.solver,
        "seed": seed,
        "stepsRequested": args.steps,
        "stepsCompleted": len(record.steps),
        "infeasibleAt": record.infeasible_at,
        "finalState": [float(v) for v in record.states[-1]],
        "objectives": [rec.objective for rec in record.steps],
        "deltaIndices": [rec.delta_index for rec in record.steps],
        "nodesPerStep": [rec.nodes for rec in record.steps],
    }
    (out / "summary.json").write_text(json.dumps(summary, indent=2) + "\n")
    if not args.no_figures and record.states:
        figures.plot_trajectories(scenario, [np.array(record.states)],
                                  out / "trajectory.png",
                                  title="receding-horizon trajectory")
    if record.infeasible_at is not None:
        print(f"infeasible at step {record.infeasible_at}; partial results in {out}")
        return EXIT_INFEASIBLE
    print(f"completed {len(record.steps)} steps; results in {out}")
    return EXIT_OK


def cmd_mc(args) -> int:
    scenario = _load(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    seed = args.seed if args.seed is not None else scenario.seed
    report = monte_carlo(scenario, args.runs, solver_mode=args.solver,
                         steps=args.steps, base_seed=seed,
                         keep_trajectories=args.keep_trajectories)
    (out / "mc_report.json").write_text(
        json.dumps(report.to_json(), indent=2) + "\n")

    if report.trajectories:
        n_x = scenario.model.n_x
        stacked = np.stack([t for t in report.trajectories if len(t)
                            == len(report.trajectories[0])])
        header = ["step"]
        for j in range(n_x):
            header += [f"x{j}_min", f"x{j}_mean", f"x{j}_max"]
        with (out / "envelope.csv").open("w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(header)
            for t in range(stacked.shape[1]):
                row = [t]
                for j in range(n_x):
                    col = stacked[:, t, j]
                    row += [repr(float(col.min())), repr(float(col.mean())),
                            repr(float(col.max()))]
                writer.writerow(row)
        if not args.no_figures:
            figures.plot_trajectories(scenario, list(report.trajectories),
                                      out / "mc_trajectories.png",
                                      title=f"{report.runs} Monte Carlo runs")
    print(f"joint violation {report.empirical_joint_violation:.4f} over "
          f"{report.runs} runs; report in {out}")
    if report.infeasible_runs == report.runs:
        return EXIT_INFEASIBLE
    return EXIT_OK


def cmd_audit_approx(args) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    params = enforced_table_params(args.formulation)
    gamma = np.geomspace(1e-6, params.interval_max, args.grid_size)
    psi = psi_eval(params, gamma)
    exact = exact_composition(args.formulation, gamma)
    csv_path = out / f"audit_{args.formulation}.csv"
    with csv_path.open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["gamma", "psi", "exact", "residual"])
        for g, ps, ex in zip(gamma, psi, exact):
            writer.writerow([repr(float(g)), repr(float(ps)), repr(float(ex)),
                             repr(float(ps - ex))])
    if not args.no_figures:
        figures.plot_approximation_audit(
            gamma, psi, exact, args.formulation,
            out / f"audit_{args.formulation}.png")
    resid = psi - exact
    print(f"{args.formulation}: max |residual| {np.max(np.abs(resid)):.3e}, "
          f"signed range [{resid.min():.3e}, {resid.max():.3e}]")
    return EXIT_OK


def cmd_crosscheck(args) -> int:
    scenario = _load(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    planner = Planner(scenario)
    inst = planner.assemble(scenario.x0)
    bnb_sol, bnb_stats = solve_bnb(inst.program, BnBConfig(relative_gap_tol=1e-9))
    es_sol, es_stats = exhaustive_search(inst.program)
    result = {
        "bnb": {"status": bnb_sol.status.value,
                "objective": bnb_sol.objective_value,
                "nodes": bnb_stats.nodes_explored},
        "exhaustive": {"status": es_sol.status.value,
                       "objective": es_sol.objective_value,
                       "solves": es_stats.solves},
    }
    both_ok = bnb_sol.optimal and es_sol.optimal
    if both_ok:
        result["objectiveDelta"] = abs(bnb_sol.objective_value
                                       - es_sol.objective_value)
    (out / "crosscheck.json").write_text(json.dumps(result, indent=2) + "\n")
    if both_ok:
        print(f"objective delta {result['objectiveDelta']:.3e}; "
              f"bnb nodes {bnb_stats.nodes_explored} vs "
              f"{es_stats.solves} exhaustive solves")
        return EXIT_OK
    print(f"bnb: {bnb_sol.status.value}, exhaustive: {es_sol.status.value}")
    return EXIT_INFEASIBLE


def run_cli(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_USAGE if exc.code not in (0, None) else EXIT_OK
    try:
        if args.command == "plan":
            return cmd_plan(args)
        if args.command == "mc":
            return cmd_mc(args)
        if args.command == "audit-approx":
            return cmd_audit_approx(args)
        if args.command == "crosscheck":
            return cmd_crosscheck(args)
    except ScenarioError as exc:
        print(f"scenario error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    return EXIT_USAGE


def main() -> None:
    sys.exit(run_cli())


if __name__ == "__main__":
    main()
