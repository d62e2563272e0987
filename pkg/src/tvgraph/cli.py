"""Command-line front end.

Subcommands: validate, tv, flow, oracle, compare, analyze.
Exit codes: 0 success, 1 comparison above tolerance, 2 input error,
3 solver failure, 4 analysis precondition failure.
"""

from __future__ import annotations

import argparse
import json
import math
import sys
from fractions import Fraction
from pathlib import Path

import numpy as np

from . import analysis, discrete, oracle, pwfunc, trajio
from .graph import GraphError, boundary_interior, is_linear, load_graph, total_length
from .trajio import fmt

EXIT_OK = 0
EXIT_MISMATCH = 1
EXIT_INPUT = 2
EXIT_SOLVER = 3
EXIT_ANALYSIS = 4


def _load_inputs(graph_path, datum_path=None):
    g = load_graph(graph_path)
    if datum_path is None:
        return g, None
    u = pwfunc.load_function(g, datum_path)
    return g, u


def cmd_validate(args) -> int:
    g = load_graph(args.graph)
    boundary, interior = boundary_interior(g)
    print(f"vertices: {g.n_vertices}")
    print(f"edges: {g.n_edges}")
    print(f"total length: {fmt(total_length(g))}")
    print("boundary: " + (", ".join(g.vertex_names[v] for v in boundary) or "(none)"))
    print(
        "interior: "
        + (", ".join(f"{g.vertex_names[v]} (degree {g.degree(v)})" for v in interior) or "(none)")
    )
    return EXIT_OK


def cmd_tv(args) -> int:
    g, u = _load_inputs(args.graph, args.datum)
    du = pwfunc.edge_variation(u)
    jump = pwfunc.vertex_jump_variation(g, u)
    tv = pwfunc.total_variation(g, u)
    print(f"edge_variation = {fmt(du)}")
    print(f"vertex_jump = {fmt(jump)}")
    print(f"total_variation = {fmt(tv)}")
    for v in boundary_interior(g)[1]:
        traces = pwfunc.vertex_traces(g, u, v)
        var = pwfunc.vertex_variation(traces)
        level = pwfunc.median_level(traces)
        print(
            f"vertex {g.vertex_names[v]}: degree {g.degree(v)}, "
            f"variation = {fmt(var)}, level = {fmt(level)}"
        )
    linear = is_linear(g)
    equal = abs(tv - (du + jump)) <= 1e-12 * (1.0 + tv)
    print(f"linear graph: {'yes' if linear else 'no'}")
    print(f"total_variation == edge_variation + vertex_jump: {'yes' if equal else 'no'}")
    return EXIT_OK


def _flow_defaults(g, u, args):
    ell = total_length(g)
    h_max = args.h_max if args.h_max is not None else ell / 1000.0
    mesh = discrete.build_mesh(g, u, h_max)
    u0 = discrete.sample(mesh, u)
    if args.tau is not None:
        tau = args.tau
    else:
        mean = analysis.mean_value(g, u)
        dev = analysis.l2_norm(g, u.shifted(g, -mean))
        t_scale = dev * ell if dev > 0 else ell
        tau = t_scale / 1000.0
    return mesh, u0, tau


def cmd_flow(args) -> int:
    g, u = _load_inputs(args.graph, args.datum)
    mesh, u0, tau = _flow_defaults(g, u, args)
    if args.until_extinction:
        t_end = math.inf
    elif args.t_end is not None:
        t_end = args.t_end
    else:
        raise ValueError("need --t-end or --until-extinction")
    opts = discrete.FlowOptions(
        prox=discrete.ProxOptions(tol=args.prox_tol, max_iter=args.max_iter),
        ext_tol=args.ext_tol,
        snapshot_every=args.snapshot_every,
        max_steps=args.max_steps,
    )
    run = discrete.run_decoupled_flow if args.mode == "decoupled" else discrete.run_flow
    traj = run(mesh, u0, tau, t_end, opts)

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    table = trajio.from_discrete(traj, metadata={"h_max": fmt(args.h_max or total_length(g) / 1000.0)})
    trajio.write_trajectory_csv(table, out / "trajectory.csv")
    trajio.write_diagnostics_csv(traj.steps, out / "diagnostics.csv")
    print(f"steps: {len(traj.steps)}")
    print(f"tau: {fmt(tau)}")
    print(f"cells: {mesh.n_cells}")
    if traj.extinction_time is not None:
        print(f"extinction_time: {fmt(traj.extinction_time)}")
    else:
        print("extinction_time: not reached")
    print(f"wrote {out / 'trajectory.csv'} and {out / 'diagnostics.csv'}")
    return EXIT_OK


def _parse_times(args, t_ex: float) -> list[float]:
    if args.times:
        return [float(Fraction(tok)) for tok in args.times.split(",") if tok.strip()]
    n = args.num_samples
    if t_ex <= 0:
        return [0.0]
    return [t_ex * k / (n - 1) for k in range(n)]


def cmd_oracle(args) -> int:
    fn, param_names = oracle.CASES[args.case]
    params = []
    for name in param_names:
        val = getattr(args, name.replace("-", "_"), None)
        if val is None:
            raise ValueError(f"case {args.case} needs --{name}")
        params.append(Fraction(val))  # decimal strings parse exactly
    sol = fn(*params)
    times = _parse_times(args, float(sol.t_ex))
    meta = {"case": args.case}
    meta.update({name: str(v) for name, v in zip(param_names, params)})
    table = trajio.from_solution(sol, times, metadata=meta)
    trajio.write_trajectory_csv(table, args.out)
    print(f"t_ex: {fmt(sol.t_ex)}")
    print("phase_starts: " + ",".join(fmt(x) for x in sol.phase_starts))
    print(f"final_value: {fmt(sol.final_value)}")
    print(f"wrote {args.out}")
    return EXIT_OK


def cmd_compare(args) -> int:
    a = trajio.read_trajectory_csv(args.a)
    b = trajio.read_trajectory_csv(args.b)
    errors = trajio.compare_tables(a, b)
    for e in errors:
        print(f"t = {fmt(e.t)}: linf = {fmt(e.linf)}, l2 = {fmt(e.l2)}")
    max_linf = max(e.linf for e in errors)
    max_l2 = max(e.l2 for e in errors)
    print(f"matched snapshots: {len(errors)}")
    print(f"max linf: {fmt(max_linf)}")
    print(f"max l2: {fmt(max_l2)}")
    if max_linf <= args.tol:
        print(f"within tolerance {fmt(args.tol)}: yes")
        return EXIT_OK
    print(f"within tolerance {fmt(args.tol)}: no")
    return EXIT_MISMATCH


def cmd_analyze(args) -> int:
    g, u = _load_inputs(args.graph, args.datum)
    table = trajio.read_trajectory_csv(args.trajectory)
    if sorted(table.edge_ids) != list(range(g.n_edges)):
        raise ValueError("trajectory edges do not match the graph")
    mesh = discrete.mesh_from_bounds(g, [table.cell_bounds[eid] for eid in range(g.n_edges)])
    snapshots = [
        discrete.DiscreteState(mesh, np.concatenate([table.values[eid][i] for eid in range(g.n_edges)]))
        for i in range(len(table.times))
    ]
    u0 = snapshots[0]
    target, mean0 = discrete._invariant_target(mesh, u0, coupled=True)
    traj = discrete.Trajectory(
        mesh=mesh,
        tau=float(table.metadata.get("tau", "0")) or (table.times[1] - table.times[0] if len(table.times) > 1 else 1.0),
        mode="coupled",
        snapshot_times=list(table.times),
        snapshots=snapshots,
        steps=[],
        extinction_time=None,
        target=target,
        mean0=mean0,
    )
    traj.extinction_time = discrete.detect_extinction(traj, args.ext_tol)
    if traj.extinction_time is None:
        raise analysis.NotExtinguishedError("trajectory does not reach the invariant state")

    lam_opts = analysis.LambdaOptions(cut_grid=args.lambda_grid)
    lam = analysis.estimate_lambda(g, mesh, lam_opts)
    report = analysis.extinction_report(g, mesh, u0, traj, lam)
    stability = None
    if not args.quick:
        h_fine = float(np.max(np.diff(np.sort(np.concatenate([table.cell_bounds[e] for e in table.edge_ids]))))) / 2.0
        h_fine = max(h_fine, total_length(g) / 20000.0)
        mesh_fine = discrete.build_mesh(g, u, min(h_fine, total_length(g) / 100.0))
        lam_fine = analysis.estimate_lambda(g, mesh_fine, lam_opts)
        stability = abs(lam_fine.lower - lam.lower) / max(lam.lower, 1e-30)
    lo, up, dec = report.min_margins()
    print(f"measured_t_ex = {fmt(report.measured_t_ex)}")
    print(f"lower_bound = {fmt(report.lower_bound)}")
    print(f"upper_bound = {fmt(report.upper_bound)}")
    print(f"lambda_lower = {fmt(report.lambda_lower)}")
    print(f"lambda_upper = {fmt(report.lambda_upper)}")
    if stability is not None:
        print(f"lambda_stability = {fmt(stability)}")
    print(f"initial_norm = {fmt(report.initial_norm)}")
    print(f"mean = {fmt(report.mean)}")
    print(f"min_lower_margin = {fmt(lo)}")
    print(f"min_upper_margin = {fmt(up)}")
    print(f"min_decay_margin = {fmt(dec)}")
    sandwich = report.lower_bound <= report.measured_t_ex + args.slack and report.measured_t_ex <= report.upper_bound + args.slack
    print(f"sandwich holds (slack {fmt(args.slack)}): {'yes' if sandwich else 'no'}")
    if args.json:
        data = report.as_dict()
        if stability is not None:
            data["lambda_stability"] = stability
        with open(args.json, "w", encoding="utf-8") as fh:
            json.dump(data, fh, indent=2)
            fh.write("\n")
        print(f"wrote {args.json}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="tvgraph",
        description="Total variation functional and flow on compact metric graphs.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("validate", help="parse and validate a graph file")
    p.add_argument("graph")
    p.set_defaults(func=cmd_validate)

    p = sub.add_parser("tv", help="total variation of a piecewise-constant datum")
    p.add_argument("graph")
    p.add_argument("datum")
    p.set_defaults(func=cmd_tv)

    p = sub.add_parser("flow", help="run the implicit-Euler flow")
    p.add_argument("graph")
    p.add_argument("datum")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--h-max", type=float, default=None, help="max cell width (default: length/1000)")
    p.add_argument("--tau", type=float, default=None, help="time step (default: heuristic)")
    p.add_argument("--t-end", type=float, default=None)
    p.add_argument("--until-extinction", action="store_true")
    p.add_argument("--mode", choices=("coupled", "decoupled"), default="coupled")
    p.add_argument("--prox-tol", type=float, default=1e-8)
    p.add_argument("--max-iter", type=int, default=200_000)
    p.add_argument("--ext-tol", type=float, default=1e-6)
    p.add_argument("--snapshot-every", type=int, default=1, metavar="K")
    p.add_argument("--max-steps", type=int, default=100_000)
    p.set_defaults(func=cmd_flow)

    p = sub.add_parser("oracle", help="emit an exact trajectory for a named datum")
    p.add_argument("case", choices=sorted(oracle.CASES))
    for opt in ("L", "a", "b", "c", "k", "k1", "k2", "l1", "l2", "l"):
        p.add_argument(f"--{opt}", type=str, default=None)
    p.add_argument("--out", required=True)
    p.add_argument("--times", type=str, default=None, help="comma-separated sample times")
    p.add_argument("--num-samples", type=int, default=101)
    p.set_defaults(func=cmd_oracle)

    p = sub.add_parser("compare", help="compare two trajectory files")
    p.add_argument("a")
    p.add_argument("b")
    p.add_argument("--tol", type=float, default=1e-8)
    p.set_defaults(func=cmd_compare)

    p = sub.add_parser("analyze", help="extinction bounds for a finished run")
    p.add_argument("graph")
    p.add_argument("datum")
    p.add_argument("trajectory")
    p.add_argument("--ext-tol", type=float, default=1e-6)
    p.add_argument("--lambda-grid", type=int, default=33)
    p.add_argument("--slack", type=float, default=1e-3)
    p.add_argument("--quick", action="store_true", help="skip the mesh-stability refinement")
    p.add_argument("--json", type=str, default=None)
    p.set_defaults(func=cmd_analyze)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        # argparse exits 0 for --help and 2 for usage errors already
        return int(exc.code or 0)
    try:
        return args.func(args)
    except discrete.ProxError as exc:
        print(f"solver error: {exc}", file=sys.stderr)
        return EXIT_SOLVER
    except analysis.NotExtinguishedError as exc:
        print(f"analysis error: {exc}", file=sys.stderr)
        return EXIT_ANALYSIS
    except (GraphError, ValueError, OSError, json.JSONDecodeError, KeyError) as exc:
        print(f"input error: {exc}", file=sys.stderr)
        return EXIT_INPUT


def entry() -> None:
    sys.exit(main())


if __name__ == "__main__":
    entry()
