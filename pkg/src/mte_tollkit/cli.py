"""Batch command-line front end.

Subcommands: validate, equilibrium, social-opt, run, report.
Exit codes: 0 success, 1 validation or parse error, 2 solver failure.
"""

from __future__ import annotations

import argparse
import csv
import logging
import math
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import replace
from pathlib import Path
from typing import Sequence, TextIO

import numpy as np

from .config import ConfigParseError, ExperimentFile, load_experiment
from .equilibrium import (
    SolverError,
    SolverOptions,
    arc_costs,
    conservation_residual,
    cost_to_go,
    fixed_point_residual,
    mte_solve,
    optimal_toll_with_flow,
    perturbed_latency,
    social_optimum,
)
from .learner import (
    RunAborted,
    RunTrace,
    bound_envelope,
    envelope_tail_ratio,
    loglog_slope,
    run,
)

EXIT_OK, EXIT_INVALID, EXIT_SOLVER = 0, 1, 2
THREADS_ENV = "MTE_TOLLKIT_THREADS"

TRACE_FIXED = ["t", "stage_regret", "cum_regret", "theta_err_l2", "beta_err_abs", "beta_t"]
REPORT_COLUMNS = ["stage_regret", "cum_regret", "theta_err_l2", "beta_err_abs", "beta_t"]


def fmt(x: float) -> str:
    """17 significant digits: round-trips every double exactly."""
    return format(float(x), ".17g")


def trace_header(arc_ids: Sequence[str]) -> list[str]:
    return TRACE_FIXED + [f"p_{a}" for a in arc_ids] + [f"w_{a}" for a in arc_ids]


def write_trace(trace: RunTrace, path: Path) -> None:
    n = trace.n_rows
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh, lineterminator="\n")
        wr.writerow(trace_header(trace.network.arc_ids))
        for k in range(n):
            row = [str(k + 1)] + [
                fmt(v)
                for v in (
                    trace.stage_regret[k],
                    trace.cum_regret[k],
                    trace.theta_err[k],
                    trace.beta_err[k],
                    trace.beta[k],
                )
            ]
            row += [fmt(v) for v in trace.toll[k]] + [fmt(v) for v in trace.flow[k]]
            wr.writerow(row)


def summarize(trace: RunTrace, seed: int) -> dict[str, float | int | str]:
    n = trace.n_rows
    t = trace.t
    lo = max(1.0, n / 10)
    return {
        "seed": seed,
        "T": n,
        "L_star": trace.L_star,
        "final_R": trace.cum_regret[n - 1] if n else 0.0,
        "slope_cum_regret": loglog_slope(t, trace.cum_regret, lo, n),
        "slope_theta_err": loglog_slope(t, trace.theta_err, lo, n),
        "slope_beta_err": loglog_slope(t, trace.beta_err, lo, n),
        "bound_envelope_C": bound_envelope(trace, trace.network, trace.beta_node),
        "envelope_tail_ratio": envelope_tail_ratio(trace, trace.network, trace.beta_node),
        "good_event_frequency": float(trace.good_event[:n].mean()) if n else math.nan,
        "good_event_all": int(trace.good_event_all),
        "low_flow_iterations": int(trace.low_flow[:n].sum()),
        "negative_regret_iterations": int(trace.negative_regret[:n].sum()),
    }


def write_summary(summary: dict, path: Path) -> None:
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh, lineterminator="\n")
        wr.writerow(["metric", "value"])
        for k, v in summary.items():
            wr.writerow([k, fmt(v) if isinstance(v, float) else v])


def read_csv_table(path: str | Path) -> tuple[list[str], np.ndarray]:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise ValueError(f"{path}: empty file")
    header, body = rows[0], rows[1:]
    data = np.array([[float(x) for x in r] for r in body], dtype=float).reshape(len(body), len(header))
    return header, data


def _floats(text: str | None, n: int, name: str) -> np.ndarray | None:
    if text is None:
        return None
    vals = [float(x) for x in text.split(",") if x.strip()]
    if len(vals) == 1:
        vals = vals * n
    if len(vals) != n:
        raise ConfigParseError(f"--{name}: length mismatch ({len(vals)} values for {n} arcs)")
    return np.array(vals)


def _options(exp: ExperimentFile, args: argparse.Namespace) -> SolverOptions:
    opts = exp.solver_options()
    if getattr(args, "tol", None) is not None:
        opts = replace(opts, tol=args.tol)
    if getattr(args, "damping", None) is not None:
        opts = replace(opts, damping=args.damping)
    return opts


def _load_valid(path: str, err: TextIO) -> ExperimentFile | None:
    try:
        exp = load_experiment(path)
    except ConfigParseError as exc:
        print(f"parse error: {exc}", file=err)
        return None
    problems = exp.problems()
    if problems:
        for p in problems:
            print(f"invalid: {p}", file=err)
        return None
    return exp


def _out_dir(exp: ExperimentFile, args: argparse.Namespace) -> Path:
    out = Path(args.out_dir if getattr(args, "out_dir", None) else exp.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    return out


def cmd_validate(args: argparse.Namespace, out: TextIO, err: TextIO) -> int:
    try:
        exp = load_experiment(args.config)
    except ConfigParseError as exc:
        print(f"parse error: {exc}", file=err)
        return EXIT_INVALID
    problems = exp.problems()
    if problems:
        for p in problems:
            print(f"invalid: {p}", file=out)
        return EXIT_INVALID
    net = exp.network
    print(f"valid: {net.n_nodes} nodes, {net.n_arcs} arcs, g_o={fmt(net.inflow)}", file=out)
    return EXIT_OK


def _emit_table(header: list[str], rows: list[list], path: Path, out: TextIO) -> None:
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh, lineterminator="\n")
        wr.writerow(header)
        wr.writerows(rows)
    wr = csv.writer(out, lineterminator="\n")
    wr.writerow(header)
    wr.writerows(rows)


def cmd_equilibrium(args: argparse.Namespace, out: TextIO, err: TextIO) -> int:
    exp = _load_valid(args.config, err)
    if exp is None:
        return EXIT_INVALID
    net = exp.network
    try:
        theta = _floats(args.theta, net.n_arcs, "theta")
        toll = _floats(args.toll, net.n_arcs, "toll")
    except (ConfigParseError, ValueError) as exc:
        print(f"invalid: {exc}", file=err)
        return EXIT_INVALID
    theta = np.asarray(exp.theta_star, float) if theta is None else theta
    toll = np.zeros(net.n_arcs) if toll is None else toll
    beta = exp.beta_star if args.beta is None else args.beta
    if not beta > 0 or np.any(theta < 0):
        print("invalid: beta must be positive and theta nonnegative", file=err)
        return EXIT_INVALID
    try:
        w = mte_solve(net, theta, beta, toll, _options(exp, args))
    except SolverError as exc:
        print(f"solver failure: {exc}", file=err)
        return EXIT_SOLVER
    z = cost_to_go(net, theta, beta, w, toll)
    c = arc_costs(theta, w, toll)
    res = max(fixed_point_residual(net, theta, beta, toll, w), conservation_residual(net, w))
    rows = [
        [a.id, a.tail, a.head, fmt(w[k]), fmt(z[k]), fmt(c[k]), fmt(res)] for k, a in enumerate(net.arcs)
    ]
    _emit_table(["arc", "tail", "head", "w", "z", "c", "residual"], rows, _out_dir(exp, args) / "equilibrium.csv", out)
    return EXIT_OK


def cmd_social_opt(args: argparse.Namespace, out: TextIO, err: TextIO) -> int:
    exp = _load_valid(args.config, err)
    if exp is None:
        return EXIT_INVALID
    net = exp.network
    theta = np.asarray(exp.theta_star, float)
    beta = exp.beta_star if args.beta is None else args.beta
    opts = _options(exp, args)
    try:
        w_so = social_optimum(net, theta, beta, opts)
        p, w_induced = optimal_toll_with_flow(net, theta, beta, opts, w0=w_so)
    except SolverError as exc:
        print(f"solver failure: {exc}", file=err)
        return EXIT_SOLVER
    L = perturbed_latency(net, w_so, theta, beta)
    rows = [
        [a.id, a.tail, a.head, fmt(w_so[k]), fmt(p[k]), fmt(w_induced[k])] for k, a in enumerate(net.arcs)
    ]
    _emit_table(["arc", "tail", "head", "w_social", "toll", "w_tolled_mte"], rows, _out_dir(exp, args) / "social_opt.csv", out)
    print(f"L_star,{fmt(L)}", file=out)
    return EXIT_OK


def _run_one(exp: ExperimentFile, seed: int, horizon: int | None, oracle: bool, noise: bool,
             opts: SolverOptions, out_dir: Path) -> tuple[int, str]:
    overrides = dict(seed=seed, oracle_mode=oracle, noise=noise, options=opts)
    if horizon is not None:
        overrides["T"] = horizon
    cfg = exp.run_config(**overrides)
    out_dir.mkdir(parents=True, exist_ok=True)
    try:
        trace = run(cfg)
    except RunAborted as exc:
        write_trace(exc.trace, out_dir / "trace.csv")
        return EXIT_SOLVER, f"seed {seed}: aborted, partial trace written ({exc})"
    write_trace(trace, out_dir / "trace.csv")
    summary = summarize(trace, seed)
    write_summary(summary, out_dir / "summary.csv")
    return EXIT_OK, f"seed {seed}: T={trace.n_rows} final_R={fmt(summary['final_R'])} -> {out_dir}"


def max_workers(n_jobs: int) -> int:
    cap = os.environ.get(THREADS_ENV)
    limit = int(cap) if cap else (os.cpu_count() or 1)
    return max(1, min(n_jobs, limit))


def cmd_run(args: argparse.Namespace, out: TextIO, err: TextIO) -> int:
    exp = _load_valid(args.config, err)
    if exp is None:
        return EXIT_INVALID
    if args.horizon is not None and args.horizon < 1:
        print("invalid: --horizon must be at least 1", file=err)
        return EXIT_INVALID
    base = _out_dir(exp, args)
    seed0 = exp.seed if args.seed is None else args.seed
    seeds = [seed0 + r for r in range(args.replicates)]
    opts = _options(exp, args)
    jobs = [
        (exp, s, args.horizon, args.oracle_mode, not args.no_noise, opts,
         base if len(seeds) == 1 else base / f"seed_{s}")
        for s in seeds
    ]
    workers = max_workers(len(jobs))
    if workers == 1:
        results = [_run_one(*j) for j in jobs]
    else:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_run_one, *zip(*jobs)))
    status = EXIT_OK
    for code, msg in results:
        print(msg, file=out if code == EXIT_OK else err)
        status = max(status, code)
    return status


def cmd_report(args: argparse.Namespace, out: TextIO, err: TextIO) -> int:
    tables = []
    try:
        for path in args.traces:
            tables.append(read_csv_table(path))
    except (OSError, ValueError) as exc:
        print(f"parse error: {exc}", file=err)
        return EXIT_INVALID
    header = tables[0][0]
    for path, (h, d) in zip(args.traces, tables):
        if h != header or d.shape != tables[0][1].shape:
            print(f"schema mismatch: {path}", file=err)
            return EXIT_INVALID
        if h[: len(TRACE_FIXED)] != TRACE_FIXED:
            print(f"schema mismatch: {path} is not a trace file", file=err)
            return EXIT_INVALID
    stack = np.stack([d for _, d in tables])
    t = stack[0, :, 0]
    cols = ["t"]
    parts = [t]
    for name in REPORT_COLUMNS:
        j = header.index(name)
        cols += [f"{name}_mean", f"{name}_std"]
        parts += [stack[:, :, j].mean(axis=0), stack[:, :, j].std(axis=0)]
    table = np.column_stack(parts)
    dest = Path(args.out) if args.out else Path(args.traces[0]).parent / "aggregate.csv"
    dest.parent.mkdir(parents=True, exist_ok=True)
    with open(dest, "w", newline="") as fh:
        wr = csv.writer(fh, lineterminator="\n")
        wr.writerow(cols)
        for row in table:
            wr.writerow([str(int(row[0]))] + [fmt(v) for v in row[1:]])
    n = len(t)
    lo = max(1.0, n / 10)
    mean_r = table[:, cols.index("cum_regret_mean")]
    print(f"traces,{len(tables)}", file=out)
    print(f"rows,{n}", file=out)
    print(f"slope_mean_cum_regret,{fmt(loglog_slope(t, mean_r, lo, n))}", file=out)
    print(f"aggregate,{dest}", file=out)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="mte-tollkit", description=__doc__.splitlines()[0])
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    def solver_flags(p: argparse.ArgumentParser) -> None:
        p.add_argument("--tol", type=float, default=None, help="fixed-point tolerance")
        p.add_argument("--damping", type=float, default=None, help="initial damping in (0, 1]")
        p.add_argument("--out-dir", default=None, help="output directory (default: from config)")

    p = sub.add_parser("validate", help="check an experiment file")
    p.add_argument("config")
    p.set_defaults(func=cmd_validate)

    p = sub.add_parser("equilibrium", help="solve the equilibrium for given parameters and tolls")
    p.add_argument("config")
    p.add_argument("--theta", help="comma-separated slopes (default: truth)")
    p.add_argument("--beta", type=float, help="entropy parameter (default: truth)")
    p.add_argument("--toll", help="comma-separated tolls or one value for all arcs (default: 0)")
    solver_flags(p)
    p.set_defaults(func=cmd_equilibrium)

    p = sub.add_parser("social-opt", help="perturbed social optimum and its optimal toll")
    p.add_argument("config")
    p.add_argument("--beta", type=float, help="entropy parameter (default: truth)")
    solver_flags(p)
    p.set_defaults(func=cmd_social_opt)

    p = sub.add_parser("run", help="run the learning loop and write trace.csv + summary.csv")
    p.add_argument("config")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--replicates", type=int, default=1, help="number of consecutive seeds")
    p.add_argument("--horizon", type=int, default=None, help="override T")
    p.add_argument("--oracle-mode", action="store_true", help="pin estimates to the truth")
    p.add_argument("--no-noise", action="store_true", help="noiseless latency observations")
    solver_flags(p)
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("report", help="aggregate traces across seeds")
    p.add_argument("traces", nargs="+")
    p.add_argument("--out", default=None, help="aggregate CSV path")
    p.set_defaults(func=cmd_report)
    return ap


def main(argv: Sequence[str] | None = None, out: TextIO | None = None, err: TextIO | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.ERROR, format="%(levelname)s %(message)s")
    return args.func(args, out or sys.stdout, err or sys.stderr)


if __name__ == "__main__":
    sys.exit(main())
