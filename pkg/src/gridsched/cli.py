"""Command-line entry point: ``gridsched <command> ...``.

Commands: ``schedule``, ``opf``, ``sweep`` and ``fit-errors``. Every command
writes its reports under ``--out``. Failures exit with status 1 and a message
naming the stage that failed.
"""
from __future__ import annotations

import argparse
import sys
from pathlib import Path

from .admm import AdmmConfig, solve
from .errormodel import mdl_scan, read_history
from .grid import aggregate_demand, load_feeder, validate_radial
from .pipeline import (DEFAULT_PV_BUSES, PipelineError, alpha_sweep, emit_reports, load_config, run_pipeline,
                       summary_text)
from .scheduler import read_prices_demand
from .socp import allocate_pv, problem_from_network, solution_csv


def _alphas(text: str) -> list:
    try:
        vals = [float(t) for t in text.split(",") if t.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"not a comma-separated list of numbers: {text!r}") from None
    if not vals:
        raise argparse.ArgumentTypeError("no alpha values given")
    return vals


def _config(args):
    overrides = {"workers": args.workers} if args.workers else {}
    return load_config(args.config, **overrides)


def cmd_schedule(args) -> None:
    rep = run_pipeline(_config(args))
    emit_reports(rep, args.out)
    print(summary_text(rep), end="")


def cmd_sweep(args) -> None:
    rep = alpha_sweep(_config(args), args.alphas)
    emit_reports(rep, args.out)
    for row in rep.sweep:
        print(f"alpha {row.alpha:g}: expected cost {row.expected_cost:.6f}")
    print(f"direction: {rep.sweep_direction}")


def cmd_opf(args) -> None:
    try:
        net = load_feeder(args.feeder)
        report = validate_radial(net)
        if not report.ok:
            raise ValueError(report.describe())
    except (OSError, ValueError) as exc:
        raise PipelineError("ingest", f"feeder {args.feeder}: {exc}") from None
    hour = args.hour
    feeder_hour = hour if net.horizon else 0
    scale, pv = args.load_scale, {}
    try:
        if args.prices:
            _, demand = read_prices_demand(args.prices)
            if not 0 <= hour < demand.horizon:
                raise IndexError(f"hour {hour} outside the {demand.horizon}-hour table")
            nominal = aggregate_demand(net, feeder_hour)[0]
            scale *= demand.g_dl[hour] / nominal if nominal > 0 else 0.0
            pv = allocate_pv(net, float(demand.g_pv_forecast[hour]), args.pv_buses)
        prob = problem_from_network(net, feeder_hour, scale, pv)
        res = solve(prob, AdmmConfig(max_iter=args.max_iter))
    except (OSError, ValueError, IndexError) as exc:
        raise PipelineError("opf", str(exc), hour) from None
    out = Path(args.out)
    try:
        out.mkdir(parents=True, exist_ok=True)
        (out / f"opf_hour_{hour}.csv").write_text(solution_csv(res.solution), encoding="utf-8")
        res.trace.write_csv(out / f"residuals_hour_{hour}.csv")
    except OSError as exc:
        raise PipelineError("report", str(exc)) from None
    loss_kw = res.solution.objective * prob.base_kw
    print(f"hour {hour}: loss {loss_kw:.6f} kW, {res.iterations} iterations, "
          f"flags {', '.join(res.flags) or 'none'}")


def cmd_fit_errors(args) -> None:
    try:
        errors = read_history(args.history)
        sel = mdl_scan(errors, args.nmax, seed=args.seed)
    except (OSError, ValueError) as exc:
        raise PipelineError("error-model", str(exc)) from None
    out = Path(args.out)
    try:
        out.mkdir(parents=True, exist_ok=True)
        (out / "error_model.txt").write_text(sel.model.to_text(), encoding="utf-8")
        rows = ["n_components,mdl"] + [f"{n},{s!r}" for n, s in sel.scores]
        (out / "mdl_scores.csv").write_text("\n".join(rows) + "\n", encoding="utf-8")
    except OSError as exc:
        raise PipelineError("report", str(exc)) from None
    print(f"selected N = {sel.n_components}")
    print(sel.model.to_text(), end="")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="gridsched", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("schedule", help="run the full pipeline for one alpha")
    p.add_argument("--config", required=True, type=Path)
    p.add_argument("--out", required=True, type=Path)
    p.add_argument("--workers", type=int, default=None, help="parallel hours (overrides the config)")
    p.set_defaults(func=cmd_schedule)

    p = sub.add_parser("opf", help="solve the OPF for one hour")
    p.add_argument("--feeder", required=True, type=Path)
    p.add_argument("--hour", required=True, type=int)
    p.add_argument("--out", required=True, type=Path)
    p.add_argument("--prices", type=Path, help="demand/PV table used to scale loads for the hour")
    p.add_argument("--load-scale", type=float, default=1.0)
    p.add_argument("--pv-buses", type=lambda s: tuple(int(t) for t in s.split(",")), default=DEFAULT_PV_BUSES)
    p.add_argument("--max-iter", type=int, default=AdmmConfig().max_iter)
    p.set_defaults(func=cmd_opf)

    p = sub.add_parser("sweep", help="expected cost over several alphas")
    p.add_argument("--config", required=True, type=Path)
    p.add_argument("--alphas", required=True, type=_alphas)
    p.add_argument("--out", required=True, type=Path)
    p.add_argument("--workers", type=int, default=None)
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("fit-errors", help="fit the forecast-error mixture")
    p.add_argument("--history", required=True, type=Path)
    p.add_argument("--nmax", required=True, type=int)
    p.add_argument("--out", required=True, type=Path)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_fit_errors)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        args.func(args)
    except PipelineError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
