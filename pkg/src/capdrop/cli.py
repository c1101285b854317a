"""Command-line entry point: ``capdrop <command> SCENARIO [options]``.

Exit status is 0 on success, 1 for invalid input and 2 when a solver fails.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict
from pathlib import Path

import numpy as np

from . import analysis, model
from .controllers import ControllerConfig, ControllerError
from .harness import RunRecord, run_closed_loop, scenario_config
from .io import (ScenarioError, bundled, load_scenario, summary, write_record,
                 write_solves)
from .lp import LpError
from .milp import MilpError

EXIT_OK, EXIT_INVALID, EXIT_SOLVER = 0, 1, 2
CONTROLLERS = ("none", "rampc", "ehmpc", "hc")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(EXIT_INVALID)


def _resolve(name: str):
    path = Path(name)
    if not path.exists() and not name.endswith(".json"):
        candidate = bundled(name)
        if candidate.exists():
            path = candidate
    if not path.exists():
        raise ScenarioError(f"{name}: no such scenario file or bundled name")
    return load_scenario(path)


def _controller_config(sc, kind: str, args) -> ControllerConfig:
    return scenario_config(
        sc, kind, T=getattr(args, "horizon", None),
        memory=getattr(args, "memory", None), delta_c=args.delta_c,
        node_limit=args.node_limit, time_limit=args.time_limit,
        engine=args.engine)


def _emit(record: RunRecord, out: str | None, extra: dict | None = None) -> dict:
    info = summary(record)
    if extra:
        info.update(extra)
    if out:
        path = Path(out)
        path.parent.mkdir(parents=True, exist_ok=True)
        write_record(record, path)
        if record.solves:
            write_solves(record, path.with_name(path.stem + "_solves.csv"))
        path.with_suffix(".json").write_text(json.dumps(info, indent=2) + "\n")
    return info


def cmd_simulate(args) -> int:
    sc = _resolve(args.scenario)
    errors = model.validate(sc.network)
    if errors:
        raise UsageError("; ".join(errors))
    K = sc.K if args.steps is None else min(args.steps, sc.K)
    cfg = ControllerConfig("none")
    record = run_closed_loop(sc, cfg, K=K) if args.u is None else None
    if record is None:
        if not 0.0 <= args.u <= 1.0:
            raise UsageError(f"--u must lie in [0, 1], got {args.u}")
        record = _fixed_rate_record(sc, K, args.u)
    info = _emit(record, args.out)
    print(json.dumps(info, indent=2))
    return EXIT_OK


def _fixed_rate_record(sc, K: int, u: float) -> RunRecord:
    n_ramps = len(sc.network.ramp_cells)
    controls = np.full((K, n_ramps), u)
    results = model.simulate(sc, controls)
    s0 = sc.initial_state()
    xs = [s0.x] + [r.state.x for r in results]
    rs = [s0.r] + [r.state.r for r in results]
    sig = [s0.sigma] + [r.state.sigma for r in results]
    return RunRecord(sc.name, f"fixed u={u:g}", np.array(xs), np.array(rs),
                     np.array(sig), np.array([r.phi for r in results]),
                     np.array([r.f for r in results]), controls,
                     np.array([r.exits for r in results]))


def cmd_control(args) -> int:
    sc = _resolve(args.scenario)
    cfg = _controller_config(sc, args.controller, args)
    errors = model.validate(sc.network) + cfg.validate(sc.network)
    if errors:
        raise UsageError("; ".join(errors))
    try:
        record = run_closed_loop(sc, cfg, K=args.steps)
    except ControllerError as exc:
        partial = getattr(exc, "record", None)
        if partial is not None and args.out:
            _emit(partial, args.out)
        raise
    info = _emit(record, args.out, {"horizon": cfg.T, "memory": cfg.memory})
    print(json.dumps(info, indent=2))
    return EXIT_OK


def _two_cell(sc):
    if sc.network.n != 2:
        raise UsageError(f"a two-cell scenario is required, got {sc.network.n} cells")
    return sc.network


def cmd_horizon(args) -> int:
    sc = _resolve(args.scenario)
    net = _two_cell(sc)
    lam = sc.lambda0 if args.lambda0 is None else args.lambda0
    if args.general:
        c1, c2 = net.cells
        d1 = lambda x: c1.v * x  # noqa: E731
        d2 = lambda x: c2.v * x  # noqa: E731
        lam_avg = analysis.mean_inflow(lam, args.window)
        report = {
            "form": "general",
            "T_D": analysis.horizon_T_D_general(d1, d2, net, lam_avg),
            "T_R": analysis.horizon_T_R_general(d1, d2, net, lam),
        }
    else:
        x1 = float(sc.x0[0]) if args.x1 is None else args.x1
        budget = analysis.horizon_budget(net, lam, x1_0=x1, window=args.window)
        report = {"form": "specialized", **asdict(budget), "total": budget.total}
    if args.json:
        print(json.dumps(report, indent=2))
    else:
        for key, value in report.items():
            print(f"{key}={value:.4f}" if isinstance(value, float) else f"{key}={value}")
    return EXIT_OK


def cmd_analyze(args) -> int:
    sc = _resolve(args.scenario)
    net = _two_cell(sc)
    lam = analysis.mean_inflow(sc.lambda0) if args.lambda0 is None else args.lambda0
    res = analysis.check_prop1(net, lam)
    report = {"lambda0": lam, **asdict(res)}
    if args.json:
        print(json.dumps(report, indent=2))
        return EXIT_OK
    print(f"lambda0      {lam:g}")
    print(f"x_c          {res.x_c:.4f}")
    print(f"x1_target    {res.x1_target:.4f}")
    print(f"E_convex     {res.E_convex:.4f}")
    print(f"E_hyst       {res.E_hyst:.4f}")
    print(f"delta_E      {res.delta_E:.4f}")
    print(f"fill         {'ok' if res.fill_ok else 'FAILS'} "
          f"({res.fill_lhs:.4g} > {res.fill_rhs:.4g})")
    print(f"drain        {'ok' if res.drain_ok else 'FAILS'} "
          f"({res.drain_lhs:.4g} < {res.drain_rhs:.4g})")
    print(f"gap          {'ok' if res.gap_ok else 'FAILS'} "
          f"({res.x_c:.4g} < {net.cells[1].x_hi:.4g})")
    if not res.applicable:
        print("note         cell 2 has an onramp; the two-cell conditions assume none")
    return EXIT_OK


def _compare_one(job):
    sc, cfg, K = job
    return run_closed_loop(sc, cfg, K=K)


def cmd_compare(args) -> int:
    sc = _resolve(args.scenario)
    kinds = [k.strip() for k in args.controllers.split(",") if k.strip()]
    bad = [k for k in kinds if k not in CONTROLLERS]
    if bad:
        raise UsageError(f"--controllers: unknown controller(s) {', '.join(bad)}")
    cfgs = [_controller_config(sc, k, args) for k in kinds]
    errors = model.validate(sc.network)
    for cfg in cfgs:
        errors += cfg.validate(sc.network)
    if errors:
        raise UsageError("; ".join(errors))
    jobs = [(sc, cfg, args.steps) for cfg in cfgs]
    if args.jobs > 1:
        with ProcessPoolExecutor(max_workers=args.jobs) as pool:
            records = list(pool.map(_compare_one, jobs))
    else:
        records = [_compare_one(j) for j in jobs]
    rows = []
    for kind, cfg, rec in zip(kinds, cfgs, records):
        out = str(Path(args.out) / f"{sc.name or 'run'}_{kind}.csv") if args.out else None
        info = _emit(rec, out, {"horizon": cfg.T, "memory": cfg.memory})
        rows.append((kind, info))
    rows.sort(key=lambda kv: -kv[1]["cumulative_exits"])
    print(f"{'rank':<5}{'controller':<12}{'cumulative_exits':>18}{'solve_time_s':>14}")
    for rank, (kind, info) in enumerate(rows, 1):
        print(f"{rank:<5}{kind:<12}{info['cumulative_exits']:>18.3f}"
              f"{info['solve_time']:>14.3f}")
    if args.out:
        table = [{"rank": i, **info, "controller": k} for i, (k, info) in enumerate(rows, 1)]
        (Path(args.out) / "ranking.json").write_text(json.dumps(table, indent=2) + "\n")
    return EXIT_OK


def _solver_flags(p):
    p.add_argument("--horizon", type=int, help="rollout horizon T")
    p.add_argument("--memory", type=int, help="planned actions applied per solve")
    p.add_argument("--delta-c", type=float, default=1e-3,
                   help="congestion buffer of the hysteretic encoding")
    p.add_argument("--node-limit", type=int, default=200_000)
    p.add_argument("--time-limit", type=float, default=None,
                   help="seconds per MILP solve")
    p.add_argument("--engine", choices=("highs", "bnb"), default="highs",
                   help="MILP engine (bnb is the built-in branch and bound)")
    p.add_argument("--steps", type=int, default=None,
                   help="truncate the run to this many steps")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="capdrop", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("simulate", help="open-loop run with a fixed metering rate")
    p.add_argument("scenario")
    p.add_argument("--u", type=float, default=None,
                   help="constant metering rate in [0, 1] (default: 1)")
    p.add_argument("--steps", type=int, default=None)
    p.add_argument("--out", help="CSV path; a .json summary is written beside it")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("control", help="closed-loop run of one controller")
    p.add_argument("scenario")
    p.add_argument("--controller", choices=CONTROLLERS, required=True)
    _solver_flags(p)
    p.add_argument("--out", help="CSV path; a .json summary is written beside it")
    p.set_defaults(func=cmd_control)

    p = sub.add_parser("horizon", help="sufficient rollout horizon for two cells")
    p.add_argument("scenario")
    p.add_argument("--general", action="store_true",
                   help="bounds for general demand curves (T_D, T_R only)")
    p.add_argument("--x1", type=float, default=None,
                   help="cell-1 density when decongestion starts (default: x0[1])")
    p.add_argument("--lambda0", type=float, default=None)
    p.add_argument("--window", type=int, default=None,
                   help="steps averaged for the mainline inflow")
    p.add_argument("--json", action="store_true")
    p.set_defaults(func=cmd_horizon)

    p = sub.add_parser("analyze", help="two-cell gap and decongestion conditions")
    p.add_argument("scenario")
    p.add_argument("--lambda0", type=float, default=None)
    p.add_argument("--json", action="store_true")
    p.set_defaults(func=cmd_analyze)

    p = sub.add_parser("compare", help="rank several controllers on one scenario")
    p.add_argument("scenario")
    p.add_argument("--controllers", default="none,rampc,hc,ehmpc")
    _solver_flags(p)
    p.add_argument("--jobs", type=int, default=1, help="parallel runs")
    p.add_argument("--out", help="directory for per-controller CSV files")
    p.set_defaults(func=cmd_compare)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:   # --help exits 0, bad flags exit 1
        return exc.code
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ControllerError, LpError, MilpError) as exc:
        print(f"capdrop: solver failure: {exc}", file=sys.stderr)
        return EXIT_SOLVER
    except (UsageError, ScenarioError, ValueError) as exc:
        print(f"capdrop: error: {exc}", file=sys.stderr)
        return EXIT_INVALID


if __name__ == "__main__":
    sys.exit(main())
