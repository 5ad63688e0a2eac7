"""``txflow`` command line: solve, sweep and compare.

Exit codes: 0 high-voltage solution (every cell/row for sweep and compare),
1 case could not be read or parsed, 2 validation or usage error,
3 solver finished with any other outcome.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

from txflow.case_io import find_case, load_network, write_solution
from txflow.errors import CaseError, NetworkValidationError, ZeroImpedanceBranch
from txflow.harness import (
    SolverOptions,
    SweepSpec,
    compare,
    compare_csv,
    compare_table,
    run_solve,
    run_sweep,
)
from txflow.homotopy import HomotopySchedule, stage_csv
from txflow.nr import NRConfig, SolveStatus, trace_csv
from txflow.stamps import HomotopyConfig

EXIT_OK, EXIT_PARSE, EXIT_USAGE, EXIT_OUTCOME = 0, 1, 2, 3

log = logging.getLogger("txflow")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _range(text: str) -> tuple[float, float]:
    try:
        lo, hi = (float(v) for v in text.split(":"))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected a:b, got {text!r}") from None
    if lo > hi:
        raise argparse.ArgumentTypeError(f"range {text!r} has lo > hi")
    return lo, hi


def _grid(text: str) -> tuple[int, int]:
    try:
        m, a = (int(v) for v in text.lower().split("x"))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected MAGxANG, got {text!r}") from None
    if m < 1 or a < 1:
        raise argparse.ArgumentTypeError("grid counts must be >= 1")
    return m, a


def _init_pair(text: str) -> tuple[float, float]:
    try:
        m, a = (float(v) for v in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected MAG,ANG, got {text!r}") from None
    return m, a


def _gen_list(text: str) -> list[int]:
    try:
        ids = [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated generator rows, got {text!r}") from None
    if any(i < 1 for i in ids):
        raise argparse.ArgumentTypeError("generator rows are 1-based")
    return ids


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("case", help="case file (.m or .json) or a bare public case name such as case118")
    common.add_argument("--method", choices=("plain-nr", "tx"), default="tx")
    common.add_argument("--gamma", type=float, default=999.0, help="admittance scaling of the shorted network")
    common.add_argument("--dv-max", type=float, default=0.1, help="per-iteration voltage step limit (pu)")
    common.add_argument("--tol", type=float, default=1e-6, help="KCL residual tolerance (pu)")
    common.add_argument("--max-iter", type=int, default=50, help="Newton iterations per stage")
    common.add_argument(
        "--start",
        choices=("given", "trivial"),
        help="Tx stepping first stage from the given guess or from the constructed trivial point",
    )
    common.add_argument("--drop-gen", type=_gen_list, default=[], metavar="ROWS", help="1-based generator rows to drop")
    common.add_argument("--out", type=Path, help="output file (default: stdout)")

    p = _Parser(prog="txflow", description="AC power flow with Tx-stepping continuation")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("solve", parents=[common], help="solve one case")
    s.add_argument("--init-mag", type=float, default=1.0)
    s.add_argument("--init-ang", type=float, default=0.0, help="degrees")
    s.add_argument("--trace", type=Path, help="write the Newton trace CSV here")
    s.add_argument("--stages", type=Path, help="write the stage trace CSV here")

    w = sub.add_parser("sweep", parents=[common], help="initial-condition convergence sweep")
    w.add_argument("--grid", type=_grid, default=(5, 5), metavar="MAGxANG")
    w.add_argument("--mag-range", type=_range, default=(0.6, 1.0), metavar="A:B")
    w.add_argument("--ang-range", type=_range, default=(-50.0, 50.0), metavar="A:B")
    w.add_argument("--mode", choices=("grid", "line", "sample"), default="grid",
                   help="line: V_R over --vr-range with V_I = 1 - V_R; sample: random (needs --seed)")
    w.add_argument("--points", type=int, default=10, help="point count for line and sample modes")
    w.add_argument("--vr-range", type=_range, default=(0.6, 1.1), metavar="A:B")
    w.add_argument("--seed", type=int)
    w.add_argument("--jobs", type=int, default=1)

    c = sub.add_parser("compare", parents=[common], help="plain NR vs Tx stepping per initial condition")
    c.add_argument("--init", type=_init_pair, action="append", default=[], metavar="MAG,ANG")
    c.add_argument("--table", type=Path, help="also write the aligned text table here")
    return p


def _options(args, default_start: str) -> SolverOptions:
    if args.gamma < 0:
        raise UsageError("--gamma must be >= 0")
    nr = NRConfig(tol_res=args.tol, dv_max=args.dv_max, max_iter=args.max_iter)
    start = args.start or default_start
    return SolverOptions(args.method, nr, HomotopyConfig(gamma=args.gamma), HomotopySchedule(), start == "given")


def _emit(text: str, path: Path | None) -> None:
    if path is None:
        sys.stdout.write(text)
    else:
        path.write_text(text)


def _load(args):
    try:
        path = find_case(args.case)
    except FileNotFoundError as exc:
        raise CaseError(str(exc)) from exc
    return load_network(path, drop_gens=[g - 1 for g in args.drop_gen])


def cmd_solve(args) -> int:
    net = _load(args)
    opts = _options(args, "trivial")
    rep = run_solve(net, args.init_mag, args.init_ang, opts)
    _emit(write_solution(rep, rep.state, net), args.out)
    if args.trace:
        args.trace.write_text(trace_csv(rep.trace))
    if args.stages:
        args.stages.write_text(stage_csv(rep.stages))
    log.info("%s: %s after %d iterations (%.2fs)", net.name, rep.status.value, rep.total_iterations, rep.wall_time)
    if rep.reason:
        log.info("reason: %s", rep.reason)
    return EXIT_OK if rep.status is SolveStatus.HIGH_VOLTAGE else EXIT_OUTCOME


def cmd_sweep(args) -> int:
    net = _load(args)
    opts = _options(args, "given")
    if args.jobs < 1:
        raise UsageError("--jobs must be >= 1")
    try:
        spec = SweepSpec(args.mag_range, args.ang_range, *args.grid, mode=args.mode, n_points=args.points,
                         vr_range=args.vr_range, seed=args.seed)
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    res = run_sweep(net, spec, opts, jobs=args.jobs,
                    progress=lambda c: log.info("cell %.4g/%.4g: %s", c.v_mag, c.v_ang_deg, c.status.value))
    _emit(res.csv(), args.out)
    print(res.summary(), file=sys.stderr)
    ok = all(c.status is SolveStatus.HIGH_VOLTAGE for c in res.cells)
    return EXIT_OK if ok else EXIT_OUTCOME


def cmd_compare(args) -> int:
    if not args.init:
        raise UsageError("compare needs at least one --init MAG,ANG")
    net = _load(args)
    rows = compare(net, args.init, _options(args, "given"))
    _emit(compare_csv(rows), args.out)
    table = compare_table(rows)
    if args.table:
        args.table.write_text(table)
    else:
        sys.stderr.write(table)
    ok = all(r.tx.status is SolveStatus.HIGH_VOLTAGE for r in rows)
    return EXIT_OK if ok else EXIT_OUTCOME


def _fail(code: int, kind: str, message: str) -> int:
    print(json.dumps({"error": kind, "message": message, "exit_code": code}), file=sys.stderr)
    return code


def main(argv=None) -> int:
    logging.basicConfig(level=os.environ.get("TXFLOW_LOG", "WARNING").upper(), format="%(levelname)s %(name)s: %(message)s")
    try:
        args = build_parser().parse_args(argv)
        return {"solve": cmd_solve, "sweep": cmd_sweep, "compare": cmd_compare}[args.command](args)
    except UsageError as exc:
        return _fail(EXIT_USAGE, "UsageError", str(exc))
    except (NetworkValidationError, ZeroImpedanceBranch) as exc:
        return _fail(EXIT_USAGE, type(exc).__name__, str(exc))
    except (CaseError, OSError, json.JSONDecodeError, UnicodeDecodeError) as exc:
        return _fail(EXIT_PARSE, type(exc).__name__, str(exc))


if __name__ == "__main__":
    sys.exit(main())
