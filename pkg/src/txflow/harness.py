"""Initial-condition sweeps and plain-NR vs Tx-stepping comparisons."""

from __future__ import annotations

import csv
import io
import logging
import time
from collections import Counter
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from txflow.homotopy import HomotopySchedule, SolveReport, solve_plain_nr, solve_tx_stepping
from txflow.network import Network
from txflow.nr import NRConfig, SolveStatus, TraceAudit, audit_trace, flat_start
from txflow.stamps import HomotopyConfig

log = logging.getLogger(__name__)

METHODS = ("plain-nr", "tx")
SWEEP_HEADER = ("v_mag", "v_ang_deg", "status", "iters", "ms")


@dataclass(frozen=True)
class SolverOptions:
    """Everything a single solve needs besides the network and the initial guess."""

    method: str = "tx"
    nr: NRConfig = NRConfig()
    homotopy: HomotopyConfig = HomotopyConfig()
    schedule: HomotopySchedule = HomotopySchedule()
    honor_init: bool = True

    def __post_init__(self):
        if self.method not in METHODS:
            raise ValueError(f"unknown method {self.method!r}; expected one of {METHODS}")


def run_solve(network: Network, mag: float, ang_deg: float, opts: SolverOptions) -> SolveReport:
    init = flat_start(network, mag, ang_deg)
    if opts.method == "plain-nr":
        return solve_plain_nr(network, init, opts.nr)
    return solve_tx_stepping(network, init, opts.schedule, opts.nr, opts.homotopy, honor_init=opts.honor_init)


@dataclass(frozen=True)
class SweepSpec:
    """Set of flat initial guesses ``mag∠ang`` applied to every non-slack bus.

    ``mode="grid"`` is an ``n_mag x n_ang`` tensor grid, ``mode="line"``
    takes ``n_points`` values of V_R in ``vr_range`` with V_I = 1 - V_R,
    and ``mode="sample"`` draws ``n_points`` uniform (mag, ang) pairs
    (``seed`` required).
    """

    mag_range: tuple[float, float] = (0.6, 1.0)
    ang_range: tuple[float, float] = (-50.0, 50.0)
    n_mag: int = 5
    n_ang: int = 5
    mode: str = "grid"
    n_points: int = 10
    vr_range: tuple[float, float] = (0.6, 1.1)
    seed: int | None = None

    def __post_init__(self):
        if self.mode not in ("grid", "line", "sample"):
            raise ValueError(f"unknown sweep mode {self.mode!r}")
        if self.n_mag < 1 or self.n_ang < 1 or self.n_points < 1:
            raise ValueError("sweep counts must be >= 1")
        for lo, hi in (self.mag_range, self.ang_range, self.vr_range):
            if lo > hi:
                raise ValueError(f"range {lo}:{hi} has lo > hi")
        if self.mode == "sample" and self.seed is None:
            raise ValueError("sample mode needs an explicit seed")

    def points(self) -> list[tuple[float, float]]:
        if self.mode == "grid":
            mags = np.linspace(*self.mag_range, self.n_mag)
            angs = np.linspace(*self.ang_range, self.n_ang)
            return [(float(m), float(a)) for m in mags for a in angs]
        if self.mode == "line":
            vr = np.linspace(*self.vr_range, self.n_points)
            v = vr + 1j * (1.0 - vr)
            return [(float(abs(z)), float(np.degrees(np.angle(z)))) for z in v]
        rng = np.random.default_rng(self.seed)
        mags = rng.uniform(*self.mag_range, self.n_points)
        angs = rng.uniform(*self.ang_range, self.n_points)
        return [(float(m), float(a)) for m, a in zip(mags, angs)]


@dataclass(frozen=True)
class Cell:
    v_mag: float
    v_ang_deg: float
    status: SolveStatus
    iters: int
    ms: float
    vm: np.ndarray = field(repr=False, compare=False, default=None)
    va: np.ndarray = field(repr=False, compare=False, default=None)
    x: np.ndarray = field(repr=False, compare=False, default=None)
    audit: TraceAudit | None = field(repr=False, compare=False, default=None)


@dataclass
class SweepResult:
    cells: list[Cell]

    @property
    def counts(self) -> Counter:
        return Counter(c.status.value for c in self.cells)

    def csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(SWEEP_HEADER)
        for c in self.cells:
            w.writerow([f"{c.v_mag:.6g}", f"{c.v_ang_deg:.6g}", c.status.value, c.iters, f"{c.ms:.1f}"])
        return buf.getvalue()

    def summary(self) -> str:
        parts = [f"{k}={v}" for k, v in sorted(self.counts.items())]
        return f"cells={len(self.cells)} " + " ".join(parts)

    def max_spread(self, status: SolveStatus = SolveStatus.HIGH_VOLTAGE) -> float:
        """Largest pairwise distance |V_a - V_b| (pu, per bus) among cells with ``status``."""
        vs = [c.vm * np.exp(1j * c.va) for c in self.cells if c.status is status and c.vm is not None]
        worst = 0.0
        for i in range(len(vs)):
            for j in range(i + 1, len(vs)):
                worst = max(worst, float(np.abs(vs[i] - vs[j]).max()))
        return worst


def solve_cell(network: Network, point: tuple[float, float], opts: SolverOptions) -> Cell:
    mag, ang = point
    t0 = time.perf_counter()
    try:
        rep = run_solve(network, mag, ang, opts)
    except Exception:  # noqa: BLE001 - a broken cell must never sink the sweep
        log.exception("cell %g/%g raised", mag, ang)
        return Cell(mag, ang, SolveStatus.DIVERGED, 0, (time.perf_counter() - t0) * 1e3)
    ms = (time.perf_counter() - t0) * 1e3
    v = rep.state.voltages()
    return Cell(mag, ang, rep.status, rep.total_iterations, ms, np.abs(v), np.angle(v), rep.state.x, audit_trace(rep.trace))


_WORKER: dict = {}


def _init_worker(network: Network, opts: SolverOptions) -> None:
    _WORKER["network"] = network
    _WORKER["opts"] = opts


def _worker_cell(point):
    return solve_cell(_WORKER["network"], point, _WORKER["opts"])


def run_sweep(network: Network, spec: SweepSpec, opts: SolverOptions, jobs: int = 1, progress=None) -> SweepResult:
    """Solve once per sweep point; cells are independent and returned in point order."""
    points = spec.points()
    if jobs <= 1:
        cells = []
        for p in points:
            cells.append(solve_cell(network, p, opts))
            if progress:
                progress(cells[-1])
        return SweepResult(cells)
    with ProcessPoolExecutor(max_workers=jobs, initializer=_init_worker, initargs=(network, opts)) as pool:
        cells = list(pool.map(_worker_cell, points))
    return SweepResult(cells)


@dataclass(frozen=True)
class CompareRow:
    v_mag: float
    v_ang_deg: float
    plain: Cell
    tx: Cell


COMPARE_HEADER = ("v_mag", "v_ang_deg", "plain_status", "plain_iters", "tx_status", "tx_iters")


def compare(network: Network, inits, opts: SolverOptions) -> list[CompareRow]:
    """Run plain NR and Tx stepping from each ``(mag, ang_deg)`` guess."""
    inits = list(inits)
    if not inits:
        raise ValueError("need at least one initial condition")
    rows = []
    for point in inits:
        plain = solve_cell(network, point, SolverOptions("plain-nr", opts.nr, opts.homotopy, opts.schedule))
        tx = solve_cell(network, point, SolverOptions("tx", opts.nr, opts.homotopy, opts.schedule, opts.honor_init))
        rows.append(CompareRow(point[0], point[1], plain, tx))
    return rows


def compare_csv(rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(COMPARE_HEADER)
    for r in rows:
        w.writerow([f"{r.v_mag:.6g}", f"{r.v_ang_deg:.6g}", r.plain.status.value, r.plain.iters, r.tx.status.value, r.tx.iters])
    return buf.getvalue()


def compare_table(rows) -> str:
    head = ["V_mag", "V_ang", "plain NR", "iters", "Tx stepping", "iters"]
    body = [
        [f"{r.v_mag:.4g}", f"{r.v_ang_deg:.4g}", r.plain.status.value, str(r.plain.iters), r.tx.status.value, str(r.tx.iters)]
        for r in rows
    ]
    widths = [max(len(x) for x in col) for col in zip(head, *body)]
    fmt = lambda cols: "  ".join(c.rjust(w) if i in (0, 1, 3, 5) else c.ljust(w) for i, (c, w) in enumerate(zip(cols, widths)))  # noqa: E731
    return "\n".join([fmt(head), fmt(["-" * w for w in widths])] + [fmt(b) for b in body]) + "\n"
