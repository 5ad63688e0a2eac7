"""Tx stepping: solve the virtually shorted network at lambda=1, then relax to lambda=0."""

from __future__ import annotations

import csv
import io
import logging
import time
from dataclasses import dataclass, field

import numpy as np

from txflow.network import BusKind, Network
from txflow.nr import NRConfig, SolveStatus, TraceRow, classify_solution, fill_injections, residual, solve_nr
from txflow.stamps import ORIGINAL, HomotopyConfig
from txflow.state import SolutionState
from txflow.errors import StepUnderflow

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class HomotopySchedule:
    lambda_init: float = 1.0
    step_init: float = 0.1
    step_min: float = 1e-4
    shrink: float = 0.5
    grow: float = 2.0
    max_stages: int = 200

    def __post_init__(self):
        if self.max_stages < 1:
            raise ValueError("max_stages must be >= 1")
        if self.step_init != 0 and not 0 < self.step_min <= self.step_init <= 1:
            raise ValueError("need 0 < step_min <= step_init <= 1")
        if not 0 < self.shrink < 1:
            raise ValueError("shrink must be in (0, 1)")
        if self.grow < 1:
            raise ValueError("grow must be >= 1")


@dataclass(frozen=True)
class Stage:
    lam: float
    iterations: int
    status: SolveStatus
    max_residual: float
    accepted: bool


@dataclass
class SolveReport:
    status: SolveStatus
    state: SolutionState
    method: str
    init_mode: str = "given"
    stages: list[Stage] = field(default_factory=list)
    trace: list[TraceRow] = field(default_factory=list)
    wall_time: float = 0.0
    max_residual: float = float("nan")
    reason: str = ""

    @property
    def total_iterations(self) -> int:
        return sum(s.iterations for s in self.stages)

    @property
    def final_lambda(self) -> float:
        accepted = [s.lam for s in self.stages if s.accepted]
        return accepted[-1] if accepted else float("nan")

    @property
    def accepted_lambdas(self) -> list[float]:
        return [s.lam for s in self.stages if s.accepted]


STAGE_HEADER = ("stage", "lambda", "iterations", "status", "max_residual")


def stage_csv(stages) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(STAGE_HEADER)
    for k, s in enumerate(stages):
        w.writerow([k, f"{s.lam:.12g}", s.iterations, s.status.value, f"{s.max_residual:.6e}"])
    return buf.getvalue()


def trivial_start(network: Network, init: SolutionState | None = None, honor_init: bool = False) -> SolutionState:
    """Starting point for the shorted (lambda=1) stage.

    Every bus takes the slack complex voltage, PV buses take their setpoint
    magnitude at the slack angle. With ``honor_init`` the caller's guess is
    returned unchanged instead.
    """
    if honor_init:
        if init is None:
            raise ValueError("honor_init requires an initial state")
        return init
    vs = network.arrays.slack_v
    v = np.full(network.n_bus, vs)
    unit = vs / abs(vs)
    for bus in network.buses:
        if bus.kind is BusKind.PV:
            v[bus.index] = bus.v_set * unit
    return SolutionState.from_voltages(network, v)


@dataclass(frozen=True)
class LambdaStep:
    lam: float | None  # next lambda to attempt, None when done
    step: float
    done: bool = False
    backtrack: bool = False


def next_lambda(lam: float, converged: bool, iterations: int, step: float, schedule: HomotopySchedule,
                max_iter: int = 50, last_good: float | None = None) -> LambdaStep:
    """Adaptive lambda update.

    ``lam`` is the stage just attempted; ``last_good`` the last accepted
    lambda (defaults to ``lam``). Raises :class:`StepUnderflow` when the
    step would drop below ``schedule.step_min``.
    """
    if converged:
        if lam == 0.0:
            return LambdaStep(None, step, done=True)
        if iterations < max_iter / 4:
            step = min(step * schedule.grow, lam)
        return LambdaStep(max(0.0, lam - step), step)
    base = lam if last_good is None else last_good
    step = step * schedule.shrink
    if step < schedule.step_min:
        raise StepUnderflow(f"lambda step {step:.3e} below minimum {schedule.step_min:g} at lambda={base:.6g}")
    return LambdaStep(max(0.0, base - step), step, backtrack=True)


def _solves_original(network: Network, state: SolutionState, cfg: NRConfig) -> bool:
    return float(np.linalg.norm(residual(network, state, ORIGINAL), np.inf)) < cfg.tol_res


def solve_tx_stepping(
    network: Network,
    init: SolutionState | None = None,
    schedule: HomotopySchedule = HomotopySchedule(),
    cfg: NRConfig = NRConfig(),
    hcfg: HomotopyConfig = HomotopyConfig(),
    honor_init: bool = False,
) -> SolveReport:
    """Continuation from the shorted network (lambda=1) to the original one (lambda=0)."""
    t0 = time.perf_counter()
    start = trivial_start(network, init, honor_init)
    report = SolveReport(SolveStatus.DIVERGED, start, "tx", "given" if honor_init else "trivial")

    lam = schedule.lambda_init
    step = schedule.step_init
    if honor_init and schedule.step_init > 0:
        filled = fill_injections(network, start)
        if _solves_original(network, filled, cfg):
            lam, start = 0.0, filled  # the guess already answers the real network
    good: SolutionState | None = None
    good_lam: float | None = None
    current = start
    for _ in range(schedule.max_stages):
        h = hcfg.at(lam)
        res = solve_nr(network, current.evolve(zeta=1.0, k=0), h, cfg)
        ok = res.status.converged
        max_res = res.trace[-1].residual if res.trace else float("nan")
        report.stages.append(Stage(lam, res.iterations, res.status, max_res, ok))
        report.trace.extend(res.trace)
        log.debug("stage lambda=%.6g status=%s iters=%d", lam, res.status.value, res.iterations)
        if ok:
            good, good_lam, current = res.state, lam, res.state
            if step == 0.0 and lam > 0.0:
                report.reason = "lambda frozen"
                break
        elif good is None:
            report.reason = f"lambda={lam:g} stage failed: {res.reason}"
            break
        else:
            current = good
        try:
            nxt = next_lambda(lam, ok, res.iterations, step, schedule, cfg.max_iter, good_lam)
        except StepUnderflow as exc:
            report.reason = str(exc)
            break
        if nxt.done:
            break
        lam, step = nxt.lam, nxt.step
        if ok and lam > 0.0 and _solves_original(network, current, cfg):
            # the relaxed answer already satisfies the real network: finish in one jump
            lam = 0.0
    else:
        report.reason = "stage limit reached"

    if good is not None:
        report.state = good
        report.max_residual = float(np.linalg.norm(residual(network, good, hcfg.at(good_lam)), np.inf))
    if good is not None and good_lam == 0.0:
        report.status = classify_solution(network, good, cfg, ORIGINAL)
        report.reason = ""
    elif good is not None and schedule.step_init == 0.0:
        report.status = classify_solution(network, good, cfg, hcfg.at(good_lam))
    report.wall_time = time.perf_counter() - t0
    return report


def solve_plain_nr(network: Network, init: SolutionState, cfg: NRConfig = NRConfig()) -> SolveReport:
    """Newton-Raphson on the original network (no homotopy), wrapped in a report."""
    t0 = time.perf_counter()
    res = solve_nr(network, init, ORIGINAL, cfg)
    max_res = res.trace[-1].residual if res.trace else float("nan")
    rep = SolveReport(res.status, res.state, "plain-nr", "given", reason=res.reason)
    rep.stages.append(Stage(0.0, res.iterations, res.status, max_res, res.status.converged))
    rep.trace = res.trace
    rep.max_residual = max_res
    rep.wall_time = time.perf_counter() - t0
    return rep
