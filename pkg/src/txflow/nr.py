"""Newton-Raphson at a fixed homotopy factor, with variable and voltage limiting."""

from __future__ import annotations

import csv
import enum
import io
import logging
from dataclasses import dataclass, field

import numpy as np

from txflow.errors import LinearSolverError, NonFiniteStep, VoltageCollapseFloor
from txflow.linear_solver import factorize, solve
from txflow.network import BusKind, Network
from txflow.stamps import ORIGINAL, HomotopyConfig, assemble_system, branch_admittances, constant_power_current
from txflow.state import SolutionState

log = logging.getLogger(__name__)


class SolveStatus(str, enum.Enum):
    HIGH_VOLTAGE = "HighVoltage"
    LOW_VOLTAGE = "LowVoltage"
    ANGLE_UNSTABLE = "AngleUnstable"
    DIVERGED = "Diverged"
    MAX_ITERATIONS = "MaxIterations"

    @property
    def converged(self) -> bool:
        return self in (SolveStatus.HIGH_VOLTAGE, SolveStatus.LOW_VOLTAGE, SolveStatus.ANGLE_UNSTABLE)


@dataclass(frozen=True)
class NRConfig:
    tol_dv: float = 1e-8
    tol_res: float = 1e-6
    max_iter: int = 50
    dv_max: float = 0.1
    v_min: float = -2.0
    v_max: float = 2.0
    zeta_min: float = 0.05
    zeta_shrink: float = 0.5
    zeta_grow: float = 1.5
    collapse_floor: float = 1e-4
    vm_low: float = 0.8
    vm_high: float = 1.2
    angle_max: float = np.pi / 2
    divergence_growth: float = 1e6
    max_halvings: int = 8
    # how Q_G / slack-current steps follow the voltage limiter: "full", "global" or "local"
    aux_step: str = "full"
    # which voltage moves count as a large step for zeta: "all" buses or only "pv" (control) buses
    zeta_trigger: str = "all"
    # error norm watched for zeta growth: "residual" (KCL mismatch) or "step" (max |dV|)
    zeta_error: str = "residual"
    # a voltage move above this counts as a large step for zeta (None: dv_max)
    zeta_large_step: float | None = 0.5

    def __post_init__(self):
        if not self.tol_dv > 0:
            raise ValueError("tol_dv must be > 0")
        if not self.dv_max > 0:
            raise ValueError("dv_max must be > 0")
        if not self.v_min < self.v_max:
            raise ValueError("v_min must be < v_max")
        if not 0 < self.zeta_min <= 1:
            raise ValueError("zeta_min must be in (0, 1]")
        if self.aux_step not in ("full", "global", "local"):
            raise ValueError("aux_step must be 'full', 'global' or 'local'")
        if self.zeta_trigger not in ("all", "pv"):
            raise ValueError("zeta_trigger must be 'all' or 'pv'")


@dataclass(frozen=True)
class TraceRow:
    iteration: int
    lam: float
    zeta: float
    max_dx: float
    residual: float
    # audit fields: largest applied change of a voltage unknown and voltage extremes
    max_dv_applied: float = 0.0
    v_lo: float = 0.0
    v_hi: float = 0.0


@dataclass
class NRResult:
    state: SolutionState
    status: SolveStatus
    trace: list[TraceRow] = field(default_factory=list)
    reason: str = ""

    @property
    def iterations(self) -> int:
        return len(self.trace)


TRACE_HEADER = ("iteration", "lambda", "zeta", "max_dx", "residual")


@dataclass(frozen=True)
class TraceAudit:
    """Extremes over a Newton trace, for checking the step-limit invariants."""

    rows: int
    max_step: float
    v_lo: float
    v_hi: float
    zeta_lo: float
    zeta_hi: float

    def within(self, cfg: "NRConfig") -> bool:
        if self.rows == 0:
            return True
        return (
            self.max_step <= cfg.dv_max * (1 + 1e-12)
            and cfg.v_min <= self.v_lo
            and self.v_hi <= cfg.v_max
            and cfg.zeta_min <= self.zeta_lo
            and self.zeta_hi <= 1.0
        )


def audit_trace(rows) -> TraceAudit:
    rows = list(rows)
    if not rows:
        return TraceAudit(0, 0.0, 0.0, 0.0, 1.0, 1.0)
    return TraceAudit(
        len(rows),
        max(r.max_dv_applied for r in rows),
        min(r.v_lo for r in rows),
        max(r.v_hi for r in rows),
        min(r.zeta for r in rows),
        max(r.zeta for r in rows),
    )


def trace_csv(rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(TRACE_HEADER)
    for r in rows:
        w.writerow([r.iteration, f"{r.lam:.12g}", f"{r.zeta:.12g}", f"{r.max_dx:.6e}", f"{r.residual:.6e}"])
    return buf.getvalue()


def residual(network: Network, state: SolutionState, cfg: HomotopyConfig = ORIGINAL, collapse_floor: float = 0.0):
    """Exact nonlinear mismatch of every row, evaluated with complex arithmetic.

    KCL rows hold the net current leaving each node; control rows hold
    ``V_set^2 - |V_W|^2``; slack rows hold ``V - V_slack``.
    """
    arr = network.arrays
    idx = network.index
    x = state.x
    v = state.voltages()
    out = np.zeros(network.n_bus, dtype=complex)

    if arr.f.size:
        yff, yft, ytf, ytt = branch_admittances(arr, cfg)
        np.add.at(out, arr.f, yff * v[arr.f] + yft * v[arr.t])
        np.add.at(out, arr.t, ytf * v[arr.f] + ytt * v[arr.t])
    if arr.sh_bus.size:
        np.add.at(out, arr.sh_bus, cfg.shunt_factor * (arr.sh_g + 1j * arr.sh_b) * v[arr.sh_bus])
    if arr.big_bus.size:
        np.add.at(out, arr.big_bus, (arr.big_g + 1j * arr.big_b) * v[arr.big_bus] + arr.big_ir + 1j * arr.big_ii)

    floor_buses = np.concatenate([arr.load_bus, arr.gen_bus[arr.ctrl_gen]])
    if floor_buses.size and collapse_floor > 0:
        low = np.abs(v[floor_buses]) ** 2 < collapse_floor
        if np.any(low):
            raise VoltageCollapseFloor(np.unique(floor_buses[low]).tolist())
    if arr.load_bus.size:
        vl = v[arr.load_bus]
        ir, ii, _ = constant_power_current(arr.load_p, arr.load_q, vl.real, vl.imag)
        np.add.at(out, arr.load_bus, ir + 1j * ii)
    qg = x[idx.q(np.arange(idx.n_ctrl))]
    if arr.ctrl_gen.size:
        gb = arr.gen_bus[arr.ctrl_gen]
        vg = v[gb]
        ir, ii, _ = constant_power_current(arr.gen_p[arr.ctrl_gen], qg, vg.real, vg.imag)
        np.add.at(out, gb, -(ir + 1j * ii))
        remote = arr.ctrl_o != arr.ctrl_w
        if cfg.lam > 0 and np.any(remote):
            o, w = arr.ctrl_o[remote], arr.ctrl_w[remote]
            i_ow = cfg.lam * cfg.g_ctrl * (v[o] - v[w])
            np.add.at(out, o, i_ow)
            np.add.at(out, w, -i_ow)
    out[arr.slack] -= x[idx.slack_ir] + 1j * x[idx.slack_ii]

    f = np.empty(idx.n)
    f[0 : 2 * idx.n_bus : 2] = out.real
    f[1 : 2 * idx.n_bus : 2] = out.imag
    if idx.n_ctrl:
        vw = v[arr.ctrl_w]
        f[idx.q(np.arange(idx.n_ctrl))] = arr.ctrl_vset**2 - np.abs(vw) ** 2
    vs = v[arr.slack]
    f[idx.slack_ir] = vs.real - arr.slack_v.real
    f[idx.slack_ii] = vs.imag - arr.slack_v.imag
    return f


def nr_step(state: SolutionState, delta, cfg: NRConfig, scale: float = 1.0, network: Network | None = None) -> SolutionState:
    """Apply a Newton update with per-component voltage limiting.

    Each voltage unknown moves by ``sign(d) * min(|d|, dv_max)`` and is then
    clamped to ``[v_min, v_max]``. How the remaining unknowns (Q_G, slack
    currents) move is set by ``cfg.aux_step``:

    * ``"full"``: the whole Newton delta.
    * ``"global"``: the delta times ``dv_max / max|dV|`` whenever the limiter engaged.
    * ``"local"``: each Q_G delta times the limiter ratio seen at its own
      controlling and controlled buses (needs ``network``; falls back to global).

    An unscaled Q_G step sized for a voltage move the limiter then refused can
    drag PV buses onto the reversed-angle branch. ``scale`` shortens the whole
    step (collapse-floor retries).
    """
    delta = np.asarray(delta, dtype=float)
    if delta.shape != state.x.shape:
        raise ValueError("delta dimension mismatch")
    if not np.all(np.isfinite(delta)):
        raise NonFiniteStep("Newton update contains NaN/Inf")
    nv = 2 * state.n_bus
    x = state.x.copy()
    dv = delta[:nv]
    x[:nv] = np.clip(x[:nv] + scale * np.sign(dv) * np.minimum(np.abs(dv), cfg.dv_max), cfg.v_min, cfg.v_max)
    aux = np.ones(delta.size - nv)
    if cfg.aux_step != "full" and nv:
        if cfg.aux_step == "local" and network is not None:
            arr = network.arrays
            bus_dv = np.maximum(np.abs(dv[0::2]), np.abs(dv[1::2]))
            worst = np.maximum(bus_dv[arr.ctrl_o], bus_dv[arr.ctrl_w])
            aux[: worst.size] = cfg.dv_max / np.maximum(worst, cfg.dv_max)
        else:
            aux[:] = cfg.dv_max / max(float(np.abs(dv).max()), cfg.dv_max)
    x[nv:] += scale * aux * delta[nv:]
    return state.evolve(x=x, k=state.k + 1)


def update_zeta(zeta: float, max_dv_history, error_history, cfg: NRConfig) -> float:
    """Variable-limiting heuristic for the PV damping factor.

    A voltage step larger than ``cfg.zeta_large_step`` (``dv_max`` when
    unset) shrinks zeta; otherwise a strictly decreasing pair of error norms
    grows it back toward 1.
    """
    if len(max_dv_history) == 0:
        raise ValueError("history must be nonempty")
    large = cfg.dv_max if cfg.zeta_large_step is None else cfg.zeta_large_step
    if max_dv_history[-1] > large:
        zeta = max(cfg.zeta_min, zeta * cfg.zeta_shrink)
    elif len(error_history) >= 2 and error_history[-2] > error_history[-1]:
        zeta = min(1.0, zeta * cfg.zeta_grow)
    return float(min(1.0, max(cfg.zeta_min, zeta)))


def bus_angles_ok(network: Network, v: np.ndarray, cfg_h: HomotopyConfig, angle_max: float) -> bool:
    arr = network.arrays
    if arr.f.size == 0:
        return True
    shift = arr.shift - cfg_h.lam * arr.shift
    diff = np.angle(v[arr.f]) - np.angle(v[arr.t]) - shift
    diff = (diff + np.pi) % (2 * np.pi) - np.pi
    return bool(np.all(np.abs(diff) < angle_max))


def classify_solution(
    network: Network, state: SolutionState, cfg: NRConfig = NRConfig(), cfg_h: HomotopyConfig = ORIGINAL
) -> SolveStatus:
    """Classify a residual-converged state as high-voltage, low-voltage or angle-unstable."""
    v = state.voltages()
    vm = np.abs(v)
    if np.any(vm < cfg.vm_low) or np.any(vm > cfg.vm_high):
        return SolveStatus.LOW_VOLTAGE
    if not bus_angles_ok(network, v, cfg_h, cfg.angle_max):
        return SolveStatus.ANGLE_UNSTABLE
    return SolveStatus.HIGH_VOLTAGE


def _voltage_audit(x: np.ndarray, nv: int) -> tuple[float, float]:
    return float(x[:nv].min()), float(x[:nv].max())


def _trigger_columns(network: Network, cfg: NRConfig) -> np.ndarray:
    if cfg.zeta_trigger == "all":
        return np.arange(2 * network.n_bus)
    arr = network.arrays
    buses = np.unique(np.concatenate([arr.ctrl_o, arr.ctrl_w]))
    return np.sort(np.concatenate([2 * buses, 2 * buses + 1]))


def _trigger_step(delta: np.ndarray, cols: np.ndarray) -> float:
    return float(np.abs(delta[cols]).max()) if cols.size else 0.0


def solve_nr(
    network: Network,
    init: SolutionState,
    cfg_h: HomotopyConfig = ORIGINAL,
    cfg: NRConfig = NRConfig(),
) -> NRResult:
    """Iterate assemble -> factorize -> solve -> limit until converged or exhausted."""
    nv = 2 * network.n_bus
    state = init
    trace: list[TraceRow] = []
    dv_hist: list[float] = []
    err_hist: list[float] = []
    ordering = None
    try:
        res0 = float(np.linalg.norm(residual(network, state, cfg_h), np.inf))
    except VoltageCollapseFloor:
        res0 = 1.0
    res_limit = cfg.divergence_growth * max(1.0, res0)
    trigger_cols = _trigger_columns(network, cfg)

    for it in range(1, cfg.max_iter + 1):
        try:
            sys = assemble_system(network, state, cfg_h, cfg.collapse_floor)
            try:
                factors = factorize(sys, ordering)
            except LinearSolverError:
                if ordering is None:
                    raise
                factors = factorize(sys)
            ordering = factors.ordering
            x_new = solve(factors, sys.rhs)
        except (LinearSolverError, VoltageCollapseFloor) as exc:
            return NRResult(state, SolveStatus.DIVERGED, trace, f"iteration {it}: {exc}")
        delta = x_new - state.x
        if not np.all(np.isfinite(delta)):
            return NRResult(state, SolveStatus.DIVERGED, trace, f"iteration {it}: non-finite step")
        max_dx = float(np.abs(delta).max())

        scale = 1.0
        for _ in range(cfg.max_halvings + 1):
            cand = nr_step(state, delta, cfg, scale, network)
            try:
                res = residual(network, cand, cfg_h, cfg.collapse_floor)
                break
            except VoltageCollapseFloor:
                scale *= 0.5
        else:
            return NRResult(state, SolveStatus.DIVERGED, trace, f"iteration {it}: voltage collapse")
        res_norm = float(np.linalg.norm(res, np.inf))
        applied = float(np.abs(cand.x[:nv] - state.x[:nv]).max()) if nv else 0.0
        dv_hist.append(_trigger_step(delta, trigger_cols))
        err_hist.append(res_norm if cfg.zeta_error == "residual" else dv_hist[-1])
        zeta = update_zeta(state.zeta, dv_hist, err_hist, cfg)
        lo, hi = _voltage_audit(cand.x, nv)
        trace.append(TraceRow(it, cfg_h.lam, state.zeta, max_dx, res_norm, applied, lo, hi))
        state = cand.evolve(zeta=zeta)

        if not np.isfinite(res_norm) or res_norm > res_limit:
            return NRResult(state, SolveStatus.DIVERGED, trace, f"residual {res_norm:.3e} exceeded limit")
        if max_dx < cfg.tol_dv and res_norm < cfg.tol_res:
            return NRResult(state, classify_solution(network, state, cfg, cfg_h), trace)
    return NRResult(state, SolveStatus.MAX_ITERATIONS, trace, "iteration limit reached")


def flat_start(network: Network, mag: float = 1.0, ang_deg: float = 0.0) -> SolutionState:
    """Uniform guess ``mag∠ang`` on every non-slack bus; the slack sits at its setpoint."""
    v = np.full(network.n_bus, mag * np.exp(1j * np.deg2rad(ang_deg)))
    v[network.slack_bus] = network.arrays.slack_v
    return SolutionState.from_voltages(network, v)


def voltage_start(network: Network, v) -> SolutionState:
    """Start from explicit per-bus complex voltages (slack kept at its setpoint)."""
    v = np.array(np.broadcast_to(np.asarray(v, dtype=complex), (network.n_bus,)))
    v[network.slack_bus] = network.arrays.slack_v
    return SolutionState.from_voltages(network, v)


def fill_injections(network: Network, state: SolutionState, cfg_h: HomotopyConfig = ORIGINAL) -> SolutionState:
    """Set Q_G and the slack currents to the values that balance KCL at the given voltages.

    Voltages are left untouched, so a guess that already is the solution comes
    back with a zero residual.
    """
    idx = network.index
    x = state.x.copy()
    x[2 * network.n_bus :] = 0.0
    bare = state.evolve(x=x)
    r = residual(network, bare, cfg_h)
    mis = r[0 : 2 * network.n_bus : 2] + 1j * r[1 : 2 * network.n_bus : 2]
    v = bare.voltages()
    for k, c in enumerate(network.controls):
        b = network.gens[c.gen].bus
        # the generator current changes by -j*Q/conj(V) per unit Q, sign-flipped in the KCL row
        x[idx.q(k)] = float(np.real(1j * mis[b] * np.conj(v[b])))
    s = network.slack_bus
    x[idx.slack_ir], x[idx.slack_ii] = mis[s].real, mis[s].imag
    return state.evolve(x=x)


def is_converged_original(network: Network, state: SolutionState, tol: float = 1e-6) -> bool:
    return float(np.linalg.norm(residual(network, state, ORIGINAL), np.inf)) < tol


__all__ = [
    "BusKind",
    "NRConfig",
    "NRResult",
    "SolveStatus",
    "SolutionState",
    "TraceRow",
    "classify_solution",
    "flat_start",
    "nr_step",
    "residual",
    "solve_nr",
    "trace_csv",
    "update_zeta",
]
