"""Equivalent split-circuit stamps for one NR iteration at homotopy factor lambda.

Every device contributes to a :class:`SparseSystem` whose solution is the next
iterate ``x^{k+1}`` directly: the linear part of each device goes into the
matrix and the known-value terms of its first-order Taylor expansion go into
the right-hand side as an independent current source.

KCL rows sum currents *leaving* a node. Generators and the slack source inject
(negative sign), loads, shunts and branches draw.

A complex admittance ``Y = G + jB`` between node rows ``a`` and node columns
``b`` becomes the 2x2 real block::

    [ G  -B ]   rows (a_R, a_I), cols (b_R, b_I)
    [ B   G ]
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.sparse import coo_matrix, csc_matrix

from txflow.errors import VoltageCollapseFloor
from txflow.network import Network, NetworkArrays
from txflow.state import SolutionState


@dataclass(frozen=True)
class HomotopyConfig:
    gamma: float = 999.0
    lam: float = 0.0
    g_ctrl: float = 100.0
    shunt_relax: bool = True

    def __post_init__(self):
        if self.gamma < 0:
            raise ValueError("gamma must be >= 0")
        if not 0.0 <= self.lam <= 1.0:
            raise ValueError(f"lambda={self.lam} outside [0, 1]")
        if not self.g_ctrl > 0:
            raise ValueError("g_ctrl must be > 0")

    def at(self, lam: float) -> HomotopyConfig:
        return HomotopyConfig(self.gamma, float(lam), self.g_ctrl, self.shunt_relax)

    @property
    def shunt_factor(self) -> float:
        return 1.0 - self.lam if self.shunt_relax else 1.0


ORIGINAL = HomotopyConfig(lam=0.0)


@dataclass
class SparseSystem:
    """Triplet accumulator; duplicate entries are summed on assembly."""

    n: int
    rows: list = field(default_factory=list)
    cols: list = field(default_factory=list)
    vals: list = field(default_factory=list)
    rhs: np.ndarray = None

    def __post_init__(self):
        if self.rhs is None:
            self.rhs = np.zeros(self.n)

    def add(self, rows, cols, vals) -> None:
        rows = np.asarray(rows, dtype=np.int64).ravel()
        cols = np.asarray(cols, dtype=np.int64).ravel()
        vals = np.broadcast_to(np.asarray(vals, dtype=float), rows.shape).ravel()
        if rows.size and (rows.max() >= self.n or cols.max() >= self.n or min(rows.min(), cols.min()) < 0):
            raise IndexError("stamp outside system dimension")
        self.rows.append(rows)
        self.cols.append(cols)
        self.vals.append(vals)

    def add_rhs(self, idx, vals) -> None:
        np.add.at(self.rhs, np.asarray(idx, dtype=np.int64), vals)

    def triplets(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        if not self.rows:
            empty = np.zeros(0, dtype=np.int64)
            return empty, empty, np.zeros(0)
        return np.concatenate(self.rows), np.concatenate(self.cols), np.concatenate(self.vals)

    def matrix(self) -> csc_matrix:
        r, c, v = self.triplets()
        m = coo_matrix((v, (r, c)), shape=(self.n, self.n)).tocsc()
        m.sum_duplicates()
        return m

    def dense(self) -> np.ndarray:
        return self.matrix().toarray()


def stamp_admittance(sys: SparseSystem, a, b, g, bsus) -> None:
    """Stamp complex admittance ``g + j*bsus`` from node columns ``b`` into node rows ``a``."""
    a = np.asarray(a, dtype=np.int64)
    b = np.asarray(b, dtype=np.int64)
    g, bsus = np.broadcast_arrays(np.asarray(g, float), np.asarray(bsus, float))
    ar, ai, br, bi = 2 * a, 2 * a + 1, 2 * b, 2 * b + 1
    sys.add(
        np.concatenate([ar, ar, ai, ai]),
        np.concatenate([br, bi, br, bi]),
        np.concatenate([g, -bsus, bsus, g]),
    )


def constant_power_current(p, q, vr, vi):
    """Currents of a constant-power device ``S = P + jQ`` at ``V = vr + j vi``.

    Returns ``(ir, ii, d)`` where ``d`` maps ``'ir_vr', 'ir_vi', 'ii_vr',
    'ii_vi', 'ir_q', 'ii_q'`` to the partial derivatives.
    """
    m2 = vr * vr + vi * vi
    m4 = m2 * m2
    ir = (p * vr + q * vi) / m2
    ii = (p * vi - q * vr) / m2
    d = {
        "ir_vr": (p * (vi * vi - vr * vr) - 2.0 * q * vr * vi) / m4,
        "ir_vi": (q * (vr * vr - vi * vi) - 2.0 * p * vr * vi) / m4,
        "ii_vr": (q * (vr * vr - vi * vi) - 2.0 * p * vr * vi) / m4,
        "ii_vi": (p * (vr * vr - vi * vi) + 2.0 * q * vr * vi) / m4,
        "ir_q": vi / m2,
        "ii_q": -vr / m2,
    }
    return ir, ii, d


def effective_branches(arr: NetworkArrays, cfg: HomotopyConfig):
    """Branch parameters with the homotopy factor embedded.

    Series admittance grows by ``(1 + lam*gamma)``, taps and phase shifts relax
    toward 1 and 0, and line charging is scaled by the shunt factor.
    """
    lam = cfg.lam
    scale = 1.0 + lam * cfg.gamma
    tap = arr.tap + lam * (1.0 - arr.tap)
    shift = arr.shift - lam * arr.shift
    return arr.g * scale, arr.b * scale, arr.b_ch * cfg.shunt_factor, tap, shift


def branch_admittances(arr: NetworkArrays, cfg: HomotopyConfig):
    """Complex pi-model entries ``(yff, yft, ytf, ytt)`` per branch (tap on the from side)."""
    g, b, bch, tap, shift = effective_branches(arr, cfg)
    ys = g + 1j * b
    half = 0.5j * bch
    a = tap * np.exp(1j * shift)
    yff = (ys + half) / (tap * tap)
    yft = -ys / np.conj(a)
    ytf = -ys / a
    ytt = ys + half
    return yff, yft, ytf, ytt


def _check_floor(vr, vi, buses, floor):
    bad = vr * vr + vi * vi < floor
    if np.any(bad):
        raise VoltageCollapseFloor(np.unique(buses[bad]).tolist())


def stamp_branches(network: Network, cfg: HomotopyConfig, sys: SparseSystem) -> None:
    """Stamp every branch as a pi-model with the homotopy factor embedded."""
    arr = network.arrays
    if arr.f.size == 0:
        return
    yff, yft, ytf, ytt = branch_admittances(arr, cfg)
    a = np.concatenate([arr.f, arr.f, arr.t, arr.t])
    b = np.concatenate([arr.f, arr.t, arr.f, arr.t])
    y = np.concatenate([yff, yft, ytf, ytt])
    stamp_admittance(sys, a, b, y.real, y.imag)


def stamp_shunts(network: Network, cfg: HomotopyConfig, sys: SparseSystem) -> None:
    arr = network.arrays
    if arr.sh_bus.size == 0:
        return
    k = cfg.shunt_factor
    stamp_admittance(sys, arr.sh_bus, arr.sh_bus, k * arr.sh_g, k * arr.sh_b)


def stamp_slack(network: Network, sys: SparseSystem) -> None:
    """Fix the slack complex voltage; its injection currents are unknowns."""
    arr = network.arrays
    idx = network.index
    s = arr.slack
    sr, si = idx.slack_ir, idx.slack_ii
    # constraint rows live at the slack-current positions
    sys.add([sr, si], [2 * s, 2 * s + 1], [1.0, 1.0])
    sys.add_rhs([sr, si], [arr.slack_v.real, arr.slack_v.imag])
    # injected currents enter the slack node KCL with a negative sign
    sys.add([2 * s, 2 * s + 1], [sr, si], [-1.0, -1.0])


def stamp_pq_loads(network: Network, state: SolutionState, sys: SparseSystem, collapse_floor: float = 0.0) -> None:
    arr = network.arrays
    if arr.load_bus.size == 0:
        return
    bus = arr.load_bus
    vr, vi = state.x[2 * bus], state.x[2 * bus + 1]
    _check_floor(vr, vi, bus, collapse_floor)
    ir, ii, d = constant_power_current(arr.load_p, arr.load_q, vr, vi)
    r_row, i_row = 2 * bus, 2 * bus + 1
    sys.add(
        np.concatenate([r_row, r_row, i_row, i_row]),
        np.concatenate([r_row, i_row, r_row, i_row]),
        np.concatenate([d["ir_vr"], d["ir_vi"], d["ii_vr"], d["ii_vi"]]),
    )
    # history current: I^k - dI/dV . V^k, moved to the right-hand side
    hist_r = ir - d["ir_vr"] * vr - d["ir_vi"] * vi
    hist_i = ii - d["ii_vr"] * vr - d["ii_vi"] * vi
    sys.add_rhs(r_row, -hist_r)
    sys.add_rhs(i_row, -hist_i)


def stamp_pv_generators(
    network: Network, state: SolutionState, sys: SparseSystem, collapse_floor: float = 0.0
) -> None:
    """Linearized PV generator currents with the voltage terms damped by ``state.zeta``."""
    arr = network.arrays
    if arr.ctrl_gen.size == 0:
        return
    idx = network.index
    gen = arr.ctrl_gen
    bus = arr.gen_bus[gen]
    qcol = idx.q(np.arange(gen.size))
    vr, vi = state.x[2 * bus], state.x[2 * bus + 1]
    _check_floor(vr, vi, bus, collapse_floor)
    qg = state.x[qcol]
    ir, ii, d = constant_power_current(arr.gen_p[gen], qg, vr, vi)
    z = state.zeta
    r_row, i_row = 2 * bus, 2 * bus + 1
    # injection: leaving current is -I_G
    sys.add(
        np.concatenate([r_row, r_row, i_row, i_row, r_row, i_row]),
        np.concatenate([r_row, i_row, r_row, i_row, qcol, qcol]),
        -np.concatenate([z * d["ir_vr"], z * d["ir_vi"], z * d["ii_vr"], z * d["ii_vi"], d["ir_q"], d["ii_q"]]),
    )
    hist_r = ir - z * (d["ir_vr"] * vr + d["ir_vi"] * vi) - d["ir_q"] * qg
    hist_i = ii - z * (d["ii_vr"] * vr + d["ii_vi"] * vi) - d["ii_q"] * qg
    sys.add_rhs(r_row, hist_r)
    sys.add_rhs(i_row, hist_i)


def stamp_voltage_controls(network: Network, cfg: HomotopyConfig, state: SolutionState, sys: SparseSystem) -> None:
    """Linearized ``V_set^2 - V_RW^2 - V_IW^2 = 0`` plus the virtual O-W short for remote control."""
    arr = network.arrays
    if arr.ctrl_w.size == 0:
        return
    idx = network.index
    rows = idx.q(np.arange(arr.ctrl_w.size))
    w = arr.ctrl_w
    vr, vi = state.x[2 * w], state.x[2 * w + 1]
    sys.add(np.concatenate([rows, rows]), np.concatenate([2 * w, 2 * w + 1]), np.concatenate([-2.0 * vr, -2.0 * vi]))
    sys.add_rhs(rows, -(arr.ctrl_vset**2) - vr * vr - vi * vi)

    remote = arr.ctrl_o != arr.ctrl_w
    if cfg.lam > 0 and np.any(remote):
        o, w = arr.ctrl_o[remote], arr.ctrl_w[remote]
        g = cfg.lam * cfg.g_ctrl
        a = np.concatenate([o, o, w, w])
        b = np.concatenate([o, w, o, w])
        gv = np.concatenate([np.full(o.size, g), np.full(o.size, -g), np.full(o.size, -g), np.full(o.size, g)])
        stamp_admittance(sys, a, b, gv, np.zeros_like(gv))


def stamp_big_loads(network: Network, sys: SparseSystem) -> None:
    """Linear BIG load: constant admittance plus a fixed drawn current."""
    arr = network.arrays
    if arr.big_bus.size == 0:
        return
    stamp_admittance(sys, arr.big_bus, arr.big_bus, arr.big_g, arr.big_b)
    sys.add_rhs(2 * arr.big_bus, -arr.big_ir)
    sys.add_rhs(2 * arr.big_bus + 1, -arr.big_ii)


def assemble_system(
    network: Network, state: SolutionState, cfg: HomotopyConfig = ORIGINAL, collapse_floor: float = 0.0
) -> SparseSystem:
    """Stamp every device of ``network`` around ``state`` at ``cfg.lam``."""
    n = network.index.n
    if state.x.shape != (n,):
        raise ValueError(f"state dimension {state.x.shape} does not match system dimension {n}")
    sys = SparseSystem(n)
    stamp_branches(network, cfg, sys)
    stamp_shunts(network, cfg, sys)
    stamp_big_loads(network, sys)
    stamp_pq_loads(network, state, sys, collapse_floor)
    stamp_pv_generators(network, state, sys, collapse_floor)
    stamp_voltage_controls(network, cfg, state, sys)
    stamp_slack(network, sys)
    return sys
