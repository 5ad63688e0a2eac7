"""Per-unit network model, branch admittances, unknown indexing and validation.

The public element types (:class:`Bus`, :class:`Branch`, ...) are small frozen
records. Stamping works on the column arrays exposed by
:attr:`Network.arrays`, which are built once per network and shared.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field
from functools import cached_property

import numpy as np
from scipy.sparse import coo_matrix
from scipy.sparse.csgraph import connected_components

from txflow.errors import ZeroImpedanceBranch


class BusKind(str, enum.Enum):
    SLACK = "slack"
    PV = "pv"
    PQ = "pq"


@dataclass(frozen=True)
class Bus:
    index: int
    kind: BusKind
    v_set: float = 1.0
    angle_set: float = 0.0  # radians, slack only
    bus_id: int | None = None  # external id from the case file

    @property
    def label(self) -> int:
        return self.index + 1 if self.bus_id is None else self.bus_id


def series_admittance(r: float, x: float) -> tuple[float, float]:
    """Return ``(G, B)`` of the series impedance ``r + jx``."""
    den = r * r + x * x
    if den == 0.0:
        raise ZeroImpedanceBranch("branch with R=X=0 has no finite admittance")
    return r / den, -x / den


@dataclass(frozen=True)
class Branch:
    from_bus: int
    to_bus: int
    r: float
    x: float
    b_ch: float = 0.0
    tap: float = 1.0
    shift: float = 0.0  # radians

    @property
    def g_series(self) -> float:
        return series_admittance(self.r, self.x)[0]

    @property
    def b_series(self) -> float:
        return series_admittance(self.r, self.x)[1]


@dataclass(frozen=True)
class Generator:
    """Voltage-controlling generator; ``q`` is solved, never an input."""

    bus: int
    p: float
    v_set: float
    controlled_bus: int | None = None

    @property
    def target(self) -> int:
        return self.bus if self.controlled_bus is None else self.controlled_bus


@dataclass(frozen=True)
class BigParams:
    g: float
    b: float
    ir: float = 0.0
    ii: float = 0.0


@dataclass(frozen=True)
class Load:
    bus: int
    p: float = 0.0
    q: float = 0.0
    big: BigParams | None = None


@dataclass(frozen=True)
class Shunt:
    bus: int
    g: float
    b: float


@dataclass(frozen=True)
class VoltageControl:
    controlling: int  # bus O
    controlled: int  # bus W
    v_set: float
    gen: int  # index into Network.gens whose Q is the unknown


@dataclass(frozen=True)
class Diagnostic:
    code: str
    message: str
    refs: tuple = ()


@dataclass(frozen=True)
class NetworkArrays:
    n_bus: int
    slack: int
    slack_v: complex
    # branches
    f: np.ndarray
    t: np.ndarray
    g: np.ndarray
    b: np.ndarray
    b_ch: np.ndarray
    tap: np.ndarray
    shift: np.ndarray
    # PQ loads
    load_bus: np.ndarray
    load_p: np.ndarray
    load_q: np.ndarray
    # BIG loads
    big_bus: np.ndarray
    big_g: np.ndarray
    big_b: np.ndarray
    big_ir: np.ndarray
    big_ii: np.ndarray
    # shunts
    sh_bus: np.ndarray
    sh_g: np.ndarray
    sh_b: np.ndarray
    # PV generators, one per control
    gen_bus: np.ndarray
    gen_p: np.ndarray
    ctrl_o: np.ndarray
    ctrl_w: np.ndarray
    ctrl_vset: np.ndarray
    ctrl_gen: np.ndarray


@dataclass(frozen=True)
class Network:
    buses: tuple[Bus, ...]
    branches: tuple[Branch, ...] = ()
    gens: tuple[Generator, ...] = ()
    loads: tuple[Load, ...] = ()
    shunts: tuple[Shunt, ...] = ()
    controls: tuple[VoltageControl, ...] = ()
    base_mva: float = 100.0
    name: str = ""
    # Free-form notes from case conversion (merged gens etc.)
    notes: tuple[str, ...] = field(default=(), compare=False)

    def __post_init__(self):
        for name in ("buses", "branches", "gens", "loads", "shunts", "controls", "notes"):
            object.__setattr__(self, name, tuple(getattr(self, name)))

    @property
    def n_bus(self) -> int:
        return len(self.buses)

    @property
    def slack_bus(self) -> int:
        for bus in self.buses:
            if bus.kind is BusKind.SLACK:
                return bus.index
        raise ValueError("network has no slack bus")

    @cached_property
    def index(self) -> IndexMap:
        return build_index(self)

    @cached_property
    def arrays(self) -> NetworkArrays:
        s = self.buses[self.slack_bus]
        f64, i64 = np.float64, np.int64
        br = self.branches
        pq = [ld for ld in self.loads if ld.big is None]
        big = [ld for ld in self.loads if ld.big is not None]
        g_b = [series_admittance(x.r, x.x) for x in br]
        return NetworkArrays(
            n_bus=self.n_bus,
            slack=s.index,
            slack_v=s.v_set * complex(np.cos(s.angle_set), np.sin(s.angle_set)),
            f=np.array([x.from_bus for x in br], dtype=i64),
            t=np.array([x.to_bus for x in br], dtype=i64),
            g=np.array([v[0] for v in g_b], dtype=f64),
            b=np.array([v[1] for v in g_b], dtype=f64),
            b_ch=np.array([x.b_ch for x in br], dtype=f64),
            tap=np.array([x.tap for x in br], dtype=f64),
            shift=np.array([x.shift for x in br], dtype=f64),
            load_bus=np.array([x.bus for x in pq], dtype=i64),
            load_p=np.array([x.p for x in pq], dtype=f64),
            load_q=np.array([x.q for x in pq], dtype=f64),
            big_bus=np.array([x.bus for x in big], dtype=i64),
            big_g=np.array([x.big.g for x in big], dtype=f64),
            big_b=np.array([x.big.b for x in big], dtype=f64),
            big_ir=np.array([x.big.ir for x in big], dtype=f64),
            big_ii=np.array([x.big.ii for x in big], dtype=f64),
            sh_bus=np.array([x.bus for x in self.shunts], dtype=i64),
            sh_g=np.array([x.g for x in self.shunts], dtype=f64),
            sh_b=np.array([x.b for x in self.shunts], dtype=f64),
            gen_bus=np.array([x.bus for x in self.gens], dtype=i64),
            gen_p=np.array([x.p for x in self.gens], dtype=f64),
            ctrl_o=np.array([c.controlling for c in self.controls], dtype=i64),
            ctrl_w=np.array([c.controlled for c in self.controls], dtype=i64),
            ctrl_vset=np.array([c.v_set for c in self.controls], dtype=f64),
            ctrl_gen=np.array([c.gen for c in self.controls], dtype=i64),
        )


@dataclass(frozen=True)
class IndexMap:
    """Positions of the unknowns in the state vector.

    Layout: ``[V_R0, V_I0, V_R1, V_I1, ..., Q_G(ctrl 0), ..., I_R_slack, I_I_slack]``.
    """

    n_bus: int
    n_ctrl: int

    @property
    def n(self) -> int:
        return 2 * self.n_bus + self.n_ctrl + 2

    def vr(self, bus):
        return 2 * np.asarray(bus)

    def vi(self, bus):
        return 2 * np.asarray(bus) + 1

    def q(self, ctrl):
        return 2 * self.n_bus + np.asarray(ctrl)

    @property
    def slack_ir(self) -> int:
        return 2 * self.n_bus + self.n_ctrl

    @property
    def slack_ii(self) -> int:
        return 2 * self.n_bus + self.n_ctrl + 1

    @property
    def voltage_slice(self) -> slice:
        return slice(0, 2 * self.n_bus)


def build_index(network: Network) -> IndexMap:
    return IndexMap(n_bus=network.n_bus, n_ctrl=len(network.controls))


def components(network: Network) -> tuple[int, np.ndarray]:
    """Connected components of the in-service branch graph."""
    n = network.n_bus
    f = [b.from_bus for b in network.branches]
    t = [b.to_bus for b in network.branches]
    adj = coo_matrix((np.ones(len(f)), (f, t)), shape=(n, n))
    return connected_components(adj, directed=False)


def validate(network: Network) -> list[Diagnostic]:
    """Check the structural invariants; an empty list means the network is usable."""
    diags: list[Diagnostic] = []
    n = network.n_bus
    slacks = [b.index for b in network.buses if b.kind is BusKind.SLACK]
    if not slacks:
        diags.append(Diagnostic("NoSlack", "network has no slack bus"))
    elif len(slacks) > 1:
        diags.append(Diagnostic("MultipleSlack", f"{len(slacks)} slack buses", tuple(slacks)))

    for i, bus in enumerate(network.buses):
        if bus.index != i:
            diags.append(Diagnostic("BadBusIndex", f"bus at position {i} has index {bus.index}", (i,)))
        if bus.kind is not BusKind.PQ and not bus.v_set > 0:
            diags.append(Diagnostic("NonPositiveSetpoint", f"bus {bus.label} V_set={bus.v_set}", (i,)))

    def bad_bus(k):
        return not (0 <= k < n)

    for k, br in enumerate(network.branches):
        if bad_bus(br.from_bus) or bad_bus(br.to_bus):
            diags.append(Diagnostic("UnknownBus", f"branch {k} references a missing bus", (k,)))
            continue
        if br.r == 0.0 and br.x == 0.0:
            diags.append(Diagnostic("ZeroImpedanceBranch", f"branch {k} has R=X=0", (k,)))
        if not br.tap > 0:
            diags.append(Diagnostic("NonPositiveTap", f"branch {k} tap={br.tap}", (k,)))
    for kind, items in (("load", network.loads), ("shunt", network.shunts), ("gen", network.gens)):
        for k, item in enumerate(items):
            if bad_bus(item.bus):
                diags.append(Diagnostic("UnknownBus", f"{kind} {k} references a missing bus", (k,)))
    for k, sh in enumerate(network.shunts):
        if not (np.isfinite(sh.g) and np.isfinite(sh.b)):
            diags.append(Diagnostic("NonFiniteShunt", f"shunt {k} is not finite", (k,)))

    seen: dict[int, int] = {}
    for k, ctrl in enumerate(network.controls):
        if bad_bus(ctrl.controlled) or bad_bus(ctrl.controlling):
            diags.append(Diagnostic("UnknownBus", f"control {k} references a missing bus", (k,)))
            continue
        if ctrl.controlled in seen:
            diags.append(
                Diagnostic("DuplicateControl", f"bus index {ctrl.controlled} controlled twice", (seen[ctrl.controlled], k))
            )
        seen[ctrl.controlled] = k
        if not 0 <= ctrl.gen < len(network.gens):
            diags.append(Diagnostic("UnknownGenerator", f"control {k} has no generator", (k,)))

    if any(d.code == "UnknownBus" for d in diags) or n == 0:
        return diags
    _, labels = components(network)
    slack_set = set(slacks)
    pv = {b.index for b in network.buses if b.kind is BusKind.PV}
    for comp in np.unique(labels):
        members = np.flatnonzero(labels == comp)
        if slack_set.intersection(members.tolist()):
            continue
        refs = tuple(int(m) for m in members[:20])
        if pv.intersection(members.tolist()):
            diags.append(Diagnostic("IslandWithoutSlack", f"island of {len(members)} buses has no slack", refs))
        else:
            diags.append(Diagnostic("IslandWithoutSource", f"island of {len(members)} buses has no slack or PV", refs))
    return diags
