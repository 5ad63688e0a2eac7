"""Case parsing (MATPOWER ``.m`` subset and native JSON) and solution output.

MATPOWER grammar accepted here::

    mpc.baseMVA = <number>;
    mpc.bus = [ rows ];      % >= 13 columns
    mpc.gen = [ rows ];      % >= 8 columns, optional
    mpc.branch = [ rows ];   % >= 11 columns

Rows end with ``;`` or a newline, ``%`` starts a comment, and anything else
in the file (functions, gencost, extra fields) is ignored.
"""

from __future__ import annotations

import json
import logging
import math
import os
import re
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from txflow.errors import (
    CaseError,
    DuplicateBusId,
    IslandWithoutSlack,
    MalformedTable,
    MissingSection,
    NetworkValidationError,
    NoSlackBus,
    NonPositiveBase,
    UnknownBusReference,
)
from txflow.network import (
    BigParams,
    Branch,
    Bus,
    BusKind,
    Generator,
    Load,
    Network,
    Shunt,
    VoltageControl,
    validate,
)

log = logging.getLogger(__name__)

BUS_COLS, GEN_COLS, BRANCH_COLS = 13, 8, 11


@dataclass(frozen=True)
class BusRecord:
    id: int
    type: int
    pd: float
    qd: float
    gs: float
    bs: float
    vm: float
    va: float
    base_kv: float = 0.0


@dataclass(frozen=True)
class GenRecord:
    bus: int
    pg: float
    qg: float
    qmax: float
    qmin: float
    vg: float
    status: int = 1
    vbus: int | None = None  # remotely controlled bus id
    implicit: bool = False

    @property
    def in_service(self) -> bool:
        return self.status > 0


@dataclass(frozen=True)
class BranchRecord:
    f: int
    t: int
    r: float
    x: float
    b: float
    tap: float
    shift: float  # degrees
    status: int = 1

    @property
    def in_service(self) -> bool:
        return self.status > 0


@dataclass
class RawCase:
    base_mva: float
    buses: list[BusRecord]
    gens: list[GenRecord]
    branches: list[BranchRecord]
    name: str = ""
    big_loads: list = field(default_factory=list)  # native JSON only


_NUM = r"[-+]?(?:\d+\.?\d*|\.\d+)(?:[eE][-+]?\d+)?|[-+]?(?:Inf|inf|NaN|nan)"


def _strip_comments(text: str) -> str:
    return "\n".join(line.split("%", 1)[0] for line in text.splitlines())


def _table(text: str, name: str, min_cols: int, required: bool = True) -> np.ndarray | None:
    m = re.search(rf"\bmpc\.{name}\s*=\s*\[(.*?)\]\s*;?", text, re.S)
    if m is None:
        if required:
            raise MissingSection(f"mpc.{name} table not found")
        return None
    body = m.group(1).replace("...", " ")
    rows = []
    for k, raw in enumerate(re.split(r"[;\n]", body)):
        raw = raw.replace(",", " ").strip()
        if not raw:
            continue
        tokens = raw.split()
        try:
            vals = [float(t) for t in tokens]
        except ValueError as exc:
            raise MalformedTable(f"mpc.{name}: cannot parse row {raw!r}") from exc
        if len(vals) < min_cols:
            raise MalformedTable(f"mpc.{name}: row has {len(vals)} columns, need {min_cols}: {raw!r}")
        rows.append(vals[:max(min_cols, 13)])
    width = max((len(r) for r in rows), default=min_cols)
    out = np.zeros((len(rows), width))
    for i, r in enumerate(rows):
        out[i, : len(r)] = r
    return out


def parse_matpower(text: str, name: str = "") -> RawCase:
    """Parse MATPOWER case text into a :class:`RawCase` (no unit conversion)."""
    text = _strip_comments(text)
    m = re.search(rf"\bmpc\.baseMVA\s*=\s*({_NUM})", text)
    if m is None:
        raise MissingSection("mpc.baseMVA not found")
    base = float(m.group(1))
    bus = _table(text, "bus", BUS_COLS)
    branch = _table(text, "branch", BRANCH_COLS)
    gen = _table(text, "gen", GEN_COLS, required=False)
    if not name:
        fm = re.search(r"function\s+mpc\s*=\s*(\w+)", text)
        name = fm.group(1) if fm else ""

    buses = [
        BusRecord(int(r[0]), int(r[1]), r[2], r[3], r[4], r[5], r[7], r[8], r[9]) for r in bus
    ]
    ids = [b.id for b in buses]
    if len(set(ids)) != len(ids):
        dup = sorted({i for i in ids if ids.count(i) > 1})[:5]
        raise DuplicateBusId(f"duplicate bus ids {dup}")
    known = set(ids)
    gens = []
    for r in gen if gen is not None else []:
        gens.append(GenRecord(int(r[0]), r[1], r[2], r[3], r[4], r[5], int(r[7])))
    branches = [
        BranchRecord(int(r[0]), int(r[1]), r[2], r[3], r[4], r[8], r[9], int(r[10])) for r in branch
    ]
    raw = RawCase(base, buses, gens, branches, name=name)
    _check_references(raw, known)
    slack = [b for b in buses if b.type == 3]
    if not slack:
        raise NoSlackBus("no bus has type 3")
    gen_buses = {g.bus for g in gens if g.in_service}
    for s in slack:
        if s.id not in gen_buses:
            raw.gens.append(GenRecord(s.id, 0.0, 0.0, 0.0, 0.0, s.vm, 1, implicit=True))
    return raw


def _check_references(raw: RawCase, known: set[int]) -> None:
    for k, br in enumerate(raw.branches):
        for end in (br.f, br.t):
            if end not in known:
                raise UnknownBusReference(f"branch {k} references bus {end}, which does not exist")
    for k, g in enumerate(raw.gens):
        if g.bus not in known or (g.vbus is not None and g.vbus not in known):
            raise UnknownBusReference(f"generator {k} references a bus that does not exist")


def read_matpower(path) -> RawCase:
    path = Path(path)
    return parse_matpower(path.read_text(), name=path.stem)


def _fmt(v: float) -> str:
    return repr(float(v)) if math.isfinite(v) else ("Inf" if v > 0 else "-Inf")


def format_matpower(raw: RawCase) -> str:
    """Serialize the captured fields back to MATPOWER text (round-trip helper)."""
    lines = [f"function mpc = {raw.name or 'case'}", "mpc.version = '2';", f"mpc.baseMVA = {_fmt(raw.base_mva)};", "mpc.bus = ["]
    for b in raw.buses:
        vals = [b.id, b.type, b.pd, b.qd, b.gs, b.bs, 1, b.vm, b.va, b.base_kv, 1, 1.1, 0.9]
        lines.append("\t" + "\t".join(_fmt(v) if isinstance(v, float) else str(v) for v in vals) + ";")
    lines += ["];", "mpc.gen = ["]
    for g in raw.gens:
        if g.implicit:
            continue
        vals = [g.bus, g.pg, g.qg, g.qmax, g.qmin, g.vg, raw.base_mva, g.status, 0.0, 0.0]
        lines.append("\t" + "\t".join(_fmt(v) if isinstance(v, float) else str(v) for v in vals) + ";")
    lines += ["];", "mpc.branch = ["]
    for br in raw.branches:
        vals = [br.f, br.t, br.r, br.x, br.b, 0.0, 0.0, 0.0, br.tap, br.shift, br.status, -360.0, 360.0]
        lines.append("\t" + "\t".join(_fmt(v) if isinstance(v, float) else str(v) for v in vals) + ";")
    lines.append("];")
    return "\n".join(lines) + "\n"


def to_network(raw: RawCase, drop_gens=()) -> Network:
    """Convert a raw case to a per-unit :class:`Network`.

    Follows MATPOWER's bus-type rules: a type-2 bus without an in-service
    generator becomes PQ, and generators on PQ buses act as negative loads.
    Generators on one bus are merged (summed P, first setpoint wins).
    ``drop_gens`` lists generator row positions to take out of service.
    """
    if not raw.base_mva > 0:
        raise NonPositiveBase(f"baseMVA={raw.base_mva}")
    base = raw.base_mva
    notes: list[str] = []
    drop = set(drop_gens)
    active = [b for b in raw.buses if b.type != 4]
    pos = {b.id: i for i, b in enumerate(active)}

    gens_at: dict[int, list[GenRecord]] = {}
    for k, g in enumerate(raw.gens):
        if g.in_service and k not in drop and g.bus in pos:
            gens_at.setdefault(g.bus, []).append(g)

    buses: list[Bus] = []
    gens: list[Generator] = []
    controls: list[VoltageControl] = []
    loads: list[Load] = []
    shunts: list[Shunt] = []
    for i, b in enumerate(active):
        here = gens_at.get(b.id, [])
        if len({g.vg for g in here}) > 1:
            msg = f"bus {b.id}: {len(here)} generators with different Vg, using {here[0].vg}"
            log.warning(msg)
            notes.append(msg)
        if b.type == 3:
            vset = here[0].vg if here else b.vm
            buses.append(Bus(i, BusKind.SLACK, vset, math.radians(b.va), b.id))
        elif b.type == 2 and here:
            g0 = here[0]
            target = pos[g0.vbus] if g0.vbus is not None and g0.vbus in pos else i
            gens.append(Generator(i, sum(g.pg for g in here) / base, g0.vg, None if target == i else target))
            controls.append(VoltageControl(i, target, g0.vg, len(gens) - 1))
            buses.append(Bus(i, BusKind.PV, g0.vg, 0.0, b.id))
        else:
            buses.append(Bus(i, BusKind.PQ, 1.0, 0.0, b.id))
            if here:
                loads.append(Load(i, -sum(g.pg for g in here) / base, -sum(g.qg for g in here) / base))
        if b.pd != 0.0 or b.qd != 0.0:
            loads.append(Load(i, b.pd / base, b.qd / base))
        if b.gs != 0.0 or b.bs != 0.0:
            shunts.append(Shunt(i, b.gs / base, b.bs / base))
    for big in raw.big_loads:
        loads.append(Load(pos[big["bus"]], big=BigParams(big["g"], big["b"], big.get("ir", 0.0), big.get("ii", 0.0))))

    # a remote target may be claimed by several PV buses; keep the first
    seen: set[int] = set()
    kept = []
    for c in controls:
        if c.controlled in seen:
            msg = f"bus index {c.controlled} already voltage-controlled; control from bus index {c.controlling} dropped"
            log.warning(msg)
            notes.append(msg)
            continue
        seen.add(c.controlled)
        kept.append(c)
    if len(kept) != len(controls):
        # unknown handles must stay aligned with generators
        keep_gens = [c.gen for c in kept]
        remap = {old: new for new, old in enumerate(keep_gens)}
        dropped = [gens[c.gen] for c in controls if c.gen not in remap]
        for g in dropped:
            loads.append(Load(g.bus, -g.p, 0.0))
            buses[g.bus] = Bus(g.bus, BusKind.PQ, 1.0, 0.0, buses[g.bus].bus_id)
        gens = [gens[k] for k in keep_gens]
        controls = [VoltageControl(c.controlling, c.controlled, c.v_set, remap[c.gen]) for c in kept]

    branches = []
    for br in raw.branches:
        if not br.in_service or br.f not in pos or br.t not in pos:
            continue
        tap = br.tap if br.tap != 0.0 else 1.0
        branches.append(Branch(pos[br.f], pos[br.t], br.r, br.x, br.b, tap, math.radians(br.shift)))

    net = Network(
        buses=buses,
        branches=branches,
        gens=gens,
        loads=loads,
        shunts=shunts,
        controls=controls,
        base_mva=base,
        name=raw.name,
        notes=tuple(notes),
    )
    diags = validate(net)
    if diags:
        if any(d.code in ("IslandWithoutSlack", "IslandWithoutSource") for d in diags):
            raise IslandWithoutSlack(diags)
        raise NetworkValidationError(diags)
    return net


# -- native JSON cases ------------------------------------------------------

_KIND_CODES = {"slack": 3, "pv": 2, "pq": 1}


def parse_json_case(text: str, name: str = "") -> RawCase:
    """Native JSON case: per-unit values, angles in degrees.

    ``{"format": 1, "base_mva": 100, "buses": [{"id", "type", "vm", "va_deg"}],
    "loads": [{"bus", "p", "q"}], "gens": [{"bus", "p", "vset", "controlled_bus"}],
    "branches": [{"from", "to", "r", "x", "b", "tap", "shift_deg"}],
    "shunts": [{"bus", "g", "b"}], "big_loads": [{"bus", "g", "b", "ir", "ii"}]}``
    """
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise CaseError(f"invalid JSON: {exc}") from exc
    for key in ("buses", "branches"):
        if key not in doc:
            raise MissingSection(f"JSON case has no '{key}'")
    base = float(doc.get("base_mva", 100.0))
    loads: dict[int, list[float]] = {}
    for ld in doc.get("loads", []):
        acc = loads.setdefault(ld["bus"], [0.0, 0.0])
        acc[0] += ld.get("p", 0.0) * base
        acc[1] += ld.get("q", 0.0) * base
    shunts: dict[int, list[float]] = {}
    for sh in doc.get("shunts", []):
        acc = shunts.setdefault(sh["bus"], [0.0, 0.0])
        acc[0] += sh.get("g", 0.0) * base
        acc[1] += sh.get("b", 0.0) * base
    buses = []
    for b in doc["buses"]:
        try:
            code = _KIND_CODES[str(b.get("type", "pq")).lower()]
        except KeyError as exc:
            raise MalformedTable(f"bus {b.get('id')}: unknown type {b.get('type')!r}") from exc
        p, q = loads.get(b["id"], (0.0, 0.0))
        gs, bs = shunts.get(b["id"], (0.0, 0.0))
        buses.append(BusRecord(int(b["id"]), code, p, q, gs, bs, b.get("vm", 1.0), b.get("va_deg", 0.0)))
    ids = [b.id for b in buses]
    if len(set(ids)) != len(ids):
        raise DuplicateBusId("duplicate bus ids in JSON case")
    gens = [
        GenRecord(
            int(g["bus"]),
            g.get("p", 0.0) * base,
            g.get("q", 0.0) * base,
            0.0,
            0.0,
            g.get("vset", 1.0),
            int(g.get("status", 1)),
            g.get("controlled_bus"),
        )
        for g in doc.get("gens", [])
    ]
    branches = [
        BranchRecord(
            int(br["from"]),
            int(br["to"]),
            br.get("r", 0.0),
            br.get("x", 0.0),
            br.get("b", 0.0),
            br.get("tap", 1.0),
            br.get("shift_deg", 0.0),
            int(br.get("status", 1)),
        )
        for br in doc["branches"]
    ]
    raw = RawCase(base, buses, gens, branches, name=name or doc.get("name", ""), big_loads=list(doc.get("big_loads", [])))
    _check_references(raw, set(ids))
    if not any(b.type == 3 for b in buses):
        raise NoSlackBus("no slack bus in JSON case")
    for big in raw.big_loads:
        if big["bus"] not in set(ids):
            raise UnknownBusReference(f"BIG load references bus {big['bus']}")
    return raw


def read_case(path) -> RawCase:
    """Read a ``.m`` or ``.json`` case, dispatching on the extension."""
    path = Path(path)
    text = path.read_text()
    if path.suffix.lower() == ".json":
        return parse_json_case(text, name=path.stem)
    return parse_matpower(text, name=path.stem)


def load_network(path, drop_gens=()) -> Network:
    return to_network(read_case(path), drop_gens=drop_gens)


def case_dirs() -> list[Path]:
    dirs = []
    env = os.environ.get("TXFLOW_CASE_DIR")
    if env:
        dirs.extend(Path(p) for p in env.split(os.pathsep) if p)
    try:
        import matpower  # optional; ships the public MATPOWER/PEGASE case data

        dirs.append(Path(matpower.__file__).parent / "data")
    except ImportError:
        pass
    return dirs


def find_case(name: str) -> Path:
    """Resolve a path or a bare case name (``case118``) against the known case directories."""
    p = Path(name)
    if p.exists():
        return p
    for d in case_dirs():
        for cand in (d / name, d / f"{name}.m", d / f"{name}.json"):
            if cand.exists():
                return cand
    raise FileNotFoundError(f"case {name!r} not found (set TXFLOW_CASE_DIR or install the 'matpower' package)")


# -- solution output ---------------------------------------------------------


def _num(v: float) -> float:
    v = float(f"{float(v):.12g}")
    return 0.0 if v == 0.0 else v


def solution_dict(report, state, network: Network) -> dict:
    idx = network.index
    v = state.voltages()
    buses = []
    for bus, vb in zip(network.buses, v):
        buses.append(
            {
                "id": bus.label,
                "vm": _num(abs(vb)),
                "va_deg": _num(math.degrees(math.atan2(vb.imag, vb.real))),
                "vr": _num(vb.real),
                "vi": _num(vb.imag),
            }
        )
    gens = []
    for k, c in enumerate(network.controls):
        g = network.gens[c.gen]
        gens.append({"bus": network.buses[g.bus].label, "qg": _num(state.x[idx.q(k)])})
    return {
        "format": 1,
        "case": network.name,
        "buses": buses,
        "gens": gens,
        "slack": {
            "bus": network.buses[network.slack_bus].label,
            "ir": _num(state.x[idx.slack_ir]),
            "ii": _num(state.x[idx.slack_ii]),
        },
        "report": {
            "status": report.status.value,
            "method": report.method,
            "init_mode": report.init_mode,
            "iterations": int(report.total_iterations),
            "final_lambda": _num(report.final_lambda),
            "max_residual": _num(report.max_residual),
        },
    }


def write_solution(report, state, network: Network) -> str:
    """Deterministic solution JSON (fixed key order, 12 significant digits)."""
    return json.dumps(solution_dict(report, state, network), indent=2) + "\n"
