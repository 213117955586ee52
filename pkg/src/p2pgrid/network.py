"""Radial distribution network model and case-file reader.

Case files are plain text with ``[section]`` headers. ``[system]`` holds
``key value [unit]`` rows; ``[buses]``, ``[lines]`` and ``[generators]`` are
tables whose first row names the columns and whose second row gives the unit
of each column. Lines starting with ``#`` are comments.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable

import numpy as np


class CaseFileError(ValueError):
    """Malformed case file."""


class TopologyError(ValueError):
    """Structurally invalid network (non-radial, disconnected, no slack...)."""


@dataclass(frozen=True)
class BusSpec:
    """One bus. Voltage bounds are squared magnitudes (p.u.^2)."""

    id: int
    v_min: float
    v_max: float
    p_load_base: float  # kW
    q_load_base: float  # kVAr
    p2p_cap: float = 0.0  # kW, max |accepted P2P injection|

    def __post_init__(self):
        if not 0.0 < self.v_min < self.v_max:
            raise TopologyError(f"bus {self.id}: need 0 < v_min < v_max")
        if self.p2p_cap < 0 or self.p_load_base < 0 or self.q_load_base < 0:
            raise TopologyError(f"bus {self.id}: negative load or p2p cap")


@dataclass(frozen=True)
class LineSpec:
    """One branch, oriented from its sending end (parent) to receiving end."""

    id: int
    from_bus: int
    to_bus: int
    r: float  # p.u.
    x: float  # p.u.
    c_max: float  # squared current limit, p.u.^2

    def __post_init__(self):
        if self.from_bus == self.to_bus:
            raise TopologyError(f"line {self.id} is a self loop")
        if self.r < 0 or self.x < 0 or self.c_max <= 0:
            raise TopologyError(f"line {self.id}: need r, x >= 0 and c_max > 0")


@dataclass(frozen=True)
class GeneratorSpec:
    bus: int
    p_min: float  # MW
    p_max: float  # MW
    q_min: float  # MVAr
    q_max: float  # MVAr

    def __post_init__(self):
        if self.p_min > self.p_max or self.q_min > self.q_max:
            raise TopologyError(f"generator at bus {self.bus}: inverted limits")


@dataclass(frozen=True)
class NetworkTopology:
    """Validated radial feeder rooted at the slack bus.

    Construction orients every line away from the slack and precomputes the
    index arrays used by the power-flow and OPF code. Instances are immutable.
    """

    buses: tuple[BusSpec, ...]
    lines: tuple[LineSpec, ...]
    generators: tuple[GeneratorSpec, ...]
    slack_bus: int
    s_base: float = 1.0  # MVA
    v_base: float = 12.66  # kV
    name: str = "network"
    # derived, filled in __post_init__
    bus_index: dict = field(init=False, repr=False, compare=False)
    order: np.ndarray = field(init=False, repr=False, compare=False)
    parent_line_idx: np.ndarray = field(init=False, repr=False, compare=False)
    line_from: np.ndarray = field(init=False, repr=False, compare=False)
    line_to: np.ndarray = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        if self.s_base <= 0 or self.v_base <= 0:
            raise TopologyError("bases must be positive")
        ids = [b.id for b in self.buses]
        if len(set(ids)) != len(ids):
            raise TopologyError("duplicate bus ids")
        index = {bid: i for i, bid in enumerate(ids)}
        if self.slack_bus not in index:
            raise TopologyError(f"missing slack bus {self.slack_bus}")
        if not any(g.bus == self.slack_bus for g in self.generators):
            raise TopologyError("slack bus hosts no generator")
        for g in self.generators:
            if g.bus not in index:
                raise TopologyError(f"generator at unknown bus {g.bus}")
        n = len(ids)

        adj: dict[int, list[int]] = {i: [] for i in range(n)}
        for k, ln in enumerate(self.lines):
            if ln.from_bus not in index or ln.to_bus not in index:
                raise TopologyError(f"line {ln.id} references an unknown bus")
            adj[index[ln.from_bus]].append(k)
            adj[index[ln.to_bus]].append(k)

        # BFS from the slack; reorient lines that point towards the root
        root = index[self.slack_bus]
        parent_line = np.full(n, -1, dtype=np.int64)
        seen = np.zeros(n, dtype=bool)
        seen[root] = True
        order = [root]
        oriented = list(self.lines)
        head = 0
        while head < len(order):
            u = order[head]
            head += 1
            for k in adj[u]:
                ln = oriented[k]
                a, b = index[ln.from_bus], index[ln.to_bus]
                w = b if a == u else a
                if w == u:
                    continue
                if seen[w]:
                    if parent_line[u] != k:
                        raise TopologyError("network contains a loop")
                    continue
                if a != u:
                    oriented[k] = replace(ln, from_bus=ln.to_bus, to_bus=ln.from_bus)
                seen[w] = True
                parent_line[w] = k
                order.append(w)
        if not seen.all():
            missing = [ids[i] for i in np.flatnonzero(~seen)]
            raise TopologyError(f"disconnected: buses {missing} unreachable from slack")
        if len(self.lines) != n - 1:
            raise TopologyError(
                f"not radial: {len(self.lines)} lines for {n} buses (need {n - 1})")

        object.__setattr__(self, "lines", tuple(oriented))
        object.__setattr__(self, "bus_index", index)
        object.__setattr__(self, "order", np.asarray(order, dtype=np.int64))
        object.__setattr__(self, "parent_line_idx", parent_line)
        object.__setattr__(self, "line_from",
                           np.array([index[l.from_bus] for l in oriented], dtype=np.int64))
        object.__setattr__(self, "line_to",
                           np.array([index[l.to_bus] for l in oriented], dtype=np.int64))
        for arr in (self.order, self.parent_line_idx, self.line_from, self.line_to):
            arr.setflags(write=False)

    # -- sizes and vector views -------------------------------------------
    @property
    def n_buses(self) -> int:
        return len(self.buses)

    @property
    def n_lines(self) -> int:
        return len(self.lines)

    @property
    def bus_ids(self) -> list[int]:
        return [b.id for b in self.buses]

    @property
    def slack_index(self) -> int:
        return self.bus_index[self.slack_bus]

    @property
    def r(self) -> np.ndarray:
        return np.array([l.r for l in self.lines])

    @property
    def x(self) -> np.ndarray:
        return np.array([l.x for l in self.lines])

    @property
    def c_max(self) -> np.ndarray:
        return np.array([l.c_max for l in self.lines])

    @property
    def v_min(self) -> np.ndarray:
        return np.array([b.v_min for b in self.buses])

    @property
    def v_max(self) -> np.ndarray:
        return np.array([b.v_max for b in self.buses])

    @property
    def p_load(self) -> np.ndarray:
        return np.array([b.p_load_base for b in self.buses])

    @property
    def q_load(self) -> np.ndarray:
        return np.array([b.q_load_base for b in self.buses])

    @property
    def p2p_cap(self) -> np.ndarray:
        return np.array([b.p2p_cap for b in self.buses])

    def index_of(self, bus: int) -> int:
        try:
            return self.bus_index[bus]
        except KeyError:
            raise KeyError(f"unknown bus id {bus}") from None

    def with_p2p_caps(self, caps: dict[int, float]) -> "NetworkTopology":
        """Copy with P2P injection caps (kW) set at the given buses."""
        for bus in caps:
            self.index_of(bus)
        buses = tuple(replace(b, p2p_cap=float(caps.get(b.id, b.p2p_cap))) for b in self.buses)
        return NetworkTopology(buses, self.lines, self.generators, self.slack_bus,
                               self.s_base, self.v_base, self.name)

    def summary(self) -> dict:
        """Machine-readable key/value tree used by ``export-network``."""
        return {
            "name": self.name,
            "s_base_mva": self.s_base,
            "v_base_kv": self.v_base,
            "slack_bus": self.slack_bus,
            "n_buses": self.n_buses,
            "n_lines": self.n_lines,
            "total_load_kw": float(self.p_load.sum()),
            "total_load_kvar": float(self.q_load.sum()),
            "buses": [
                {"id": b.id, "v_min_pu2": b.v_min, "v_max_pu2": b.v_max,
                 "p_load_kw": b.p_load_base, "q_load_kvar": b.q_load_base,
                 "p2p_cap_kw": b.p2p_cap}
                for b in self.buses
            ],
            "lines": [
                {"id": l.id, "from": l.from_bus, "to": l.to_bus, "r_pu": l.r,
                 "x_pu": l.x, "c_max_pu2": l.c_max}
                for l in self.lines
            ],
            "generators": [
                {"bus": g.bus, "p_min_mw": g.p_min, "p_max_mw": g.p_max,
                 "q_min_mvar": g.q_min, "q_max_mvar": g.q_max}
                for g in self.generators
            ],
        }


def parent_line(topology: NetworkTopology, bus: int) -> int | None:
    """Id of the line feeding ``bus``; None for the slack bus."""
    k = topology.parent_line_idx[topology.index_of(bus)]
    return None if k < 0 else topology.lines[k].id


def children_lines(topology: NetworkTopology, bus: int) -> set[int]:
    topology.index_of(bus)
    return {l.id for l in topology.lines if l.from_bus == bus}


def to_per_unit(topology: NetworkTopology, value_kw: float) -> float:
    """kW (or kVAr) to per-unit on the system power base."""
    if topology.s_base <= 0:
        raise ValueError("non-positive power base")
    return value_kw / (topology.s_base * 1000.0)


def from_per_unit(topology: NetworkTopology, value_pu: float) -> float:
    if topology.s_base <= 0:
        raise ValueError("non-positive power base")
    return value_pu * topology.s_base * 1000.0


# -- case-file reader --------------------------------------------------------

_POWER_TO_KW = {"kw": 1.0, "mw": 1000.0, "kvar": 1.0, "mvar": 1000.0, "w": 1e-3}


def _power_kw(value: float, unit: str, s_base: float) -> float:
    u = unit.lower()
    if u == "pu":
        return value * s_base * 1000.0
    if u not in _POWER_TO_KW:
        raise CaseFileError(f"unsupported power unit {unit!r}")
    return value * _POWER_TO_KW[u]


def _power_mw(value: float, unit: str, s_base: float) -> float:
    return _power_kw(value, unit, s_base) / 1000.0


def _split_sections(lines: Iterable[str]) -> dict[str, list[list[str]]]:
    sections: dict[str, list[list[str]]] = {}
    current = None
    for lineno, raw in enumerate(lines, 1):
        text = raw.split("#", 1)[0].strip()
        if not text:
            continue
        if text.startswith("[") and text.endswith("]"):
            current = text[1:-1].strip().lower()
            if current in sections:
                raise CaseFileError(f"line {lineno}: duplicate section [{current}]")
            sections[current] = []
            continue
        if current is None:
            raise CaseFileError(f"line {lineno}: data outside of a section")
        sections[current].append(text.split())
    return sections


def _table(rows: list[list[str]], name: str, required: tuple[str, ...]):
    if len(rows) < 2:
        raise CaseFileError(f"[{name}] needs a header row and a units row")
    header = [h.lower() for h in rows[0]]
    units = rows[1]
    if len(units) != len(header):
        raise CaseFileError(f"[{name}] units row has {len(units)} entries, header {len(header)}")
    missing = [c for c in required if c not in header]
    if missing:
        raise CaseFileError(f"[{name}] missing columns {missing}")
    out = []
    for row in rows[2:]:
        if len(row) != len(header):
            raise CaseFileError(f"[{name}] row {row!r} has {len(row)} fields, expected {len(header)}")
        try:
            vals = [float(v) for v in row]
        except ValueError as exc:
            raise CaseFileError(f"[{name}] non-numeric entry in {row!r}") from exc
        out.append({h: (v, u) for h, v, u in zip(header, vals, units)})
    return out


def parse_case(text: str, name: str | None = None) -> NetworkTopology:
    sections = _split_sections(text.splitlines())
    for sec in ("system", "buses", "lines", "generators"):
        if sec not in sections:
            raise CaseFileError(f"missing section [{sec}]")

    system = {}
    for row in sections["system"]:
        if len(row) < 2:
            raise CaseFileError(f"[system] row {row!r} needs a value")
        system[row[0].lower()] = row[1:]
    try:
        s_base = float(system["s_base"][0])
        v_base = float(system["v_base"][0])
        slack = int(float(system["slack_bus"][0]))
    except (KeyError, ValueError) as exc:
        raise CaseFileError("[system] needs numeric s_base, v_base and slack_bus") from exc
    if len(system["s_base"]) > 1 and system["s_base"][1].lower() == "kva":
        s_base /= 1000.0
    if len(system["v_base"]) > 1 and system["v_base"][1].lower() == "v":
        v_base /= 1000.0
    if s_base <= 0 or v_base <= 0:
        raise CaseFileError("bases must be positive")
    z_base = v_base**2 / s_base  # ohm
    i_base = s_base * 1000.0 / (math.sqrt(3.0) * v_base)  # A

    def volt_sq(val, unit):
        u = unit.lower()
        if u == "pu":
            return val * val
        if u == "pu2":
            return val
        if u == "kv":
            return (val / v_base) ** 2
        raise CaseFileError(f"unsupported voltage unit {unit!r}")

    buses = []
    for row in _table(sections["buses"], "buses", ("id", "p_load", "q_load", "v_min", "v_max")):
        cap = row.get("p2p_cap", (0.0, "kW"))
        buses.append(BusSpec(
            id=int(row["id"][0]),
            v_min=volt_sq(*row["v_min"]),
            v_max=volt_sq(*row["v_max"]),
            p_load_base=_power_kw(row["p_load"][0], row["p_load"][1], s_base),
            q_load_base=_power_kw(row["q_load"][0], row["q_load"][1], s_base),
            p2p_cap=_power_kw(cap[0], cap[1], s_base),
        ))

    def imp(val, unit):
        u = unit.lower()
        if u == "ohm":
            return val / z_base
        if u == "pu":
            return val
        raise CaseFileError(f"unsupported impedance unit {unit!r}")

    def cur_sq(val, unit):
        u = unit.lower()
        if u == "a":
            return (val / i_base) ** 2
        if u == "ka":
            return (1000.0 * val / i_base) ** 2
        if u == "pu":
            return val * val
        if u == "pu2":
            return val
        raise CaseFileError(f"unsupported current unit {unit!r}")

    lines = []
    for row in _table(sections["lines"], "lines", ("id", "from", "to", "r", "x", "i_max")):
        lines.append(LineSpec(
            id=int(row["id"][0]),
            from_bus=int(row["from"][0]),
            to_bus=int(row["to"][0]),
            r=imp(*row["r"]),
            x=imp(*row["x"]),
            c_max=cur_sq(*row["i_max"]),
        ))

    gens = []
    for row in _table(sections["generators"], "generators",
                      ("bus", "p_min", "p_max", "q_min", "q_max")):
        gens.append(GeneratorSpec(
            bus=int(row["bus"][0]),
            p_min=_power_mw(row["p_min"][0], row["p_min"][1], s_base),
            p_max=_power_mw(row["p_max"][0], row["p_max"][1], s_base),
            q_min=_power_mw(row["q_min"][0], row["q_min"][1], s_base),
            q_max=_power_mw(row["q_max"][0], row["q_max"][1], s_base),
        ))

    label = name or (system["name"][0] if "name" in system else "network")
    return NetworkTopology(tuple(buses), tuple(lines), tuple(gens), slack,
                           s_base=s_base, v_base=v_base, name=label)


def load_network(path: str | Path | None = None, format: str = "case") -> NetworkTopology:
    """Read and validate a case file; ``None`` loads the bundled IEEE 33-bus feeder."""
    if format != "case":
        raise CaseFileError(f"unknown case-file dialect {format!r}")
    path = default_case_path() if path is None else Path(path)
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise CaseFileError(f"cannot read {path}: {exc}") from exc
    return parse_case(text)


def default_case_path() -> Path:
    return Path(__file__).parent / "data" / "ieee33.case"
