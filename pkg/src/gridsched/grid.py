"""Radial feeder data model, text parser/serializer and radiality checks.

Feeder files are line oriented::

    base_mva = 5.0
    base_kv = 4.16
    bus 150 root p=0 q=0 vmin=0.9 vmax=1.1
    bus 1 p=40 q=20 vmin=0.9 vmax=1.1 pv=150
    branch 150 1 r=0.001 x=0.002 lmax=1.0 switch closed

Bus demand is given in kW/kvar, either as a scalar or as a comma-separated
hourly series. Voltage limits are magnitudes in per-unit; the model stores
them as given and exposes the squared bounds used by the optimizer. Branch
impedances are per-unit on the file base and ``lmax`` is a squared current
limit in per-unit.
"""
from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Union

import numpy as np

Demand = Union[float, tuple]


class FeederFormatError(ValueError):
    """Raised for malformed feeder documents."""


class RadialityError(ValueError):
    """Raised when the closed branches do not form a tree rooted at the root bus."""

    def __init__(self, report: "RadialityReport"):
        super().__init__(report.describe())
        self.report = report


@dataclass(frozen=True)
class Bus:
    id: int
    demand_p: Demand = 0.0
    demand_q: Demand = 0.0
    v_min: float = 0.9
    v_max: float = 1.1
    pv_capacity: float = 0.0
    cap_kvar: float = 0.0
    is_root: bool = False

    def __post_init__(self):
        if not 0.0 < self.v_min < self.v_max:
            raise ValueError(f"bus {self.id}: need 0 < vmin < vmax, got {self.v_min}, {self.v_max}")
        if self.pv_capacity < 0:
            raise ValueError(f"bus {self.id}: negative pv capacity")
        if self.cap_kvar < 0:
            raise ValueError(f"bus {self.id}: negative capacitor rating")

    @property
    def v_min_sq(self) -> float:
        return self.v_min * self.v_min

    @property
    def v_max_sq(self) -> float:
        return self.v_max * self.v_max

    @property
    def has_capacitor(self) -> bool:
        return self.cap_kvar > 0

    @property
    def has_load(self) -> bool:
        return _any_nonzero(self.demand_p) or _any_nonzero(self.demand_q)

    def demand_at(self, hour: int) -> tuple[float, float]:
        """Return (kW, kvar) demand at ``hour``."""
        return _value_at(self.demand_p, hour), _value_at(self.demand_q, hour)


@dataclass(frozen=True)
class Branch:
    from_bus: int
    to_bus: int
    r: float
    x: float
    l_max: float
    is_switch: bool = False
    closed: bool = True

    def __post_init__(self):
        if self.r < 0:
            raise ValueError(f"branch {self.from_bus}-{self.to_bus}: negative resistance")
        if self.r == 0 and self.x == 0:
            raise ValueError(f"branch {self.from_bus}-{self.to_bus}: zero impedance")
        if self.l_max <= 0:
            raise ValueError(f"branch {self.from_bus}-{self.to_bus}: lmax must be positive")
        if not self.is_switch and not self.closed:
            raise ValueError(f"branch {self.from_bus}-{self.to_bus}: only switches can be open")


@dataclass(frozen=True)
class RadialityReport:
    """Result of :func:`validate_radial`; empty lists mean the network is a tree."""

    cycles: list = field(default_factory=list)
    disconnected: list = field(default_factory=list)
    misoriented: list = field(default_factory=list)
    root_errors: list = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not (self.cycles or self.disconnected or self.misoriented or self.root_errors)

    def describe(self) -> str:
        if self.ok:
            return "radial"
        parts = list(self.root_errors)
        for cyc in self.cycles:
            parts.append("loop through branches " + ", ".join(f"{a}-{b}" for a, b in cyc))
        if self.disconnected:
            parts.append("buses not reachable from the root: " + ", ".join(map(str, self.disconnected)))
        for a, b in self.misoriented:
            parts.append(f"branch {a}-{b} points towards the root")
        return "; ".join(parts)


@dataclass(frozen=True)
class FeederNetwork:
    """Immutable feeder description.

    ``buses`` and ``branches`` keep file order. Adjacency over closed
    branches (``parent``, ``children``, ``order``) is derived on first use and
    only meaningful for networks that pass :func:`validate_radial`.
    """

    buses: tuple
    branches: tuple
    base_mva: float = 1.0
    base_kv: float = 4.16

    def __post_init__(self):
        ids = [b.id for b in self.buses]
        if len(set(ids)) != len(ids):
            raise ValueError("duplicate bus ids")
        known = set(ids)
        for br in self.branches:
            if br.from_bus not in known or br.to_bus not in known:
                raise ValueError(f"branch {br.from_bus}-{br.to_bus} references an unknown bus")
        if self.base_mva <= 0 or self.base_kv <= 0:
            raise ValueError("bases must be positive")
        object.__setattr__(self, "_cache", {})

    def __eq__(self, other):
        if not isinstance(other, FeederNetwork):
            return NotImplemented
        return (self.buses, self.branches, self.base_mva, self.base_kv) == (
            other.buses, other.branches, other.base_mva, other.base_kv)

    def __hash__(self):
        return hash((self.buses, self.branches, self.base_mva, self.base_kv))

    @property
    def bus_map(self) -> dict:
        return self._cached("bus_map", lambda: {b.id: b for b in self.buses})

    @property
    def root(self) -> int:
        roots = [b.id for b in self.buses if b.is_root]
        if len(roots) != 1:
            raise RadialityError(RadialityReport(root_errors=[f"expected one root bus, found {len(roots)}"]))
        return roots[0]

    @property
    def closed_branches(self) -> tuple:
        return tuple(br for br in self.branches if br.closed)

    @property
    def order(self) -> tuple:
        """Energized bus ids in breadth-first order from the root."""
        return self._cached("order", lambda: self._tree()[0])

    @property
    def parent(self) -> dict:
        return self._cached("parent", lambda: self._tree()[1])

    @property
    def children(self) -> dict:
        def build():
            kids = {b: [] for b in self.order}
            for b in self.order[1:]:
                kids[self.parent[b]].append(b)
            return {k: tuple(v) for k, v in kids.items()}
        return self._cached("children", build)

    @property
    def incoming(self) -> dict:
        """Map child bus id -> index (into ``branches``) of its feeding closed branch."""
        def build():
            inc = {}
            for k, br in enumerate(self.branches):
                if br.closed:
                    inc[br.to_bus] = k
            return inc
        return self._cached("incoming", build)

    @property
    def horizon(self) -> int | None:
        """Length of hourly demand series, or None if all demands are scalar."""
        lengths = {len(d) for b in self.buses for d in (b.demand_p, b.demand_q) if isinstance(d, tuple)}
        if not lengths:
            return None
        if len(lengths) > 1:
            raise FeederFormatError(f"inconsistent hourly series lengths {sorted(lengths)}")
        return lengths.pop()

    def kw_to_pu(self, value):
        return np.asarray(value, dtype=float) / (1000.0 * self.base_mva)

    def _cached(self, key, fn):
        if key not in self._cache:
            self._cache[key] = fn()
        return self._cache[key]

    def _tree(self):
        adj = {b.id: [] for b in self.buses}
        for br in self.closed_branches:
            adj[br.from_bus].append(br.to_bus)
            adj[br.to_bus].append(br.from_bus)
        root = self.root
        order, parent = [root], {}
        queue = deque([root])
        while queue:
            u = queue.popleft()
            for w in adj[u]:
                if w != root and w not in parent:
                    parent[w] = u
                    order.append(w)
                    queue.append(w)
        return tuple(order), parent


def _any_nonzero(d: Demand) -> bool:
    return any(v != 0 for v in d) if isinstance(d, tuple) else d != 0


def _value_at(d: Demand, hour: int) -> float:
    if hour < 0:
        raise IndexError(f"hour {hour} out of range")
    if isinstance(d, tuple):
        if hour >= len(d):
            raise IndexError(f"hour {hour} out of range for a {len(d)}-hour series")
        return d[hour]
    return d


# --------------------------------------------------------------------------
# parsing and serialization
# --------------------------------------------------------------------------

_BUS_KEYS = {"p", "q", "vmin", "vmax", "cap", "pv"}
_BRANCH_KEYS = {"r", "x", "lmax"}


def _parse_number(text: str, lineno: int) -> float:
    try:
        return float(text)
    except ValueError:
        raise FeederFormatError(f"line {lineno}: bad number {text!r}") from None


def _parse_demand(text: str, lineno: int) -> Demand:
    if "," in text:
        return tuple(_parse_number(t, lineno) for t in text.split(","))
    return _parse_number(text, lineno)


def _keyvals(tokens, allowed, lineno):
    out = {}
    for tok in tokens:
        key, sep, val = tok.partition("=")
        if not sep or key not in allowed:
            raise FeederFormatError(f"line {lineno}: unexpected token {tok!r}")
        if key in out:
            raise FeederFormatError(f"line {lineno}: duplicate key {key!r}")
        out[key] = val
    return out


def parse_feeder(text: str, validate: bool = True) -> FeederNetwork:
    """Parse a feeder document.

    Args:
        text: document contents.
        validate: when true, raise :class:`RadialityError` unless the closed
            branches form a tree rooted at the root bus.
    """
    header = {}
    buses, branches = [], []
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" in line and line.split()[0] in ("base_mva", "base_kv"):
            key, _, val = line.partition("=")
            key = key.strip()
            if key in header:
                raise FeederFormatError(f"line {lineno}: duplicate header {key}")
            header[key] = _parse_number(val.strip(), lineno)
            continue
        tokens = line.split()
        kind = tokens[0]
        if kind == "bus":
            if len(tokens) < 2:
                raise FeederFormatError(f"line {lineno}: bus record needs an id")
            bus_id = _parse_int(tokens[1], lineno)
            rest = tokens[2:]
            is_root = bool(rest) and rest[0] == "root"
            if is_root:
                rest = rest[1:]
            kv = _keyvals(rest, _BUS_KEYS, lineno)
            try:
                buses.append(Bus(
                    id=bus_id,
                    demand_p=_parse_demand(kv.get("p", "0"), lineno),
                    demand_q=_parse_demand(kv.get("q", "0"), lineno),
                    v_min=_parse_number(kv.get("vmin", "0.9"), lineno),
                    v_max=_parse_number(kv.get("vmax", "1.1"), lineno),
                    pv_capacity=_parse_number(kv.get("pv", "0"), lineno),
                    cap_kvar=_parse_number(kv.get("cap", "0"), lineno),
                    is_root=is_root,
                ))
            except ValueError as exc:
                raise FeederFormatError(f"line {lineno}: {exc}") from None
        elif kind == "branch":
            if len(tokens) < 3:
                raise FeederFormatError(f"line {lineno}: branch record needs two bus ids")
            a, b = _parse_int(tokens[1], lineno), _parse_int(tokens[2], lineno)
            rest = tokens[3:]
            is_switch, closed = False, True
            if "switch" in rest:
                k = rest.index("switch")
                if k + 1 >= len(rest) or rest[k + 1] not in ("open", "closed"):
                    raise FeederFormatError(f"line {lineno}: switch state must be open or closed")
                is_switch, closed = True, rest[k + 1] == "closed"
                rest = rest[:k] + rest[k + 2:]
            kv = _keyvals(rest, _BRANCH_KEYS, lineno)
            missing = _BRANCH_KEYS - kv.keys()
            if missing:
                raise FeederFormatError(f"line {lineno}: branch missing {sorted(missing)}")
            try:
                branches.append(Branch(a, b, _parse_number(kv["r"], lineno), _parse_number(kv["x"], lineno),
                                       _parse_number(kv["lmax"], lineno), is_switch, closed))
            except ValueError as exc:
                raise FeederFormatError(f"line {lineno}: {exc}") from None
        else:
            raise FeederFormatError(f"line {lineno}: unknown record {kind!r}")
    if "base_mva" not in header or "base_kv" not in header:
        raise FeederFormatError("missing base_mva or base_kv header")
    try:
        net = FeederNetwork(tuple(buses), tuple(branches), header["base_mva"], header["base_kv"])
    except ValueError as exc:
        raise FeederFormatError(str(exc)) from None
    if validate:
        report = validate_radial(net)
        if not report.ok:
            raise RadialityError(report)
    return net


def _parse_int(text, lineno):
    try:
        return int(text)
    except ValueError:
        raise FeederFormatError(f"line {lineno}: bad bus id {text!r}") from None


def _fmt(v: float) -> str:
    return repr(float(v))


def _fmt_demand(d: Demand) -> str:
    return ",".join(_fmt(v) for v in d) if isinstance(d, tuple) else _fmt(d)


def serialize_feeder(net: FeederNetwork, header_comment: str = "") -> str:
    """Write ``net`` in the feeder text format; parsing the result gives back ``net``."""
    lines = [f"# {c}" if c else "#" for c in header_comment.splitlines()]
    lines += [f"base_mva = {_fmt(net.base_mva)}", f"base_kv = {_fmt(net.base_kv)}"]
    for b in net.buses:
        rec = f"bus {b.id}" + (" root" if b.is_root else "")
        rec += f" p={_fmt_demand(b.demand_p)} q={_fmt_demand(b.demand_q)} vmin={_fmt(b.v_min)} vmax={_fmt(b.v_max)}"
        if b.cap_kvar:
            rec += f" cap={_fmt(b.cap_kvar)}"
        if b.pv_capacity:
            rec += f" pv={_fmt(b.pv_capacity)}"
        lines.append(rec)
    for br in net.branches:
        rec = f"branch {br.from_bus} {br.to_bus} r={_fmt(br.r)} x={_fmt(br.x)} lmax={_fmt(br.l_max)}"
        if br.is_switch:
            rec += " switch " + ("closed" if br.closed else "open")
        lines.append(rec)
    return "\n".join(lines) + "\n"


def load_feeder(path: Union[str, Path]) -> FeederNetwork:
    return parse_feeder(Path(path).read_text(encoding="utf-8"))


def bundled_feeder_path() -> Path:
    """Path of the shipped 123-bus feeder file."""
    return Path(str(resources.files("gridsched") / "data" / "ieee123.feeder"))


# --------------------------------------------------------------------------
# validation and aggregation
# --------------------------------------------------------------------------

def validate_radial(net: FeederNetwork) -> RadialityReport:
    """Check that closed branches form a tree over the energized buses.

    A bus whose branches are all open (and which carries no demand) is treated
    as de-energized and is not a violation. Any other bus that cannot be
    reached from the root is reported as disconnected.
    """
    roots = [b.id for b in net.buses if b.is_root]
    if len(roots) != 1:
        return RadialityReport(root_errors=[f"expected one root bus, found {len(roots)}"])
    root = roots[0]

    # union-find over closed branches; an edge joining one component is a loop
    comp = {b.id: b.id for b in net.buses}

    def find(a):
        while comp[a] != a:
            comp[a] = comp[comp[a]]
            a = comp[a]
        return a

    tree_adj = {b.id: [] for b in net.buses}
    cycles = []
    for br in net.closed_branches:
        ra, rb = find(br.from_bus), find(br.to_bus)
        if ra == rb:
            path = _tree_path(tree_adj, br.from_bus, br.to_bus)
            cycles.append(path + [(br.from_bus, br.to_bus)])
            continue
        comp[ra] = rb
        tree_adj[br.from_bus].append(br.to_bus)
        tree_adj[br.to_bus].append(br.from_bus)

    touched = {br.from_bus for br in net.closed_branches} | {br.to_bus for br in net.closed_branches}
    reach = find(root)
    disconnected = sorted(
        b.id for b in net.buses
        if b.id != root and find(b.id) != reach and (b.id in touched or b.has_load or b.pv_capacity > 0)
    )

    misoriented = []
    if not cycles:
        depth = {root: 0}
        queue = deque([root])
        while queue:
            u = queue.popleft()
            for w in tree_adj[u]:
                if w not in depth:
                    depth[w] = depth[u] + 1
                    queue.append(w)
        for br in net.closed_branches:
            if br.from_bus in depth and br.to_bus in depth and depth[br.to_bus] < depth[br.from_bus]:
                misoriented.append((br.from_bus, br.to_bus))
    return RadialityReport(cycles=cycles, disconnected=disconnected, misoriented=misoriented)


def _tree_path(adj, a, b):
    """Edges on the unique path from a to b in the forest ``adj``."""
    prev = {a: None}
    queue = deque([a])
    while queue:
        u = queue.popleft()
        if u == b:
            break
        for w in adj[u]:
            if w not in prev:
                prev[w] = u
                queue.append(w)
    edges, u = [], b
    while prev[u] is not None:
        edges.append((prev[u], u))
        u = prev[u]
    return edges[::-1]


def aggregate_demand(net: FeederNetwork, hour: int) -> tuple[float, float]:
    """Total (kW, kvar) demand over energized buses at ``hour``."""
    horizon = net.horizon
    if hour < 0 or (horizon is not None and hour >= horizon):
        raise IndexError(f"hour {hour} out of range")
    energized = set(net.order)
    total_p = total_q = 0.0
    for b in net.buses:
        if b.id in energized:
            p, q = b.demand_at(hour)
            total_p += p
            total_q += q
    return total_p, total_q


def count_summary(net: FeederNetwork) -> dict:
    """Counts used to check a feeder against its published statistics."""
    switches = [br for br in net.branches if br.is_switch]
    return {
        "basic_branches": sum(1 for br in net.branches if not br.is_switch),
        "loads": sum(1 for b in net.buses if b.has_load),
        "capacitors": sum(1 for b in net.buses if b.has_capacitor),
        "switches": len(switches),
        "closed_switches": sum(1 for br in switches if br.closed),
        "open_switches": sum(1 for br in switches if not br.closed),
        "pv_buses": sum(1 for b in net.buses if b.pv_capacity > 0),
    }


def tree_arrays(net: FeederNetwork):
    """Index arrays for the energized tree in breadth-first order.

    Returns (order, parent_idx, branch_idx) where ``parent_idx[k]`` is the
    position of bus ``order[k]``'s parent (-1 for the root) and
    ``branch_idx[k]`` indexes ``net.branches`` for the feeding branch.
    """
    order = net.order
    pos = {b: k for k, b in enumerate(order)}
    parent_idx = np.full(len(order), -1, dtype=int)
    branch_idx = np.full(len(order), -1, dtype=int)
    for k, b in enumerate(order[1:], start=1):
        parent_idx[k] = pos[net.parent[b]]
        branch_idx[k] = net.incoming[b]
    return order, parent_idx, branch_idx

