"""Finite-buffer network description, validation and the feasible queue region.

A :class:`NetworkInstance` is an immutable description of an acyclic directed
network: node buffers (finite or :data:`UNBOUNDED`), per-node egress capacity
towards the meta destination, link capacities and the commodities carried.
Node and commodity ids are strings; dense integer indices are assigned by
:class:`StateLayout` and reported alongside every analysis.
"""

from __future__ import annotations

import graphlib
import math
from dataclasses import dataclass, field, replace
from typing import Iterable, Mapping, Sequence

import numpy as np

SHARED = "shared"
PER_COMMODITY = "per-commodity"
DEFAULT_CAP = 100.0


class _Unbounded:
    """Marker for a buffer that never saturates (source nodes)."""

    _instance = None

    def __new__(cls):
        if cls._instance is None:
            cls._instance = super().__new__(cls)
        return cls._instance

    def __repr__(self):
        return "UNBOUNDED"

    def __float__(self):
        return math.inf

    def __reduce__(self):
        return (_Unbounded, ())


UNBOUNDED = _Unbounded()


class InvalidNetworkError(ValueError):
    """Raised when an operation needs a valid network and did not get one."""


def is_unbounded(b) -> bool:
    return b is UNBOUNDED


@dataclass(frozen=True, eq=False)
class Node:
    id: str
    buffer: float | _Unbounded = UNBOUNDED
    # a single number applies to every commodity; a mapping is per commodity
    egress_capacity: float | Mapping[str, float] = 0.0

    def egress_for(self, commodity: str) -> float:
        if isinstance(self.egress_capacity, Mapping):
            return float(self.egress_capacity.get(commodity, 0.0))
        return float(self.egress_capacity)


@dataclass(frozen=True, eq=False)
class Link:
    src: str
    dst: str
    capacity: float


@dataclass(frozen=True, eq=False)
class CommoditySpec:
    """One commodity: where it enters, how fast, and how it uses buffers.

    ``arrivals`` maps node id to a piecewise-constant schedule, a tuple of
    ``(t_start, rate)`` pairs sorted by start time.  Only the last segment is
    used by the stationary analyses.
    """

    id: str
    arrivals: Mapping[str, tuple[tuple[float, float], ...]] = field(default_factory=dict)
    buffer_mode: str = SHARED
    allocations: Mapping[str, float] | None = None
    nodes: tuple[str, ...] | None = None

    def stationary_rate(self, node: str) -> float:
        sched = self.arrivals.get(node)
        if not sched:
            return 0.0
        return float(sched[-1][1])

    def rate_at(self, node: str, t: float) -> float:
        sched = self.arrivals.get(node)
        if not sched:
            return 0.0
        rate = sched[0][1]
        for start, r in sched:
            if start <= t:
                rate = r
        return float(rate)

    @property
    def total_rate(self) -> float:
        return sum(self.stationary_rate(n) for n in self.arrivals)


def constant(rate: float) -> tuple[tuple[float, float], ...]:
    return ((0.0, float(rate)),)


@dataclass(frozen=True, eq=False)
class NetworkInstance:
    nodes: tuple[Node, ...]
    links: tuple[Link, ...]
    commodities: tuple[CommoditySpec, ...]

    @classmethod
    def build(cls, nodes: Iterable[Node], links: Iterable[Link],
              commodities: Iterable[CommoditySpec]) -> "NetworkInstance":
        return cls(tuple(nodes), tuple(links), tuple(commodities))

    @property
    def node_ids(self) -> list[str]:
        return [n.id for n in self.nodes]

    @property
    def node_index(self) -> dict[str, int]:
        return {n.id: i for i, n in enumerate(self.nodes)}

    def node(self, node_id: str) -> Node:
        for n in self.nodes:
            if n.id == node_id:
                return n
        raise KeyError(node_id)

    def commodity(self, cid: str) -> CommoditySpec:
        for c in self.commodities:
            if c.id == cid:
                return c
        raise KeyError(cid)

    @property
    def buffer_mode(self) -> str:
        modes = {c.buffer_mode for c in self.commodities}
        return modes.pop() if len(modes) == 1 else SHARED

    def commodity_nodes(self, cid: str) -> list[str]:
        """Nodes a commodity can occupy, in declaration order.

        Defaults to everything reachable from the commodity's arrival nodes
        (all nodes if it declares no arrivals).
        """
        com = self.commodity(cid)
        if com.nodes is not None:
            keep = set(com.nodes)
        elif not com.arrivals:
            keep = set(self.node_ids)
        else:
            adj: dict[str, list[str]] = {}
            for ln in self.links:
                adj.setdefault(ln.src, []).append(ln.dst)
            keep = set()
            stack = [n for n in com.arrivals]
            while stack:
                u = stack.pop()
                if u in keep:
                    continue
                keep.add(u)
                stack.extend(adj.get(u, []))
        return [n for n in self.node_ids if n in keep]

    def commodity_links(self, cid: str) -> list[Link]:
        keep = set(self.commodity_nodes(cid))
        return [ln for ln in self.links if ln.src in keep and ln.dst in keep]

    def link_share(self, link: Link, cid: str) -> float:
        """Capacity of ``link`` available to commodity ``cid``.

        A link used by several commodities is split evenly between them.
        """
        users = [c.id for c in self.commodities
                 if link.src in self.commodity_nodes(c.id) and link.dst in self.commodity_nodes(c.id)]
        if cid not in users:
            return 0.0
        return link.capacity / len(users)

    def allocation(self, node_id: str, cid: str) -> float | _Unbounded:
        """Buffer reserved for ``cid`` at a node under per-commodity buffering."""
        node = self.node(node_id)
        if is_unbounded(node.buffer):
            return UNBOUNDED
        com = self.commodity(cid)
        if com.allocations and node_id in com.allocations:
            return float(com.allocations[node_id])
        sharers = [c for c in self.commodities if node_id in self.commodity_nodes(c.id)]
        return float(node.buffer) / max(len(sharers), 1)

    def with_arrival_rate(self, cid: str, rate: float) -> "NetworkInstance":
        """Copy with commodity ``cid``'s stationary total arrival rate set to ``rate``.

        With several arrival nodes the existing proportions are kept.
        """
        com = self.commodity(cid)
        if not com.arrivals:
            raise InvalidNetworkError(f"commodity {cid!r} has no arrival node")
        total = com.total_rate
        arr = {}
        for n in com.arrivals:
            share = com.stationary_rate(n) / total if total > 0 else 1.0 / len(com.arrivals)
            arr[n] = constant(rate * share)
        coms = tuple(replace(c, arrivals=arr) if c.id == cid else c for c in self.commodities)
        return replace(self, commodities=coms)

    def with_node(self, node_id: str, **changes) -> "NetworkInstance":
        nodes = tuple(replace(n, **changes) if n.id == node_id else n for n in self.nodes)
        return replace(self, nodes=nodes)


@dataclass(frozen=True)
class Violation:
    kind: str
    message: str


@dataclass
class ValidationReport:
    violations: list[Violation]
    node_index: dict[str, int]

    @property
    def valid(self) -> bool:
        return not self.violations

    def kinds(self) -> set[str]:
        return {v.kind for v in self.violations}

    def to_dict(self) -> dict:
        return {
            "valid": self.valid,
            "violations": [{"kind": v.kind, "message": v.message} for v in self.violations],
            "node_index": self.node_index,
        }


def validate_topology(net: NetworkInstance) -> ValidationReport:
    """Collect every violated modelling assumption; never raises."""
    out: list[Violation] = []
    ids = net.node_ids
    known = set(ids)
    if len(known) != len(ids):
        out.append(Violation("duplicate-node", "node ids are not unique"))
    for n in net.nodes:
        if not is_unbounded(n.buffer) and not (float(n.buffer) > 0):
            out.append(Violation("buffer", f"node {n.id}: buffer size must be positive, got {n.buffer}"))
        caps = n.egress_capacity.values() if isinstance(n.egress_capacity, Mapping) else [n.egress_capacity]
        if any(float(c) < 0 for c in caps):
            out.append(Violation("egress", f"node {n.id}: negative egress capacity"))

    graph: dict[str, set[str]] = {i: set() for i in ids}
    for ln in net.links:
        if ln.src not in known or ln.dst not in known:
            out.append(Violation("unknown-node", f"link {ln.src}->{ln.dst} references an unknown node"))
            continue
        if not (ln.capacity > 0):
            out.append(Violation("capacity", f"link {ln.src}->{ln.dst}: capacity must be positive, got {ln.capacity}"))
        if ln.src == ln.dst:
            out.append(Violation("cycle", f"cycle: {ln.src}→{ln.src}"))
            continue
        graph[ln.dst].add(ln.src)
    try:
        tuple(graphlib.TopologicalSorter(graph).static_order())
    except graphlib.CycleError as exc:
        cyc = list(reversed(exc.args[1]))
        out.append(Violation("cycle", "cycle: " + "→".join(cyc)))

    cids = [c.id for c in net.commodities]
    if not cids:
        out.append(Violation("commodity", "network carries no commodity"))
    if len(set(cids)) != len(cids):
        out.append(Violation("commodity", "commodity ids are not unique"))
    if len({c.buffer_mode for c in net.commodities}) > 1:
        out.append(Violation("buffer-mode", "all commodities must use the same buffer mode"))
    for com in net.commodities:
        if com.buffer_mode not in (SHARED, PER_COMMODITY):
            out.append(Violation("buffer-mode", f"commodity {com.id}: unknown buffer mode {com.buffer_mode!r}"))
        bad = [n for n in com.arrivals if n not in known]
        if bad:
            out.append(Violation("unknown-node", f"commodity {com.id}: arrivals at unknown nodes {bad}"))
            continue
        for n, sched in com.arrivals.items():
            if any(r < 0 for _, r in sched):
                out.append(Violation("arrival", f"commodity {com.id}: negative arrival rate at {n}"))
            if any(r > 0 for _, r in sched) and not is_unbounded(net.node(n).buffer):
                out.append(Violation("source-buffer",
                                     f"commodity {com.id}: source node {n} must have an unbounded buffer"))
        cnodes = net.commodity_nodes(com.id)
        if not any(net.node(n).egress_for(com.id) > 0 for n in cnodes):
            out.append(Violation("no-egress", f"commodity {com.id}: no reachable egress node"))
    if net.commodities and net.commodities[0].buffer_mode == PER_COMMODITY:
        for n in net.nodes:
            if is_unbounded(n.buffer):
                continue
            total = 0.0
            for com in net.commodities:
                if n.id in net.commodity_nodes(com.id):
                    total += float(net.allocation(n.id, com.id))
            if total > float(n.buffer) * (1 + 1e-12):
                out.append(Violation("allocation",
                                     f"node {n.id}: per-commodity allocations {total} exceed buffer {n.buffer}"))
    return ValidationReport(out, net.node_index)


def topological_order(net: NetworkInstance) -> list[str]:
    graph: dict[str, set[str]] = {i: set() for i in net.node_ids}
    for ln in net.links:
        graph[ln.dst].add(ln.src)
    return list(graphlib.TopologicalSorter(graph).static_order())


def require_valid(net: NetworkInstance) -> None:
    rep = validate_topology(net)
    if not rep.valid:
        raise InvalidNetworkError("; ".join(v.message for v in rep.violations))


@dataclass(frozen=True, eq=False)
class StateLayout:
    """Dense indexing of the queue vector, commodity-major.

    ``saturated`` lists the ``(node, commodity)`` queues that are treated as
    infinitely backlogged and therefore carry no state.
    """

    entries: tuple[tuple[str, str], ...]
    commodities: tuple[str, ...]
    saturated: tuple[tuple[str, str], ...] = ()

    @classmethod
    def of(cls, net: NetworkInstance, saturated: Sequence[tuple[str, str]] = ()) -> "StateLayout":
        sat = set(tuple(s) for s in saturated)
        entries = []
        for com in net.commodities:
            for n in net.commodity_nodes(com.id):
                if (n, com.id) not in sat:
                    entries.append((n, com.id))
        return cls(tuple(entries), tuple(c.id for c in net.commodities), tuple(sorted(sat)))

    def __len__(self):
        return len(self.entries)

    @property
    def index(self) -> dict[tuple[str, str], int]:
        return {e: i for i, e in enumerate(self.entries)}

    def blocks(self) -> dict[str, slice]:
        out = {}
        for cid in self.commodities:
            idx = [i for i, (_, c) in enumerate(self.entries) if c == cid]
            if idx:
                out[cid] = slice(idx[0], idx[-1] + 1)
        return out

    def labels(self) -> list[str]:
        return [f"q_{n}_{c}" for n, c in self.entries]

    def to_dict(self) -> dict:
        return {
            "states": [{"index": i, "node": n, "commodity": c} for i, (n, c) in enumerate(self.entries)],
            "saturated": [{"node": n, "commodity": c} for n, c in self.saturated],
        }


@dataclass(frozen=True)
class QueueState:
    q: np.ndarray
    t: float
    layout: StateLayout

    def __getitem__(self, key: tuple[str, str]) -> float:
        return float(self.q[self.layout.index[key]])


@dataclass
class FeasibleRegion:
    lower: np.ndarray
    upper: np.ndarray
    truncated: np.ndarray
    # (node, state indices, buffer) for shared finite buffers holding >1 commodity
    simplex: list[tuple[str, list[int], float]]
    layout: StateLayout
    cap: float

    @property
    def any_truncated(self) -> bool:
        return bool(self.truncated.any())

    def contains(self, q: np.ndarray, tol: float = 1e-9) -> bool:
        q = np.asarray(q, dtype=float)
        if np.any(q < self.lower - tol):
            return False
        hi = np.where(self.truncated, np.inf, self.upper)
        if np.any(q > hi + tol):
            return False
        return all(q[idx].sum() <= b + tol for _, idx, b in self.simplex)

    def to_dict(self) -> dict:
        return {
            "lower": self.lower.tolist(),
            "upper": self.upper.tolist(),
            "truncated": self.truncated.tolist(),
            "cap": self.cap,
            "simplex": [{"node": n, "indices": idx, "buffer": b} for n, idx, b in self.simplex],
        }


def state_upper_bounds(net: NetworkInstance, layout: StateLayout) -> np.ndarray:
    """Per-coordinate upper bounds with ``inf`` for unbounded buffers."""
    up = np.empty(len(layout))
    per = net.buffer_mode == PER_COMMODITY
    for i, (n, c) in enumerate(layout.entries):
        node = net.node(n)
        if is_unbounded(node.buffer):
            up[i] = np.inf
        elif per:
            up[i] = float(net.allocation(n, c))
        else:
            up[i] = float(node.buffer)
    return up


def feasible_box(net: NetworkInstance, cap: float = DEFAULT_CAP,
                 saturated: Sequence[tuple[str, str]] = ()) -> FeasibleRegion:
    """Box ``[0, b]`` per coordinate, with unbounded buffers truncated at ``cap``."""
    require_valid(net)
    layout = StateLayout.of(net, saturated)
    up = state_upper_bounds(net, layout)
    trunc = ~np.isfinite(up)
    upper = np.where(trunc, cap, up)
    simplex = []
    if net.buffer_mode == SHARED:
        by_node: dict[str, list[int]] = {}
        for i, (n, _) in enumerate(layout.entries):
            by_node.setdefault(n, []).append(i)
        for n, idx in by_node.items():
            node = net.node(n)
            if len(idx) > 1 and not is_unbounded(node.buffer):
                simplex.append((n, idx, float(node.buffer)))
    return FeasibleRegion(np.zeros(len(layout)), upper, trunc, simplex, layout, cap)


def sample_feasible(region: FeasibleRegion, count: int, rng: np.random.Generator,
                    method: str = "uniform", margin: float = 0.0) -> np.ndarray:
    """Random interior points of a feasible region.

    ``method`` is ``"uniform"`` or ``"lhs"``; points violating a shared-buffer
    constraint are scaled back onto ``(1 - margin)`` of that buffer.
    """
    n = len(region.lower)
    if method == "lhs":
        from scipy.stats import qmc

        u = qmc.LatinHypercube(d=n, seed=rng).random(count) if n else np.empty((count, 0))
    elif method == "uniform":
        u = rng.random((count, n))
    else:
        raise ValueError(f"unknown sampling method {method!r}")
    lo = region.lower + margin * (region.upper - region.lower)
    hi = region.upper - margin * (region.upper - region.lower)
    pts = lo + u * (hi - lo)
    for _, idx, b in region.simplex:
        tot = pts[:, idx].sum(axis=1)
        limit = b * (1 - max(margin, 1e-9))
        over = tot > limit
        if over.any():
            pts[np.ix_(over, idx)] *= (limit / tot[over])[:, None]
    return pts


class ConfigError(ValueError):
    """Malformed network configuration; ``location`` points at the bad field."""

    def __init__(self, location: str, message: str):
        super().__init__(f"{location}: {message}")
        self.location = location


def _parse_buffer(value, loc):
    if value is None or (isinstance(value, str) and value.lower() in ("inf", "infinity", "unbounded")):
        return UNBOUNDED
    try:
        v = float(value)
    except (TypeError, ValueError):
        raise ConfigError(loc, f"expected a number or 'inf', got {value!r}") from None
    return UNBOUNDED if math.isinf(v) else v


def _parse_schedule(value, loc):
    if isinstance(value, (int, float)):
        return constant(value)
    if isinstance(value, list) and value:
        segs = []
        for k, seg in enumerate(value):
            if isinstance(seg, Mapping):
                seg = (seg.get("t"), seg.get("rate"))
            if not (isinstance(seg, (list, tuple)) and len(seg) == 2):
                raise ConfigError(f"{loc}[{k}]", "schedule segments are [t_start, rate]")
            try:
                segs.append((float(seg[0]), float(seg[1])))
            except (TypeError, ValueError):
                raise ConfigError(f"{loc}[{k}]", "schedule entries must be numeric") from None
        segs.sort()
        return tuple(segs)
    raise ConfigError(loc, f"expected a rate or a schedule list, got {value!r}")


def network_from_config(cfg: Mapping) -> NetworkInstance:
    """Build a network from the ``network`` block of a run configuration."""
    if not isinstance(cfg, Mapping):
        raise ConfigError("network", "expected an object")
    nodes = []
    for k, nd in enumerate(cfg.get("nodes") or []):
        loc = f"network.nodes[{k}]"
        if not isinstance(nd, Mapping) or "id" not in nd:
            raise ConfigError(loc, "node needs an 'id'")
        eg = nd.get("egress_capacity", 0.0)
        if isinstance(eg, Mapping):
            try:
                eg = {str(c): float(v) for c, v in eg.items()}
            except (TypeError, ValueError):
                raise ConfigError(f"{loc}.egress_capacity", "rates must be numeric") from None
        else:
            try:
                eg = float(eg)
            except (TypeError, ValueError):
                raise ConfigError(f"{loc}.egress_capacity", f"expected a number, got {eg!r}") from None
        nodes.append(Node(str(nd["id"]), _parse_buffer(nd.get("buffer", "inf"), f"{loc}.buffer"), eg))
    if not nodes:
        raise ConfigError("network.nodes", "at least one node is required")
    links = []
    for k, ln in enumerate(cfg.get("links") or []):
        loc = f"network.links[{k}]"
        try:
            links.append(Link(str(ln["from"]), str(ln["to"]), float(ln["capacity"])))
        except (KeyError, TypeError, ValueError):
            raise ConfigError(loc, "links need 'from', 'to' and a numeric 'capacity'") from None
    coms = []
    for k, cd in enumerate(cfg.get("commodities") or []):
        loc = f"network.commodities[{k}]"
        if not isinstance(cd, Mapping) or "id" not in cd:
            raise ConfigError(loc, "commodity needs an 'id'")
        arr = {str(n): _parse_schedule(v, f"{loc}.arrivals.{n}") for n, v in (cd.get("arrivals") or {}).items()}
        mode = cd.get("buffer_mode", SHARED)
        alloc = cd.get("allocations")
        if alloc is not None:
            try:
                alloc = {str(n): float(v) for n, v in alloc.items()}
            except (AttributeError, TypeError, ValueError):
                raise ConfigError(f"{loc}.allocations", "expected a node -> size mapping") from None
        cn = cd.get("nodes")
        coms.append(CommoditySpec(str(cd["id"]), arr, mode, alloc, tuple(map(str, cn)) if cn else None))
    if not coms:
        raise ConfigError("network.commodities", "at least one commodity is required")
    return NetworkInstance(tuple(nodes), tuple(links), tuple(coms))


def network_to_config(net: NetworkInstance) -> dict:
    def buf(b):
        return "inf" if is_unbounded(b) else b

    def eg(e):
        return dict(e) if isinstance(e, Mapping) else e

    coms = []
    for c in net.commodities:
        d = {"id": c.id, "buffer_mode": c.buffer_mode,
             "arrivals": {n: [list(s) for s in sched] for n, sched in c.arrivals.items()}}
        if c.allocations:
            d["allocations"] = dict(c.allocations)
        if c.nodes:
            d["nodes"] = list(c.nodes)
        coms.append(d)
    return {
        "nodes": [{"id": n.id, "buffer": buf(n.buffer), "egress_capacity": eg(n.egress_capacity)} for n in net.nodes],
        "links": [{"from": ln.src, "to": ln.dst, "capacity": ln.capacity} for ln in net.links],
        "commodities": coms,
    }


def overloaded_sources(net: NetworkInstance) -> list[tuple[str, str]]:
    """Source queues of commodities whose arrivals exceed their total egress capacity.

    Such a commodity can never settle; its sources grow without bound and are
    treated as saturated when looking for an equilibrium of the rest.
    """
    out = []
    for com in net.commodities:
        cap = sum(net.node(n).egress_for(com.id) for n in net.commodity_nodes(com.id))
        if com.total_rate > cap:
            for n in com.arrivals:
                if com.stationary_rate(n) > 0 and is_unbounded(net.node(n).buffer):
                    out.append((n, com.id))
    return out
