"""Single-origin, single-destination traffic DAG and its structural quantities."""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field
from typing import Iterable, Sequence


class NetworkError(ValueError):
    """Raised when a structural operation hits an invalid graph (e.g. a cycle)."""


@dataclass(frozen=True)
class Arc:
    id: str
    tail: str
    head: str


@dataclass
class ValidationReport:
    violations: list[str] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.violations

    def __bool__(self) -> bool:
        return self.ok

    def __str__(self) -> str:
        if self.ok:
            return "valid"
        return "; ".join(self.violations)


@dataclass(frozen=True)
class BetaNodeInfo:
    """The entropy-estimation node and the parallel-like route fan below it."""

    node: str
    outgoing_arcs: tuple[int, ...]
    unique_routes: tuple[tuple[int, ...], ...]
    arc_set: tuple[int, ...]

    @property
    def b_count(self) -> int:
        return len(self.arc_set)


class Network:
    """Immutable traffic DAG.

    Node and arc identifiers are opaque strings; internally every node and arc
    gets a dense index following input order, and all array-valued quantities
    (flows, tolls, latency coefficients) are indexed by arc position.

    Construction does not check the model assumptions; call :func:`validate`.
    """

    def __init__(
        self,
        nodes: Sequence[str],
        arcs: Iterable[Arc | tuple[str, str] | tuple[str, str, str]],
        origin: str,
        destination: str,
        inflow: float,
    ) -> None:
        self.nodes: tuple[str, ...] = tuple(str(n) for n in nodes)
        if len(set(self.nodes)) != len(self.nodes):
            raise NetworkError("duplicate node identifiers")
        parsed: list[Arc] = []
        for k, a in enumerate(arcs):
            if isinstance(a, Arc):
                parsed.append(a)
            elif len(a) == 2:
                parsed.append(Arc(f"a{k + 1}", str(a[0]), str(a[1])))
            else:
                parsed.append(Arc(str(a[0]), str(a[1]), str(a[2])))
        self.arcs: tuple[Arc, ...] = tuple(parsed)
        if len({a.id for a in self.arcs}) != len(self.arcs):
            raise NetworkError("duplicate arc identifiers")
        self.origin = str(origin)
        self.destination = str(destination)
        self.inflow = float(inflow)

        self.node_index = {n: i for i, n in enumerate(self.nodes)}
        for n in (self.origin, self.destination):
            if n not in self.node_index:
                raise NetworkError(f"unknown node {n!r}")
        for a in self.arcs:
            for n in (a.tail, a.head):
                if n not in self.node_index:
                    raise NetworkError(f"arc {a.id} references unknown node {n!r}")

        self.o = self.node_index[self.origin]
        self.d = self.node_index[self.destination]
        self.tails: tuple[int, ...] = tuple(self.node_index[a.tail] for a in self.arcs)
        self.heads: tuple[int, ...] = tuple(self.node_index[a.head] for a in self.arcs)
        out: list[list[int]] = [[] for _ in self.nodes]
        inc: list[list[int]] = [[] for _ in self.nodes]
        for k, (i, j) in enumerate(zip(self.tails, self.heads)):
            out[i].append(k)
            inc[j].append(k)
        self.out_arcs: tuple[tuple[int, ...], ...] = tuple(tuple(x) for x in out)
        self.in_arcs: tuple[tuple[int, ...], ...] = tuple(tuple(x) for x in inc)
        self._topo: tuple[int, ...] | None = None

    @property
    def n_nodes(self) -> int:
        return len(self.nodes)

    @property
    def n_arcs(self) -> int:
        return len(self.arcs)

    @property
    def arc_ids(self) -> list[str]:
        return [a.id for a in self.arcs]

    def arc_position(self, arc_id: str) -> int:
        for k, a in enumerate(self.arcs):
            if a.id == arc_id:
                return k
        raise KeyError(arc_id)

    def topo_indices(self) -> tuple[int, ...]:
        """Dense node indices in topological order (cached)."""
        if self._topo is None:
            self._topo = tuple(_kahn(self))
        return self._topo

    def __repr__(self) -> str:
        return (
            f"Network(nodes={len(self.nodes)}, arcs={len(self.arcs)}, "
            f"origin={self.origin!r}, destination={self.destination!r}, g_o={self.inflow})"
        )


def _kahn(net: Network) -> list[int]:
    # Origin is seeded first so that it leads the order whenever it is a source.
    indeg = [len(x) for x in net.in_arcs]
    ready = deque(sorted((i for i in range(net.n_nodes) if indeg[i] == 0), key=lambda i: (i != net.o, i)))
    order: list[int] = []
    while ready:
        i = ready.popleft()
        order.append(i)
        for k in net.out_arcs[i]:
            j = net.heads[k]
            indeg[j] -= 1
            if indeg[j] == 0:
                ready.append(j)
    if len(order) != net.n_nodes:
        raise NetworkError("graph contains a cycle")
    return order


def topological_order(net: Network) -> list[str]:
    """Node identifiers ordered so that every arc's tail precedes its head."""
    return [net.nodes[i] for i in net.topo_indices()]


def _has_cycle(net: Network) -> bool:
    try:
        _kahn(net)
    except NetworkError:
        return True
    return False


def _reachable(net: Network, start: int, forward: bool) -> set[int]:
    seen = {start}
    stack = [start]
    while stack:
        i = stack.pop()
        arcs = net.out_arcs[i] if forward else net.in_arcs[i]
        for k in arcs:
            j = net.heads[k] if forward else net.tails[k]
            if j not in seen:
                seen.add(j)
                stack.append(j)
    return seen


def route_counts(net: Network) -> list[int]:
    """Number of distinct routes from each node to the destination (DAG only)."""
    counts = [0] * net.n_nodes
    counts[net.d] = 1
    for i in reversed(net.topo_indices()):
        if i != net.d:
            counts[i] = sum(counts[net.heads[k]] for k in net.out_arcs[i])
    return counts


def validate(net: Network) -> ValidationReport:
    """Check the modelling assumptions; an empty report means the network is usable."""
    report = ValidationReport()
    v = report.violations
    if not net.inflow > 0:
        v.append(f"inflow g_o must be positive (got {net.inflow})")
    if net.n_arcs == 0:
        v.append("network has no arcs")
        return report
    if net.o == net.d:
        v.append("origin and destination coincide")

    sources = [net.nodes[i] for i in range(net.n_nodes) if not net.in_arcs[i]]
    sinks = [net.nodes[i] for i in range(net.n_nodes) if not net.out_arcs[i]]
    if net.in_arcs[net.o]:
        v.append(f"origin {net.origin!r} has incoming arcs")
    if net.out_arcs[net.d]:
        v.append(f"destination {net.destination!r} has outgoing arcs")
    extra_sources = [n for n in sources if n != net.origin]
    extra_sinks = [n for n in sinks if n != net.destination]
    if extra_sources:
        v.append(f"multiple origins: nodes without incoming arcs {extra_sources}")
    if extra_sinks:
        v.append(f"multiple destinations: nodes without outgoing arcs {extra_sinks}")

    if _has_cycle(net):
        v.append("graph contains a cycle")
        return report

    from_o = _reachable(net, net.o, forward=True)
    to_d = _reachable(net, net.d, forward=False)
    dead = [a.id for k, a in enumerate(net.arcs) if net.tails[k] not in from_o or net.heads[k] not in to_d]
    if dead:
        v.append(f"arcs not on any origin-destination route (unreachable): {dead}")
    n_routes = route_counts(net)[net.o]
    if n_routes < 2:
        v.append(f"fewer than two routes from origin to destination ({n_routes})")
    return report


def enumerate_routes(net: Network, start: int | None = None) -> list[tuple[int, ...]]:
    """All arc sequences from ``start`` (default: origin) to the destination.

    Exponential in general; meant for small networks and tests.
    """
    start = net.o if start is None else start
    routes: list[tuple[int, ...]] = []

    def walk(i: int, prefix: tuple[int, ...]) -> None:
        if i == net.d:
            routes.append(prefix)
            return
        for k in net.out_arcs[i]:
            walk(net.heads[k], prefix + (k,))

    walk(start, ())
    return routes


def arc_height(net: Network) -> tuple[list[int], int]:
    """Per-arc height m_a (arc count of the longest route from a to d) and m(G)."""
    m = [0] * net.n_arcs
    for i in reversed(net.topo_indices()):
        for k in net.out_arcs[i]:
            j = net.heads[k]
            m[k] = 1 + max((m[k2] for k2 in net.out_arcs[j]), default=0)
    return m, max(m, default=0)


def arc_depth(net: Network) -> tuple[list[int], int]:
    """Per-arc depth l_a (arc count of the longest route from o through a) and l(G)."""
    depth = [0] * net.n_arcs
    for i in net.topo_indices():
        for k in net.out_arcs[i]:
            depth[k] = 1 + max((depth[k2] for k2 in net.in_arcs[i]), default=0)
    return depth, max(depth, default=0)


def find_beta_node(net: Network) -> BetaNodeInfo:
    """Locate a branching node whose every successor has a single route to d.

    Among nodes with at least two outgoing arcs, pick the one whose longest
    route to the destination is shortest (ties: smallest dense index). Every
    node strictly downstream of it then has a shorter longest route, hence
    out-degree at most one, so each outgoing arc continues along a unique
    route.
    """
    m, _ = arc_height(net)
    best: tuple[int, int] | None = None
    for i in range(net.n_nodes):
        if len(net.out_arcs[i]) >= 2:
            h = max(m[k] for k in net.out_arcs[i])
            if best is None or h < best[0]:
                best = (h, i)
    if best is None:
        raise NetworkError("no node with two or more outgoing arcs")
    node = best[1]

    routes = []
    for k in net.out_arcs[node]:
        route = [k]
        j = net.heads[k]
        while j != net.d:
            nxt = net.out_arcs[j]
            if len(nxt) != 1:
                raise NetworkError(f"node {net.nodes[j]!r} below {net.nodes[node]!r} does not have a unique route")
            route.append(nxt[0])
            j = net.heads[nxt[0]]
        routes.append(tuple(route))
    arc_set = tuple(sorted({k for r in routes for k in r}))
    return BetaNodeInfo(
        node=net.nodes[node],
        outgoing_arcs=net.out_arcs[node],
        unique_routes=tuple(routes),
        arc_set=arc_set,
    )


def parallel_network(n_arcs: int, inflow: float, prefix: str = "i") -> Network:
    """``n_arcs`` parallel arcs from ``{prefix}1`` to ``{prefix}2``."""
    o, d = f"{prefix}1", f"{prefix}2"
    return Network([o, d], [(o, d)] * n_arcs, o, d, inflow)


def general_network(inflow: float) -> Network:
    """Complete DAG on four nodes (six arcs), arcs listed lexicographically."""
    nodes = ["i1", "i2", "i3", "i4"]
    arcs = [("i1", "i2"), ("i1", "i3"), ("i1", "i4"), ("i2", "i3"), ("i2", "i4"), ("i3", "i4")]
    return Network(nodes, arcs, "i1", "i4", inflow)
