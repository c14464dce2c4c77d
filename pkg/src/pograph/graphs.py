"""Oracle dependency graphs.

Nodes are 0-based integers. Each builder numbers nodes so that every ancestor
of ``t`` has a smaller index, which makes ``range(N)`` a topological order for
the built-in topologies. Ancestor sets are stored as Python integers used as
bitsets (bit ``s`` set means node ``s`` is an ancestor).

Depth counts nodes, not edges, on the longest directed path: ``path(T)`` has
depth ``T``.
"""
from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass
from graphlib import CycleError, TopologicalSorter
from typing import Iterable, Sequence

import numpy as np

from .errors import InvalidArgument, InvalidParameter


@dataclass(frozen=True)
class GraphParams:
    T: int
    M: int = 1
    K: int = 1
    tau: tuple[int, ...] | None = None

    def __post_init__(self):
        for name in ("T", "M", "K"):
            v = getattr(self, name)
            if not isinstance(v, (int, np.integer)) or v < 1:
                raise InvalidParameter(f"{name} must be a positive integer, got {v!r}")
        if self.tau is not None:
            if len(self.tau) != self.T:
                raise InvalidParameter(f"delay schedule has length {len(self.tau)}, expected T={self.T}")
            if any(int(s) < 1 for s in self.tau):
                raise InvalidParameter("delays must be positive integers")


def _bits_to_set(bits: int) -> frozenset[int]:
    out = []
    i = 0
    while bits:
        low = bits & -bits
        i = low.bit_length() - 1
        out.append(i)
        bits ^= low
    return frozenset(out)


class OracleGraph:
    """Immutable DAG of oracle queries with transitively closed ancestor sets."""

    def __init__(self, topology: str, params: GraphParams | None, ancestor_bits: Sequence[int],
                 node_depths: Sequence[int], best_parent: Sequence[int],
                 coords: Sequence[tuple], order: Sequence[int] | None = None,
                 edges: Sequence[tuple[int, int]] | None = None):
        self.topology = topology
        self.params = params
        self._anc = tuple(ancestor_bits)
        self._node_depth = tuple(node_depths)
        self._best_parent = tuple(best_parent)
        self.coords = tuple(coords)
        self._index = {c: i for i, c in enumerate(self.coords)}
        self._order = tuple(order) if order is not None else tuple(range(len(self._anc)))
        self.edges = tuple(edges) if edges is not None else None
        self._hashes = None

    # basic queries -----------------------------------------------------

    @property
    def node_count(self) -> int:
        return len(self._anc)

    def size(self) -> int:
        return len(self._anc)

    def depth(self) -> int:
        return max(self._node_depth) if self._node_depth else 0

    def node_depth(self, t: int) -> int:
        self._check(t)
        return self._node_depth[t]

    @property
    def node_depths(self) -> tuple[int, ...]:
        return self._node_depth

    def _check(self, t):
        if not isinstance(t, (int, np.integer)) or not 0 <= t < len(self._anc):
            raise InvalidArgument(f"node index {t!r} out of range [0, {len(self._anc)})")

    def ancestors(self, t: int) -> frozenset[int]:
        self._check(t)
        return _bits_to_set(self._anc[t])

    def ancestor_bits(self, t: int) -> int:
        return self._anc[t]

    def is_ancestor(self, s: int, t: int) -> bool:
        return bool((self._anc[t] >> s) & 1)

    def topological_order(self) -> tuple[int, ...]:
        return self._order

    def index(self, coord: tuple) -> int:
        try:
            return self._index[tuple(coord)]
        except KeyError:
            raise InvalidArgument(f"no node with coordinates {coord!r}") from None

    def visibility_hash(self, t: int) -> str:
        if self._hashes is None:
            self._hashes = tuple(
                hashlib.blake2b(b.to_bytes((b.bit_length() + 7) // 8 or 1, "little"), digest_size=8).hexdigest()
                for b in self._anc)
        return self._hashes[t]

    @property
    def label(self) -> dict:
        out = {"topology": self.topology}
        if self.params is not None:
            p = self.params
            out["T"] = p.T
            if self.topology in ("layer", "intermittent"):
                out["M"] = p.M
            if self.topology == "intermittent":
                out["K"] = p.K
            if self.topology == "delay":
                tau = p.tau
                out["tau"] = tau[0] if len(set(tau)) == 1 else list(tau)
        if self.edges is not None:
            out["edges"] = [list(e) for e in self.edges]
            out["nodes"] = self.node_count
        return out

    def longest_path(self) -> list[int]:
        """Node ids along one longest directed path, source first."""
        if not self._anc:
            return []
        end = max(range(len(self._anc)), key=lambda t: (self._node_depth[t], -t))
        path = [end]
        while self._best_parent[path[-1]] >= 0:
            path.append(self._best_parent[path[-1]])
        return path[::-1]

    def random_topological_order(self, rng: np.random.Generator) -> list[int]:
        """A uniformly chosen ready node at every step (Kahn's algorithm)."""
        n = len(self._anc)
        done = 0
        remaining = set(range(n))
        order = []
        while remaining:
            ready = sorted(t for t in remaining if self._anc[t] & ~done == 0)
            t = ready[int(rng.integers(len(ready)))]
            order.append(t)
            remaining.discard(t)
            done |= 1 << t
        return order

    def __eq__(self, other):
        return isinstance(other, OracleGraph) and self._anc == other._anc

    def __hash__(self):
        return hash(self._anc)

    def __repr__(self):
        return f"OracleGraph({self.label_str()}, N={self.size()}, D={self.depth()})"

    def label_str(self) -> str:
        lab = self.label
        parts = [f"{k}={v}" for k, v in lab.items() if k not in ("topology", "edges")]
        return lab["topology"] + ("(" + ",".join(parts) + ")" if parts else "")


def _from_parents(topology, params, parents, coords, order=None, edges=None):
    n = len(parents)
    order = list(range(n)) if order is None else list(order)
    anc = [0] * n
    depth = [0] * n
    best = [-1] * n
    for t in order:
        bits = 0
        d, b = 0, -1
        for p in parents[t]:
            bits |= anc[p] | (1 << p)
            if depth[p] > d or (depth[p] == d and p > b):
                d, b = depth[p], p
        anc[t] = bits
        depth[t] = d + 1
        best[t] = b
    return OracleGraph(topology, params, anc, depth, best, coords, order, edges)


def _posint(name, v):
    if isinstance(v, bool) or not isinstance(v, (int, np.integer)) or v < 1:
        raise InvalidParameter(f"{name} must be a positive integer, got {v!r}")
    return int(v)


def build_path(T: int) -> OracleGraph:
    T = _posint("T", T)
    anc = [(1 << t) - 1 for t in range(T)]
    return OracleGraph("path", GraphParams(T), anc, range(1, T + 1), range(-1, T - 1),
                       [(t,) for t in range(T)])


def build_layer(T: int, M: int) -> OracleGraph:
    T, M = _posint("T", T), _posint("M", M)
    anc, depth, best, coords = [], [], [], []
    for t in range(T):
        for i in range(M):
            anc.append((1 << (t * M)) - 1)
            depth.append(t + 1)
            best.append(t * M - 1 if t else -1)
            coords.append((t, i))
    return OracleGraph("layer", GraphParams(T, M=M), anc, depth, best, coords)


def build_delay(T: int, tau) -> OracleGraph:
    """Ancestors(t) = {s : s + tau_s <= t}; ``tau`` is an int or a length-T schedule."""
    T = _posint("T", T)
    if isinstance(tau, (int, np.integer)) and not isinstance(tau, bool):
        sched = (_posint("tau", tau),) * T
    else:
        sched = tuple(int(s) for s in tau)
        if len(sched) != T:
            raise InvalidParameter(f"delay schedule has length {len(sched)}, expected T={T}")
        if any(s < 1 for s in sched):
            raise InvalidParameter("delays must be positive integers")
    arrivals: dict[int, int] = {}
    for s, d in enumerate(sched):
        if s + d < T:
            arrivals[s + d] = arrivals.get(s + d, 0) | (1 << s)
    anc, depth, best = [], [], []
    bits = 0
    for t in range(T):
        bits |= arrivals.get(t, 0)
        anc.append(bits)
        # delay ancestor sets grow with t, so node depth is nondecreasing and the
        # deepest ancestor is the one with the largest index
        if bits:
            top = bits.bit_length() - 1
            depth.append(depth[top] + 1)
            best.append(top)
        else:
            depth.append(1)
            best.append(-1)
    return OracleGraph("delay", GraphParams(T, tau=sched), anc, depth, best, [(t,) for t in range(T)])


def build_intermittent(T: int, K: int, M: int) -> OracleGraph:
    """M chains of K nodes per round; the last node of every chain feeds every chain of the next round."""
    T, K, M = _posint("T", T), _posint("K", K), _posint("M", M)
    anc, depth, best, coords = [], [], [], []
    for t in range(T):
        prev_rounds = (1 << (t * M * K)) - 1
        for m in range(M):
            start = (t * M + m) * K
            for k in range(K):
                anc.append(prev_rounds | (((1 << k) - 1) << start))
                depth.append(t * K + k + 1)
                if k:
                    best.append(start + k - 1)
                else:
                    best.append(t * M * K - 1 if t else -1)
                coords.append((t, m, k))
    return OracleGraph("intermittent", GraphParams(T, M=M, K=K), anc, depth, best, coords)


def build_custom(edges: Iterable[Sequence[int]], nodes: int | None = None) -> OracleGraph:
    """Graph from a directed edge list ``(u, v)`` meaning u's answer is visible to v."""
    edges = [(int(u), int(v)) for u, v in edges]
    n = max((max(u, v) for u, v in edges), default=-1) + 1
    if nodes is not None:
        if nodes < n:
            raise InvalidParameter(f"edge list references node {n - 1} but nodes={nodes}")
        n = int(nodes)
    if n < 1:
        raise InvalidParameter("custom graph needs at least one node")
    if any(u < 0 or v < 0 for u, v in edges):
        raise InvalidParameter("node ids must be non-negative")
    if any(u == v for u, v in edges):
        raise InvalidParameter("self-loops make the graph cyclic")
    parents: list[list[int]] = [[] for _ in range(n)]
    for u, v in edges:
        parents[v].append(u)
    ts = TopologicalSorter({v: parents[v] for v in range(n)})
    try:
        order = list(ts.static_order())
    except CycleError as exc:
        raise InvalidParameter(f"edge list contains a cycle: {exc.args[1]}") from None
    return _from_parents("custom", None, parents, [(t,) for t in range(n)], order, sorted(set(edges)))


def depth(g: OracleGraph) -> int:
    return g.depth()


def size(g: OracleGraph) -> int:
    return g.size()


def ancestors(g: OracleGraph, t: int) -> frozenset[int]:
    return g.ancestors(t)


def graph_from_spec(spec: dict) -> OracleGraph:
    """Build a graph from a config mapping such as ``{"topology": "delay", "T": 64, "tau": 4}``."""
    topo = spec.get("topology")
    try:
        if topo == "path":
            return build_path(spec["T"])
        if topo == "layer":
            return build_layer(spec["T"], spec.get("M", 1))
        if topo == "delay":
            return build_delay(spec["T"], spec.get("tau", 1))
        if topo == "intermittent":
            return build_intermittent(spec["T"], spec.get("K", 1), spec.get("M", 1))
        if topo == "custom":
            return build_custom(spec["edges"], spec.get("nodes"))
    except KeyError as exc:
        raise InvalidParameter(f"graph spec missing field {exc.args[0]!r}") from None
    raise InvalidParameter(f"unknown topology {topo!r}")


def delay_depth_bound(T: int, tau: int) -> int:
    return math.ceil(T / tau)
