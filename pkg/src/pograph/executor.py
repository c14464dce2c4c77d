"""Run node programs on oracle graphs under the ancestor-only visibility rule."""
from __future__ import annotations

import hashlib
import json
import math
import time
from dataclasses import dataclass, field
from typing import Any

import numpy as np

from .errors import (DomainViolation, InvalidArgument, InvalidParameter, InvalidQuery,
                     SchedulingError, UnsupportedOracle, VisibilityViolation)
from .graphs import OracleGraph
from .instances import Instance, LipschitzSmoothClass

_CHUNK = 256
_ORACLE_TAG = 1
_NODE_TAG = 2
_SHARED_TAG = 3


@dataclass(frozen=True)
class Query:
    """What a node asks the oracle.

    ``z`` is only honoured for active-query programs. ``state`` is a memo that
    descendants may read; it must be computable from the node's own ancestors.
    ``slot`` selects which entry of the run's z-stream answers the query
    (defaults to the node id). ``noop`` marks a charged query whose answer is
    ignored by the program.
    """
    x: np.ndarray
    beta: float | None = None
    z: Any = None
    state: Any = None
    slot: int | None = None
    noop: bool = False


@dataclass
class Record:
    node: int
    x: np.ndarray
    beta: float | None
    z: Any
    value: float
    grad: np.ndarray
    prox: np.ndarray | None
    state: Any
    slot: int
    noop: bool


@dataclass(frozen=True)
class ProblemInfo:
    """The part of an instance an algorithm is allowed to know up front."""
    dim: int
    lsc: LipschitzSmoothClass
    supports_prox: bool
    name: str


def problem_info(inst: Instance) -> ProblemInfo:
    return ProblemInfo(inst.dim, inst.lsc, inst.supports_prox, inst.name)


def _key_ints(key) -> tuple[int, ...]:
    if isinstance(key, (int, np.integer)):
        return (int(key),)
    digest = hashlib.blake2b(repr(key).encode(), digest_size=16).digest()
    return tuple(int.from_bytes(digest[i:i + 4], "little") for i in range(0, 16, 4))


class Randomness:
    """Seeded randomness for one run.

    Every stream is derived from (run seed, key) alone, so results never depend
    on evaluation order. ``oracle_z(slot)`` draws the oracle's z for a slot;
    ``node(t)`` is node t's private stream; ``shared(key)`` returns a fresh
    generator for the shared stream ``key`` (same key, same numbers);
    ``sample_z(key, n)`` lets an algorithm draw its own samples from the data
    distribution.
    """

    def __init__(self, seed: int, instance: Instance):
        self.seed = int(seed)
        self._inst = instance
        self._chunks: dict[int, list] = {}
        self._samples: dict = {}

    def _gen(self, *key) -> np.random.Generator:
        ss = np.random.SeedSequence(self.seed, spawn_key=key)
        return np.random.Generator(np.random.PCG64(ss))

    def oracle_z(self, slot: int):
        c, i = divmod(int(slot), _CHUNK)
        chunk = self._chunks.get(c)
        if chunk is None:
            chunk = self._inst.sample_z(self._gen(_ORACLE_TAG, c), _CHUNK)
            self._chunks[c] = chunk
        return chunk[i]

    def node(self, t: int) -> np.random.Generator:
        return self._gen(_NODE_TAG, int(t))

    def shared(self, key) -> np.random.Generator:
        return self._gen(_SHARED_TAG, *_key_ints(key))

    def sample_z(self, key, n: int) -> list:
        k = (key, n)
        if k not in self._samples:
            self._samples[k] = self._inst.sample_z(self._gen(_SHARED_TAG, 0, *_key_ints(key)), n)
        return self._samples[k]


class History:
    """Read access to the records a node is allowed to see."""

    __slots__ = ("_records", "_bits", "node")

    def __init__(self, records, bits: int, node):
        self._records = records
        self._bits = bits
        self.node = node

    def __getitem__(self, j: int) -> Record:
        if j < 0 or not (self._bits >> j) & 1:
            raise VisibilityViolation(self.node, j)
        return self._records[j]

    def __contains__(self, j) -> bool:
        return j >= 0 and bool((self._bits >> j) & 1)

    def __len__(self) -> int:
        return self._bits.bit_count()

    def nodes(self) -> list[int]:
        out, bits = [], self._bits
        while bits:
            low = bits & -bits
            out.append(low.bit_length() - 1)
            bits ^= low
        return out


class NodeProgram:
    """Base class for algorithms expressed as per-node query rules and an output rule.

    Subclasses implement ``_plan`` (validate the graph and precompute the
    schedule), ``query`` and ``output``. ``bind`` returns a configured copy, so
    one program object can be reused across graphs.
    """

    name = "program"
    oracle_mode = "stochastic"      # or "active"
    required_oracle = "gradient"    # or "prox"

    def bind(self, graph: OracleGraph, info: ProblemInfo) -> "NodeProgram":
        if self.required_oracle == "prox" and not info.supports_prox:
            raise UnsupportedOracle(f"{self.name} needs a prox oracle, which {info.name} lacks")
        bound = object.__new__(type(self))
        bound.__dict__.update(self.__dict__)
        bound.graph = graph
        bound.info = info
        bound._plan()
        return bound

    def _plan(self) -> None:
        pass

    def slot(self, t: int) -> int:
        return t

    def query(self, t: int, history: History, rand: Randomness) -> Query:
        raise NotImplementedError

    def output(self, history: History, rand: Randomness) -> np.ndarray:
        raise NotImplementedError

    def describe(self) -> dict:
        return {"algorithm": self.name}


@dataclass
class RunTrace:
    graph: OracleGraph
    records: list
    estimate: np.ndarray
    seed: int
    wall_time: float
    program: str
    instance: dict
    randomness: Randomness = field(repr=False)

    def visible_hash(self, t: int) -> str:
        return self.graph.visibility_hash(t)

    def queries(self) -> np.ndarray:
        return np.stack([r.x for r in self.records])

    def hash(self) -> str:
        h = hashlib.sha256()
        for r in self.records:
            h.update(str(r.node).encode())
            h.update(np.ascontiguousarray(r.x, dtype=float).tobytes())
            h.update(repr(r.beta).encode())
            h.update(_z_repr(r.z).encode())
            h.update(repr(float(r.value)).encode())
            h.update(np.ascontiguousarray(r.grad, dtype=float).tobytes())
            if r.prox is not None:
                h.update(np.ascontiguousarray(r.prox, dtype=float).tobytes())
        h.update(np.ascontiguousarray(self.estimate, dtype=float).tobytes())
        return h.hexdigest()

    def to_jsonl(self, path) -> None:
        with open(path, "w") as fh:
            for line in trace_lines(self):
                fh.write(line + "\n")


def _z_json(z):
    if z is None:
        return None
    if isinstance(z, np.ndarray):
        return [float(v) for v in z]
    if isinstance(z, (np.integer, int)):
        return int(z)
    if isinstance(z, (np.floating, float)):
        return float(z)
    return repr(z)


def _z_repr(z) -> str:
    return json.dumps(_z_json(z))


def trace_lines(trace: RunTrace):
    depths = trace.graph.node_depths
    for r in trace.records:
        yield json.dumps({"node": r.node, "depth": depths[r.node], "query": [float(v) for v in r.x],
                          "z": _z_json(r.z), "value": float(r.value),
                          "grad_norm": float(np.linalg.norm(r.grad))})


def _perturbed(rec: Record, rng: np.random.Generator) -> Record:
    return Record(rec.node, rec.x + rng.standard_normal(rec.x.shape), rec.beta, rec.z,
                  rec.value + float(rng.standard_normal()) + 1.0,
                  rec.grad + rng.standard_normal(rec.grad.shape),
                  None if rec.prox is None else rec.prox + rng.standard_normal(rec.prox.shape),
                  rec.state, rec.slot, rec.noop)


def _run(g: OracleGraph, bound: NodeProgram, inst: Instance, rand: Randomness, order,
         perturb=None, stop=None):
    n = g.size()
    records: list = [None] * n
    B = inst.lsc.B
    limit = (B * (1 + 1e-12) + 1e-12) ** 2
    active = bound.oracle_mode == "active"
    dim = inst.dim
    for t in order:
        q = bound.query(t, History(records, g.ancestor_bits(t), t), rand)
        x = q.x
        if x.shape != (dim,):
            raise InvalidQuery(f"node {t} queried a vector of shape {x.shape}, expected ({dim},)")
        if float(x @ x) > limit:
            raise DomainViolation(f"node {t} queried ||x|| = {math.sqrt(float(x @ x)):.6g} > B = {B}")
        slot = bound.slot(t) if q.slot is None else q.slot
        if active and q.z is not None:
            z = q.z
        else:
            z = rand.oracle_z(slot)
        prox_point = None
        if q.beta is not None:
            if not (q.beta > 0) or not math.isfinite(q.beta):
                raise InvalidQuery(f"node {t} requested a prox with beta = {q.beta!r}")
            res = inst.prox(x, q.beta, z)
            prox_point = res.point
        value, grad = inst.oracle(x, z)
        rec = Record(t, x, q.beta, z, value, grad, prox_point, q.state, slot, q.noop)
        if perturb is not None and t == perturb[0]:
            rec = _perturbed(rec, perturb[1])
        records[t] = rec
        if stop is not None and t == stop:
            break
    return records


def execute(g: OracleGraph, prog: NodeProgram, inst: Instance, seed: int = 0, order=None) -> RunTrace:
    """Evaluate every node in topological order and apply the output rule."""
    t0 = time.perf_counter()
    bound = prog.bind(g, problem_info(inst))
    n = g.size()
    slots = [bound.slot(t) for t in range(n)]
    if len(set(slots)) != n:
        raise SchedulingError(f"{bound.name} assigned the same oracle sample slot to two nodes")
    if order is None:
        order = g.topological_order()
    else:
        order = list(order)
        _check_order(g, order)
    rand = Randomness(seed, inst)
    records = _run(g, bound, inst, rand, order)
    est = np.asarray(bound.output(History(records, (1 << n) - 1, "output"), rand), dtype=float)
    return RunTrace(g, records, est, int(seed), time.perf_counter() - t0, bound.name, inst.describe(), rand)


def _check_order(g: OracleGraph, order):
    if sorted(order) != list(range(g.size())):
        raise InvalidArgument("evaluation order must be a permutation of the nodes")
    done = 0
    for t in order:
        if g.ancestor_bits(t) & ~done:
            raise InvalidArgument(f"order evaluates node {t} before one of its ancestors")
        done |= 1 << t


# ---------------------------------------------------------------------------
# compliance


@dataclass
class ComplianceReport:
    probes: int
    findings: list

    @property
    def ok(self) -> bool:
        return not self.findings


def _same_query(a: Record, b: Record) -> tuple[bool, float]:
    if a.x.shape != b.x.shape:
        return False, math.inf
    diff = float(np.max(np.abs(a.x - b.x))) if a.x.size else 0.0
    same = (a.x.tobytes() == b.x.tobytes() and a.beta == b.beta and a.slot == b.slot
            and _z_repr(a.z) == _z_repr(b.z) and a.noop == b.noop)
    return same, diff


def check_compliance(g: OracleGraph, prog: NodeProgram, inst: Instance, seed: int = 0,
                     probes: int = 100, probe_seed: int = 0) -> ComplianceReport:
    """Falsification test for the visibility rule.

    Each probe picks a node t and a record j that is evaluated before t but is
    not one of t's ancestors, replays the run with record j perturbed, and
    checks that t's query is bit-for-bit unchanged. This also catches programs
    that leak information through side channels the history guard cannot see.
    """
    if not isinstance(probes, (int, np.integer)) or probes < 1:
        raise InvalidParameter("probes must be a positive integer")
    bound = prog.bind(g, problem_info(inst))
    order = list(g.topological_order())
    findings = []
    try:
        base = _run(g, bound, inst, Randomness(seed, inst), order)
    except VisibilityViolation as exc:
        return ComplianceReport(0, [{"node": exc.node, "perturbed": exc.requested,
                                     "kind": "visibility-violation", "diff": None}])
    pos = {t: i for i, t in enumerate(order)}
    candidates = []
    for t in order:
        anc = g.ancestor_bits(t)
        js = [j for j in order[:pos[t]] if not (anc >> j) & 1]
        if js:
            candidates.append((t, js))
    if not candidates:
        return ComplianceReport(0, [])
    rng = np.random.default_rng(probe_seed)
    for _ in range(probes):
        t, js = candidates[int(rng.integers(len(candidates)))]
        j = js[int(rng.integers(len(js)))]
        try:
            rerun = _run(g, bound, inst, Randomness(seed, inst), order,
                         perturb=(j, np.random.default_rng(rng.integers(2**32))), stop=t)
        except VisibilityViolation as exc:
            findings.append({"node": exc.node, "perturbed": j, "kind": "visibility-violation", "diff": None})
            continue
        except Exception as exc:  # a perturbation that crashes node t is itself a dependence
            findings.append({"node": t, "perturbed": j, "kind": f"error: {exc}", "diff": None})
            continue
        same, diff = _same_query(base[t], rerun[t])
        if not same:
            findings.append({"node": t, "perturbed": j, "kind": "query-changed", "diff": diff})
    return ComplianceReport(probes, findings)


# ---------------------------------------------------------------------------
# progress diagnostic


@dataclass
class ProgressTrace:
    max_abs: np.ndarray     # depth x frame size
    threshold: float
    flags: np.ndarray       # bool, same shape; only cells with j >= t can be flagged

    @property
    def violations(self) -> int:
        return int(self.flags.sum())

    @property
    def candidate_cells(self) -> int:
        D, k = self.max_abs.shape
        t = np.arange(1, D + 1)[:, None]
        j = np.arange(1, k + 1)[None, :]
        return int((j >= t).sum())

    @property
    def flagged_fraction(self) -> float:
        c = self.candidate_cells
        return self.violations / c if c else 0.0


def measure_progress(trace: RunTrace, frame: np.ndarray, threshold: float) -> ProgressTrace:
    """Largest |<query, v_j>| per depth layer, flagging layer t, vector j >= t above threshold."""
    frame = np.asarray(frame, dtype=float)
    X = trace.queries()
    if frame.ndim != 2 or frame.shape[1] != X.shape[1]:
        raise InvalidArgument(f"frame shape {frame.shape} does not match query dimension {X.shape[1]}")
    depths = np.asarray(trace.graph.node_depths)
    D = trace.graph.depth()
    k = frame.shape[0]
    P = np.abs(X @ frame.T)
    M = np.zeros((D, k))
    np.maximum.at(M, depths - 1, P)
    t = np.arange(1, D + 1)[:, None]
    j = np.arange(1, k + 1)[None, :]
    flags = (j >= t) & (M > threshold)
    return ProgressTrace(M, float(threshold), flags)
