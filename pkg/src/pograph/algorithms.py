"""Optimization algorithms written as node programs.

Each program decides, for every graph node, which point to query using only
the records of that node's ancestors. Iterates are kept in the B-ball by
projection.
"""
from __future__ import annotations

import math
import warnings
from dataclasses import dataclass
from typing import Callable

import numpy as np

from .errors import BudgetError, InvalidParameter, SchedulingError
from .executor import History, NodeProgram, ProblemInfo, Query, Randomness, RunTrace, problem_info


def project_ball(x: np.ndarray, B: float) -> np.ndarray:
    n2 = float(x @ x)
    if n2 > B * B:
        return x * (B / math.sqrt(n2))
    return x


def _resolve_step(step, default: float) -> Callable[[int], float]:
    """``step`` may be None/"auto" (default), a number, a callable of the step index, or {"scale": s}."""
    if step is None or step == "auto":
        value = default
    elif callable(step):
        return step
    elif isinstance(step, dict):
        value = default * float(step.get("scale", 1.0))
    else:
        value = float(step)
    if not (value > 0) or not math.isfinite(value):
        raise InvalidParameter(f"step size must be positive and finite, got {value!r}")
    return lambda t: value


def _zeros(dim):
    return np.zeros(dim)


# ---------------------------------------------------------------------------
# plain SGD along a path


class SequentialSGD(NodeProgram):
    """Projected SGD along a longest path of the graph; other nodes idle."""

    name = "sequential_sgd"

    def __init__(self, steps: int | None = None, step=None):
        self.steps = steps
        self.step = step

    def _plan(self):
        path = self.graph.longest_path()
        T = self.steps if self.steps is not None else len(path)
        if T < 1 or len(path) < T:
            raise SchedulingError(f"graph's longest path has {len(path)} nodes, need {T}")
        self.T = T
        self.chain = path[:T]
        self.pos = {t: i for i, t in enumerate(self.chain)}
        lsc = self.info.lsc
        self.eta = _resolve_step(self.step, lsc.B / (lsc.L * math.sqrt(T)))

    def _advance(self, rec, i):
        # iterate x_i from the record of the node that queried x_{i-1}
        return project_ball(rec.x - self.eta(i) * rec.grad, self.info.lsc.B)

    def query(self, t, history, rand):
        i = self.pos.get(t)
        if i is None:
            return Query(_zeros(self.info.dim), noop=True)
        if i == 0:
            return Query(_zeros(self.info.dim))
        return Query(self._advance(history[self.chain[i - 1]], i))

    def output(self, history, rand):
        xs = [history[t].x for t in self.chain[1:]]
        xs.append(self._advance(history[self.chain[-1]], self.T))
        return np.mean(np.stack(xs), axis=0)


# ---------------------------------------------------------------------------
# accelerated mini-batch SGD


@dataclass(frozen=True)
class AcceleratedSchedule:
    """alpha_t = 2/(t+1) and eta_t = scale * min{(t+1)/(4 beta), B (t+1) sqrt(b) / (2 sigma T^1.5)}.

    An infinite ``beta`` drops the first term and ``sigma = 0`` drops the second.
    ``alpha``/``eta`` overrides give constant schedules.
    """
    T: int
    b: int
    beta: float
    sigma: float
    B: float
    scale: float = 1.0
    alpha_const: float | None = None
    eta_const: float | None = None

    def __post_init__(self):
        if self.alpha_const is not None and not (0 < self.alpha_const <= 1):
            raise InvalidParameter("alpha must lie in (0, 1]")
        if self.eta_const is None and not math.isfinite(self.beta) and self.sigma == 0:
            raise InvalidParameter("step schedule needs a finite beta or a positive noise scale")

    @classmethod
    def default(cls, T, b, beta, L, B, noise=None, scale=1.0):
        return cls(T, b, float(beta), float(L if noise is None else noise), float(B), float(scale))

    def alpha(self, t: int) -> float:
        return self.alpha_const if self.alpha_const is not None else 2.0 / (t + 1)

    def eta(self, t: int) -> float:
        if self.eta_const is not None:
            return self.eta_const
        a = (t + 1) / (4.0 * self.beta) if math.isfinite(self.beta) else math.inf
        b = (self.B * (t + 1) * math.sqrt(self.b) / (2.0 * self.sigma * self.T**1.5)
             if self.sigma > 0 else math.inf)
        return self.scale * min(a, b)


def accelerated_update(x, y, grads, t, sched: AcceleratedSchedule, B):
    """One three-sequence step with batch-mean gradient taken at w_t."""
    g = np.mean(np.stack(grads), axis=0)
    a = sched.alpha(t)
    y1 = project_ball(y - sched.eta(t) * g, B)
    x1 = a * y1 + (1.0 - a) * x
    return x1, y1


class _RoundEngine(NodeProgram):
    """Shared machinery: ``rounds[r]`` lists the nodes querying the round-r point."""

    smoothing = None

    def _grad(self, rec):
        if self.smoothing is None:
            return rec.grad
        return self.smoothing * (rec.x - rec.prox)

    def _setup(self, rounds: list[list[int]], b: int, noise, schedule, beta):
        self.rounds = rounds
        self.node_round = {}
        for r, nodes in enumerate(rounds):
            for j, t in enumerate(nodes):
                self.node_round[t] = (r, j)
        R = len(rounds)
        self._noop_base = R * b
        self._b = b
        lsc = self.info.lsc
        if schedule is None:
            schedule = AcceleratedSchedule.default(max(R, 1), b, beta, lsc.L, lsc.B, noise)
        elif isinstance(schedule, dict):
            schedule = AcceleratedSchedule.default(max(R, 1), b, beta, lsc.L, lsc.B, noise,
                                                   scale=float(schedule.get("scale", 1.0)))
        self.schedule = schedule

    def slot(self, t):
        rj = self.node_round.get(t)
        if rj is None:
            return self._noop_base + t
        return rj[0] * self._b + rj[1]

    def _state_after(self, r, history):
        """(x, y) at the start of round r (0-based), computed from round r-1 records."""
        if r == 0:
            z = _zeros(self.info.dim)
            return z, z
        prev = self.rounds[r - 1]
        x, y = history[prev[0]].state
        grads = [self._grad(history[t]) for t in prev]
        return accelerated_update(x, y, grads, r, self.schedule, self.info.lsc.B)

    def query(self, t, history, rand):
        rj = self.node_round.get(t)
        if rj is None:
            return Query(_zeros(self.info.dim), noop=True)
        r = rj[0]
        x, y = self._state_after(r, history)
        a = self.schedule.alpha(r + 1)
        w = a * y + (1.0 - a) * x
        return Query(w, beta=self.smoothing, state=(x, y))

    def output(self, history, rand):
        x, _ = self._state_after(len(self.rounds), history)
        return x


def _graph_rounds(graph) -> list[list[int]]:
    topo = graph.topology
    p = graph.params
    if topo == "path":
        return [[t] for t in range(p.T)]
    if topo == "layer":
        return [list(range(t * p.M, (t + 1) * p.M)) for t in range(p.T)]
    if topo == "intermittent":
        w = p.M * p.K
        return [list(range(t * w, (t + 1) * w)) for t in range(p.T)]
    raise SchedulingError(f"graph topology {topo!r} has no synchronized rounds")


class AMBSGD(_RoundEngine):
    """Accelerated mini-batch SGD: b same-point queries per round, one update per round.

    The update is y_{t+1} = P(y_t - eta_t g_t), x_{t+1} = alpha_t y_{t+1} + (1 - alpha_t) x_t
    with the gradient batch taken at w_t = alpha_t y_t + (1 - alpha_t) x_t.
    """

    name = "amb_sgd"

    def __init__(self, rounds: int | None = None, batch: int | None = None, schedule=None, noise=None):
        self.rounds_req = rounds
        self.batch = batch
        self.schedule_req = schedule
        self.noise = noise

    def _beta(self):
        return self.info.lsc.H

    def _plan(self):
        groups = _graph_rounds(self.graph)
        T = self.rounds_req if self.rounds_req is not None else len(groups)
        if T > len(groups):
            raise SchedulingError(f"graph has {len(groups)} rounds, need {T}")
        width = min(len(g) for g in groups)
        b = self.batch if self.batch is not None else width
        if b < 1 or b > width:
            raise SchedulingError(f"batch {b} exceeds the {width} queries available per round")
        self.T = T
        self._setup([g[:b] for g in groups[:T]], b, self.noise, self.schedule_req, self._beta())


class SmoothedAMBSGD(AMBSGD):
    """A-MB-SGD on Moreau-envelope gradients beta (w - prox(w)), beta = min{L T, H}."""

    name = "smoothed_amb_sgd"
    required_oracle = "prox"

    def _beta(self):
        lsc = self.info.lsc
        T = self.rounds_req if self.rounds_req is not None else len(_graph_rounds(self.graph))
        self.smoothing = min(lsc.L * T, lsc.H)
        return self.smoothing

    @property
    def sandwich_gap(self) -> float:
        """Upper bound L^2 / (2 beta) on f - f_beta for an L-Lipschitz f."""
        return self.info.lsc.L**2 / (2.0 * self.smoothing)


class WaitAndCollect(_RoundEngine):
    """Accelerated SGD on a delay graph: per stage, tau queries at one point, then tau idle nodes.

    ``period`` is the stage length, 2 tau by default (``"2tau+1"`` for the
    longer variant).
    """

    name = "wait_and_collect"

    def __init__(self, tau: int | None = None, period="2tau", schedule=None, noise=None):
        self.tau = tau
        self.period = period
        self.schedule_req = schedule
        self.noise = noise

    def _plan(self):
        g = self.graph
        if g.topology != "delay" or len(set(g.params.tau)) != 1:
            raise SchedulingError("wait_and_collect needs a delay graph with constant delay")
        tau = g.params.tau[0]
        if self.tau is not None and self.tau != tau:
            raise SchedulingError(f"program delay {self.tau} differs from graph delay {tau}")
        if self.period not in ("2tau", "2tau+1", None):
            raise InvalidParameter(f"unknown stage period {self.period!r}")
        P = 2 * tau if self.period in ("2tau", None) else 2 * tau + 1
        S = g.params.T // P
        if S == 0:
            warnings.warn(f"delay {tau} leaves no complete stage in T={g.params.T}; output is the start point")
        self.T = S
        self.stage_period = P
        rounds = [[i * P + j for j in range(tau)] for i in range(S)]
        self._setup(rounds, tau, self.noise, self.schedule_req, self.info.lsc.H)


# ---------------------------------------------------------------------------
# delayed SGD


def _visible_prefix(bits: int) -> int:
    """Number of consecutive visible nodes 0, 1, 2, ..."""
    return ((~bits) & (bits + 1)).bit_length() - 1


class DelayedSGD(NodeProgram):
    """SGD whose gradients arrive late: node t queries the freshest iterate it can reconstruct."""

    name = "delayed_sgd"

    def __init__(self, step=None):
        self.step = step

    def _plan(self):
        g = self.graph
        if g.topology not in ("delay", "path"):
            raise SchedulingError("delayed_sgd needs a delay graph")
        T = g.size()
        lsc = self.info.lsc
        default = lsc.B / (lsc.L * math.sqrt(T))
        if math.isfinite(lsc.H):
            default = min(1.0 / (2.0 * lsc.H), default)
        self.T = T
        self.eta = _resolve_step(self.step, default)
        self.prefix = [_visible_prefix(g.ancestor_bits(t)) for t in range(T)]

    def _iterate(self, s, history):
        """x_s, the iterate after s updates (update k uses node k-1's gradient)."""
        if s == 0:
            return _zeros(self.info.dim)
        base = s - 1                      # node s-1 is visible whenever x_s is needed
        x = history[base].x               # x_{prefix[base]}
        B = self.info.lsc.B
        for k in range(self.prefix[base] + 1, s + 1):
            rec = history[k - 1]
            x = project_ball(x - self.eta(k) * rec.grad, B)
        return x

    def query(self, t, history, rand):
        return Query(self._iterate(self.prefix[t], history))

    def output(self, history, rand):
        B = self.info.lsc.B
        x = _zeros(self.info.dim)
        xs = []
        for k in range(1, self.T + 1):
            x = project_ball(x - self.eta(k) * history[k - 1].grad, B)
            xs.append(x)
        h = math.ceil(self.T / 2)
        return np.mean(np.stack(xs[-h:]), axis=0)


# ---------------------------------------------------------------------------
# local SGD with periodic averaging


class ParallelSGD(NodeProgram):
    """M machines take K projected SGD steps per round, then average their iterates."""

    name = "parallel_sgd"

    def __init__(self, step=None):
        self.step = step

    def _plan(self):
        g = self.graph
        if g.topology != "intermittent":
            raise SchedulingError("parallel_sgd needs an intermittent graph")
        p = g.params
        self.T, self.K, self.M = p.T, p.K, p.M
        lsc = self.info.lsc
        self.eta = _resolve_step(self.step, lsc.B / (lsc.L * math.sqrt(p.T * p.K)))

    def _id(self, t, m, k):
        return (t * self.M + m) * self.K + k

    def _step(self, rec, s):
        return project_ball(rec.x - self.eta(s) * rec.grad, self.info.lsc.B)

    def _round_start(self, t, history):
        if t == 0:
            return _zeros(self.info.dim)
        s = (t - 1) * self.K + self.K
        ends = [self._step(history[self._id(t - 1, m, self.K - 1)], s) for m in range(self.M)]
        return np.mean(np.stack(ends), axis=0)

    def query(self, node, history, rand):
        t, m, k = self.graph.coords[node]
        if k == 0:
            return Query(self._round_start(t, history))
        return Query(self._step(history[node - 1], t * self.K + k))

    def output(self, history, rand):
        return self._round_start(self.T, history)


# ---------------------------------------------------------------------------
# SVRG on the intermittent graph


def svrg_rounds_per_stage(n: int, K: int, M: int, I: int) -> int:
    return math.ceil(n / (K * M)) + math.ceil(I / K)


def _clamped_log(v):
    return max(1.0, math.log(v)) if v > 0 else 1.0


def svrg_default_n(T, K, M, L, H) -> int:
    lg = _clamped_log(M * K * T / L)
    n = min(K**2 * T**2 * L**2 / (H**2 * lg**2), M * K * T / lg)
    return max(1, int(n))


@dataclass(frozen=True)
class SvrgParams:
    n: int
    lam: float
    I: int
    S: int
    step: float

    def __post_init__(self):
        if self.n < 1 or self.I < 1 or self.S < 1:
            raise InvalidParameter("n, I and S must be >= 1")
        if not (self.lam > 0) or not (self.step > 0):
            raise InvalidParameter("lambda and step must be positive")


class SVRG(NodeProgram):
    """Variance-reduced SGD on a regularized empirical objective over n drawn samples.

    Each stage spends ceil(n/(KM)) rounds computing the full gradient at the
    anchor on all KM nodes, then ceil(I/K) rounds of inner steps on chain 0.
    """

    name = "svrg"
    oracle_mode = "active"

    def __init__(self, n=None, lam=None, I=None, step=None):
        self.n_req, self.lam_req, self.I_req, self.step_req = n, lam, I, step

    def _plan(self):
        g = self.graph
        if g.topology != "intermittent":
            raise SchedulingError("svrg needs an intermittent graph")
        p = g.params
        T, K, M = p.T, p.K, p.M
        L, H, B = self.info.lsc.L, self.info.lsc.H, self.info.lsc.B
        if not math.isfinite(H):
            raise InvalidParameter("svrg needs a finite smoothness constant")
        n = svrg_default_n(T, K, M, L, H) if self.n_req in (None, "auto") else int(self.n_req)
        lam = L / (math.sqrt(n) * B) if self.lam_req in (None, "auto") else float(self.lam_req)
        I = math.ceil((H + lam) / lam) if self.I_req in (None, "auto") else int(self.I_req)
        step = 1.0 / (10.0 * (H + lam)) if self.step_req in (None, "auto") else float(self.step_req)
        R1 = math.ceil(n / (K * M))
        R2 = math.ceil(I / K)
        S = T // (R1 + R2)
        if S < 1:
            raise BudgetError(f"svrg needs {R1} + {R2} = {R1 + R2} rounds per stage but the graph has T={T}",
                              {"full_gradient_rounds": R1, "inner_rounds": R2, "T": T})
        self.params = SvrgParams(n, lam, I, S, step)
        self.R1, self.R2 = R1, R2
        self.full_node = [[0] * n for _ in range(S)]
        self.inner_node = [[0] * I for _ in range(S)]
        self.role = {}
        R = R1 + R2
        for node, (t, m, k) in enumerate(g.coords):
            s, r = divmod(t, R)
            if s >= S:
                continue
            if r < R1:
                i = r * K * M + m * K + k
                if i < n:
                    self.full_node[s][i] = node
                    self.role[node] = ("full", s, i)
            elif m == 0:
                i = (r - R1) * K + k
                if i < I:
                    self.inner_node[s][i] = node
                    self.role[node] = ("inner", s, i)

    # shared randomness: the data set, inner sample indices, and stage output picks
    def _data(self, rand):
        return rand.sample_z("svrg-data", self.params.n)

    def _js(self, rand, s):
        return rand.shared(("svrg-j", s)).integers(self.params.n, size=self.params.I)

    def _pick(self, rand, s):
        return int(rand.shared(("svrg-pick", s)).integers(1, self.params.I + 1))

    def _inner_step(self, rec, s, i, history, rand):
        """x^{i+1} from the record of the node that queried x^i."""
        anchor, gbar = rec.state
        j = int(self._js(rand, s)[i])
        g_anchor = history[self.full_node[s][j]].grad
        lam = self.params.lam
        d = (rec.grad + lam * rec.x) - (g_anchor + lam * anchor) + gbar
        return project_ball(rec.x - self.params.step * d, self.info.lsc.B)

    def _stage_output(self, s, history, rand):
        if s < 0:
            return _zeros(self.info.dim)
        p = self._pick(rand, s)
        I = self.params.I
        if p < I:
            return history[self.inner_node[s][p]].x
        return self._inner_step(history[self.inner_node[s][I - 1]], s, I - 1, history, rand)

    def query(self, node, history, rand):
        role = self.role.get(node)
        if role is None:
            return Query(_zeros(self.info.dim), noop=True)
        kind, s, i = role
        data = self._data(rand)
        if kind == "full":
            return Query(self._stage_output(s - 1, history, rand), z=data[i])
        j = int(self._js(rand, s)[i])
        if i == 0:
            full = [history[t] for t in self.full_node[s]]
            anchor = full[0].x
            gbar = np.mean(np.stack([r.grad for r in full]), axis=0) + self.params.lam * anchor
            return Query(anchor, z=data[j], state=(anchor, gbar))
        prev = history[self.inner_node[s][i - 1]]
        return Query(self._inner_step(prev, s, i - 1, history, rand), z=data[j], state=prev.state)

    def output(self, history, rand):
        return self._stage_output(self.params.S - 1, history, rand)

    def stage_outputs(self, trace: RunTrace, instance) -> list[np.ndarray]:
        """Anchors x_0 = 0, x_1, ..., x_S reconstructed from a finished trace."""
        bound = self.bind(trace.graph, problem_info(instance))
        full = History(trace.records, (1 << trace.graph.size()) - 1, "output")
        return [bound._stage_output(s, full, trace.randomness) for s in range(-1, bound.params.S)]


# ---------------------------------------------------------------------------
# diagnostics and negative controls


class RandomQueryProgram(NodeProgram):
    """Queries independent uniform points of the B-ball; ignores every answer."""

    name = "random_query"

    def query(self, t, history, rand):
        rng = rand.node(t)
        d = rng.standard_normal(self.info.dim)
        r = self.info.lsc.B * rng.random() ** (1.0 / self.info.dim)
        return Query(d * (r / np.linalg.norm(d)))

    def output(self, history, rand):
        return _zeros(self.info.dim)


class PeekingProgram(NodeProgram):
    """Reads the record of node t + offset directly. Always a visibility violation."""

    name = "peeking"

    def __init__(self, offset: int = 1):
        self.offset = offset

    def query(self, t, history, rand):
        j = t + self.offset
        if 0 <= j < self.graph.size():
            rec = history[j]
            return Query(project_ball(rec.x - rec.grad, self.info.lsc.B))
        return Query(_zeros(self.info.dim))

    def output(self, history, rand):
        return _zeros(self.info.dim)


class LeakyProgram(NodeProgram):
    """SGD that reads the previously evaluated record through the history's private storage.

    This bypasses the guard, so strict execution does not catch it; on graphs
    with parallel nodes the record it reads is not an ancestor, which the
    compliance replay detects.
    """

    name = "leaky"

    def query(self, t, history, rand):
        prev = history._records[t - 1] if t > 0 else None
        if prev is None:
            return Query(_zeros(self.info.dim))
        return Query(project_ball(prev.x - 0.1 * prev.grad, self.info.lsc.B))

    def output(self, history, rand):
        return _zeros(self.info.dim)


# ---------------------------------------------------------------------------


PROGRAMS = {
    "sequential_sgd": SequentialSGD,
    "amb_sgd": AMBSGD,
    "smoothed_amb_sgd": SmoothedAMBSGD,
    "delayed_sgd": DelayedSGD,
    "wait_and_collect": WaitAndCollect,
    "parallel_sgd": ParallelSGD,
    "svrg": SVRG,
    "random_query": RandomQueryProgram,
}


def program_from_spec(spec: dict) -> NodeProgram:
    name = spec.get("algorithm")
    if name not in PROGRAMS:
        raise InvalidParameter(f"unknown algorithm {name!r}")
    p = {k: v for k, v in spec.items() if k != "algorithm"}
    if name == "sequential_sgd":
        return SequentialSGD(steps=p.get("steps"), step=p.get("step"))
    if name in ("amb_sgd", "smoothed_amb_sgd"):
        return PROGRAMS[name](rounds=p.get("rounds"), batch=p.get("batch"),
                              schedule=p.get("schedule"), noise=p.get("noise"))
    if name == "delayed_sgd":
        return DelayedSGD(step=p.get("step"))
    if name == "wait_and_collect":
        return WaitAndCollect(tau=p.get("tau"), period=p.get("period", "2tau"),
                              schedule=p.get("schedule"), noise=p.get("noise"))
    if name == "parallel_sgd":
        return ParallelSGD(step=p.get("step"))
    if name == "svrg":
        return SVRG(n=p.get("n"), lam=p.get("lambda"), I=p.get("I"), step=p.get("step"))
    return RandomQueryProgram()
