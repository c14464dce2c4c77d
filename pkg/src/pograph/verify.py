"""Quick invariant suites behind ``pograph verify``."""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import algorithms as alg
from .errors import PographError
from .executor import check_compliance, execute
from .graphs import build_delay, build_intermittent, build_layer, build_path
from .instances import (LipschitzSmoothClass, MoreauInstance, QuadraticChainInstance, ZeroInstance,
                        sample_orthonormal_frame)
from .prox import prox_max_affine


@dataclass
class CheckResult:
    suite: str
    name: str
    ok: bool
    detail: str = ""


def _graphs(rng):
    for _ in range(10):
        T, K, M = (int(v) for v in rng.integers(1, 6, size=3))
        g = build_intermittent(T, K, M)
        yield "intermittent closed form", (g.depth(), g.size()) == (T * K, T * K * M), f"T={T} K={K} M={M}"
        lay = build_layer(T, M)
        yield "layer closed form", (lay.depth(), lay.size()) == (T, T * M), f"T={T} M={M}"
    for T in (1, 7, 40):
        g = build_path(T)
        yield "path closed form", (g.depth(), g.size()) == (T, T), f"T={T}"
        yield "delay tau=1 is path", build_delay(T, 1) == g, f"T={T}"
    for T, tau in ((30, 4), (50, 7)):
        g = build_delay(T, tau)
        yield "delay depth bound", g.depth() <= math.ceil(T / tau), f"T={T} tau={tau}"
        ok = all(g.ancestors(a) <= g.ancestors(t) for t in range(g.size()) for a in g.ancestors(t))
        yield "ancestor closure", ok, f"delay T={T} tau={tau}"


def _prox(rng):
    V = sample_orthonormal_frame(12, 4, 3)
    off = rng.uniform(0, 0.1, size=4)
    for _ in range(20):
        x, y = rng.normal(size=12), rng.normal(size=12)
        beta = float(rng.uniform(0.1, 10))
        px = prox_max_affine(V, off, 0.7, x, beta)
        py = prox_max_affine(V, off, 0.7, y, beta)
        yield "prox residual", px.residual <= 1e-10, f"{px.residual:.3g}"
        lhs = np.linalg.norm(px.point - py.point)
        yield "prox nonexpansive", lhs <= np.linalg.norm(x - y) * (1 + 1e-12), f"{lhs:.3g}"


def _instances(rng):
    inst = MoreauInstance(LipschitzSmoothClass(1.0, 50.0, 1.0), 3, 20, 1)
    for _ in range(10):
        x = rng.normal(size=20)
        x /= 2 * np.linalg.norm(x)
        g = inst.gradient(x, None)
        yield "moreau lipschitz", np.linalg.norm(g) <= inst.ell * (1 + 1e-6), f"{np.linalg.norm(g):.3g}"
        lo, hi = inst.value(x, None), inst.ftilde(x)
        yield "envelope sandwich", lo - 1e-12 <= hi <= lo + inst.ell**2 / (2 * inst.eta) + 1e-12, ""
    q = QuadraticChainInstance(2.0, 1.0, 5, 9, 0)
    yield "quadratic minimizer stationary", np.linalg.norm(q.grad_F(q.x_star)) <= 1e-10, ""


def _executor(rng):
    g = build_layer(4, 3)
    inst = QuadraticChainInstance(1.0, 1.0, 5, 8, 0, sigma=0.1)
    a = execute(g, alg.AMBSGD(), inst, seed=5)
    b = execute(g, alg.AMBSGD(), inst, seed=5, order=g.random_topological_order(rng))
    yield "order independence", a.hash() == b.hash(), ""
    for graph, prog in ((build_delay(12, 3), alg.SequentialSGD()), (build_layer(4, 3), alg.AMBSGD()),
                        (build_delay(12, 3), alg.DelayedSGD()), (build_delay(12, 3), alg.WaitAndCollect())):
        rep = check_compliance(graph, prog, inst, seed=1, probes=20)
        yield f"compliance {prog.name}", rep.ok, f"{len(rep.findings)} findings"
    d = build_delay(24, 2)
    w = execute(d, alg.WaitAndCollect(), inst, seed=3)
    m = execute(build_layer(6, 2), alg.AMBSGD(batch=2, rounds=6), inst, seed=3)
    yield "wait-and-collect equivalence", np.array_equal(w.estimate, m.estimate), ""
    z = execute(build_path(5), alg.SequentialSGD(), ZeroInstance(3), seed=0)
    yield "zero instance stays at origin", not np.any(z.estimate), ""


SUITES: dict[str, Callable] = {
    "graphs": _graphs,
    "prox": _prox,
    "instances": _instances,
    "executor": _executor,
}


def run_suites(names=None, seed: int = 0) -> list[CheckResult]:
    out = []
    for suite in names or SUITES:
        rng = np.random.default_rng(seed)
        try:
            for name, ok, detail in SUITES[suite](rng):
                out.append(CheckResult(suite, name, bool(ok), detail))
        except PographError as exc:
            out.append(CheckResult(suite, "suite raised", False, f"{type(exc).__name__}: {exc}"))
    return out
