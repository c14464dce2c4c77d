"""Acceptance criteria, one test each, at their stated tolerances.

Every test records a single PASS/FAIL line (shown in the terminal summary).
Run alone with ``pytest tests/test_acceptance.py -v``.
"""
import json
import math
import subprocess
import sys
import time

import numpy as np
import pytest

from oracles import brute_force_prox, ols_slope, prox_objective, quadratic_chain_dense
from pograph.algorithms import (AMBSGD, SVRG, DelayedSGD, ParallelSGD, PeekingProgram, RandomQueryProgram,
                                SequentialSGD, SmoothedAMBSGD, WaitAndCollect, svrg_rounds_per_stage)
from pograph.executor import check_compliance, execute, measure_progress, problem_info
from pograph.graphs import build_delay, build_intermittent, build_layer, build_path
from pograph.harness import rows_to_csv, run, sweep
from pograph.instances import (ChainInstance, LipschitzSmoothClass, MoreauInstance, QuadraticChainInstance,
                               sample_orthonormal_frame)
from pograph.prox import prox_max_affine


def unit_ball(rng, m):
    x = rng.normal(size=m)
    return x / np.linalg.norm(x) * rng.uniform() ** (1 / m)


def test_c01_graph_closed_forms(report):
    t0 = time.perf_counter()
    rng = np.random.default_rng(1)
    bad = []
    for _ in range(20):
        T, K, M = (int(v) for v in rng.integers(1, 9, size=3))
        for name, g, want in [("path", build_path(T), (T, T)), ("layer", build_layer(T, M), (T, M * T)),
                              ("intermittent", build_intermittent(T, K, M), (T * K, T * K * M))]:
            if (g.depth(), g.size()) != want:
                bad.append((name, T, K, M))
    for _ in range(40):
        T, tau = int(rng.integers(1, 201)), int(rng.integers(1, 21))
        if build_delay(T, tau).depth() > math.ceil(T / tau):
            bad.append(("delay", T, tau))
    for T in (1, 7, 50, 200):
        p, d = build_path(T), build_delay(T, 1)
        if any(p.ancestor_bits(t) != d.ancestor_bits(t) for t in range(T)):
            bad.append(("tau=1", T))
    for T, M in [(1, 1), (3, 4), (6, 2), (9, 5)]:
        lay, inter = build_layer(T, M), build_intermittent(T, 1, M)
        same = inter.size() == lay.size() and all(
            inter.ancestor_bits(inter.index((t, m, 0))) == lay.ancestor_bits(lay.index((t, m)))
            and inter.index((t, m, 0)) == lay.index((t, m)) for t in range(T) for m in range(M))
        if not same:
            bad.append(("K=1", T, M))
    dt = time.perf_counter() - t0
    report(1, "graph closed forms", not bad and dt < 1, f"mismatches={bad} time={dt:.2f}s")


def test_c02_chain_closed_forms(report):
    # F(x*) is checked against the stated value exactly as written; see the project notes
    t0 = time.perf_counter()
    rng = np.random.default_rng(2)
    worst_grad, worst_val, worst_gap = 0.0, 0.0, math.inf
    for i in range(10):
        L, H, D = rng.uniform(0.5, 2.0), rng.uniform(1.0, 20.0), int(rng.integers(2, 9))
        inst = ChainInstance(LipschitzSmoothClass(L, H, 1.0), D, 2 * D + 4, i)
        fstar = inst.F(inst.x_star)
        worst_grad = max(worst_grad, float(np.linalg.norm(inst.grad_F(inst.x_star))))
        worst_val = max(worst_val, abs(fstar - (-inst.eta / (32 * D**2))))
        bound = min(L / (32 * D), H / (64 * D**2))
        for _ in range(100):
            u = np.zeros(2 * D)
            u[:D] = rng.normal(size=D)
            u[:D] *= rng.uniform() / np.linalg.norm(u[:D])
            u[D:] = rng.uniform(-inst.c / 2, inst.c / 2, D)
            x = u @ inst.V
            if np.linalg.norm(x) > 1:
                x /= np.linalg.norm(x)
            worst_gap = min(worst_gap, inst.F(x) - fstar - bound)
    dt = time.perf_counter() - t0
    ok = worst_grad <= 1e-8 and worst_val <= 1e-8 and worst_gap >= -1e-9 and dt < 5
    report(2, "chain closed forms", ok,
           f"max|grad F(x*)|={worst_grad:.1e} max|F(x*)+eta/(32D^2)|={worst_val:.3e} "
           f"min(gap-bound)={worst_gap:.3e} time={dt:.2f}s")


def test_c03_moreau_regularity(report):
    t0 = time.perf_counter()
    inst = MoreauInstance(LipschitzSmoothClass(1.0, 60.0, 1.0), 5, 20, 3)
    ell, eta = inst.ell, inst.eta
    rng = np.random.default_rng(3)
    fails = {"lipschitz": 0, "smooth": 0, "sandwich": 0, "fd": 0}
    for i in range(1000):
        x, y = unit_ball(rng, 20), unit_ball(rng, 20)
        fx, gx = inst.oracle(x)
        fy, gy = inst.oracle(y)
        if np.linalg.norm(gx) > ell * (1 + 1e-6):
            fails["lipschitz"] += 1
        if np.linalg.norm(gx - gy) > eta * np.linalg.norm(x - y) * (1 + 1e-6):
            fails["smooth"] += 1
        if fy > fx + gx @ (y - x) + eta / 2 * np.sum((y - x) ** 2) + 1e-6 * max(abs(fy), 1e-12):
            fails["smooth"] += 1
        ft = inst.ftilde(x)
        tol = 1e-6 * max(abs(fx), 1e-12)
        if not (fx - tol <= ft <= fx + ell**2 / (2 * eta) + tol):
            fails["sandwich"] += 1
        if i < 50:
            h = 1e-6
            fd = np.array([(inst.value(x + h * e) - inst.value(x - h * e)) / (2 * h) for e in np.eye(20)])
            if np.linalg.norm(fd - gx) > 1e-5 * max(np.linalg.norm(gx), 1e-12):
                fails["fd"] += 1
    dt = time.perf_counter() - t0
    report(3, "moreau regularity", not any(fails.values()) and dt < 30, f"failures={fails} time={dt:.2f}s")


def test_c04_prox_correctness(report):
    t0 = time.perf_counter()
    rng = np.random.default_rng(4)
    n, k, m = 50, 6, 10
    V = np.stack([sample_orthonormal_frame(m, k, 100 + i) for i in range(n)])
    off = rng.uniform(0, 0.5, (n, k))
    s = rng.uniform(0.3, 2.0, n)
    X = rng.normal(size=(n, m))
    betas = rng.uniform(0.5, 10.0, n)
    ref = brute_force_prox(V, off, s, X, betas)
    resid, agree, improved = 0.0, 0.0, 0
    for i in range(n):
        res = prox_max_affine(V[i], off[i], s[i], X[i], betas[i])
        resid = max(resid, res.residual)
        agree = max(agree, float(np.linalg.norm(res.point - ref[i])))
        for _ in range(20):
            y = res.point + 10.0 ** rng.uniform(-8, -1) * rng.normal(size=m)
            if prox_objective(V[i], off[i], s[i], X[i], betas[i], y) < res.objective - 1e-14:
                improved += 1
    expand = 0
    for j in range(200):
        Vj = sample_orthonormal_frame(m, k, j)
        oj, sj, bj = rng.uniform(0, 0.5, k), rng.uniform(0.3, 2.0), rng.uniform(0.05, 20.0)
        x, y = rng.normal(size=m), rng.normal(size=m)
        px = prox_max_affine(Vj, oj, sj, x, bj).point
        py = prox_max_affine(Vj, oj, sj, y, bj).point
        if np.linalg.norm(px - py) > np.linalg.norm(x - y) * (1 + 1e-12) + 1e-15:
            expand += 1
    dt = time.perf_counter() - t0
    ok = resid <= 1e-10 and agree <= 1e-6 and expand == 0 and improved == 0 and dt < 30
    report(4, "prox correctness", ok, f"residual={resid:.1e} brute-force gap={agree:.1e} "
           f"expansive pairs={expand} improving perturbations={improved} time={dt:.2f}s")


def test_c05_span_progress(report):
    t0 = time.perf_counter()
    inst = MoreauInstance(LipschitzSmoothClass(1.0, math.inf, 1.0), 6, 64, 0)
    g = build_path(6)
    tr = execute(g, SequentialSGD(), inst)
    worst = 0.0
    for r in tr.records:
        t = g.node_depth(r.node)
        coords = np.abs(inst.V @ r.x)
        worst = max(worst, float(coords[t:].max()))  # frame rows j > t (1-based)
    pt = measure_progress(tr, inst.frame, inst.progress_threshold)
    dt = time.perf_counter() - t0
    report(5, "span/progress invariant", worst <= 1e-10 and pt.violations == 0 and dt < 10,
           f"max|<x_t,v_j>| over j>t={worst:.1e} flags={pt.violations} time={dt:.2f}s")


def test_c06_statistical_rate(report):
    t0 = time.perf_counter()
    Ts = [2**k for k in range(6, 13)]
    cfg = {"graph": {"topology": "path", "T": Ts[0]}, "instance": {"instance": "coinflip"},
           "algorithm": {"algorithm": "sequential_sgd"}, "seeds": list(range(200))}
    series, _ = sweep(cfg, "T", Ts)
    means = [p[1] for p in series.points]
    above = all(mu >= 1.0 / (8 * math.sqrt(T)) for T, mu in zip(Ts, means))
    dt = time.perf_counter() - t0
    ok = above and -0.65 <= series.slope <= -0.35 and dt < 120
    report(6, "statistical rate", ok, f"slope={series.slope:.3f} CI=({series.slope_ci[0]:.3f}, "
           f"{series.slope_ci[1]:.3f}) all above LB/(8 sqrt T)={above} time={dt:.1f}s")


def test_c07_accelerated_rate(report):
    t0 = time.perf_counter()
    Ts = [16, 32, 64, 128, 256]
    base = {"instance": {"instance": "quadratic_chain", "H": 1.0, "sigma": 0.0}, "seeds": [0]}
    amb, _ = sweep({**base, "graph": {"topology": "layer", "T": 16, "M": 1},
                    "algorithm": {"algorithm": "amb_sgd", "noise": 0}}, "T", Ts)
    sgd, _ = sweep({**base, "graph": {"topology": "path", "T": 16},
                    "algorithm": {"algorithm": "sequential_sgd"}}, "T", Ts)
    assert amb.slope == pytest.approx(ols_slope(Ts, [p[1] for p in amb.points]), abs=1e-12)
    dt = time.perf_counter() - t0
    ok = amb.slope <= -1.5 and -1.3 <= sgd.slope <= -0.7 and dt < 120
    report(7, "accelerated rate", ok, f"amb_sgd slope={amb.slope:.3f} sgd slope={sgd.slope:.3f} time={dt:.1f}s")


def test_c08_wait_and_collect(report):
    t0 = time.perf_counter()
    inst = QuadraticChainInstance(2.0, 1.0, 6, 12, 0, sigma=0.4)
    w = execute(build_delay(96, 4), WaitAndCollect(), inst, seed=8)
    a = execute(build_layer(12, 4), AMBSGD(batch=4, rounds=12), inst, seed=8)
    wq = [r.x for r in w.records if not r.noop]
    aq = [r.x for r in a.records]
    same = (len(wq) == len(aq) == 48 and all(p.tobytes() == q.tobytes() for p, q in zip(wq, aq))
            and w.estimate.tobytes() == a.estimate.tobytes())
    dt = time.perf_counter() - t0
    report(8, "wait-and-collect equivalence", same and dt < 10,
           f"queries={len(wq)}/{len(aq)} byte-identical={same} time={dt:.2f}s")


def test_c09_svrg(report):
    t0 = time.perf_counter()
    rng = np.random.default_rng(9)
    inst0 = QuadraticChainInstance(1.0, 1.0, 4, 8, 0, sigma=0.1)
    acct = []
    for _ in range(10):
        n, K, M, I = (int(v) for v in rng.integers(1, 13, size=4))
        R = math.ceil(n / (K * M)) + math.ceil(I / K)
        b = SVRG(n=n, lam=0.1, I=I).bind(build_intermittent(3 * R, K, M), problem_info(inst0))
        acct.append(svrg_rounds_per_stage(n, K, M, I) == R and b.R1 + b.R2 == R and b.params.S == 3)
    lam, n, K, M = 0.1, 16, 4, 2
    ratios, solve_err = [], 0.0
    for s in range(10):
        inst = QuadraticChainInstance(1.0, 1.0, 4, 8, s, sigma=0.1)
        prog = SVRG(n=n, lam=lam)
        probe = prog.bind(build_intermittent(1000, K, M), problem_info(inst))
        kappa = (1.0 + lam) / lam
        R = probe.R1 + probe.R2
        tr = execute(build_intermittent(6 * R, K, M), prog, inst, seed=s)
        zs = tr.randomness.sample_z("svrg-data", n)
        xhat = inst.erm_minimizer(zs, reg=lam)
        Hm, bvec = quadratic_chain_dense(1.0, 4, inst.a0, inst.V, lam)
        solve_err = max(solve_err, float(np.abs(xhat - np.linalg.solve(Hm, bvec - 0.1 * np.mean(zs, axis=0))).max()))
        gaps = [inst.erm_value(x, zs, lam) - inst.erm_value(xhat, zs, lam) for x in prog.stage_outputs(tr, inst)]
        ratios += [gaps[i + 1] / gaps[i] for i in range(len(gaps) - 1) if gaps[i] > 0]
    med = float(np.median(ratios))
    dt = time.perf_counter() - t0
    ok = all(acct) and kappa <= 50 and med <= 0.9 and solve_err <= 1e-12 and dt < 120
    report(9, "svrg schedule and decrease", ok, f"accounting {sum(acct)}/10 kappa={kappa:.0f} "
           f"median stage ratio={med:.3f} erm solve err={solve_err:.1e} time={dt:.1f}s")


def test_c10_compliance(report):
    t0 = time.perf_counter()
    inst = QuadraticChainInstance(1.0, 1.0, 4, 8, 0, sigma=0.3)
    cases = [("sequential_sgd", build_delay(30, 3), SequentialSGD()),
             ("amb_sgd", build_layer(5, 3), AMBSGD()),
             ("smoothed_amb_sgd", build_layer(4, 3), SmoothedAMBSGD()),
             ("delayed_sgd", build_delay(30, 3), DelayedSGD()),
             ("wait_and_collect", build_delay(36, 3), WaitAndCollect()),
             ("parallel_sgd", build_intermittent(3, 3, 2), ParallelSGD()),
             ("svrg", build_intermittent(12, 3, 2), SVRG(n=6, lam=0.2, I=4)),
             ("random_query", build_layer(4, 3), RandomQueryProgram())]
    bad = []
    for name, g, prog in cases:
        rep = check_compliance(g, prog, inst, probes=100)
        if not rep.ok or rep.probes != 100:
            bad.append(name)
    cheat = check_compliance(build_layer(3, 2), PeekingProgram(), inst, probes=100)
    caught = bool(cheat.findings) and cheat.findings[0]["kind"] == "visibility-violation"
    dt = time.perf_counter() - t0
    report(10, "compliance", not bad and caught and dt < 10,
           f"{len(cases) - len(bad)}/{len(cases)} clean, cheating program caught={caught} time={dt:.1f}s")


def test_c11_determinism(report, tmp_path):
    cfg = {"graph": {"topology": "intermittent", "T": 4, "K": 2, "M": 2},
           "instance": {"instance": "quadratic_chain", "H": 2.0, "sigma": 0.5},
           "algorithm": {"algorithm": "parallel_sgd"}, "seeds": [0, 1, 2], "reps": 2}
    path = tmp_path / "cfg.json"
    path.write_text(json.dumps(cfg))
    outs = [subprocess.run([sys.executable, "-m", "pograph", "run", "-c", str(path)], capture_output=True,
                           check=True).stdout for _ in range(3)]
    same = len(set(outs)) == 1 and outs[0].decode() == rows_to_csv(run(cfg).rows)
    report(11, "determinism", same, f"{len(outs)} invocations, {len(outs[0])} bytes, identical={same}")
