import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from oracles import brute_force_prox, enumerate_prox, prox_objective, simplex_project_bisection
from pograph.errors import ConvergenceFailure, InvalidParameter
from pograph.instances import sample_orthonormal_frame
from pograph.prox import moreau_grad, project_simplex, prox_max_affine, prox_smooth_numeric


def test_project_simplex_examples():
    assert np.allclose(project_simplex(np.array([0.2, 0.3, 0.5])), [0.2, 0.3, 0.5])
    assert np.allclose(project_simplex(np.array([2.0, 0.0, 0.0])), [1.0, 0.0, 0.0])
    assert np.allclose(project_simplex(np.array([1.0, 1.0])), [0.5, 0.5])


@settings(max_examples=100, deadline=None)
@given(arrays(np.float64, st.integers(1, 12), elements=st.floats(-5, 5)))
def test_project_simplex_matches_bisection(u):
    lam = project_simplex(u)
    assert lam.min() >= 0
    assert lam.sum() == pytest.approx(1.0, abs=1e-12)
    assert np.allclose(lam, simplex_project_bisection(u), atol=1e-9)


def test_origin_example_single_active_piece():
    # offsets 5 l^2 (r-1)/eta: piece 1 is strictly maximal at the prox point
    V = sample_orthonormal_frame(10, 4, 0)
    ell, eta = 0.5, 40.0
    beta = eta
    off = 5 * ell**2 * np.arange(4) / eta
    res = prox_max_affine(V, off, ell, np.zeros(10), beta)
    assert np.allclose(res.point, -(ell / beta) * V[0], atol=1e-15)
    assert res.active_set == (0,)
    pieces = ell * V @ res.point - off
    assert pieces[0] > pieces[1:].max()


@pytest.mark.parametrize("seed", range(8))
def test_prox_matches_enumeration(seed):
    rng = np.random.default_rng(seed)
    k = int(rng.integers(1, 7))
    m = k + int(rng.integers(0, 5))
    V = sample_orthonormal_frame(m, k, seed)
    off = rng.uniform(-0.2, 0.2, k)
    s, beta = rng.uniform(0.2, 2), rng.uniform(0.1, 10)
    x = rng.normal(size=m)
    res = prox_max_affine(V, off, s, x, beta)
    assert res.residual <= 1e-10
    assert np.allclose(res.point, enumerate_prox(V, off, s, x, beta), atol=1e-10)


def test_prox_matches_dual_brute_force():
    rng = np.random.default_rng(100)
    n = 8
    V = np.stack([sample_orthonormal_frame(8, 5, i) for i in range(n)])
    off = rng.uniform(0, 0.3, (n, 5))
    X, betas = rng.normal(size=(n, 8)), rng.uniform(0.5, 5, n)
    ref = brute_force_prox(V, off, 1.0, X, betas)
    for i in range(n):
        res = prox_max_affine(V[i], off[i], 1.0, X[i], betas[i])
        assert np.linalg.norm(res.point - ref[i]) <= 1e-6


def test_large_frame_is_exact():
    # no iterative fallback for many pieces; still exact
    rng = np.random.default_rng(7)
    V = sample_orthonormal_frame(60, 40, 7)
    off = rng.uniform(0, 0.01, 40)
    x = rng.normal(size=60) * 0.1
    res = prox_max_affine(V, off, 1.0, x, 2.0)
    assert res.residual <= 1e-10
    for _ in range(50):
        y = res.point + 1e-4 * rng.normal(size=60)
        assert prox_objective(V, off, 1.0, x, 2.0, y) >= res.objective - 1e-14


def test_nonorthonormal_frame_rejected():
    with pytest.raises(InvalidParameter):
        prox_max_affine(np.array([[1.0, 0.0], [1.0, 1.0]]), np.zeros(2), 1.0, np.zeros(2), 1.0)


@pytest.mark.parametrize("beta", [0.0, -1.0, np.inf, np.nan])
def test_bad_beta(beta):
    V = np.eye(2)
    with pytest.raises(InvalidParameter):
        prox_max_affine(V, np.zeros(2), 1.0, np.zeros(2), beta)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 10**6), st.floats(0.05, 20))
def test_nonexpansive_property(seed, beta):
    rng = np.random.default_rng(seed)
    V = sample_orthonormal_frame(6, 3, seed % 17)
    off = rng.uniform(0, 0.5, 3)
    x, y = rng.normal(size=6), rng.normal(size=6)
    px = prox_max_affine(V, off, 0.8, x, beta).point
    py = prox_max_affine(V, off, 0.8, y, beta).point
    assert np.linalg.norm(px - py) <= np.linalg.norm(x - y) * (1 + 1e-12) + 1e-15


def test_smooth_numeric_on_quadratic():
    # f(y) = 1/2 y^T A y: prox is (A + beta I)^{-1} beta x
    rng = np.random.default_rng(0)
    Q = rng.normal(size=(5, 5))
    A = Q @ Q.T
    x, beta = rng.normal(size=5), 0.7
    res = prox_smooth_numeric(lambda y: A @ y, np.linalg.eigvalsh(A).max(), x, beta,
                              value=lambda y: 0.5 * y @ A @ y)
    exact = np.linalg.solve(A + beta * np.eye(5), beta * x)
    assert np.allclose(res.point, exact, atol=1e-9)
    assert res.residual <= 1e-10 * max(1, beta * np.linalg.norm(x))


def test_smooth_numeric_iteration_cap():
    with pytest.raises(ConvergenceFailure) as info:
        prox_smooth_numeric(lambda y: 100.0 * y, 100.0, np.ones(3), 1e-3, tol=1e-14, max_iter=3)
    assert info.value.residual > 0


def test_moreau_grad_of_abs():
    # envelope of |y| with parameter beta: Huber; gradient clipped at 1
    def prox_abs(x, beta):
        from pograph.prox import ProxResult
        y = np.sign(x) * np.maximum(np.abs(x) - 1 / beta, 0)
        return ProxResult(y, float(np.abs(y).sum() + beta / 2 * ((y - x) @ (y - x))), 0.0)
    val, g = moreau_grad(prox_abs, np.array([3.0, 0.1]), 2.0)
    assert np.allclose(g, [1.0, 0.2])
    assert val == pytest.approx(3.0 - 0.25 + 2.0 * 0.01 / 2)
