"""Stochastic objectives f(x; z) with gradient and prox oracles.

Every instance exposes ``oracle(x, z) -> (value, gradient)``, ``prox(x, beta, z)``,
a z-sampler, and (when known) a closed-form population objective ``F`` with a
reference optimum.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.linalg import solve_banded

from .errors import InvalidParameter, UnsupportedInstance, UnsupportedOracle
from .prox import ProxResult, prox_max_affine, prox_smooth_numeric


@dataclass(frozen=True)
class LipschitzSmoothClass:
    L: float
    H: float = math.inf
    B: float = 1.0

    def __post_init__(self):
        if not (self.L > 0) or not math.isfinite(self.L):
            raise InvalidParameter(f"L must be positive and finite, got {self.L!r}")
        if not (self.B > 0) or not math.isfinite(self.B):
            raise InvalidParameter(f"B must be positive and finite, got {self.B!r}")
        if not (self.H > 0):
            raise InvalidParameter(f"H must be positive (or inf), got {self.H!r}")


def sample_orthonormal_frame(m: int, k: int, seed) -> np.ndarray:
    """k x m matrix with orthonormal rows, from a QR factorization of a seeded Gaussian matrix."""
    if k < 1 or m < 1:
        raise InvalidParameter("frame needs m, k >= 1")
    if k > m:
        raise InvalidParameter(f"cannot fit {k} orthonormal vectors in dimension {m}")
    rng = np.random.default_rng(seed)
    G = rng.standard_normal((m, k))
    Q, R = np.linalg.qr(G)
    # fix column signs so the factorization is unique (Haar distributed)
    Q = Q * np.sign(np.diag(R))
    return np.ascontiguousarray(Q.T)


class Instance:
    """Base class. Subclasses fill in the oracle and reference data."""

    name = "instance"
    deterministic = False
    supports_prox = True
    reference_is_bound = False

    def __init__(self, lsc: LipschitzSmoothClass, dim: int):
        self.lsc = lsc
        self.dim = int(dim)
        self.x_star: np.ndarray | None = None
        self.F_star: float | None = None
        self.frame: np.ndarray | None = None
        self.progress_threshold: float | None = None

    # oracle ------------------------------------------------------------

    def sample_z(self, rng: np.random.Generator, n: int) -> list:
        return [None] * n

    def oracle(self, x: np.ndarray, z) -> tuple[float, np.ndarray]:
        raise NotImplementedError

    def value(self, x, z=None) -> float:
        return self.oracle(np.asarray(x, dtype=float), z)[0]

    def gradient(self, x, z=None) -> np.ndarray:
        return self.oracle(np.asarray(x, dtype=float), z)[1]

    def prox(self, x, beta: float, z=None) -> ProxResult:
        raise UnsupportedOracle(f"{self.name} instance has no prox oracle")

    # population objective -------------------------------------------------

    has_closed_form = False

    def F(self, x) -> float:
        raise UnsupportedInstance(f"{self.name} instance has no closed-form objective")

    def describe(self) -> dict:
        return {"instance": self.name, "L": self.lsc.L, "H": self.lsc.H, "B": self.lsc.B, "m": self.dim}


# ---------------------------------------------------------------------------
# max-affine envelope


class MoreauInstance(Instance):
    """Moreau envelope (parameter eta) of ``max_r ell <v_r, x> - 5 ell^2 (r-1) / eta``."""

    name = "moreau"
    deterministic = True
    reference_is_bound = True
    has_closed_form = True

    def __init__(self, lsc: LipschitzSmoothClass, D: int, m: int, seed):
        if D < 1:
            raise InvalidParameter("D must be >= 1")
        if m < D + 1:
            raise InvalidParameter(f"need m >= D+1 = {D + 1}, got m={m}")
        super().__init__(lsc, m)
        self.D = int(D)
        scale = 10.0 * (D + 1) ** 1.5
        self.ell = min(lsc.L, lsc.H / scale)
        self.eta = scale * self.ell
        self.V = sample_orthonormal_frame(m, D + 1, seed)
        self.offsets = 5.0 * self.ell**2 * np.arange(D + 1) / self.eta
        self.frame = self.V
        self.progress_threshold = self.ell / self.eta
        self.x_ref = -self.V.sum(axis=0) / math.sqrt(D + 1) * lsc.B
        # reference upper bound on min F over the B-ball
        self.F_star = -self.ell * lsc.B / math.sqrt(D + 1)

    def ftilde(self, x) -> float:
        return float(np.max(self.ell * (self.V @ np.asarray(x, dtype=float)) - self.offsets))

    def prox_ftilde(self, x, beta) -> ProxResult:
        return prox_max_affine(self.V, self.offsets, self.ell, x, beta, check=False)

    def oracle(self, x, z=None):
        res = self.prox_ftilde(x, self.eta)
        return res.objective, self.eta * (x - res.point)

    def prox(self, x, beta, z=None) -> ProxResult:
        # prox of the envelope: the inner max-affine prox runs with parameter eta*beta/(eta+beta)
        x = np.asarray(x, dtype=float)
        inner = self.prox_ftilde(x, self.eta * beta / (self.eta + beta))
        y = (self.eta * inner.point + beta * x) / (self.eta + beta)
        fy, gy = self.oracle(y)
        d = y - x
        residual = float(np.linalg.norm(beta * (x - y) - gy))
        return ProxResult(y, fy + 0.5 * beta * float(d @ d), residual, inner.active_set)

    def F(self, x) -> float:
        return self.value(x)

    def describe(self):
        return {**super().describe(), "D": self.D}


def moreau_instance(lsc: LipschitzSmoothClass, D: int, m: int, seed) -> MoreauInstance:
    return MoreauInstance(lsc, D, m, seed)


# ---------------------------------------------------------------------------
# two-component chain


def _check_phi(c, gamma):
    if not (c > 0) or 2 * c > gamma:
        raise InvalidParameter(f"need 0 < 2c <= gamma, got c={c}, gamma={gamma}")


def phi(c: float, gamma: float, z):
    """Flat on [-c, c], then quadratic, then linear beyond gamma."""
    _check_phi(c, gamma)
    z = np.asarray(z, dtype=float)
    a = np.abs(z)
    out = np.where(a <= c, 0.0,
          np.where(a <= 2 * c, 2.0 * (a - c) ** 2,
          np.where(a <= gamma, z * z - 2.0 * c * c, 2.0 * gamma * a - gamma * gamma - 2.0 * c * c)))
    return out if out.ndim else float(out)


def phi_prime(c: float, gamma: float, z):
    _check_phi(c, gamma)
    z = np.asarray(z, dtype=float)
    a = np.abs(z)
    s = np.sign(z)
    out = np.where(a <= c, 0.0,
          np.where(a <= 2 * c, 4.0 * (a - c) * s,
          np.where(a <= gamma, 2.0 * z, 2.0 * gamma * s)))
    return out if out.ndim else float(out)


def _phi_fast(c, gamma, d):
    a = np.abs(d)
    return np.where(a <= c, 0.0,
           np.where(a <= 2 * c, 2.0 * (a - c) ** 2,
           np.where(a <= gamma, d * d - 2.0 * c * c, 2.0 * gamma * a - gamma * gamma - 2.0 * c * c)))


def _phi_prime_fast(c, gamma, d):
    a = np.abs(d)
    s = np.sign(d)
    return np.where(a <= c, 0.0,
           np.where(a <= 2 * c, 4.0 * (a - c) * s,
           np.where(a <= gamma, 2.0 * d, 2.0 * gamma * s)))


class ChainInstance(Instance):
    """Two components z in {1, 2}, each coupling alternate pairs of frame coordinates.

    With u = V x (length 2D, 0-based):
      f(x;1) = eta/8 (-2a u_0 + phi(u_{2D-1}) + sum_i phi(u_{2i-1} - u_{2i}))   i = 1..D-1
      f(x;2) = eta/8 sum_i phi(u_{2i} - u_{2i+1})                            i = 0..D-1
    """

    name = "chain"
    has_closed_form = True

    def __init__(self, lsc: LipschitzSmoothClass, D: int, m: int, seed):
        if D < 1:
            raise InvalidParameter("D must be >= 1")
        if m < 2 * D:
            raise InvalidParameter(f"need m >= 2D = {2 * D}, got m={m}")
        eta = min(lsc.H, 2.0 * lsc.L * D)
        if not math.isfinite(eta):
            raise InvalidParameter("smoothing constant min(H, 2LD) must be finite")
        super().__init__(lsc, m)
        self.D = int(D)
        self.eta = eta
        self.gamma = 4.0 * lsc.L / (eta * math.sqrt(2.0 * D))
        self.a = 1.0 / math.sqrt(8.0 * D**3)
        self.c = self.a / 2.0
        self.V = sample_orthonormal_frame(m, 2 * D, seed)
        self.frame = self.V
        self.progress_threshold = self.c / 2.0
        self.u_star = self.a * np.arange(2 * D, 0, -1, dtype=float)
        self.x_star = self.u_star @ self.V
        self._odd = np.arange(1, 2 * D - 1, 2)   # pairs (1,2), (3,4), ... for z=1
        self._even = np.arange(0, 2 * D, 2)      # pairs (0,1), (2,3), ... for z=2
        self.F_star = self.F(self.x_star)

    def sample_z(self, rng, n):
        return list(rng.integers(1, 3, size=n))

    def _pairs(self, z):
        return self._odd if z == 1 else self._even

    def value_u(self, u, z) -> float:
        idx = self._pairs(z)
        d = u[idx] - u[idx + 1]
        total = float(np.sum(_phi_fast(self.c, self.gamma, d)))
        if z == 1:
            total += -2.0 * self.a * u[0] + float(_phi_fast(self.c, self.gamma, u[-1]))
        return self.eta / 8.0 * total

    def grad_u(self, u, z) -> np.ndarray:
        idx = self._pairs(z)
        g = np.zeros_like(u)
        p = _phi_prime_fast(self.c, self.gamma, u[idx] - u[idx + 1])
        g[idx] += p
        g[idx + 1] -= p
        if z == 1:
            g[0] -= 2.0 * self.a
            g[-1] += float(_phi_prime_fast(self.c, self.gamma, u[-1]))
        return self.eta / 8.0 * g

    def oracle(self, x, z):
        z = int(z)
        if z not in (1, 2):
            raise InvalidParameter(f"chain instance component must be 1 or 2, got {z}")
        u = self.V @ x
        return self.value_u(u, z), self.grad_u(u, z) @ self.V

    def prox(self, x, beta, z=None, tol=None) -> ProxResult:
        z = int(z)
        x = np.asarray(x, dtype=float)
        ux = self.V @ x
        if tol is None:
            tol = 1e-10 * max(1.0, beta * float(np.linalg.norm(x)))
        res = prox_smooth_numeric(lambda u: self.grad_u(u, z), self.eta, ux, beta, tol=tol,
                                  value=lambda u: self.value_u(u, z))
        y = x + (res.point - ux) @ self.V
        return ProxResult(y, res.objective, res.residual, None, res.iterations)

    def F(self, x) -> float:
        u = self.V @ np.asarray(x, dtype=float)
        return 0.5 * (self.value_u(u, 1) + self.value_u(u, 2))

    def grad_F(self, x) -> np.ndarray:
        u = self.V @ np.asarray(x, dtype=float)
        return 0.5 * (self.grad_u(u, 1) + self.grad_u(u, 2)) @ self.V

    def describe(self):
        return {**super().describe(), "D": self.D}


def chain_instance(lsc: LipschitzSmoothClass, D: int, m: int, seed) -> ChainInstance:
    return ChainInstance(lsc, D, m, seed)


# ---------------------------------------------------------------------------
# biased coin


class CoinFlipInstance(Instance):
    """f(x; z) = z L x on [-B, B] with P(z = +1) = p, a coin biased by eps = 1/(2 sqrt(N))."""

    name = "coinflip"
    has_closed_form = True

    def __init__(self, L: float, B: float, N: int, seed):
        if N < 1:
            raise InvalidParameter("oracle budget N must be >= 1")
        super().__init__(LipschitzSmoothClass(L, math.inf, B), 1)
        self.N = int(N)
        self.eps = 1.0 / (2.0 * math.sqrt(N))
        sign = 1 if np.random.default_rng(seed).integers(2) else -1
        self.sign = sign
        self.p = (1.0 + sign * self.eps) / 2.0
        self.x_star = np.array([-B * sign], dtype=float)
        self.F_star = -L * B * self.eps

    def sample_z(self, rng, n):
        return list(np.where(rng.random(n) < self.p, 1, -1))

    def oracle(self, x, z):
        L = self.lsc.L
        return float(z * L * x[0]), np.array([z * L], dtype=float)

    def prox(self, x, beta, z=None):
        x = np.asarray(x, dtype=float)
        y = x - z * self.lsc.L / beta
        return ProxResult(y, float(z * self.lsc.L * y[0]) + 0.5 * beta * float((y - x) @ (y - x)), 0.0)

    def F(self, x) -> float:
        return (2.0 * self.p - 1.0) * self.lsc.L * float(np.asarray(x, dtype=float)[0])

    def describe(self):
        return {**super().describe(), "N": self.N}


def coinflip_instance(L: float, B: float, N: int, seed) -> CoinFlipInstance:
    return CoinFlipInstance(L, B, N, seed)


# ---------------------------------------------------------------------------
# smooth quadratic chain


class QuadraticChainInstance(Instance):
    """F(x) = H/8 [u_1^2 + sum_r (u_r - u_{r+1})^2 - 2 a0 u_1] with u = V x.

    The minimizer is ``a0 * sum_r v_r``. By default ``a0`` is chosen so that the
    minimizer has norm B/2. ``sigma > 0`` adds Gaussian noise: f(x; z) = F(x) + sigma <z, x>
    with z standard normal in R^m.
    """

    name = "quadratic_chain"
    has_closed_form = True

    def __init__(self, H: float, B: float, D: int, m: int, seed, a0: float | None = None,
                 sigma: float = 0.0, lam: float = 0.0):
        if D < 1:
            raise InvalidParameter("D must be >= 1")
        if m < D:
            raise InvalidParameter(f"need m >= D = {D}, got m={m}")
        if not (H > 0) or not math.isfinite(H):
            raise InvalidParameter("quadratic chain needs finite H > 0")
        if sigma < 0 or lam < 0:
            raise InvalidParameter("sigma and lam must be non-negative")
        self.D = int(D)
        self.H = float(H)
        self.a0 = B / (2.0 * math.sqrt(D)) if a0 is None else float(a0)
        self.sigma = float(sigma)
        self.lam = float(lam)
        self.V = sample_orthonormal_frame(m, D, seed)
        # frame-coordinate Hessian H/4 * A + lam I, A tridiagonal with diag (2,...,2,1) and -1 off diagonal
        diag = np.full(D, 2.0)
        diag[-1] = 1.0
        self._diag = self.H / 4.0 * diag
        self._off = -self.H / 4.0
        self._b = np.zeros(D)
        self._b[0] = self.H / 4.0 * self.a0
        u_star = self._solve(0.0, self._b)
        x_star = u_star @ self.V
        L = (self.H + self.lam) * (B + float(np.linalg.norm(x_star))) + self.sigma * math.sqrt(m)
        super().__init__(LipschitzSmoothClass(L, self.H + self.lam, B), m)
        self.x_star = x_star
        self.F_star = self.F(x_star)
        self.frame = self.V
        self.deterministic = sigma == 0.0

    def _solve(self, shift, rhs):
        D = self.D
        ab = np.zeros((3, D))
        ab[0, 1:] = self._off
        ab[1] = self._diag + self.lam + shift
        ab[2, :-1] = self._off
        return solve_banded((1, 1), ab, rhs)

    def _hess_u(self, u):
        out = self._diag * u
        out[:-1] += self._off * u[1:]
        out[1:] += self._off * u[:-1]
        return out

    def sample_z(self, rng, n):
        if self.sigma == 0.0:
            return [None] * n
        return list(rng.standard_normal((n, self.dim)))

    def F(self, x) -> float:
        x = np.asarray(x, dtype=float)
        u = self.V @ x
        xx = float(x @ x)
        return 0.5 * float(u @ self._hess_u(u)) - float(self._b @ u) + 0.5 * self.lam * xx

    def grad_F(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        u = self.V @ x
        return (self._hess_u(u) - self._b) @ self.V + self.lam * x

    def oracle(self, x, z=None):
        x = np.asarray(x, dtype=float)
        u = self.V @ x
        hu = self._hess_u(u)
        val = 0.5 * float(u @ hu) - float(self._b @ u)
        g = (hu - self._b) @ self.V
        if self.lam:
            val += 0.5 * self.lam * float(x @ x)
            g = g + self.lam * x
        if z is not None and self.sigma:
            val += self.sigma * float(z @ x)
            g = g + self.sigma * z
        return val, g

    def prox(self, x, beta, z=None) -> ProxResult:
        x = np.asarray(x, dtype=float)
        shift = np.zeros_like(x) if (z is None or not self.sigma) else self.sigma * z
        # the prox of a quadratic: solve (Hess + beta I) y = beta x + b - noise in frame coordinates
        ux = self.V @ x
        us = self.V @ shift
        x_perp = x - ux @ self.V
        s_perp = shift - us @ self.V
        u = self._solve(beta, beta * ux + self._b - us)
        y = (beta * x_perp - s_perp) / (beta + self.lam) + u @ self.V
        val, g = self.oracle(y, z)
        d = y - x
        return ProxResult(y, val + 0.5 * beta * float(d @ d), float(np.linalg.norm(g + beta * d)))

    def erm_minimizer(self, zs, reg: float = 0.0) -> np.ndarray:
        """Exact minimizer of mean_i f(.; z_i) + reg/2 |x|^2 by a direct linear solve."""
        m = self.dim
        hess = self.V.T @ (self._tridiag() @ self.V) + (self.lam + reg) * np.eye(m)
        rhs = self._b @ self.V
        if self.sigma and zs is not None and zs[0] is not None:
            rhs = rhs - self.sigma * np.mean(np.stack(zs), axis=0)
        return np.linalg.solve(hess, rhs)

    def erm_value(self, x, zs, reg: float = 0.0) -> float:
        x = np.asarray(x, dtype=float)
        val = self.F(x) + 0.5 * reg * float(x @ x)
        if self.sigma and zs is not None and zs[0] is not None:
            val += self.sigma * float(np.mean(np.stack(zs), axis=0) @ x)
        return val

    def _tridiag(self):
        A = np.diag(self._diag)
        idx = np.arange(self.D - 1)
        A[idx, idx + 1] = self._off
        A[idx + 1, idx] = self._off
        return A

    def describe(self):
        return {**super().describe(), "D": self.D, "H": self.H}


def quadratic_chain_instance(H: float, B: float, D: int, m: int, seed, a0: float | None = None,
                             sigma: float = 0.0, lam: float = 0.0) -> QuadraticChainInstance:
    return QuadraticChainInstance(H, B, D, m, seed, a0=a0, sigma=sigma, lam=lam)


class ZeroInstance(Instance):
    """f(x; z) = 0. Useful as a null benchmark."""

    name = "zero"
    deterministic = True
    has_closed_form = True

    def __init__(self, m: int = 1, B: float = 1.0):
        super().__init__(LipschitzSmoothClass(1.0, math.inf, B), m)
        self.x_star = np.zeros(m)
        self.F_star = 0.0

    def oracle(self, x, z=None):
        return 0.0, np.zeros_like(np.asarray(x, dtype=float))

    def prox(self, x, beta, z=None):
        return ProxResult(np.array(x, dtype=float), 0.0, 0.0)

    def F(self, x):
        return 0.0


# ---------------------------------------------------------------------------


def true_suboptimality(instance: Instance, x, reps: int = 1, seed=0) -> tuple[float, float]:
    """Return (E_z f(x; z) - F_star, standard error).

    Uses the closed-form objective when available (``reps`` is then ignored and
    the error is 0). For instances whose reference is only an upper bound on the
    minimum, the gap is measured against that bound.
    """
    if reps < 1:
        raise InvalidParameter("reps must be >= 1")
    if instance.F_star is None:
        raise UnsupportedInstance(f"{instance.name} has no reference optimum")
    x = np.asarray(x, dtype=float)
    if instance.has_closed_form:
        return float(instance.F(x) - instance.F_star), 0.0
    rng = np.random.default_rng(seed)
    vals = np.array([instance.oracle(x, z)[0] for z in instance.sample_z(rng, reps)])
    se = float(vals.std(ddof=1) / math.sqrt(reps)) if reps > 1 else 0.0
    return float(vals.mean() - instance.F_star), se


def instance_from_spec(spec: dict, graph=None) -> Instance:
    """Build an instance from a config mapping.

    ``"auto"`` values resolve from the graph: the coin budget N is the graph
    size, and the quadratic chain length D is 2T+1 for a T-round graph.
    """
    kind = spec.get("instance")
    p = dict(spec)

    def need(key):
        if key not in p:
            raise InvalidParameter(f"instance spec missing field {key!r}")
        return p[key]

    seed = p.get("seed", 0)
    L = float(p.get("L", 1.0))
    H = float(p.get("H", math.inf))
    B = float(p.get("B", 1.0))
    if kind == "coinflip":
        N = p.get("N", "auto")
        if N == "auto":
            if graph is None:
                raise InvalidParameter("N='auto' needs a graph")
            N = graph.size()
        return CoinFlipInstance(L, B, int(N), seed)
    if kind in ("moreau", "chain"):
        D = need("D")
        mult = 1 if kind == "moreau" else 2
        m = p.get("m", "auto")
        if m == "auto":
            m = mult * D + (graph.size() if graph is not None else 0) + 16
        cls = MoreauInstance if kind == "moreau" else ChainInstance
        return cls(LipschitzSmoothClass(L, H, B), int(D), int(m), seed)
    if kind == "quadratic_chain":
        D = p.get("D", "auto")
        if D == "auto":
            if graph is None:
                raise InvalidParameter("D='auto' needs a graph")
            D = 2 * graph.depth() + 1
        m = p.get("m", "auto")
        if m == "auto":
            m = int(D) + 16
        a0 = p.get("a0")
        return QuadraticChainInstance(H, B, int(D), int(m), seed, a0=None if a0 in (None, "auto") else float(a0),
                                      sigma=float(p.get("sigma", 0.0)), lam=float(p.get("lam", 0.0)))
    if kind == "zero":
        return ZeroInstance(int(p.get("m", 1)), B)
    raise InvalidParameter(f"unknown instance {kind!r}")
