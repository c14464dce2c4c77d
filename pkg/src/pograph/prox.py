"""Proximal operators: exact max-affine, numeric smooth, and Moreau-envelope gradients."""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable

import numpy as np

from .errors import ConvergenceFailure, InvalidParameter


@dataclass
class ProxResult:
    point: np.ndarray
    objective: float
    residual: float
    active_set: tuple[int, ...] | None = None
    iterations: int = 0


def _check_beta(beta):
    if not (beta > 0) or not math.isfinite(beta):
        raise InvalidParameter(f"prox parameter beta must be positive and finite, got {beta!r}")


def check_frame(V: np.ndarray, tol: float = 1e-10) -> None:
    V = np.asarray(V)
    if V.ndim != 2 or V.shape[0] > V.shape[1]:
        raise InvalidParameter(f"frame must be k x m with k <= m, got shape {V.shape}")
    err = np.max(np.abs(V @ V.T - np.eye(V.shape[0])))
    if err > tol:
        raise InvalidParameter(f"frame rows are not orthonormal (max Gram error {err:.3g})")


def project_simplex(u: np.ndarray) -> np.ndarray:
    """Euclidean projection onto the probability simplex.

    The active set of the projection is always a prefix of the entries sorted
    in decreasing order, so enumerating the k prefix candidates and keeping the
    largest one that satisfies the KKT conditions gives the exact answer.
    Ties are ordered by smallest index first.
    """
    u = np.asarray(u, dtype=float)
    order = np.argsort(-u, kind="stable")
    s = u[order]
    csum = np.cumsum(s)
    ks = np.arange(1, len(u) + 1)
    theta_all = (csum - 1.0) / ks
    feasible = s - theta_all > 0
    size = int(np.nonzero(feasible)[0][-1]) + 1
    theta = theta_all[size - 1]
    lam = np.zeros_like(u)
    lam[order[:size]] = s[:size] - theta
    return lam


def prox_max_affine(V: np.ndarray, offsets: np.ndarray, scale: float, x: np.ndarray, beta: float,
                    check: bool = True) -> ProxResult:
    """Prox of ``y -> max_r scale * <v_r, y> - offsets[r]`` at ``x`` with parameter ``beta``.

    The minimizer is ``x - (scale / beta) * sum_r lam_r v_r`` where ``lam`` solves
    the dual problem, a projection of ``beta * (scale * V x - offsets) / scale**2``
    onto the simplex. Only the frame coordinates of ``x`` move.
    """
    _check_beta(beta)
    V = np.asarray(V, dtype=float)
    offsets = np.asarray(offsets, dtype=float)
    if check:
        check_frame(V)
    if offsets.shape != (V.shape[0],):
        raise InvalidParameter("need one offset per frame row")
    x = np.asarray(x, dtype=float)
    coords = V @ x
    lam = project_simplex(beta * (scale * coords - offsets) / scale**2)
    y = x - (scale / beta) * (lam @ V)
    pieces = scale * (V @ y) - offsets
    support = np.nonzero(lam)[0]
    top = float(np.max(pieces))
    residual = max(top - float(np.min(pieces[support])), abs(float(lam.sum()) - 1.0))
    diff = y - x
    obj = top + 0.5 * beta * float(diff @ diff)
    return ProxResult(y, obj, residual, tuple(int(i) for i in support))


def prox_smooth_numeric(grad: Callable[[np.ndarray], np.ndarray], smoothness: float, x: np.ndarray,
                        beta: float, tol: float | None = None, max_iter: int = 10**6,
                        value: Callable[[np.ndarray], float] | None = None) -> ProxResult:
    """Accelerated gradient descent on ``f(y) + beta/2 ||y - x||^2`` started at ``x``.

    ``smoothness`` bounds the Lipschitz constant of ``grad``. Stops once the
    gradient norm of the prox objective is at most ``tol``.
    """
    _check_beta(beta)
    x = np.asarray(x, dtype=float)
    if tol is None:
        tol = 1e-10 * max(1.0, beta * float(np.linalg.norm(x)))
    lip = float(smoothness) + beta
    kappa = lip / beta
    q = (math.sqrt(kappa) - 1.0) / (math.sqrt(kappa) + 1.0)
    y = x.copy()
    w = x.copy()
    gnorm = math.inf
    for it in range(max_iter + 1):
        g = grad(w) + beta * (w - x)
        gnorm = float(np.linalg.norm(g))
        if gnorm <= tol:
            break
        if it == max_iter:
            raise ConvergenceFailure(f"prox solver hit the iteration cap ({max_iter})", residual=gnorm)
        y_next = w - g / lip
        w = y_next + q * (y_next - y)
        y = y_next
    obj = math.nan
    if value is not None:
        d = w - x
        obj = float(value(w)) + 0.5 * beta * float(d @ d)
    return ProxResult(w, obj, gnorm, None, it)


def moreau_grad(f_prox: Callable[[np.ndarray, float], ProxResult], x: np.ndarray, beta: float):
    """Value and gradient of the Moreau envelope with parameter ``beta`` at ``x``."""
    _check_beta(beta)
    res = f_prox(x, beta)
    return res.objective, beta * (np.asarray(x, dtype=float) - res.point)
