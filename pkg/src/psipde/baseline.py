"""Sequential-threshold ridge regression baseline.

Inner loop: ridge solve, zero out coefficients below the tolerance,
re-solve on the survivors until the support stops changing.  Outer loop:
the original bisection-style tolerance search, scoring each tolerance by
validation error plus an L0 penalty on a held-out split.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from psipde.simulate import rng_stream


@dataclass(frozen=True)
class StridgeConfig:
    ridge_lambda: float = 1e-5
    d_tol: float = 1.0  # initial tolerance and search increment
    max_iters: int = 10  # thresholding sweeps per tolerance
    tol_iters: int = 25  # tolerance-search steps
    split: float = 0.8
    l0_penalty: Optional[float] = None  # default 1e-3 * cond(theta)
    normalize: bool = True
    seed: int = 0

    def __post_init__(self):
        if self.ridge_lambda < 0:
            raise ValueError("ridge_lambda must be >= 0")
        if self.d_tol <= 0:
            raise ValueError("d_tol must be > 0")
        if self.max_iters < 1 or self.tol_iters < 1:
            raise ValueError("iteration counts must be >= 1")
        if not 0 < self.split < 1:
            raise ValueError("split must be in (0, 1)")


@dataclass
class StridgeResult:
    xi: np.ndarray
    support: tuple  # 0-based column indices with nonzero coefficients
    tol: float  # tolerance the search settled on
    val_error: float
    empty: bool  # every coefficient was thresholded away


def _ridge(theta: np.ndarray, target: np.ndarray, lam: float) -> np.ndarray:
    if lam == 0:
        return np.linalg.lstsq(theta, target, rcond=None)[0]
    d = theta.shape[1]
    return np.linalg.lstsq(
        theta.T @ theta + lam * np.eye(d), theta.T @ target, rcond=None
    )[0]


def stridge(
    theta: np.ndarray,
    target: np.ndarray,
    lam: float,
    tol: float,
    max_iters: int = 10,
    normalize: bool = True,
) -> np.ndarray:
    """One STRidge pass at a fixed tolerance."""
    theta = np.asarray(theta, dtype=float)
    target = np.asarray(target, dtype=float).ravel()
    n, d = theta.shape
    if normalize:
        scale = np.linalg.norm(theta, axis=0)
        scale[scale == 0] = 1.0
        x = theta / scale
    else:
        scale = np.ones(d)
        x = theta
    w = _ridge(x, target, lam)
    big = np.where(np.abs(w) > tol)[0]
    n_relevant = d
    for j in range(max_iters):
        small = np.where(np.abs(w) < tol)[0]
        new_big = np.setdiff1d(np.arange(d), small)
        if n_relevant == new_big.size:
            break
        n_relevant = new_big.size
        if new_big.size == 0:
            if j == 0:
                return np.zeros(d)
            break
        big = new_big
        w[:] = 0
        w[big] = _ridge(x[:, big], target, lam)
    if big.size:
        w[:] = 0
        w[big] = np.linalg.lstsq(x[:, big], target, rcond=None)[0]
    return w / scale


def train_stridge(
    theta: np.ndarray, target: np.ndarray, cfg: StridgeConfig = StridgeConfig()
) -> StridgeResult:
    """Tolerance search: walk the threshold up while the penalized
    validation error improves, shrinking the step and backing off when it
    does not."""
    theta = np.asarray(theta, dtype=float)
    target = np.asarray(target, dtype=float).ravel()
    n = theta.shape[0]
    perm = rng_stream(cfg.seed, "baseline.split").permutation(n)
    n_trn = int(round(cfg.split * n))
    trn, val = perm[:n_trn], perm[n_trn:]
    th_trn, b_trn = theta[trn], target[trn]
    th_val, b_val = theta[val], target[val]
    l0 = cfg.l0_penalty
    if l0 is None:
        l0 = 1e-3 * float(np.linalg.cond(theta))

    def score(w):
        return float(
            np.linalg.norm(b_val - th_val @ w) + l0 * np.count_nonzero(w)
        )

    w_best = np.linalg.lstsq(th_trn, b_trn, rcond=None)[0]
    err_best = score(w_best)
    tol_best = 0.0
    tol = float(cfg.d_tol)
    d_tol = float(cfg.d_tol)
    for it in range(cfg.tol_iters):
        w = stridge(th_trn, b_trn, cfg.ridge_lambda, tol, cfg.max_iters, cfg.normalize)
        err = score(w)
        if err <= err_best:
            err_best, w_best, tol_best = err, w, tol
            tol += d_tol
        else:
            tol = max(0.0, tol - 2 * d_tol)
            d_tol = 2 * d_tol / (cfg.tol_iters - it)
            tol += d_tol
    support = tuple(int(i) for i in np.flatnonzero(w_best))
    return StridgeResult(
        xi=w_best,
        support=support,
        tol=tol_best,
        val_error=err_best,
        empty=not support,
    )
