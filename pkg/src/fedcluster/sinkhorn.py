"""Equipartition-constrained pseudo-labels via entropic optimal transport.

Cluster scores are softmax-normalized into P, the cost is -log P, and the
alternating scaling iterations run on log-potentials: exp(-M/eps) underflows
in the linear domain once eps is small (0.1), while log-sum-exp updates stay
finite for any finite scores.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .exceptions import DegenerateRowError, InvalidInputError
from .numerics import as_matrix, softmax_rows

# floor on P before taking logs so the cost matrix stays finite
_P_FLOOR = 1e-300


@dataclass
class TransportConfig:
    epsilon: float = 0.1
    max_iters: int = 200
    marginal_tol: float = 1e-6

    def __post_init__(self):
        if not self.epsilon > 0.0:
            raise InvalidInputError(f"epsilon must be > 0, got {self.epsilon}")
        if self.max_iters < 1:
            raise InvalidInputError(f"max_iters must be >= 1, got {self.max_iters}")
        if self.marginal_tol < 0.0:
            raise InvalidInputError("marginal_tol must be >= 0")


@dataclass
class SinkhornResult:
    xi: np.ndarray
    converged: bool
    iterations: int
    row_residual: float
    col_residual: float


@dataclass
class PseudoLabelBatch:
    """Transport plan and the squared-normalized pseudo-labels derived from it."""

    xi: np.ndarray
    q: np.ndarray
    converged: bool = True


def _lse(m: np.ndarray, axis: int) -> np.ndarray:
    """Log-sum-exp over one axis of a finite 2-D array."""
    peak = m.max(axis=axis, keepdims=True)
    return np.squeeze(peak, axis=axis) + np.log(np.sum(np.exp(m - peak), axis=axis))


def sinkhorn_project(scores, cfg: TransportConfig) -> SinkhornResult:
    """Project cluster scores onto the equipartition transport polytope.

    Row marginals are 1, column marginals are N/K. Log-potentials start at
    zero: the fixed point is unique up to a scalar rescaling, so a
    deterministic start loses nothing and keeps runs reproducible.

    Convergence is detected from the change of the row potential, which is
    exactly the row residual of the previous iterate's plan (its columns are
    exact after every column update). The residuals reported on the returned
    plan are recomputed directly and are authoritative for the flag.
    """
    s = as_matrix(scores, "scores")
    n, k = s.shape
    log_p = np.log(np.maximum(softmax_rows(s), _P_FLOOR))
    log_kernel = log_p / cfg.epsilon  # -M/eps with M = -log P
    log_b = float(np.log(n / k))      # column target: N/K, fractional when K does not divide N
    col_target = n / k

    log_u = np.zeros(n)
    log_v = np.zeros(k)
    iterations = 0
    for iterations in range(1, cfg.max_iters + 1):
        new_log_u = -_lse(log_kernel + log_v[None, :], axis=1)  # row target is 1
        if iterations >= 2:
            row_res = float(np.max(np.abs(np.expm1(log_u - new_log_u))))
            if row_res <= 0.9 * cfg.marginal_tol:
                break  # keep the previous pair: its columns are already exact
        log_u = new_log_u
        log_v = log_b - _lse(log_kernel + log_u[:, None], axis=0)
    xi = np.exp(log_u[:, None] + log_kernel + log_v[None, :])
    row_res = float(np.max(np.abs(xi.sum(axis=1) - 1.0)))
    col_res = float(np.max(np.abs(xi.sum(axis=0) - col_target)))
    converged = row_res <= cfg.marginal_tol and col_res <= cfg.marginal_tol
    return SinkhornResult(xi, converged, iterations, row_res, col_res)


def square_normalize(xi) -> np.ndarray:
    """Sharpen a transport plan: q_ik = xi_ik^2 / sum_k' xi_ik'^2."""
    x = as_matrix(xi, "xi")
    if np.any(x < 0.0):
        raise InvalidInputError("xi must be nonnegative")
    sq = x * x
    norms = sq.sum(axis=1, keepdims=True)
    if np.any(norms == 0.0):
        bad = int(np.flatnonzero(norms.ravel() == 0.0)[0])
        raise DegenerateRowError(f"row {bad} of xi is identically zero")
    return sq / norms


def generate_pseudo_labels(scores, cfg: TransportConfig) -> PseudoLabelBatch:
    result = sinkhorn_project(scores, cfg)
    q = square_normalize(result.xi)
    return PseudoLabelBatch(xi=result.xi, q=q, converged=result.converged)
