"""Clustering metrics: Hungarian-matched accuracy and normalized mutual information."""

from __future__ import annotations

import numpy as np
from scipy.optimize import linear_sum_assignment

from .exceptions import InvalidInputError


def contingency_table(y_true, y_pred) -> np.ndarray:
    """Joint label counts, padded to a square k x k table.

    Degenerate predictions may use fewer (or other) label values than the
    ground truth; padding with zero rows/columns keeps the matching square.
    """
    y_true = np.asarray(y_true, dtype=np.int64).reshape(-1)
    y_pred = np.asarray(y_pred, dtype=np.int64).reshape(-1)
    if y_true.shape != y_pred.shape:
        raise InvalidInputError(
            f"label vectors differ in length: {y_true.shape[0]} vs {y_pred.shape[0]}"
        )
    if y_true.size and (y_true.min() < 0 or y_pred.min() < 0):
        raise InvalidInputError("labels must be nonnegative integers")
    k = int(max(y_true.max(initial=-1), y_pred.max(initial=-1)) + 1)
    table = np.zeros((k, k), dtype=np.int64)
    np.add.at(table, (y_true, y_pred), 1)
    return table


def hungarian_match(cost) -> np.ndarray:
    """Permutation p minimizing sum_i cost[i, p[i]] over a square cost matrix."""
    c = np.asarray(cost, dtype=np.float64)
    if c.ndim != 2 or c.shape[0] != c.shape[1]:
        raise InvalidInputError(f"cost must be square, got shape {c.shape}")
    if not np.all(np.isfinite(c)):
        raise InvalidInputError("cost contains non-finite entries")
    rows, cols = linear_sum_assignment(c)
    perm = np.empty(c.shape[0], dtype=np.int64)
    perm[rows] = cols
    return perm


def accuracy(y_true, y_pred, k: int) -> float:
    """Best-permutation match rate between predicted and true labels."""
    y_true = np.asarray(y_true, dtype=np.int64).reshape(-1)
    y_pred = np.asarray(y_pred, dtype=np.int64).reshape(-1)
    if y_true.shape != y_pred.shape:
        raise InvalidInputError(
            f"label vectors differ in length: {y_true.shape[0]} vs {y_pred.shape[0]}"
        )
    if y_true.size == 0:
        raise InvalidInputError("empty label vectors")
    if y_true.max() >= k or y_pred.max() >= k:
        raise InvalidInputError(f"labels must be < k={k}")
    table = contingency_table(y_true, y_pred)
    if table.shape[0] < k:
        pad = k - table.shape[0]
        table = np.pad(table, ((0, pad), (0, pad)))
    # maximize matches == minimize negated counts
    perm = hungarian_match(-table.astype(np.float64).T)
    matched = table.T[np.arange(table.shape[0]), perm].sum()
    return float(matched) / y_true.size


def _entropy(counts: np.ndarray) -> float:
    p = counts[counts > 0] / counts.sum()
    return float(-np.sum(p * np.log(p)))


def nmi(y_true, y_pred) -> float:
    """I(Y; Y_hat) / sqrt(H(Y) H(Y_hat)) with natural logs.

    Defined as 1.0 when both partitions are identical and 0.0 when either
    entropy vanishes while the partitions differ.
    """
    y_true = np.asarray(y_true, dtype=np.int64).reshape(-1)
    y_pred = np.asarray(y_pred, dtype=np.int64).reshape(-1)
    if y_true.shape != y_pred.shape:
        raise InvalidInputError(
            f"label vectors differ in length: {y_true.shape[0]} vs {y_pred.shape[0]}"
        )
    table = contingency_table(y_true, y_pred).astype(np.float64)
    n = table.sum()
    row = table.sum(axis=1)
    col = table.sum(axis=0)
    h_true = _entropy(row)
    h_pred = _entropy(col)
    if h_true == 0.0 or h_pred == 0.0:
        same = np.array_equal(
            np.unique(y_true, return_inverse=True)[1],
            np.unique(y_pred, return_inverse=True)[1],
        )
        return 1.0 if same else 0.0
    nz = table > 0
    outer = np.outer(row, col)
    mutual = float(np.sum(table[nz] / n * np.log(table[nz] * n / outer[nz])))
    return mutual / float(np.sqrt(h_true * h_pred))
