"""Dense numeric kernels: stable softmax, Gaussian log-densities, k-means, RNG.

Everything here works on plain float64 ``numpy`` arrays. Embeddings may be
stored as float32 on disk but are widened on load; EM and the transport solver
underflow in float32 at small entropy weights.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import solve_triangular

from .exceptions import InvalidInputError, SingularCovarianceError

LOG_2PI = float(np.log(2.0 * np.pi))


def _derive_seed(*parts) -> int:
    """Stable 64-bit seed from arbitrary key parts (platform independent)."""
    text = "\x1f".join(str(p) for p in parts)
    digest = hashlib.sha256(text.encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little")


@dataclass
class Rng:
    """Deterministic splittable random stream.

    Child streams are derived from (seed, *keys) with a cryptographic hash, so
    per-client/per-round streams never depend on scheduling order.
    """

    seed: int
    gen: np.random.Generator = field(init=False, repr=False)

    def __post_init__(self):
        self.gen = np.random.Generator(np.random.PCG64(self.seed))

    def child(self, *keys) -> "Rng":
        return Rng(_derive_seed(self.seed, *keys))


def as_matrix(x, name: str = "matrix") -> np.ndarray:
    """Validate and return a finite 2-D float64 array."""
    a = np.asarray(x, dtype=np.float64)
    if a.ndim != 2:
        raise InvalidInputError(f"{name} must be 2-D, got shape {a.shape}")
    if not np.all(np.isfinite(a)):
        raise InvalidInputError(f"{name} contains non-finite entries")
    return a


def softmax_rows(scores) -> np.ndarray:
    """Row-wise softmax with per-row max shift; rows sum to 1 within 1e-12."""
    s = as_matrix(scores, "scores")
    shifted = s - s.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)


def _cholesky(cov: np.ndarray) -> np.ndarray:
    try:
        return np.linalg.cholesky(cov)
    except np.linalg.LinAlgError as exc:
        raise SingularCovarianceError(
            f"covariance of dim {cov.shape[0]} is not positive definite"
        ) from exc


def gaussian_logpdf(x, mean, cov) -> float:
    """log N(x; mean, cov) through a Cholesky factor (no explicit inverse)."""
    x = np.asarray(x, dtype=np.float64).reshape(-1)
    mean = np.asarray(mean, dtype=np.float64).reshape(-1)
    cov = as_matrix(cov, "cov")
    k = x.shape[0]
    if mean.shape[0] != k or cov.shape != (k, k):
        raise InvalidInputError(
            f"dimension mismatch: x {x.shape}, mean {mean.shape}, cov {cov.shape}"
        )
    chol = _cholesky(cov)
    z = solve_triangular(chol, x - mean, lower=True)
    log_det = 2.0 * np.sum(np.log(np.diag(chol)))
    return float(-0.5 * (k * LOG_2PI + log_det + z @ z))


def gaussian_logpdf_rows(deltas, cov) -> np.ndarray:
    """log N(delta_i; 0, cov) for every row of an N x K residual matrix."""
    d = as_matrix(deltas, "deltas")
    cov = as_matrix(cov, "cov")
    k = d.shape[1]
    if cov.shape != (k, k):
        raise InvalidInputError(f"cov shape {cov.shape} does not match K={k}")
    chol = _cholesky(cov)
    z = solve_triangular(chol, d.T, lower=True)
    log_det = 2.0 * np.sum(np.log(np.diag(chol)))
    quad = np.sum(z * z, axis=0)
    return -0.5 * (k * LOG_2PI + log_det + quad)


@dataclass
class KMeansResult:
    assignments: np.ndarray  # (n,) int
    centers: np.ndarray      # (k, d)
    inertia: float
    n_iter: int
    inertia_history: list[float]


def _plus_plus_seeding(x: np.ndarray, k: int, rng: Rng) -> np.ndarray:
    n = x.shape[0]
    centers = np.empty((k, x.shape[1]))
    first = int(rng.gen.integers(n))
    centers[0] = x[first]
    dist_sq = np.sum((x - centers[0]) ** 2, axis=1)
    for j in range(1, k):
        total = dist_sq.sum()
        if total <= 0.0:
            # all remaining points coincide with a chosen center
            idx = int(rng.gen.integers(n))
        else:
            probs = dist_sq / total
            idx = int(rng.gen.choice(n, p=probs))
        centers[j] = x[idx]
        dist_sq = np.minimum(dist_sq, np.sum((x - centers[j]) ** 2, axis=1))
    return centers


def kmeans(x, k: int, rng: Rng, max_iters: int = 100) -> KMeansResult:
    """Lloyd's algorithm with k-means++ seeding.

    Empty clusters are re-seeded to the point farthest from its current
    center, which strictly lowers inertia; inertia is non-increasing across
    iterations.
    """
    x = as_matrix(x, "x")
    n = x.shape[0]
    if k < 1 or n < k:
        raise InvalidInputError(f"need n >= k >= 1, got n={n}, k={k}")
    centers = _plus_plus_seeding(x, k, rng)
    assignments = np.zeros(n, dtype=np.int64)
    history: list[float] = []
    n_iter = 0
    for n_iter in range(1, max_iters + 1):
        # squared distances to every center, argmin assignment
        d2 = (
            np.sum(x * x, axis=1)[:, None]
            - 2.0 * (x @ centers.T)
            + np.sum(centers * centers, axis=1)[None, :]
        )
        np.maximum(d2, 0.0, out=d2)
        new_assignments = np.argmin(d2, axis=1)
        point_d2 = d2[np.arange(n), new_assignments]
        for j in range(k):
            if not np.any(new_assignments == j):
                far = int(np.argmax(point_d2))
                new_assignments[far] = j
                centers[j] = x[far]
                point_d2[far] = 0.0
        inertia = float(np.sum((x - centers[new_assignments]) ** 2))
        history.append(inertia)
        converged = np.array_equal(new_assignments, assignments) and n_iter > 1
        assignments = new_assignments
        for j in range(k):
            members = x[assignments == j]
            if members.shape[0]:
                centers[j] = members.mean(axis=0)
        if converged:
            break
    inertia = float(np.sum((x - centers[assignments]) ** 2))
    history.append(inertia)
    return KMeansResult(assignments, centers, inertia, n_iter, history)
