"""Per-sample reliability of pseudo-labels via a Gaussian-uniform mixture.

Residuals delta_i = Q_i - O_i are modeled as a zero-mean Gaussian (correct
labels) plus a flat density of level gamma (wrong labels). The posterior of
correctness r_i weighs each sample; r below 0.5 discards it.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from .exceptions import InvalidInputError, SingularCovarianceError
from .numerics import as_matrix, gaussian_logpdf_rows

PI_MIN = 0.05
PI_MAX = 0.95
SIGMA_RIDGE = 1e-6
# Floor on the per-dimension box variance of the flat component. Must stay
# well above SIGMA_RIDGE: if the degenerate box were narrower than the
# ridge-width Gaussian, samples with zero residual would be scored as wrong.
VAR_FLOOR = 1e-4


@dataclass
class GumParams:
    pi: float          # prior of correct labeling, clamped to [PI_MIN, PI_MAX]
    sigma: np.ndarray  # (K, K) positive-definite covariance
    gamma: float       # density level of the flat component, > 0

    def __post_init__(self):
        if not (PI_MIN <= self.pi <= PI_MAX):
            raise InvalidInputError(f"pi={self.pi} outside [{PI_MIN}, {PI_MAX}]")
        if not (np.isfinite(self.gamma) and self.gamma > 0.0):
            raise InvalidInputError(f"gamma must be finite and > 0, got {self.gamma}")
        self.sigma = as_matrix(self.sigma, "sigma")


@dataclass
class SampleWeights:
    r: np.ndarray  # posterior of correct labeling, in [0, 1]
    w: np.ndarray  # r where r >= 0.5, else 0


def _residuals(q, o) -> np.ndarray:
    q = as_matrix(q, "q")
    o = as_matrix(o, "o")
    if q.shape != o.shape:
        raise InvalidInputError(f"shape mismatch: q {q.shape}, o {o.shape}")
    return q - o


def e_step(q, o, params: GumParams) -> np.ndarray:
    """Posterior r_i = pi N(delta_i) / (pi N(delta_i) + (1 - pi) gamma)."""
    delta = _residuals(q, o)
    try:
        log_pdf = gaussian_logpdf_rows(delta, params.sigma)
    except SingularCovarianceError:
        warnings.warn(
            "singular covariance in e_step; retrying with ridge repair",
            RuntimeWarning,
            stacklevel=2,
        )
        repaired = params.sigma + SIGMA_RIDGE * np.eye(params.sigma.shape[0])
        log_pdf = gaussian_logpdf_rows(delta, repaired)
    log_correct = np.log(params.pi) + log_pdf
    log_wrong = np.log1p(-params.pi) + np.log(params.gamma)
    return np.exp(log_correct - np.logaddexp(log_correct, log_wrong))


def m_step(q, o, r) -> GumParams:
    """Refit mixture parameters from residuals and current responsibilities.

    The Gaussian scatter is normalized by sum(r) and ridged so it always
    factorizes. The box moments of the flat component are self-normalized by
    sum(1 - r): equivalent to dividing per-sample weights by N(1 - pi) as
    long as the prior sits inside its clamp range, and still meaningful when
    it does not. With no wrong-label mass at all the box falls back to the
    raw residual spread, floored by VAR_FLOOR.
    """
    delta = _residuals(q, o)
    n, k = delta.shape
    if n == 0:
        raise InvalidInputError("m_step requires at least one sample")
    r = np.asarray(r, dtype=np.float64).reshape(-1)
    if r.shape[0] != n:
        raise InvalidInputError(f"r has length {r.shape[0]}, expected {n}")

    r_sum = float(r.sum())
    scale = max(r_sum, np.finfo(np.float64).tiny)
    sigma = (delta.T * r) @ delta / scale + SIGMA_RIDGE * np.eye(k)

    pi = float(np.clip(r_sum / n, PI_MIN, PI_MAX))

    anti = 1.0 - r
    anti_sum = float(anti.sum())
    if anti_sum > 0.0:
        u = anti / anti_sum
        c1 = u @ delta
        c2 = u @ (delta * delta)
    else:
        c1 = delta.mean(axis=0)
        c2 = (delta * delta).mean(axis=0)
    box_var = np.maximum(c2 - c1 * c1, VAR_FLOOR)
    inv_gamma = float(np.prod(2.0 * np.sqrt(3.0 * box_var)))
    gamma = 1.0 / inv_gamma

    # Cap the flat level at the Gaussian's typical-set density. The flat
    # component is evaluated everywhere (no support truncation), so on a
    # homogeneous residual population a moment-matched box would outscore the
    # Gaussian for every sample and the alternation would discard the whole
    # batch. The cap is inactive whenever genuine outliers stretch the box.
    chol = np.linalg.cholesky(sigma)
    log_det = 2.0 * float(np.sum(np.log(np.diag(chol))))
    log_cap = -0.5 * (k * (np.log(2.0 * np.pi) + 1.0) + log_det)
    gamma = min(gamma, float(np.exp(log_cap)))
    return GumParams(pi=pi, sigma=sigma, gamma=gamma)


def weights_from_r(r) -> np.ndarray:
    """w_i = r_i if r_i >= 0.5 else 0."""
    r = np.asarray(r, dtype=np.float64).reshape(-1)
    if np.any(r < 0.0) or np.any(r > 1.0):
        raise InvalidInputError("r values must lie in [0, 1]")
    return np.where(r >= 0.5, r, 0.0)


def fit(q, o, r_init, tau: int = 3) -> tuple[SampleWeights, GumParams]:
    """Alternate m_step/e_step tau times from r_init; threshold the final r.

    The refit runs before the posterior update: the first posterior would
    otherwise need mixture parameters that no caller has yet.
    """
    if tau < 1:
        raise InvalidInputError(f"tau must be >= 1, got {tau}")
    r = np.asarray(r_init, dtype=np.float64).reshape(-1)
    params = None
    for _ in range(tau):
        params = m_step(q, o, r)
        r = e_step(q, o, params)
    return SampleWeights(r=r, w=weights_from_r(r)), params
