"""Third-party fairness certification of random hypotheses.

The third party holds the sensitive attribute ``s``. Given the prediction
matrix of a hypothesis batch it returns the indices of hypotheses whose
predictions are (nearly) uncorrelated with ``s``.
"""

from dataclasses import dataclass

import numpy as np

from dfl import _random

HARD = "hard"
SOFT = "soft"
REFERENCE_COV_TOL = 1e-8


@dataclass
class FairIndexSet:
    indices: np.ndarray  # sorted, unique
    threshold: float  # rho for the hard policy, sigma2 for the soft one
    policy: str
    m: int

    def __post_init__(self):
        self.indices = np.asarray(self.indices, dtype=np.int64)
        if self.indices.size and (
            self.indices[0] < 0
            or self.indices[-1] >= self.m
            or np.any(np.diff(self.indices) <= 0)
        ):
            raise ValueError("indices must be sorted, unique and below m")

    @property
    def k(self):
        return int(self.indices.size)

    def __eq__(self, other):
        if not isinstance(other, FairIndexSet):
            return NotImplemented
        return (
            self.policy == other.policy
            and self.m == other.m
            and self.threshold == other.threshold
            and np.array_equal(self.indices, other.indices)
        )


def estimate_cov(yhat, s):
    """Population covariance (1/n) sum (yhat_i - mean)(s_i - mean)."""
    yhat = np.asarray(yhat, dtype=float)
    s = np.asarray(s, dtype=float)
    if yhat.shape != s.shape or yhat.ndim != 1:
        raise ValueError(f"length mismatch: {yhat.shape} vs {s.shape}")
    if yhat.size < 2:
        raise ValueError("need at least two points")
    return float(np.dot(yhat - yhat.mean(), s - s.mean()) / yhat.size)


def row_covariances(preds, s):
    """estimate_cov applied to every row of an (m, n) prediction matrix."""
    preds = np.atleast_2d(np.asarray(preds, dtype=float))
    s = np.asarray(s, dtype=float)
    if preds.shape[1] != s.shape[0]:
        raise ValueError(f"length mismatch: predictions have {preds.shape[1]} columns, s has {s.shape[0]}")
    if s.shape[0] < 2:
        raise ValueError("need at least two points")
    centered = preds - preds.mean(axis=1, keepdims=True)
    return centered @ (s - s.mean()) / s.shape[0]


def hard_filter(preds, s, rho):
    """Indices t with |cov(h_t(x), s)| <= rho (boundary included)."""
    if rho < 0:
        raise ValueError(f"rho must be non-negative, got {rho}")
    covs = row_covariances(preds, s)
    idx = np.flatnonzero(np.abs(covs) <= rho)
    return FairIndexSet(idx, float(rho), HARD, covs.shape[0])


def soft_filter(preds, star_preds, sigma2, seed, s=None):
    """Keep row t with probability exp(-||Yhat_t - h*(x)||^2 / (2 sigma2^2)).

    ``star_preds`` are the predictions of a zero-covariance reference
    hypothesis; when ``s`` is given that property is checked.
    """
    if not sigma2 > 0:
        raise ValueError(f"sigma2 must be positive, got {sigma2}")
    preds = np.atleast_2d(np.asarray(preds, dtype=float))
    star = np.asarray(star_preds, dtype=float)
    if star.shape != (preds.shape[1],):
        raise ValueError("reference predictions do not match the prediction rows")
    if s is not None:
        c = estimate_cov(star, s)
        if abs(c) > REFERENCE_COV_TOL:
            raise ValueError(f"reference hypothesis has covariance {c:.3g} with s")
    sq = np.sum((preds - star) ** 2, axis=1)
    accept_p = np.exp(-sq / (2.0 * sigma2**2))
    u = _random.stream(seed, _random.SOFT_FILTER).random(preds.shape[0])
    return FairIndexSet(np.flatnonzero(u < accept_p), float(sigma2), SOFT, preds.shape[0])


def reference_hypothesis(preds_any, s):
    """Remove the component of a prediction vector along the centred s."""
    y = np.asarray(preds_any, dtype=float)
    s = np.asarray(s, dtype=float)
    if y.shape != s.shape:
        raise ValueError(f"length mismatch: {y.shape} vs {s.shape}")
    sc = s - s.mean()
    denom = float(sc @ sc)
    if denom == 0.0:
        raise ValueError("s is constant; no zero-covariance reference exists")
    return y - (float((y - y.mean()) @ sc) / denom) * sc
