"""Fairness and accuracy measures for binary predictions and a binary group.

Normed disparate (ND) is taken as |1 - rate(s=1)/rate(s=0)|, the
disparate-impact style ratio; error disparate uses the same ratio on the
per-group error rates. A zero denominator yields 0 when the numerator is also
0 and 1 otherwise.
"""

from dataclasses import astuple, dataclass, fields

import numpy as np

from dfl.fairfilter import estimate_cov


class EmptyGroupError(ValueError):
    pass


def _groups(s):
    s = np.asarray(s)
    g1, g0 = s == 1, s == 0
    if not g1.any() or not g0.any():
        raise EmptyGroupError("both sensitive groups must be non-empty")
    return g0, g1


def _check(*arrays):
    n = len(arrays[0])
    if any(len(a) != n for a in arrays):
        raise ValueError("length mismatch")


def group_rates(pred, s):
    """(p(pred=1 | s=0), p(pred=1 | s=1))."""
    _check(pred, s)
    pred = np.asarray(pred, dtype=float)
    g0, g1 = _groups(s)
    return float(pred[g0].mean()), float(pred[g1].mean())


def group_errors(pred, y, s):
    _check(pred, y, s)
    wrong = (np.asarray(pred) != np.asarray(y)).astype(float)
    g0, g1 = _groups(s)
    return float(wrong[g0].mean()), float(wrong[g1].mean())


def _ratio_gap(num, den):
    if den == 0:
        return 0.0 if num == 0 else 1.0
    return abs(1.0 - num / den)


def statistical_parity(pred, s):
    r0, r1 = group_rates(pred, s)
    return abs(r1 - r0)


def normed_disparate(pred, s):
    r0, r1 = group_rates(pred, s)
    return _ratio_gap(r1, r0)


def classifier_error(pred, y):
    _check(pred, y)
    return float(np.mean(np.asarray(pred) != np.asarray(y)))


def error_parity(pred, y, s):
    e0, e1 = group_errors(pred, y, s)
    return abs(e1 - e0)


def error_disparate(pred, y, s):
    e0, e1 = group_errors(pred, y, s)
    return _ratio_gap(e1, e0)


def cov_fairness(scores, s):
    """Signed covariance between raw (pre-threshold) scores and s."""
    return estimate_cov(scores, s)


@dataclass
class MetricsReport:
    sp: float
    nd: float
    classifier_error: float
    error_parity: float
    error_disparate: float
    cov_fs: float
    rate_s0: float
    rate_s1: float
    error_s0: float
    error_s1: float

    @classmethod
    def columns(cls):
        return [f.name for f in fields(cls)]

    def as_row(self):
        return list(astuple(self))

    @property
    def group_rates(self):
        return self.rate_s0, self.rate_s1

    @property
    def group_errors(self):
        return self.error_s0, self.error_s1


def evaluate(pred, y, s, scores):
    r0, r1 = group_rates(pred, s)
    e0, e1 = group_errors(pred, y, s)
    return MetricsReport(
        sp=abs(r1 - r0),
        nd=_ratio_gap(r1, r0),
        classifier_error=classifier_error(pred, y),
        error_parity=abs(e1 - e0),
        error_disparate=_ratio_gap(e1, e0),
        cov_fs=cov_fairness(scores, s),
        rate_s0=r0,
        rate_s1=r1,
        error_s0=e0,
        error_s1=e1,
    )
