import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dfl.data import synth_biased
from dfl.fairfilter import (
    FairIndexSet,
    estimate_cov,
    hard_filter,
    reference_hypothesis,
    row_covariances,
    soft_filter,
)
from dfl.hypothesis import generate_linear, predict_linear
from dfl.theory import k_bound_linear


def oracle_cov(y, s):
    n = len(y)
    my, ms = math.fsum(y) / n, math.fsum(s) / n
    return math.fsum((a - my) * (b - ms) for a, b in zip(y, s)) / n


def rows_with_covs(covs):
    """Rows over s = [0, 1, 0, 1] whose covariance with s is exactly ``covs``."""
    s = np.array([0.0, 1.0, 0.0, 1.0])
    return np.outer(covs, 4.0 * (s - 0.5)), s


def test_estimate_cov_hand_values():
    assert estimate_cov([1, 1, 0, 0], [1, 1, 0, 0]) == 0.25
    assert estimate_cov([1, 0, 1, 0], [0, 1, 0, 1]) == -0.25
    assert estimate_cov([3, 3, 3, 3], [0, 1, 1, 0]) == 0.0


def test_estimate_cov_errors():
    with pytest.raises(ValueError):
        estimate_cov([1, 2, 3], [0, 1])
    with pytest.raises(ValueError):
        estimate_cov([1], [1])


def test_hard_filter_precomputed_covs():
    preds, s = rows_with_covs([0.05, -0.2, 0.1])
    assert row_covariances(preds, s).tolist() == [0.05, -0.2, 0.1]
    fair = hard_filter(preds, s, 0.1)
    assert fair.indices.tolist() == [0, 2]
    assert (fair.policy, fair.m, fair.threshold, fair.k) == ("hard", 3, 0.1, 2)


def test_hard_filter_large_rho_keeps_all():
    rng = np.random.default_rng(0)
    preds, s = rng.standard_normal((30, 12)), (rng.random(12) < 0.5).astype(float)
    rho = np.abs(row_covariances(preds, s)).max()
    assert hard_filter(preds, s, rho).k == 30
    assert hard_filter(preds, s, math.inf).k == 30


def test_hard_filter_rho_zero_singleton():
    s = np.array([0, 1, 1, 0], dtype=float)
    preds = np.array([[1.0, 2.0, 4.0, 3.0], [5.0, 5.0, 5.0, 5.0], [0.0, 1.0, 1.0, 0.0]])
    fair = hard_filter(preds, s, 0.0)
    assert fair.indices.tolist() == [1]


def test_hard_filter_negative_rho():
    with pytest.raises(ValueError):
        hard_filter(np.zeros((1, 3)), np.array([0.0, 1.0, 0.0]), -0.1)


def test_hard_filter_matches_definition_loop():
    rng = np.random.default_rng(123)
    for _ in range(1000):
        m, n = int(rng.integers(1, 8)), int(rng.integers(2, 12))
        preds = rng.standard_normal((m, n)) * rng.uniform(0.1, 3)
        s = (rng.random(n) < 0.5).astype(float)
        rho = rng.uniform(0, 0.5)
        expect = [t for t in range(m) if abs(oracle_cov(preds[t].tolist(), s.tolist())) <= rho]
        assert hard_filter(preds, s, rho).indices.tolist() == expect


@settings(max_examples=100, deadline=None)
@given(seed=st.integers(0, 2**32), r1=st.floats(0, 1), r2=st.floats(0, 1))
def test_hard_filter_monotone_in_rho(seed, r1, r2):
    lo, hi = sorted((r1, r2))
    rng = np.random.default_rng(seed)
    preds = rng.standard_normal((25, 10))
    s = (rng.random(10) < 0.5).astype(float)
    assert set(hard_filter(preds, s, lo).indices) <= set(hard_filter(preds, s, hi).indices)


@settings(max_examples=100, deadline=None)
@given(seed=st.integers(0, 2**32), c=st.floats(-100, 100).filter(lambda v: abs(v) > 1e-3))
def test_scaling_a_row_scales_its_covariance(seed, c):
    rng = np.random.default_rng(seed)
    y = rng.standard_normal(9)
    s = np.array([0, 1, 0, 1, 1, 0, 0, 1, 0], dtype=float)
    base = estimate_cov(y, s)
    scaled = estimate_cov(c * y, s)
    assert abs(scaled - c * base) <= 1e-12 * abs(c * base) + 1e-300
    rho = abs(base) * 1.0000001
    assert hard_filter(np.array([c * y]), s, abs(c) * rho).k == 1


def test_soft_filter_center_always_kept():
    rng = np.random.default_rng(0)
    star = rng.standard_normal(6)
    preds = np.vstack([star, star + 100.0, star])
    for seed in range(50):
        fair = soft_filter(preds, star, 0.5, seed)
        assert 0 in fair.indices and 2 in fair.indices
        assert 1 not in fair.indices


def test_soft_filter_acceptance_rate_at_two_sigma2_squared():
    n, sigma2 = 8, 0.7
    star = np.zeros(n)
    d = np.zeros(n)
    d[0] = math.sqrt(2.0) * sigma2  # squared distance 2 sigma2^2
    preds = np.tile(d, (10000, 1))
    rate = soft_filter(preds, star, sigma2, seed=3).k / 10000
    assert abs(rate - math.exp(-1.0)) <= 0.02


def test_soft_filter_huge_sigma_accepts_all():
    rng = np.random.default_rng(1)
    preds = rng.standard_normal((200, 5))
    assert soft_filter(preds, np.zeros(5), 1e9, seed=0).k == 200


def test_soft_filter_deterministic_and_validated():
    rng = np.random.default_rng(2)
    preds = rng.standard_normal((100, 4))
    a, b = soft_filter(preds, np.zeros(4), 1.0, 9), soft_filter(preds, np.zeros(4), 1.0, 9)
    assert a == b
    with pytest.raises(ValueError):
        soft_filter(preds, np.zeros(4), 0.0, 9)
    s = np.array([0.0, 1.0, 1.0, 0.0])
    with pytest.raises(ValueError):
        soft_filter(preds, s, 1.0, 9, s=s)  # s itself is not a zero-covariance reference
    soft_filter(preds, np.zeros(4), 1.0, 9, s=s)


def test_reference_hypothesis_properties():
    rng = np.random.default_rng(4)
    s = (rng.random(20) < 0.5).astype(float)
    y = rng.standard_normal(20)
    out = reference_hypothesis(y, s)
    assert abs(estimate_cov(out, s)) <= 1e-12
    np.testing.assert_allclose(reference_hypothesis(out, s), out, atol=1e-12)


def test_reference_of_s_is_its_mean():
    s = np.array([1.0, 0.0, 0.0, 1.0])
    np.testing.assert_allclose(reference_hypothesis(s, s), [0.5, 0.5, 0.5, 0.5], atol=1e-15)
    with pytest.raises(ValueError):
        reference_hypothesis(np.ones(3), np.ones(3))


def test_fair_index_set_invariants():
    with pytest.raises(ValueError):
        FairIndexSet([2, 1], 0.1, "hard", 5)
    with pytest.raises(ValueError):
        FairIndexSet([1, 5], 0.1, "hard", 5)
    with pytest.raises(ValueError):
        FairIndexSet([1, 1], 0.1, "hard", 5)
    assert FairIndexSet([], 0.1, "hard", 5).k == 0


def test_expected_k_lower_bound_linear_case():
    ds = synth_biased(1000, 5, 0.5, seed=0)
    Xc = ds.features - ds.features.mean(axis=0)
    cnorm = np.linalg.norm(Xc.T @ (ds.sensitive - ds.sensitive.mean()) / ds.n)
    m, sigma, rho = 400, 1.0, 0.2
    ks = []
    for r in range(200):
        preds = predict_linear(generate_linear(m, 5, sigma, 1000 + r), ds.features)
        ks.append(hard_filter(preds, ds.sensitive, rho).k)
    ks = np.array(ks)
    bound = k_bound_linear(m, sigma, cnorm, rho)
    assert bound > 0
    assert ks.mean() >= bound - 3 * ks.std(ddof=1) / math.sqrt(len(ks))
