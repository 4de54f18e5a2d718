import numpy as np
import pytest
from scipy.special import expit

from dfl.hypothesis import KernelSpec, gram_matrix
from dfl.learners import (
    FairModel,
    NonConvergenceError,
    SingularSystemError,
    baseline_fit,
    classify,
    covariance_matrix,
    dfgr_fit,
    dfgr_gradient,
    dfgr_objective,
    dfkrr_fit,
    dfpca_fit,
    dfpca_ridge_fit,
    dfrr_fit,
    model_from_bytes,
    model_to_bytes,
    predict,
)


def instance(seed, n=20, p=5, k=3):
    rng = np.random.default_rng(seed)
    return rng.standard_normal((p, k)), rng.standard_normal((n, p)), rng


def gd_oracle(H, X, Y, lam, steps=10000):
    """Plain gradient descent with step 1/L on the logistic objective."""
    Z = X @ H
    L = 0.25 * np.linalg.norm(Z, 2) ** 2 + 2 * lam * np.linalg.norm(H, 2) ** 2
    a = np.zeros(H.shape[1])
    for _ in range(steps):
        a -= dfgr_gradient(a, H, X, Y, lam) / L
    return dfgr_objective(a, H, X, Y, lam)


# -- dfrr -------------------------------------------------------------------


def test_dfrr_zero_labels():
    H, X, _ = instance(0)
    model = dfrr_fit(H, X, np.zeros(20), 0.5)
    assert not model.alpha.any()
    assert (model.kind, model.k, model.lam) == ("dfrr", 3, 0.5)


def test_dfrr_identity_basis_is_least_squares():
    X = np.array([[1.0, 0.0], [1.0, 1.0], [1.0, 2.0], [1.0, 4.0]])
    Y = np.array([1.0, 2.0, 2.0, 5.0])
    alpha = dfrr_fit(np.eye(2), X, Y, 0.0).alpha
    oracle = np.linalg.solve(X.T @ X, X.T @ Y)
    np.testing.assert_allclose(alpha, oracle, rtol=1e-12)


def test_dfrr_heavy_penalty_shrinks():
    H, X, rng = instance(1)
    Y = rng.standard_normal(20)
    alpha = dfrr_fit(H, X, Y, 1e6).alpha
    assert np.linalg.norm(alpha) <= np.linalg.norm(H.T @ X.T @ Y) / 1e6


def test_dfrr_residual():
    H, X, rng = instance(2, k=4)
    Y = rng.standard_normal(20)
    lam = 0.3
    alpha = dfrr_fit(H, X, Y, lam).alpha
    Z = X @ H
    b = Z.T @ Y
    assert np.linalg.norm((Z.T @ Z + lam * np.eye(4)) @ alpha - b) <= 1e-8 * (1 + np.linalg.norm(b))


def test_dfrr_singular_at_zero_lambda():
    H, X, rng = instance(3)
    H[:, 2] = H[:, 0] + H[:, 1]
    with pytest.raises(SingularSystemError) as err:
        dfrr_fit(H, X, rng.standard_normal(20), 0.0)
    assert err.value.rank == 2
    dfrr_fit(H, X, rng.standard_normal(20), 0.1)  # fine with a penalty


def test_dfrr_is_a_minimizer():
    H, X, rng = instance(4, k=4)
    Y = rng.standard_normal(20)
    lam = 0.7
    alpha = dfrr_fit(H, X, Y, lam).alpha

    def objective(a):
        r = Y - X @ H @ a
        return r @ r + lam * a @ a

    base = objective(alpha)
    for _ in range(100):
        d = rng.standard_normal(4)
        assert objective(alpha + 1e-3 * d / np.linalg.norm(d)) >= base


def test_dfrr_rejects_bad_input():
    H, X, _ = instance(5)
    with pytest.raises(ValueError):
        dfrr_fit(H, X, np.zeros(20), -1.0)
    with pytest.raises(ValueError):
        dfrr_fit(H, X[:, :3], np.zeros(20), 1.0)


# -- dfkrr ------------------------------------------------------------------


def test_dfkrr_identity_system():
    Y = np.array([1.0, -2.0, 0.5, 3.0])
    model = dfkrr_fit(np.eye(4), np.eye(4), Y, 0.0)
    np.testing.assert_allclose(model.alpha, Y, atol=1e-12)
    assert not dfkrr_fit(np.eye(4), np.eye(4), np.zeros(4), 0.1).alpha.any()


def test_dfkrr_matches_least_squares_oracle():
    rng = np.random.default_rng(6)
    X = rng.standard_normal((6, 2))
    K = gram_matrix(X, KernelSpec("rbf", 1.0))
    C = rng.standard_normal((6, 3))
    Y = rng.standard_normal(6)
    lam = 0.2
    alpha = dfkrr_fit(K, C, Y, lam).alpha
    oracle = np.linalg.lstsq((K + lam * np.eye(6)) @ C, Y, rcond=None)[0]
    assert np.max(np.abs(alpha - oracle)) <= 1e-8


def test_dfkrr_predicts_with_cross_gram():
    rng = np.random.default_rng(7)
    X = rng.standard_normal((8, 3))
    spec = KernelSpec("rbf", 1.5)
    C = rng.standard_normal((8, 2))
    model = dfkrr_fit(gram_matrix(X, spec), C, rng.standard_normal(8), 0.1, X_train=X,
                      kernel_spec=spec)
    Z = rng.standard_normal((4, 3))
    manual = np.array([sum((C @ model.alpha)[j] * np.exp(-np.sum((X[j] - z) ** 2) / (2 * 1.5**2))
                           for j in range(8)) for z in Z])
    np.testing.assert_allclose(predict(model, Z), manual, rtol=1e-12)


def test_dfkrr_rank_deficient_gets_jitter():
    rng = np.random.default_rng(8)
    C = rng.standard_normal((5, 2))
    C = np.hstack([C, C[:, :1]])
    model = dfkrr_fit(np.eye(5), C, rng.standard_normal(5), 0.1)
    assert model.jitter > 0


# -- dfgr -------------------------------------------------------------------


def test_dfgr_zero_features():
    rng = np.random.default_rng(9)
    H = rng.standard_normal((3, 2))
    model = dfgr_fit(H, np.zeros((10, 3)), (rng.random(10) < 0.5).astype(float), 0.5)
    assert np.linalg.norm(model.alpha) <= 1e-10
    assert model.converged


def test_dfgr_gradient_finite_differences():
    rng = np.random.default_rng(10)
    X = rng.standard_normal((8, 3))
    H = rng.standard_normal((3, 3))
    Y = (rng.random(8) < 0.5).astype(float)
    lam = 0.3
    a = rng.standard_normal(3)
    h = 1e-6
    fd = np.array([(dfgr_objective(a + h * e, H, X, Y, lam) - dfgr_objective(a - h * e, H, X, Y, lam))
                   / (2 * h) for e in np.eye(3)])
    g = dfgr_gradient(a, H, X, Y, lam)
    assert np.linalg.norm(fd - g) <= 1e-5 * np.linalg.norm(g)


def test_dfgr_printed_sign_would_be_wrong():
    """The data term of the gradient is H'X'(p - Y); flipping it disagrees
    with finite differences."""
    rng = np.random.default_rng(11)
    X, H = rng.standard_normal((8, 3)), np.eye(3)
    Y = (rng.random(8) < 0.5).astype(float)
    a = rng.standard_normal(3)
    lam = 0.3
    flipped = H.T @ X.T @ (Y - expit(X @ H @ a)) + 2 * lam * H.T @ H @ a
    fd = np.array([(dfgr_objective(a + 1e-6 * e, H, X, Y, lam) - dfgr_objective(a - 1e-6 * e, H, X, Y, lam))
                   / 2e-6 for e in np.eye(3)])
    assert np.linalg.norm(fd - flipped) > 1e-3


def test_dfgr_beats_gradient_descent_on_separable_data():
    X = np.array([[-2.0, 1.0], [-1.0, 1.0], [1.0, 1.0], [2.0, 1.0]])
    Y = np.array([0.0, 0.0, 1.0, 1.0])
    H = np.array([[1.0, 0.5], [0.0, 1.0]])
    lam = 0.1
    model = dfgr_fit(H, X, Y, lam)
    assert model.converged
    assert dfgr_objective(model.alpha, H, X, Y, lam) <= gd_oracle(H, X, Y, lam) + 1e-6


def test_dfgr_objective_monotone():
    H, X, rng = instance(12, n=40, p=4, k=3)
    Y = (X[:, 0] + 0.5 * rng.standard_normal(40) > 0).astype(float)
    model = dfgr_fit(H, X, Y, 0.05, step=0.001)
    hist = model.info["objective_history"]
    assert all(b <= a for a, b in zip(hist, hist[1:]))


def test_dfgr_rank_deficient_basis():
    H, X, rng = instance(13, n=30, p=3, k=5)
    Y = (rng.random(30) < 0.5).astype(float)
    model = dfgr_fit(H, X, Y, 0.2)
    assert model.converged
    # minimum-norm solution lies in the row space of H
    U, S, Vt = np.linalg.svd(H, full_matrices=False)
    null = np.eye(5) - Vt.T @ Vt
    assert np.linalg.norm(null @ model.alpha) <= 1e-8


def test_dfgr_input_checks():
    H, X, _ = instance(14)
    with pytest.raises(ValueError):
        dfgr_fit(H, X, np.zeros(20), 0.0)
    with pytest.raises(ValueError):
        dfgr_fit(H, X, np.full(20, 0.5), 1.0)


def test_nonconvergence_carries_iterate():
    err = NonConvergenceError("x", np.ones(2))
    assert err.alpha.tolist() == [1.0, 1.0]


# -- dfpca ------------------------------------------------------------------


def test_dfpca_diagonal_covariance():
    sub = dfpca_fit(np.eye(2), np.diag([3.0, 1.0]), 1)
    assert abs(sub.eigenvalues[0] - 3.0) <= 1e-12
    np.testing.assert_allclose(np.abs(sub.coeff_vectors[:, 0]), [1.0, 0.0], atol=1e-12)
    assert sub.coeff_vectors[0, 0] > 0  # sign convention


def test_dfpca_trace_identity_and_residuals():
    rng = np.random.default_rng(15)
    H = rng.standard_normal((6, 4))
    S = covariance_matrix(rng.standard_normal((50, 6)))
    sub = dfpca_fit(H, S, 4)
    A, G = H.T @ S @ H, H.T @ H
    assert abs(sub.eigenvalues.sum() - np.trace(np.linalg.solve(G, A))) <= 1e-8
    assert np.all(np.diff(sub.eigenvalues) <= 0)
    for j in range(4):
        a, w = sub.coeff_vectors[:, j], sub.eigenvalues[j]
        assert np.linalg.norm(A @ a - w * G @ a) <= 1e-8
        assert abs(np.linalg.norm(H @ a) - 1.0) <= 1e-12
    off = sub.coeff_vectors.T @ G @ sub.coeff_vectors - np.eye(4)
    assert np.max(np.abs(off)) <= 1e-8


def test_dfpca_errors():
    with pytest.raises(ValueError):
        dfpca_fit(np.eye(2), np.eye(2), 3)
    with pytest.raises(ValueError):
        dfpca_fit(np.eye(2), np.diag([1.0, -1.0]), 1)
    with pytest.raises(ValueError):
        dfpca_fit(np.eye(2), np.array([[1.0, 0.5], [0.0, 1.0]]), 1)


def test_dfpca_ridge_full_rank_matches_dfrr_without_penalty():
    H, X, rng = instance(16, n=40, p=6, k=4)
    Y = rng.standard_normal(40)
    a = predict(dfpca_ridge_fit(H, X, Y, 0.0, 4), X)
    b = predict(dfrr_fit(H, X, Y, 0.0), X)
    assert np.max(np.abs(a - b)) <= 1e-6


# -- baselines and prediction -------------------------------------------------


def test_ridge_baseline_is_identity_basis():
    _, X, rng = instance(17)
    Y = rng.standard_normal(20)
    a, b = baseline_fit("ridge", X, Y, 0.4), dfrr_fit(np.eye(5), X, Y, 0.4)
    np.testing.assert_array_equal(a.alpha, b.alpha)
    assert a.kind == "baseline-ridge"


def test_pca_ridge_baseline_equals_ridge():
    _, X, rng = instance(18, n=60, p=5)
    Y = rng.standard_normal(60)
    a = predict(baseline_fit("pca+ridge", X, Y, 0.8), X)
    b = predict(baseline_fit("ridge", X, Y, 0.8), X)
    assert np.max(np.abs(a - b)) <= 1e-6


def test_logistic_baseline_converges_on_separable_data():
    X = np.array([[-2.0, 1.0], [-1.0, 1.0], [1.0, 1.0], [2.0, 1.0]])
    Y = np.array([0.0, 0.0, 1.0, 1.0])
    model = baseline_fit("logistic", X, Y, 0.1)
    assert model.converged
    assert dfgr_objective(model.alpha, np.eye(2), X, Y, 0.1) <= gd_oracle(np.eye(2), X, Y, 0.1) + 1e-6
    with pytest.raises(ValueError):
        baseline_fit("svm", X, Y, 0.1)


def test_predict_zero_alpha():
    X = np.ones((3, 2))
    rr = FairModel(np.zeros(1), np.ones((2, 1)), 0.1, "dfrr")
    gr = FairModel(np.zeros(1), np.ones((2, 1)), 0.1, "dfgr")
    assert predict(rr, X).tolist() == [0.0, 0.0, 0.0]
    assert predict(gr, X).tolist() == [0.5, 0.5, 0.5]


def test_predict_single_hypothesis_scaling_and_hand_values():
    h = np.array([[1.0], [-1.0]])
    model = FairModel(np.array([2.0]), h, 0.0, "dfrr")
    X = np.array([[3.0, 1.0], [0.5, 2.0]])
    np.testing.assert_allclose(predict(model, X), [4.0, -3.0])
    with pytest.raises(ValueError):
        predict(model, np.ones((2, 3)))


def test_classify_threshold_inclusive():
    assert classify([0.49, 0.5, 0.9]).tolist() == [0, 1, 1]
    assert classify([0.0, 1.0], threshold=1.0).tolist() == [0, 1]


def test_model_roundtrip():
    H, X, rng = instance(19)
    m = dfrr_fit(H, X, rng.standard_normal(20), 0.3)
    back = model_from_bytes(model_to_bytes(m))
    np.testing.assert_array_equal(back.alpha, m.alpha)
    np.testing.assert_array_equal(back.basis, m.basis)
    assert (back.kind, back.lam) == ("dfrr", 0.3)

    spec = KernelSpec("rbf", 0.9)
    km = dfkrr_fit(gram_matrix(X, spec), rng.standard_normal((20, 2)), rng.standard_normal(20), 0.1,
                   X_train=X, kernel_spec=spec)
    kb = model_from_bytes(model_to_bytes(km))
    np.testing.assert_array_equal(predict(kb, X[:3]), predict(km, X[:3]))
    with pytest.raises(ValueError):
        model_from_bytes(model_to_bytes(m) + b"\0")
