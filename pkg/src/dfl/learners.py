"""Learners that fit f = H @ alpha inside a certified-fair hypothesis space.

``H`` is p x k for linear hypotheses (columns are the returned hypotheses) and
``C`` is n x k for kernel hypotheses (columns are coefficient vectors over the
training points).
"""

import logging
import struct
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg
from scipy.special import expit

from dfl.data import DDOF
from dfl.hypothesis import KernelSpec, gram_matrix

log = logging.getLogger(__name__)

JITTER_SCALE = 1e-10
PSD_TOL = 1e-8

LINEAR_KINDS = ("dfrr", "dfpca+ridge", "baseline-ridge", "baseline-pca+ridge")
LOGISTIC_KINDS = ("dfgr", "baseline-logistic")
KERNEL_KINDS = ("dfkrr",)


class SingularSystemError(np.linalg.LinAlgError):
    def __init__(self, message, rank):
        super().__init__(message)
        self.rank = rank


class RankDeficientError(np.linalg.LinAlgError):
    pass


class NonConvergenceError(RuntimeError):
    def __init__(self, message, alpha):
        super().__init__(message)
        self.alpha = alpha


@dataclass
class FairModel:
    alpha: np.ndarray
    basis: np.ndarray  # p x k weights, or n x k kernel coefficients
    lam: float
    kind: str
    kernel_spec: KernelSpec = None
    X_train: np.ndarray = None
    converged: bool = True
    n_iter: int = 0
    jitter: float = 0.0
    info: dict = field(default_factory=dict)

    @property
    def k(self):
        return int(self.alpha.shape[0])

    def weight_vector(self):
        """f as a p-vector (linear kinds) or an n-vector of kernel weights."""
        return self.basis @ self.alpha


@dataclass
class PcaSubspace:
    coeff_vectors: np.ndarray  # k x q, column j is alpha_j
    eigenvalues: np.ndarray  # descending
    basis: np.ndarray  # H, p x k
    jitter: float = 0.0

    @property
    def directions(self):
        """p x q projection matrix H @ alpha, unit columns."""
        return self.basis @ self.coeff_vectors


def _check_lambda(lam):
    if lam < 0 or not np.isfinite(lam):
        raise ValueError(f"lambda must be finite and non-negative, got {lam}")


def _spd_solve(A, b):
    return scipy.linalg.cho_solve(scipy.linalg.cho_factor(A, lower=True), b)


def _jitter(G):
    return JITTER_SCALE * float(np.trace(G)) / G.shape[0]


# --------------------------------------------------------------------------
# Ridge regression in the fair space
# --------------------------------------------------------------------------


def dfrr_fit(H, X, Y, lam):
    """alpha = (H'X'XH + lam I)^-1 H'X'Y, by Cholesky (or rank-checked solve at lam=0)."""
    _check_lambda(lam)
    H, X, Y = (np.asarray(a, dtype=float) for a in (H, X, Y))
    if H.ndim != 2 or H.shape[1] < 1:
        raise ValueError("H must be a p x k matrix with k >= 1")
    if X.shape[1] != H.shape[0] or X.shape[0] != Y.shape[0]:
        raise ValueError(f"dimension mismatch: X {X.shape}, H {H.shape}, Y {Y.shape}")
    Z = X @ H
    k = H.shape[1]
    A = Z.T @ Z + lam * np.eye(k)
    b = Z.T @ Y
    if lam == 0:
        rank = np.linalg.matrix_rank(A)
        if rank < k:
            raise SingularSystemError(
                f"H'X'XH is singular (rank {rank} < k={k}) and lambda is 0", rank
            )
    try:
        alpha = _spd_solve(A, b)
    except np.linalg.LinAlgError:
        alpha = scipy.linalg.solve(A, b, assume_a="sym")
    return FairModel(alpha, H, float(lam), "dfrr")


# --------------------------------------------------------------------------
# Kernel ridge regression in the fair space
# --------------------------------------------------------------------------


def dfkrr_fit(K, C, Y, lam, X_train=None, kernel_spec=None):
    """alpha = [C'(K+lam I)'(K+lam I)C]^-1 C'(K+lam I)'Y.

    Predictions on a new point z are sum_j (C alpha)_j K(x_j, z), so pass the
    training features and kernel to make the model usable by ``predict``.
    """
    _check_lambda(lam)
    K, C, Y = (np.asarray(a, dtype=float) for a in (K, C, Y))
    n = K.shape[0]
    if K.shape != (n, n) or C.ndim != 2 or C.shape[0] != n or Y.shape != (n,):
        raise ValueError(f"dimension mismatch: K {K.shape}, C {C.shape}, Y {Y.shape}")
    k = C.shape[1]
    KL = K + lam * np.eye(n)
    B = KL @ C
    G = B.T @ B
    rhs = C.T @ (KL.T @ Y)
    jitter = 0.0
    if np.linalg.matrix_rank(B) < k:
        jitter = _jitter(G)
        log.info("dfkrr: rank-deficient system, adding jitter %.3g", jitter)
    try:
        alpha = _spd_solve(G + jitter * np.eye(k), rhs)
    except np.linalg.LinAlgError:
        raise RankDeficientError(
            f"C'(K+lam I)'(K+lam I)C is rank-deficient even after jitter {jitter:.3g}"
        ) from None
    return FairModel(
        alpha,
        C,
        float(lam),
        "dfkrr",
        kernel_spec=kernel_spec,
        X_train=None if X_train is None else np.asarray(X_train, dtype=float),
        jitter=jitter,
    )


# --------------------------------------------------------------------------
# Logistic regression in the fair space
# --------------------------------------------------------------------------


def dfgr_objective(alpha, H, X, Y, lam):
    """-sum log p(y_i | x_i, f) + lam ||H alpha||^2 with f = H alpha."""
    w = np.asarray(H) @ alpha
    z = X @ w
    return float(np.sum(np.logaddexp(0.0, z) - Y * z) + lam * (w @ w))


def dfgr_gradient(alpha, H, X, Y, lam):
    """H'X'(p - Y) + 2 lam H'H alpha, the analytic gradient of the objective."""
    w = H @ alpha
    return H.T @ (X.T @ (expit(X @ w) - Y) + 2.0 * lam * w)


def dfgr_fit(H, X, Y, lam, max_iter=100, tol=1e-8, step=1.0, max_halvings=40):
    """Damped Newton on the regularized logistic loss over alpha.

    Each iteration tries ``step`` times the Newton direction and halves it
    until the objective does not increase. When H has dependent columns the
    iteration runs in an orthonormal parametrization of the row space of H,
    which gives the minimum-norm alpha (the objective only sees H alpha).
    """
    H, X, Y = (np.asarray(a, dtype=float) for a in (H, X, Y))
    if not lam > 0:
        raise ValueError(f"dfgr needs lambda > 0, got {lam}")
    if not np.isin(Y, (0.0, 1.0)).all():
        raise ValueError("dfgr labels must be 0/1")
    if X.shape[1] != H.shape[0] or X.shape[0] != Y.shape[0]:
        raise ValueError(f"dimension mismatch: X {X.shape}, H {H.shape}, Y {Y.shape}")
    if not step > 0:
        raise ValueError("step must be positive")
    k = H.shape[1]

    rank = np.linalg.matrix_rank(H)
    if rank < k:
        U, S, Vt = np.linalg.svd(H, full_matrices=False)
        B, V = U[:, :rank] * S[:rank], Vt[:rank].T
    else:
        B, V = H, None

    to_alpha = (lambda b: b) if V is None else (lambda b: V @ b)
    Z = X @ B
    BtB = B.T @ B
    beta = np.zeros(B.shape[1])
    J = dfgr_objective(beta, B, X, Y, lam)
    history = [J]
    converged, increases, it = False, 0, 0
    for it in range(max_iter + 1):
        alpha = to_alpha(beta)
        grad_alpha = dfgr_gradient(alpha, H, X, Y, lam)
        if np.max(np.abs(grad_alpha)) <= tol:
            converged = True
            break
        if it == max_iter:
            break
        pr = expit(Z @ beta)
        g = Z.T @ (pr - Y) + 2.0 * lam * (BtB @ beta)
        hess = (Z * (pr * (1.0 - pr))[:, None]).T @ Z + 2.0 * lam * BtB
        try:
            direction = _spd_solve(hess, g)
        except np.linalg.LinAlgError:
            direction = np.linalg.lstsq(hess, g, rcond=None)[0]

        t = step
        for _ in range(max_halvings):
            cand = beta - t * direction
            J_new = dfgr_objective(cand, B, X, Y, lam)
            if J_new <= J:
                break
            t *= 0.5
        if J_new > J:
            if J_new - J <= 1e-12 * (1.0 + abs(J)):
                # stalled at floating-point resolution of the objective
                break
            increases += 1
            if increases >= 5:
                raise NonConvergenceError(
                    "dfgr objective increased on 5 consecutive steps", to_alpha(cand)
                )
        else:
            increases = 0
        beta, J = cand, J_new
        history.append(J)

    alpha = to_alpha(beta)
    if not converged:
        log.info("dfgr stopped after %d iterations without reaching tol=%g", it, tol)
    return FairModel(
        alpha,
        H,
        float(lam),
        "dfgr",
        converged=converged,
        n_iter=it,
        info={"objective_history": history, "rank": int(rank)},
    )


# --------------------------------------------------------------------------
# PCA in the fair space
# --------------------------------------------------------------------------


def covariance_matrix(X):
    X = np.asarray(X, dtype=float)
    return np.atleast_2d(np.cov(X, rowvar=False, ddof=DDOF))


def dfpca_fit(H, Sigma_x, q):
    """Top-q generalized eigenvectors of (H' Sigma H, H'H), scaled to ||H alpha|| = 1."""
    H = np.asarray(H, dtype=float)
    S = np.asarray(Sigma_x, dtype=float)
    p, k = H.shape
    if not 1 <= q <= k:
        raise ValueError(f"q must satisfy 1 <= q <= k={k}, got {q}")
    if S.shape != (p, p):
        raise ValueError(f"Sigma_x has shape {S.shape}, expected {(p, p)}")
    if np.max(np.abs(S - S.T), initial=0.0) > 1e-8 * max(1.0, np.abs(S).max()):
        raise ValueError("Sigma_x is not symmetric")
    S = 0.5 * (S + S.T)
    min_eig = np.linalg.eigvalsh(S)[0]
    if min_eig < -PSD_TOL:
        raise ValueError(f"Sigma_x is not positive semidefinite (eigenvalue {min_eig:.3g})")

    A = H.T @ S @ H
    A = 0.5 * (A + A.T)
    G = H.T @ H
    G = 0.5 * (G + G.T)
    jitter = 0.0
    try:
        scipy.linalg.cholesky(G, lower=True)
    except np.linalg.LinAlgError:
        jitter = _jitter(G)
        log.info("dfpca: H'H not positive definite, adding jitter %.3g", jitter)
    w, vecs = scipy.linalg.eigh(A, G + jitter * np.eye(k))
    order = np.argsort(w)[::-1][:q]
    w, vecs = w[order], vecs[:, order]

    V = H @ vecs
    norms = np.linalg.norm(V, axis=0)
    if np.any(norms == 0):
        raise RankDeficientError("a generalized eigenvector lies in the null space of H")
    vecs = vecs / norms
    V = V / norms
    # sign convention: largest-magnitude entry of H alpha is positive
    pivot = np.argmax(np.abs(V), axis=0)
    signs = np.sign(V[pivot, np.arange(q)])
    signs[signs == 0] = 1.0
    return PcaSubspace(vecs * signs, w, H, jitter)


def dfpca_ridge_fit(H, X, Y, lam, q, extra_basis=None):
    """Project onto q fair principal directions, then ridge on the projection.

    ``extra_basis`` (p x j) columns are appended to the directions before the
    ridge fit, e.g. the indicator of a constant intercept feature.
    """
    X = np.asarray(X, dtype=float)
    sub = dfpca_fit(H, covariance_matrix(X), q)
    V = sub.directions
    if extra_basis is not None:
        V = np.hstack([V, np.asarray(extra_basis, dtype=float).reshape(V.shape[0], -1)])
    model = dfrr_fit(V, X, Y, lam)
    model.kind = "dfpca+ridge"
    model.info["pca"] = sub
    return model


# --------------------------------------------------------------------------
# Unconstrained baselines
# --------------------------------------------------------------------------


def baseline_fit(kind, X, Y, lam, q=None, **kw):
    X = np.asarray(X, dtype=float)
    eye = np.eye(X.shape[1])
    if kind == "ridge":
        model = dfrr_fit(eye, X, Y, lam)
    elif kind == "logistic":
        model = dfgr_fit(eye, X, Y, lam, **kw)
    elif kind == "pca+ridge":
        model = dfpca_ridge_fit(eye, X, Y, lam, X.shape[1] if q is None else q, **kw)
    else:
        raise ValueError(f"unknown baseline {kind!r}")
    model.kind = f"baseline-{kind}"
    return model


# --------------------------------------------------------------------------
# Prediction
# --------------------------------------------------------------------------


def predict(model, X_new):
    X_new = np.atleast_2d(np.asarray(X_new, dtype=float))
    if model.kind in KERNEL_KINDS:
        if model.X_train is None or model.kernel_spec is None:
            raise ValueError("kernel model lacks training features or kernel spec")
        if X_new.shape[1] != model.X_train.shape[1]:
            raise ValueError(
                f"X_new has {X_new.shape[1]} features, model expects {model.X_train.shape[1]}"
            )
        return gram_matrix(X_new, model.kernel_spec, model.X_train) @ model.weight_vector()
    if X_new.shape[1] != model.basis.shape[0]:
        raise ValueError(f"X_new has {X_new.shape[1]} features, model expects {model.basis.shape[0]}")
    scores = X_new @ model.weight_vector()
    if model.kind in LOGISTIC_KINDS:
        return expit(scores)
    if model.kind in LINEAR_KINDS:
        return scores
    raise ValueError(f"unknown model kind {model.kind!r}")


def classify(scores, threshold=0.5):
    return (np.asarray(scores) >= threshold).astype(np.int64)


# --------------------------------------------------------------------------
# Binary container
#
# <4s H B   magic "DFLM", version, length of kind tag; then the ascii tag
# <d Q Q Q  lambda, k, basis rows, basis cols
# alpha (k float64) then basis (rows*cols float64), little-endian row-major
# kernel models append <B d Q Q (kernel code, gamma, X rows, X cols) + X
# --------------------------------------------------------------------------

MODEL_MAGIC = b"DFLM"
MODEL_VERSION = 1
_KCODE = {"linear": 1, "rbf": 2}


def _f64(a):
    return np.ascontiguousarray(a, dtype="<f8").tobytes()


def model_to_bytes(model):
    tag = model.kind.encode("ascii")
    rows, cols = model.basis.shape
    out = [
        struct.pack("<4sHB", MODEL_MAGIC, MODEL_VERSION, len(tag)),
        tag,
        struct.pack("<dQQQ", model.lam, model.k, rows, cols),
        _f64(model.alpha),
        _f64(model.basis),
    ]
    if model.kind in KERNEL_KINDS:
        spec, Xt = model.kernel_spec, model.X_train
        gamma = np.nan if spec.gamma is None else spec.gamma
        out += [struct.pack("<BdQQ", _KCODE[spec.kind], gamma, *Xt.shape), _f64(Xt)]
    return b"".join(out)


def model_from_bytes(buf):
    magic, version, tlen = struct.unpack_from("<4sHB", buf)
    if magic != MODEL_MAGIC or version != MODEL_VERSION:
        raise ValueError("not a model container")
    off = 7
    kind = buf[off : off + tlen].decode("ascii")
    off += tlen
    lam, k, rows, cols = struct.unpack_from("<dQQQ", buf, off)
    off += 32

    def take(count, shape):
        nonlocal off
        a = np.frombuffer(buf, dtype="<f8", count=count, offset=off).astype(float)
        off += 8 * count
        return a.reshape(shape)

    alpha = take(k, (k,))
    basis = take(rows * cols, (rows, cols))
    spec = Xt = None
    if kind in KERNEL_KINDS:
        code, gamma, xr, xc = struct.unpack_from("<BdQQ", buf, off)
        off += 25
        spec = KernelSpec({v: n for n, v in _KCODE.items()}[code], None if np.isnan(gamma) else gamma)
        Xt = take(xr * xc, (xr, xc))
    if off != len(buf):
        raise ValueError("trailing bytes in model container")
    return FairModel(alpha, basis, lam, kind, kernel_spec=spec, X_train=Xt)
