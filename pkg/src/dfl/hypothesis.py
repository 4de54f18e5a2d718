"""Random hypothesis batches and their prediction matrices.

A linear batch is an m x p weight matrix (row t is hypothesis h_t). A kernel
batch is an m x n coefficient matrix C over the training points, so that
h_t(x_j) = sum_i C[t, i] K(x_i, x_j).
"""

import struct
from dataclasses import dataclass

import numpy as np
from scipy.spatial.distance import cdist, pdist

from dfl import _random

SYMMETRY_TOL = 1e-8
MEDIAN_SAMPLE = 2000


@dataclass(frozen=True)
class KernelSpec:
    kind: str = "rbf"
    gamma: float = None  # rbf bandwidth; None means median pairwise distance

    def __post_init__(self):
        if self.kind not in ("linear", "rbf"):
            raise ValueError(f"unknown kernel {self.kind!r}")
        if self.gamma is not None and self.gamma <= 0:
            raise ValueError(f"rbf gamma must be positive, got {self.gamma}")

    def resolve(self, X):
        """Fix the bandwidth from training data if it was left to the heuristic."""
        if self.kind != "rbf" or self.gamma is not None:
            return self
        return KernelSpec("rbf", median_heuristic(X))


def median_heuristic(X):
    X = np.asarray(X, dtype=float)
    if X.shape[0] > MEDIAN_SAMPLE:
        X = X[:: int(np.ceil(X.shape[0] / MEDIAN_SAMPLE))]
    d = pdist(X)
    d = d[d > 0]
    return float(np.median(d)) if d.size else 1.0


def gram_matrix(X, spec, Z=None):
    """K[i, j] = k(X[i], Z[j]); with Z omitted this is the training Gram matrix."""
    X = np.atleast_2d(np.asarray(X, dtype=float))
    Zm = X if Z is None else np.atleast_2d(np.asarray(Z, dtype=float))
    if X.shape[1] != Zm.shape[1]:
        raise ValueError(f"feature counts differ: {X.shape[1]} vs {Zm.shape[1]}")
    if spec.kind == "linear":
        K = X @ Zm.T
    else:
        if spec.gamma is None:
            raise ValueError("rbf gamma unresolved; call KernelSpec.resolve first")
        K = np.exp(-cdist(X, Zm, "sqeuclidean") / (2.0 * spec.gamma**2))
    if Z is None:
        K = 0.5 * (K + K.T)
    return K


@dataclass
class LinearHypothesisBatch:
    weights: np.ndarray  # (m, p)
    sigma: float
    seed: int

    @property
    def m(self):
        return self.weights.shape[0]

    def select(self, indices):
        """p x k basis matrix H of the chosen hypotheses."""
        return self.weights[np.asarray(indices, dtype=np.int64)].T


@dataclass
class KernelHypothesisBatch:
    coeffs: np.ndarray  # (m, n)
    sigma: float
    seed: int
    kernel_spec: KernelSpec = KernelSpec()

    @property
    def m(self):
        return self.coeffs.shape[0]

    def select(self, indices):
        """n x k coefficient matrix C of the chosen hypotheses."""
        return self.coeffs[np.asarray(indices, dtype=np.int64)].T


def _gaussian(m, cols, sigma, seed):
    if m < 1 or cols < 1:
        raise ValueError("batch dimensions must be positive")
    if sigma < 0:
        raise ValueError(f"sigma must be non-negative, got {sigma}")
    rng = _random.stream(seed, _random.HYPOTHESIS)
    return sigma * rng.standard_normal((m, cols))


def generate_linear(m, p, sigma, seed):
    return LinearHypothesisBatch(_gaussian(m, p, sigma, seed), float(sigma), int(seed))


def generate_kernel(m, n, sigma, seed, kernel_spec=KernelSpec()):
    return KernelHypothesisBatch(
        _gaussian(m, n, sigma, seed), float(sigma), int(seed), kernel_spec
    )


def predict_linear(batch, X):
    """Prediction matrix of shape (m, n), entry (t, i) = <h_t, x_i>."""
    W = batch.weights if isinstance(batch, LinearHypothesisBatch) else np.asarray(batch)
    X = np.asarray(X, dtype=float)
    if X.ndim != 2 or X.shape[1] != W.shape[1]:
        raise ValueError(f"X has shape {X.shape}, hypotheses expect {W.shape[1]} columns")
    return W @ X.T


def predict_kernel(batch, K):
    """Prediction matrix C K for a training Gram matrix K."""
    C = batch.coeffs if isinstance(batch, KernelHypothesisBatch) else np.asarray(batch)
    K = np.asarray(K, dtype=float)
    if K.ndim != 2 or K.shape[0] != K.shape[1] or K.shape[0] != C.shape[1]:
        raise ValueError(f"Gram matrix shape {K.shape} does not fit coefficients {C.shape}")
    if not np.isfinite(K).all():
        raise ValueError("Gram matrix has non-finite entries")
    if np.max(np.abs(K - K.T), initial=0.0) > SYMMETRY_TOL:
        raise ValueError("Gram matrix is not symmetric")
    return C @ K


# --------------------------------------------------------------------------
# Binary container
#
# header  <4s H B B Q Q d Q : magic "DFLH", version, batch kind (0 linear,
#         1 kernel), kernel code (0 none, 1 linear, 2 rbf), m, p|n, sigma, seed
# kernel  <d                : rbf gamma (NaN when left to the heuristic)
# payload m * (p|n) float64, little-endian, row-major
# --------------------------------------------------------------------------

BATCH_MAGIC = b"DFLH"
BATCH_VERSION = 1
_HEADER = struct.Struct("<4sHBBQQdQ")
_KERNEL_CODES = {None: 0, "linear": 1, "rbf": 2}


def batch_to_bytes(batch):
    if isinstance(batch, LinearHypothesisBatch):
        kind, kcode, data, extra = 0, 0, batch.weights, b""
    else:
        spec = batch.kernel_spec
        kind, kcode, data = 1, _KERNEL_CODES[spec.kind], batch.coeffs
        extra = struct.pack("<d", np.nan if spec.gamma is None else spec.gamma)
    m, cols = data.shape
    head = _HEADER.pack(BATCH_MAGIC, BATCH_VERSION, kind, kcode, m, cols, batch.sigma, batch.seed)
    return head + extra + np.ascontiguousarray(data, dtype="<f8").tobytes()


def batch_from_bytes(buf):
    if len(buf) < _HEADER.size:
        raise ValueError("truncated batch header")
    magic, version, kind, kcode, m, cols, sigma, seed = _HEADER.unpack_from(buf)
    if magic != BATCH_MAGIC:
        raise ValueError(f"bad magic {magic!r}")
    if version != BATCH_VERSION:
        raise ValueError(f"unsupported batch version {version}")
    off = _HEADER.size
    spec = None
    if kind == 1:
        (gamma,) = struct.unpack_from("<d", buf, off)
        off += 8
        name = {v: k for k, v in _KERNEL_CODES.items()}[kcode]
        spec = KernelSpec(name, None if np.isnan(gamma) else gamma)
    expected = off + 8 * m * cols
    if len(buf) != expected:
        raise ValueError(f"payload length {len(buf)} != expected {expected}")
    data = np.frombuffer(buf, dtype="<f8", offset=off).reshape(m, cols).astype(float)
    if kind == 0:
        return LinearHypothesisBatch(data, sigma, seed)
    return KernelHypothesisBatch(data, sigma, seed, spec)


def save_batch(batch, path):
    with open(path, "wb") as fh:
        fh.write(batch_to_bytes(batch))


def load_batch(path):
    with open(path, "rb") as fh:
        return batch_from_bytes(fh.read())
