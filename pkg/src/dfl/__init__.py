"""Distributed fair learning.

A data center (DC) holding features and labels learns a model inside the span
of random hypotheses that a third party (TP), which alone holds the binary
sensitive attribute, has certified as having small covariance with it. Only
prediction matrices and index sets cross the wire.
"""

from dfl.data import Dataset, SplitIndices, load_csv, split, standardize, synth_biased
from dfl.fairfilter import (
    FairIndexSet,
    estimate_cov,
    hard_filter,
    reference_hypothesis,
    soft_filter,
)
from dfl.hypothesis import (
    KernelHypothesisBatch,
    KernelSpec,
    LinearHypothesisBatch,
    generate_kernel,
    generate_linear,
    gram_matrix,
    predict_kernel,
    predict_linear,
)
from dfl.learners import (
    FairModel,
    PcaSubspace,
    baseline_fit,
    classify,
    dfgr_fit,
    dfkrr_fit,
    dfpca_fit,
    dfrr_fit,
    predict,
)
from dfl.metrics import MetricsReport, evaluate, statistical_parity

__version__ = "0.1.0"

__all__ = [
    "Dataset",
    "SplitIndices",
    "load_csv",
    "split",
    "standardize",
    "synth_biased",
    "FairIndexSet",
    "estimate_cov",
    "hard_filter",
    "soft_filter",
    "reference_hypothesis",
    "LinearHypothesisBatch",
    "KernelHypothesisBatch",
    "KernelSpec",
    "generate_linear",
    "generate_kernel",
    "predict_linear",
    "predict_kernel",
    "gram_matrix",
    "FairModel",
    "PcaSubspace",
    "dfrr_fit",
    "dfkrr_fit",
    "dfgr_fit",
    "dfpca_fit",
    "baseline_fit",
    "predict",
    "classify",
    "MetricsReport",
    "evaluate",
    "statistical_parity",
]
