"""Multi-trial experiments: split, standardize, certify, fit, evaluate.

Every trial sends the predictions of its random hypotheses on all n
individuals (training and test rows, dataset order) to the third party, which
holds s for the same n individuals. Models are fitted on the training rows and
scored on the test rows.
"""

import csv
import dataclasses
import hashlib
import io
import logging
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, fields, replace

import numpy as np
import yaml

from dfl import _random, theory
from dfl.data import load_csv, split, standardize, synth_biased
from dfl.hypothesis import (
    KernelSpec,
    generate_kernel,
    generate_linear,
    gram_matrix,
    predict_linear,
)
from dfl.learners import (
    baseline_fit,
    classify,
    dfgr_fit,
    dfkrr_fit,
    dfpca_ridge_fit,
    dfrr_fit,
    predict,
)
from dfl.metrics import MetricsReport, cov_fairness, evaluate
from dfl.protocol import MemoryTP, NoFairHypotheses, Policy, apply_policy, dc_request_fair_set

log = logging.getLogger(__name__)

LEARNERS = ("dfrr", "dfkrr", "dfgr", "dfpca", "baseline-ridge", "baseline-logistic",
            "baseline-pca")
CSV_COLUMNS = ["trial", "k", "SP", "ND", "err", "EP", "ED", "cov_fs", "status"]
_METRIC_FIELDS = ["sp", "nd", "classifier_error", "error_parity", "error_disparate", "cov_fs"]


@dataclass
class ExperimentConfig:
    dataset: str = "synthetic"  # "synthetic" or a CSV path
    schema: str = None  # preset name for CSV datasets
    synth_n: int = 2000
    synth_p: int = 10
    synth_bias: float = 1.0
    learner: str = "dfrr"
    m: int = 5000
    sigma: float = 1.0
    rho: float = 0.1
    soft: bool = False
    sigma2: float = 1.0
    star_row: int = -1
    lam: float = 0.1
    q: int = 5
    kernel: str = "rbf"
    gamma: float = None
    trials: int = 50
    train_frac: float = 0.75
    seed: int = 0
    tp: str = "in-process"  # "in-process", "memory", "host:port" or "remote"
    intercept: bool = True
    threshold: float = 0.5
    workers: int = 1
    max_iter: int = 100
    tol: float = 1e-8
    step: float = 1.0

    def __post_init__(self):
        self.validate()

    def validate(self):
        if self.learner not in LEARNERS:
            raise ValueError(f"learner must be one of {LEARNERS}, got {self.learner!r}")
        if self.trials < 1 or self.m < 1 or self.workers < 1:
            raise ValueError("trials, m and workers must be at least 1")
        if self.sigma < 0 or self.rho < 0 or self.sigma2 <= 0 or self.lam < 0:
            raise ValueError("sigma, rho, lam must be >= 0 and sigma2 > 0")
        if not 0 < self.train_frac < 1:
            raise ValueError("train_frac must lie in (0, 1)")
        if self.dataset != "synthetic" and self.schema is None:
            raise ValueError("CSV datasets need a schema preset")
        if self.learner == "dfpca" and self.q < 1:
            raise ValueError("q must be at least 1")

    @property
    def policy(self):
        if self.soft:
            return Policy.soft(self.sigma2, seed=None, star_row=self.star_row)
        return Policy.hard(self.rho)

    def as_dict(self):
        return dataclasses.asdict(self)


_ALIASES = {"lambda": "lam", "tp_addr": "tp", "tp-addr": "tp"}


def config_from_mapping(mapping, base=None):
    """Overlay a flat mapping on ``base`` (or the defaults); unknown keys fail."""
    known = {f.name: f for f in fields(ExperimentConfig)}
    values = dataclasses.asdict(base) if base is not None else {}
    for key, val in mapping.items():
        key = _ALIASES.get(key, key).replace("-", "_")
        if key not in known:
            raise ValueError(f"unknown config key {key!r}")
        values[key] = val
    return ExperimentConfig(**values)


def load_config(path, base=None):
    with open(path, encoding="utf-8") as fh:
        mapping = yaml.safe_load(fh) or {}
    if not isinstance(mapping, dict):
        raise ValueError("config file must be a flat key: value mapping")
    return config_from_mapping(mapping, base)


def load_dataset(cfg):
    if cfg.dataset == "synthetic":
        return synth_biased(cfg.synth_n, cfg.synth_p, cfg.synth_bias, cfg.seed)
    return load_csv(cfg.dataset, cfg.schema)


# --------------------------------------------------------------------------
# One trial
# --------------------------------------------------------------------------


@dataclass
class TrialResult:
    trial: int
    k: int
    metrics: MetricsReport = None
    status: str = "ok"

    @property
    def ok(self):
        return self.metrics is not None


IN_PROCESS = "in-process"


def _certify(cfg, preds, s, tseed, trial_id, tp):
    policy = cfg.policy
    if policy.kind == "soft":
        policy = replace(policy, seed=tseed)
    if tp == IN_PROCESS:
        fair = apply_policy(preds, s, policy.kind, policy.param, policy.seed, policy.star_row)
        if fair.k == 0:
            raise NoFairHypotheses(fair)
        return fair
    return dc_request_fair_set(tp, preds, policy, session_seed=_random.derive_seed(tseed, trial_id))


def run_trial(cfg, ds, trial_id, tp=IN_PROCESS):
    tseed = _random.derive_seed(cfg.seed, trial_id)
    sp = split(ds, cfg.train_frac, tseed, trial_id)
    std, _ = standardize(ds, sp.train)
    X = std.features
    if cfg.intercept:
        X = np.hstack([X, np.ones((X.shape[0], 1))])
    Xtr, Xte = X[sp.train], X[sp.test]
    ytr = ds.labels[sp.train]
    ones = None
    if cfg.intercept:
        ones = np.zeros((X.shape[1], 1))
        ones[-1] = 1.0

    if cfg.learner.startswith("baseline-"):
        kind = {"baseline-ridge": "ridge", "baseline-logistic": "logistic",
                "baseline-pca": "pca+ridge"}[cfg.learner]
        kw = {}
        if kind == "logistic":
            kw = dict(max_iter=cfg.max_iter, tol=cfg.tol, step=cfg.step)
        elif kind == "pca+ridge":
            kw = dict(extra_basis=ones)
        lam = cfg.lam if kind != "logistic" or cfg.lam > 0 else 1e-6
        q = min(cfg.q, X.shape[1])
        model = baseline_fit(kind, Xtr, ytr, lam, q=q, **kw)
        k = X.shape[1]
    else:
        try:
            if cfg.learner == "dfkrr":
                spec = KernelSpec(cfg.kernel, cfg.gamma).resolve(Xtr)
                batch = generate_kernel(cfg.m, Xtr.shape[0], cfg.sigma, tseed, spec)
                # hypotheses live on the training points, evaluated at all n rows
                preds = batch.coeffs @ gram_matrix(Xtr, spec, X)
            else:
                batch = generate_linear(cfg.m, X.shape[1], cfg.sigma, tseed)
                preds = predict_linear(batch, X)
            fair = _certify(cfg, preds, ds.sensitive, tseed, trial_id, tp)
        except NoFairHypotheses as exc:
            return TrialResult(trial_id, 0, None, f"failed: {exc}")
        k = fair.k
        basis = batch.select(fair.indices)
        if ones is not None and cfg.learner in ("dfrr", "dfgr"):
            # the constant hypothesis has zero covariance with any s
            basis = np.hstack([basis, ones])
        if cfg.learner == "dfrr":
            model = dfrr_fit(basis, Xtr, ytr, cfg.lam)
        elif cfg.learner == "dfgr":
            model = dfgr_fit(basis, Xtr, ytr, cfg.lam, max_iter=cfg.max_iter, tol=cfg.tol,
                             step=cfg.step)
        elif cfg.learner == "dfpca":
            model = dfpca_ridge_fit(basis, Xtr, ytr, cfg.lam, min(cfg.q, k), extra_basis=ones)
        else:
            model = dfkrr_fit(gram_matrix(Xtr, spec), basis, ytr, cfg.lam, X_train=Xtr,
                              kernel_spec=spec)

    scores = predict(model, Xte)
    pred = classify(scores, cfg.threshold)
    return TrialResult(trial_id, k, evaluate(pred, ds.labels[sp.test], ds.sensitive[sp.test], scores))


# --------------------------------------------------------------------------
# Multi-trial runs
# --------------------------------------------------------------------------


def _fmt(x):
    return repr(float(x))


@dataclass
class RunResult:
    config: ExperimentConfig
    trials: list

    @property
    def succeeded(self):
        return [t for t in self.trials if t.ok]

    @property
    def n_failed(self):
        return len(self.trials) - len(self.succeeded)

    def column(self, name):
        """Per-trial values of a MetricsReport field over successful trials."""
        return np.array([getattr(t.metrics, name) for t in self.succeeded], dtype=float)

    @property
    def summary(self):
        """field -> (mean, sample std); std is NaN with fewer than two trials."""
        out = {}
        ks = np.array([t.k for t in self.succeeded], dtype=float)
        for name, vals in [("k", ks)] + [(f, self.column(f)) for f in _METRIC_FIELDS]:
            if vals.size == 0:
                out[name] = (math.nan, math.nan)
            else:
                std = float(np.std(vals, ddof=1)) if vals.size > 1 else math.nan
                out[name] = (float(np.mean(vals)), std)
        return out

    def to_csv(self):
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(CSV_COLUMNS)
        for t in self.trials:
            if t.ok:
                w.writerow([t.trial, t.k] + [_fmt(getattr(t.metrics, f)) for f in _METRIC_FIELDS]
                           + [t.status])
            else:
                w.writerow([t.trial, t.k] + [""] * len(_METRIC_FIELDS) + [t.status])
        summ = self.summary
        w.writerow(["mean±std", f"{summ['k'][0]:.1f}"]
                   + [f"{summ[f][0]:.4f}±{summ[f][1]:.4f}" for f in _METRIC_FIELDS]
                   + [f"ok={len(self.succeeded)} failed={self.n_failed}"])
        return buf.getvalue()


def _open_tp(cfg, ds):
    """IN_PROCESS, a MemoryTP, an address string, or None (address from the
    environment)."""
    if cfg.tp == IN_PROCESS:
        return IN_PROCESS
    if cfg.tp == "memory":
        return MemoryTP(ds.sensitive, seed=cfg.seed)
    if cfg.tp == "remote":
        return None
    return cfg.tp


def run(cfg, ds=None):
    """Run ``cfg.trials`` independent trials; results are ordered by trial id."""
    ds = load_dataset(cfg) if ds is None else ds
    tp = _open_tp(cfg, ds)
    ids = range(cfg.trials)
    if cfg.workers > 1:
        with ThreadPoolExecutor(cfg.workers) as pool:
            trials = list(pool.map(lambda i: run_trial(cfg, ds, i, tp), ids))
    else:
        trials = [run_trial(cfg, ds, i, tp) for i in ids]
    for t in trials:
        if not t.ok:
            log.warning("trial %d %s", t.trial, t.status)
    return RunResult(cfg, trials)


SWEEP_COLUMNS = ["rho", "mean_SP", "mean_err", "mean_k", "ok", "failed"]


@dataclass
class SweepResult:
    rows: list  # (rho, mean SP, mean error, mean k, n ok, n failed)
    runs: list

    def to_csv(self):
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(SWEEP_COLUMNS)
        for rho, sp, err, k, ok, failed in self.rows:
            w.writerow([_fmt(rho), _fmt(sp), _fmt(err), _fmt(k), ok, failed])
        return buf.getvalue()


def sweep_rho(cfg, rho_grid, ds=None):
    """One run per threshold; every grid point reuses the same master seed, so
    splits and hypothesis draws are paired across points."""
    ds = load_dataset(cfg) if ds is None else ds
    rows, runs = [], []
    for rho in rho_grid:
        res = run(replace(cfg, rho=float(rho), soft=False), ds)
        summ = res.summary
        # mean k over every trial, failed ones counted at k=0
        mean_k = float(np.mean([t.k for t in res.trials]))
        rows.append((float(rho), summ["sp"][0], summ["classifier_error"][0], mean_k,
                     len(res.succeeded), res.n_failed))
        runs.append(res)
    return SweepResult(rows, runs)


@dataclass
class CovSignResult:
    trials: list  # (trial, cov) with cov NaN for failed trials

    @property
    def fraction_positive(self):
        vals = [c for _, c in self.trials if not math.isnan(c)]
        return sum(c > 0 for c in vals) / len(vals) if vals else math.nan

    def to_csv(self):
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["trial", "cov_fs"])
        for t, c in self.trials:
            w.writerow([t, "" if math.isnan(c) else _fmt(c)])
        return buf.getvalue()


def cov_signs(result):
    return CovSignResult([(t.trial, t.metrics.cov_fs if t.ok else math.nan) for t in result.trials])


def cov_sign_diagnostic(cfg, trials=None, ds=None):
    """Signed cov(f(x), s) of each trial's fitted model on its test rows."""
    if trials is not None:
        cfg = replace(cfg, trials=trials)
    return cov_signs(run(cfg, ds))


def constant_cov(n, s):
    """cov of a constant predictor with s; zero by construction."""
    return cov_fairness(np.ones(n), s)


# --------------------------------------------------------------------------
# Theory validation
# --------------------------------------------------------------------------

VALIDATORS = {
    "lemma2": theory.validate_lemma2,
    "lemma3": theory.validate_lemma3,
    "lemma5": theory.validate_lemma5,
    "theorem4": theory.validate_theorem4,
}


def validate_theory(which="all", params=None, out_dir=None):
    """Run the selected validators; ``params`` maps validator name to keyword
    overrides. Returns (reports, passed) where passed covers required reports."""
    names = list(VALIDATORS) if which == "all" else [which]
    params = params or {}
    reports = []
    for name in names:
        if name not in VALIDATORS:
            raise ValueError(f"unknown validator {name!r}")
        reports.append(VALIDATORS[name](**params.get(name, {})))
    if which in ("all", "theorem4"):
        reports.append(theory.theorem4_counterexample())
    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)
        for rep in reports:
            with open(os.path.join(out_dir, f"{rep.name}.csv"), "w", encoding="utf-8") as fh:
                fh.write(rep.to_csv())
            with open(os.path.join(out_dir, f"{rep.name}.txt"), "w", encoding="utf-8") as fh:
                fh.write(rep.to_text())
    return reports, all(r.passed for r in reports if r.required)


# --------------------------------------------------------------------------
# Manifest
# --------------------------------------------------------------------------


def blob_hash(data):
    """Content hash in git's blob format."""
    return hashlib.sha1(b"blob %d\0" % len(data) + data).hexdigest()


def manifest_text(cfg, command, extra_inputs=()):
    lines = [f"command: {command}", "config:"]
    lines += ["  " + ln for ln in yaml.safe_dump(cfg.as_dict(), sort_keys=True).splitlines()]
    lines.append("inputs:")
    paths = list(extra_inputs)
    if cfg.dataset != "synthetic":
        paths.insert(0, cfg.dataset)
    for path in paths:
        with open(path, "rb") as fh:
            lines.append(f"  {path}: {blob_hash(fh.read())}")
    if not paths:
        lines.append("  (synthetic data, generated from the seed)")
    return "\n".join(lines) + "\n"
