"""Dataset ingestion, standardization, reproducible splits and synthetic data."""

import csv
import math
import os
import re
from dataclasses import dataclass, field, replace

import numpy as np

from dfl import _random

# Every variance/covariance in the package divides by n (population convention).
DDOF = 0

MISSING_TOKENS = frozenset({"", "?", "na", "nan", "null", "none"})


class CsvParseError(ValueError):
    def __init__(self, message, line):
        super().__init__(f"line {line}: {message}")
        self.line = line


class SchemaError(ValueError):
    pass


class SplitError(ValueError):
    pass


@dataclass
class Dataset:
    features: np.ndarray
    labels: np.ndarray
    sensitive: np.ndarray
    feature_names: list = field(default_factory=list)
    n_dropped: int = 0

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=float)
        self.labels = np.asarray(self.labels, dtype=float)
        self.sensitive = np.asarray(self.sensitive, dtype=float)
        if self.features.ndim != 2:
            raise ValueError("features must be a 2-d matrix")
        n = self.features.shape[0]
        if self.labels.shape != (n,) or self.sensitive.shape != (n,):
            raise ValueError(
                f"leading dimensions differ: features {n}, labels "
                f"{self.labels.shape}, sensitive {self.sensitive.shape}"
            )
        if n < 2:
            raise ValueError("a dataset needs at least 2 rows")
        if not np.isin(self.sensitive, (0.0, 1.0)).all():
            raise ValueError("sensitive attribute must be coded 0/1")
        for name, arr in (("features", self.features), ("labels", self.labels)):
            if not np.isfinite(arr).all():
                raise ValueError(f"non-finite values in {name}")
        if not self.feature_names:
            self.feature_names = [f"x{j}" for j in range(self.features.shape[1])]
        if len(self.feature_names) != self.features.shape[1]:
            raise ValueError("feature_names length does not match feature count")

    @property
    def n(self):
        return self.features.shape[0]

    @property
    def p(self):
        return self.features.shape[1]

    def subset(self, idx):
        idx = np.asarray(idx, dtype=np.int64)
        return replace(
            self,
            features=self.features[idx],
            labels=self.labels[idx],
            sensitive=self.sensitive[idx],
            feature_names=list(self.feature_names),
        )


# --------------------------------------------------------------------------
# CSV ingestion
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class Binarizer:
    """Maps raw cell strings to {0, 1}.

    ``kind`` is one of ``binary`` (cell must already read 0 or 1),
    ``threshold`` (1 iff float(cell) > value), ``equals`` (1 iff the cell
    equals value) or ``in`` (1 iff the cell is one of value).
    """

    kind: str = "binary"
    value: object = None

    def __call__(self, cells):
        out = np.empty(len(cells), dtype=float)
        for i, cell in enumerate(cells):
            out[i] = self._one(cell.strip())
        return out

    def _one(self, cell):
        if self.kind == "binary":
            v = _as_float(cell)
            if v not in (0.0, 1.0):
                raise SchemaError(f"value {cell!r} is not 0/1")
            return v
        if self.kind == "threshold":
            v = _as_float(cell)
            if v is None:
                raise SchemaError(f"value {cell!r} is not numeric")
            return float(v > self.value)
        if self.kind == "equals":
            return float(_same(cell, self.value))
        if self.kind == "in":
            return float(any(_same(cell, v) for v in self.value))
        raise SchemaError(f"unknown binarization rule {self.kind!r}")


def _as_float(cell):
    try:
        return float(cell)
    except ValueError:
        return None


def _same(cell, value):
    if isinstance(value, (int, float)):
        v = _as_float(cell)
        return v is not None and v == value
    return cell == str(value)


@dataclass(frozen=True)
class CsvSchema:
    label: str
    sensitive: str
    features: tuple = None  # None: every column not otherwise claimed
    exclude: tuple = ()
    sensitive_rule: Binarizer = Binarizer("binary")
    label_rule: Binarizer = None  # None: labels read as reals


PRESETS = {
    # UCI Communities and Crime with a header row added from communities.names.
    "community_crime": CsvSchema(
        label="ViolentCrimesPerPop",
        sensitive="racepctblack",
        exclude=("state", "county", "community", "communityname", "fold"),
        sensitive_rule=Binarizer("threshold", 0.5),
        label_rule=Binarizer("threshold", 0.5),
    ),
    # Kaggle danofer/compass, compas-scores-two-years.csv
    "compas": CsvSchema(
        label="two_year_recid",
        sensitive="race",
        features=(
            "age",
            "juv_fel_count",
            "decile_score",
            "juv_misd_count",
            "juv_other_count",
            "priors_count",
            "days_b_screening_arrest",
            "c_days_from_compas",
            "v_decile_score",
            "start",
            "end",
        ),
        sensitive_rule=Binarizer("equals", "African-American"),
    ),
    # UCI default of credit card clients, header row taken from the second line.
    "credit": CsvSchema(
        label="default payment next month",
        sensitive="EDUCATION",
        exclude=("ID",),
        sensitive_rule=Binarizer("in", (1, 2)),
    ),
}


def load_csv(path, schema):
    """Read a header-bearing CSV into a Dataset.

    Rows with a missing cell in any used column are dropped; the count is kept
    on ``Dataset.n_dropped``. ``schema`` is a CsvSchema or a preset name.
    """
    if isinstance(schema, str):
        try:
            schema = PRESETS[schema]
        except KeyError:
            raise SchemaError(f"unknown schema preset {schema!r}") from None

    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise CsvParseError("empty file, expected a header row", 1) from None
        rows, lines = [], []
        for row in reader:
            if not row:
                continue
            if len(row) != len(header):
                raise CsvParseError(
                    f"expected {len(header)} fields, found {len(row)}", reader.line_num
                )
            rows.append(row)
            lines.append(reader.line_num)

    col = {name: j for j, name in enumerate(header)}
    for name in (schema.label, schema.sensitive):
        if name not in col:
            raise SchemaError(f"column {name!r} not in header")
    if schema.features is None:
        claimed = {schema.label, schema.sensitive, *schema.exclude}
        feature_names = [h for h in header if h not in claimed]
    else:
        feature_names = list(schema.features)
        missing = [f for f in feature_names if f not in col]
        if missing:
            raise SchemaError(f"feature columns not in header: {missing}")
    if not feature_names:
        raise SchemaError("schema selects no feature columns")

    used = [col[f] for f in feature_names] + [col[schema.label], col[schema.sensitive]]
    kept, kept_lines, dropped = [], [], 0
    for row, line in zip(rows, lines):
        if any(row[j].strip().lower() in MISSING_TOKENS for j in used):
            dropped += 1
            continue
        kept.append(row)
        kept_lines.append(line)
    if len(kept) < 2:
        raise SchemaError(f"only {len(kept)} complete rows after dropping missing data")

    X = np.empty((len(kept), len(feature_names)))
    fidx = [col[f] for f in feature_names]
    for i, (row, line) in enumerate(zip(kept, kept_lines)):
        for j, c in enumerate(fidx):
            v = _as_float(row[c])
            if v is None or not math.isfinite(v):
                raise CsvParseError(
                    f"non-numeric value {row[c]!r} in column {feature_names[j]!r}", line
                )
            X[i, j] = v

    s = schema.sensitive_rule([r[col[schema.sensitive]] for r in kept])
    label_cells = [r[col[schema.label]] for r in kept]
    if schema.label_rule is None:
        y = np.empty(len(kept))
        for i, (cell, line) in enumerate(zip(label_cells, kept_lines)):
            v = _as_float(cell)
            if v is None or not math.isfinite(v):
                raise CsvParseError(f"non-numeric label {cell!r}", line)
            y[i] = v
    else:
        y = schema.label_rule(label_cells)

    return Dataset(X, y, s, feature_names=feature_names, n_dropped=dropped)


# --------------------------------------------------------------------------
# Splits
# --------------------------------------------------------------------------


@dataclass
class SplitIndices:
    train: np.ndarray
    test: np.ndarray
    seed: int
    trial_id: int = 0

    @property
    def filename(self):
        return f"trial_{self.trial_id}_seed_{self.seed}.idx"


def _n_train(n, frac):
    return int(math.floor(frac * n + 0.5))


def split(ds, frac=0.75, seed=0, trial_id=0):
    """Random train/test split, fully determined by ``(seed, n, frac)``."""
    n = ds if isinstance(ds, (int, np.integer)) else ds.n
    if not 0.0 < frac < 1.0:
        raise SplitError(f"frac must lie in (0, 1), got {frac}")
    if frac * n < 1 or (1 - frac) * n < 1:
        raise SplitError(f"frac={frac} leaves an empty side for n={n}")
    n_train = _n_train(n, frac)
    n_train = min(max(n_train, 1), n - 1)
    perm = _random.stream(seed, _random.SPLIT, n).permutation(n)
    return SplitIndices(
        train=np.sort(perm[:n_train]),
        test=np.sort(perm[n_train:]),
        seed=int(seed),
        trial_id=int(trial_id),
    )


def save_split(sp, out_dir):
    """Write the training indices, one per line; the test set is the complement."""
    os.makedirs(out_dir, exist_ok=True)
    path = os.path.join(out_dir, sp.filename)
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("".join(f"{i}\n" for i in sp.train))
    return path


_IDX_NAME = re.compile(r"trial_(\d+)_seed_(\d+)\.idx$")


def load_split(path, n):
    m = _IDX_NAME.search(os.path.basename(path))
    if m is None:
        raise SplitError(f"not a split index file name: {path}")
    with open(path, encoding="utf-8") as fh:
        train = np.array([int(tok) for tok in fh.read().split()], dtype=np.int64)
    if train.size and (train.min() < 0 or train.max() >= n):
        raise SplitError("index out of range for n")
    test = np.setdiff1d(np.arange(n), train)
    return SplitIndices(np.sort(train), test, seed=int(m.group(2)), trial_id=int(m.group(1)))


# --------------------------------------------------------------------------
# Standardization
# --------------------------------------------------------------------------


@dataclass
class Standardizer:
    mean: np.ndarray
    scale: np.ndarray

    def transform(self, X):
        return (np.asarray(X, dtype=float) - self.mean) / self.scale


def fit_standardizer(X):
    X = np.asarray(X, dtype=float)
    if X.shape[0] == 0:
        raise ValueError("no training rows to standardize from")
    mean = X.mean(axis=0)
    std = X.std(axis=0, ddof=DDOF)
    scale = np.where(std > 0, std, 1.0)
    return Standardizer(mean, scale)


def standardize(ds, train_idx):
    """Standardize every row of ``ds`` with statistics from the training rows."""
    train_idx = np.asarray(train_idx, dtype=np.int64)
    stats = fit_standardizer(ds.features[train_idx])
    return replace(ds, features=stats.transform(ds.features)), stats


# --------------------------------------------------------------------------
# Synthetic biased data
# --------------------------------------------------------------------------


def synth_biased(n, p, bias, seed, label_noise=0.5):
    """Gaussian features whose mean moves by ``bias`` along a fixed direction
    for the s=1 group; labels threshold a noisy linear score that loads on
    that direction and on an orthogonal one.
    """
    if n < 10 or p < 1 or not 0.0 <= bias <= 1.0:
        raise ValueError("need n >= 10, p >= 1 and 0 <= bias <= 1")
    rng = _random.stream(seed, _random.SYNTH, n, p)
    s = (rng.random(n) < 0.5).astype(float)
    shift_dir = np.ones(p) / math.sqrt(p)
    X = rng.standard_normal((n, p)) + bias * np.outer(s, shift_dir)

    if p == 1:
        beta = shift_dir.copy()
    else:
        e0 = np.zeros(p)
        e0[0] = 1.0
        ortho = e0 - shift_dir * shift_dir[0]
        ortho /= np.linalg.norm(ortho)
        beta = (shift_dir + ortho) / math.sqrt(2.0)
    score = X @ beta + label_noise * rng.standard_normal(n)
    # centre the threshold on the mixture mean so both classes are populated
    score -= 0.5 * bias * float(shift_dir @ beta)
    y = (score > 0).astype(float)
    return Dataset(X, y, s, feature_names=[f"x{j}" for j in range(p)])
