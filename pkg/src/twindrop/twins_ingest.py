"""Real-cohort ingestion and the induced multivariate sampling bias.

A cohort CSV is parsed against a small JSON schema naming the treatment
and outcome columns plus a covariate include-list. Rows with missing
values are dropped (and counted), constant covariate columns are
removed with a warning, and the remaining covariates are standardized
to zero mean and unit population sd.

The sampling bias works along the first principal component of the
standardized covariates: after an unbiased 20% test split is held out,
each remaining row is kept for training with probability
max(floor, logistic(-beta * pc1_score)), so high-PC1 rows become rare
in training and the held-out test set contains genuinely unsupported
points. OOD flags on the test set come from the same 10-NN rule used
for the synthetic data.

Because the real cohort cannot be bundled, ``standin_cohort`` generates
a deterministic semi-synthetic stand-in with a factor structure that
gives PC1 a real meaning; the protocol is exercised end to end on it.
"""

from __future__ import annotations

import csv
import json
import math
import warnings
from dataclasses import dataclass

import numpy as np

from .datagen import ood_flags
from .errors import DataError, NumericalError
from .nn_core import RngStream

PC1_TOL = 1e-10
PC1_MAX_ITER = 10_000

MANIFEST_COLUMNS = ("row_id", "kept", "pc1_score", "split", "ood_flag")


@dataclass
class CohortSchema:
    """Column roles for a cohort CSV."""

    treatment: str
    outcome: str
    covariates: list[str]

    @classmethod
    def from_json(cls, path) -> "CohortSchema":
        with open(path, "r", encoding="utf-8") as fh:
            d = json.load(fh)
        missing = [k for k in ("treatment", "outcome", "covariates") if k not in d]
        if missing:
            raise DataError(f"schema {path} missing keys: {missing}")
        return cls(treatment=d["treatment"], outcome=d["outcome"],
                   covariates=list(d["covariates"]))


@dataclass
class CohortTable:
    """Parsed cohort: standardized covariates plus per-column stats."""

    covariates: np.ndarray
    treatment: np.ndarray
    outcome: np.ndarray
    column_names: list[str]
    means: np.ndarray
    sds: np.ndarray
    n_dropped_rows: int = 0
    dropped_columns: list[str] = None

    def __post_init__(self):
        if self.dropped_columns is None:
            self.dropped_columns = []

    @property
    def n(self) -> int:
        return self.covariates.shape[0]


def _parse_float(cell: str) -> float | None:
    cell = cell.strip()
    if cell == "" or cell.lower() in ("na", "nan", "null", "none"):
        return None
    try:
        v = float(cell)
    except ValueError:
        return None
    return v if math.isfinite(v) else None


def load_cohort(path, schema: CohortSchema) -> CohortTable:
    """Parse, drop incomplete rows, drop constant columns, standardize."""
    try:
        fh = open(path, "r", newline="", encoding="utf-8")
    except OSError as e:
        raise DataError(f"cannot read cohort file {path}: {e}")
    with fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None:
            raise DataError(f"cohort file {path} is empty")
        col_index = {name: i for i, name in enumerate(header)}
        needed = [schema.treatment, schema.outcome] + list(schema.covariates)
        missing = [c for c in needed if c not in col_index]
        if missing:
            raise DataError(f"cohort file {path} lacks schema columns: {missing}")
        rows = []
        n_dropped = 0
        for raw in reader:
            vals = [_parse_float(raw[col_index[c]]) for c in needed]
            if any(v is None for v in vals):
                n_dropped += 1
                continue
            rows.append(vals)
    if not rows:
        raise DataError(f"cohort file {path} has no complete rows")

    arr = np.array(rows, dtype=np.float64)
    treatment = arr[:, 0]
    if not np.isin(treatment, (0.0, 1.0)).all():
        raise DataError(f"treatment column {schema.treatment!r} is not binary")
    outcome = arr[:, 1]
    cov = arr[:, 2:]

    means = cov.mean(axis=0)
    sds = cov.std(axis=0)
    keep = sds > 0
    dropped_cols = [c for c, k in zip(schema.covariates, keep) if not k]
    if dropped_cols:
        warnings.warn(f"dropping constant covariate columns: {dropped_cols}",
                      stacklevel=2)
    if not keep.any():
        raise DataError("all covariate columns are constant")
    cov = (cov[:, keep] - means[keep]) / sds[keep]
    return CohortTable(
        covariates=cov,
        treatment=treatment.astype(np.int64),
        outcome=outcome,
        column_names=[c for c, k in zip(schema.covariates, keep) if k],
        means=means[keep],
        sds=sds[keep],
        n_dropped_rows=n_dropped,
        dropped_columns=dropped_cols,
    )


def standardize(x: np.ndarray):
    """(x - mean) / population sd per column; returns (z, mean, sd)."""
    x = np.asarray(x, dtype=np.float64)
    mean = x.mean(axis=0)
    sd = x.std(axis=0)
    if np.any(sd == 0):
        raise DataError("standardize requires non-constant columns")
    return (x - mean) / sd, mean, sd


def _power_iteration(cov: np.ndarray, rng: RngStream):
    """Dominant eigenpair of a symmetric PSD matrix."""
    p = cov.shape[0]
    v = rng.normal(0.0, 1.0, p)
    v /= np.linalg.norm(v)
    lam = 0.0
    residual = float("inf")
    for _ in range(PC1_MAX_ITER):
        w = cov @ v
        norm = np.linalg.norm(w)
        if norm == 0.0:
            return 0.0, v  # v spans the nullspace: eigenvalue 0
        lam = float(v @ w)
        v = w / norm
        residual = float(np.linalg.norm(cov @ v - lam * v))
        if residual <= PC1_TOL * max(1.0, abs(lam)):
            return lam, v
    raise NumericalError(
        f"power iteration did not converge: residual {residual:.3e} after "
        f"{PC1_MAX_ITER} iterations (tolerance {PC1_TOL})"
    )


def principal_component(x: np.ndarray, index: int = 1):
    """index-th principal direction and scores via deflated power iteration.

    The direction's largest-magnitude coordinate is made positive so
    the sign is reproducible. Scores are the projections of the
    (centered) rows onto the direction.
    """
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] < 2 or x.shape[1] < 1:
        raise DataError(f"need an (n>=2, p>=1) matrix, got shape {x.shape}")
    if index < 1 or index > x.shape[1]:
        raise DataError(f"component index {index} out of range for p={x.shape[1]}")
    centered = x - x.mean(axis=0)
    cov = centered.T @ centered / x.shape[0]
    rng = RngStream(0)
    direction = None
    for comp in range(index):
        lam, direction = _power_iteration(cov, rng.child(comp))
        cov = cov - lam * np.outer(direction, direction)
    pivot = int(np.argmax(np.abs(direction)))
    if direction[pivot] < 0:
        direction = -direction
    return direction, centered @ direction


def pc1(x: np.ndarray):
    """First principal direction and scores."""
    return principal_component(x, index=1)


@dataclass
class BiasConfig:
    """Keep-probability bias along a principal component score."""

    component_index: int = 1
    bias_strength: float = 4.0
    keep_prob_floor: float = 0.02
    seed: int = 0
    min_train_rows: int = 50

    def __post_init__(self):
        if not math.isfinite(self.bias_strength):
            raise ValueError("bias_strength must be finite")
        if not (0.0 < self.keep_prob_floor <= 1.0):
            raise ValueError("keep_prob_floor must be in (0, 1]")


@dataclass
class BiasedSplit:
    """Outcome of induce_bias: indices, scores and test OOD flags."""

    train_idx: np.ndarray
    test_idx: np.ndarray
    scores: np.ndarray
    keep_prob: np.ndarray
    kept: np.ndarray
    ood: np.ndarray


def keep_probability(scores: np.ndarray, cfg: BiasConfig) -> np.ndarray:
    """max(floor, logistic(-beta * score)) per row."""
    logistic = 1.0 / (1.0 + np.exp(cfg.bias_strength * np.asarray(scores)))
    return np.maximum(cfg.keep_prob_floor, logistic)


def induce_bias(table: CohortTable, cfg: BiasConfig) -> BiasedSplit:
    """Held-out 20% test split, then PC-score-biased training subsample.

    The test split is drawn before biasing so its high-score points are
    genuinely unsupported by the biased training set. OOD flags come
    from the 10-NN rule against the kept training rows.
    """
    n = table.n
    rng = RngStream(cfg.seed)
    _, scores = principal_component(table.covariates, cfg.component_index)

    n_test = int(round(0.2 * n))
    perm = rng.child(0).permutation(n)
    test_idx = np.sort(perm[:n_test])
    pool_idx = np.sort(perm[n_test:])

    prob = keep_probability(scores, cfg)
    draws = rng.child(1).random(pool_idx.shape[0])
    kept_mask = draws < prob[pool_idx]
    train_idx = pool_idx[kept_mask]
    if train_idx.shape[0] < cfg.min_train_rows:
        raise DataError(
            f"biased training set has {train_idx.shape[0]} rows, below the "
            f"minimum {cfg.min_train_rows}"
        )

    kept = np.zeros(n, dtype=bool)
    kept[train_idx] = True
    k = min(10, train_idx.shape[0])
    ood = ood_flags(table.covariates[train_idx], table.covariates[test_idx], k=k)
    return BiasedSplit(train_idx=train_idx, test_idx=test_idx, scores=scores,
                       keep_prob=prob, kept=kept, ood=ood)


def write_bias_manifest(split: BiasedSplit, path) -> None:
    """Row-level record: (row_id, kept, pc1_score, split, ood_flag).

    ``kept`` is 1 only for rows in the biased training set; ``ood_flag``
    is meaningful only for test rows and 0 elsewhere.
    """
    n = split.scores.shape[0]
    is_test = np.zeros(n, dtype=bool)
    is_test[split.test_idx] = True
    ood_all = np.zeros(n, dtype=bool)
    ood_all[split.test_idx] = split.ood
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(MANIFEST_COLUMNS)
        for i in range(n):
            w.writerow([i, int(split.kept[i]), repr(float(split.scores[i])),
                        "test" if is_test[i] else "train", int(ood_all[i])])


# -- bundled stand-in cohort -------------------------------------------------

STANDIN_COLUMNS = [
    "gest_age", "birth_weight", "apgar", "prenatal_visits", "maternal_age",
    "maternal_edu", "smoker", "alcohol", "parity", "pollution_index",
]
STANDIN_SCHEMA = CohortSchema(treatment="t", outcome="y",
                              covariates=list(STANDIN_COLUMNS))


def standin_cohort(n: int = 3000, seed: int = 7):
    """Deterministic semi-synthetic registry-style cohort.

    Ten covariates load on three latent factors (a dominant
    development factor, a care-access factor, and a risk factor) plus
    idiosyncratic noise, so the first principal component captures a
    real axis of the data. The outcome is a bounded nonlinear function
    of the factors with a heterogeneous treatment effect. Returns
    (header, rows) ready for CSV writing; the schema that matches it is
    ``STANDIN_SCHEMA``.
    """
    rng = RngStream(seed)
    f1 = rng.child(0).normal(0.0, 1.0, n)   # development factor (dominant)
    f2 = rng.child(1).normal(0.0, 1.0, n)   # care-access factor
    f3 = rng.child(2).normal(0.0, 1.0, n)   # environmental-risk factor
    noise = rng.child(3).normal(0.0, 1.0, (n, len(STANDIN_COLUMNS)))

    cols = {
        "gest_age": 1.0 * f1 + 0.25 * noise[:, 0],
        "birth_weight": 0.9 * f1 + 0.2 * f3 + 0.3 * noise[:, 1],
        "apgar": 0.8 * f1 - 0.2 * f3 + 0.35 * noise[:, 2],
        "prenatal_visits": 0.4 * f1 + 0.8 * f2 + 0.35 * noise[:, 3],
        "maternal_age": 0.7 * f2 + 0.4 * noise[:, 4],
        "maternal_edu": 0.75 * f2 + 0.4 * noise[:, 5],
        "smoker": (0.6 * f3 - 0.2 * f2 + 0.5 * noise[:, 6] > 0.6).astype(float),
        "alcohol": (0.5 * f3 + 0.5 * noise[:, 7] > 1.0).astype(float),
        "parity": np.floor(np.clip(1.2 + 0.4 * f2 + 0.5 * noise[:, 8], 0, 6)),
        "pollution_index": 0.8 * f3 + 0.3 * noise[:, 9],
    }
    t = (rng.child(4).random(n) < 0.5).astype(np.int64)
    base = 0.6 * np.tanh(f1) - 0.25 * f3 + 0.15 * np.tanh(f2)
    effect = 0.5 + 0.3 * np.tanh(f1) + 0.15 * f2
    y = base + t * effect + rng.child(5).normal(0.0, 0.15, n)

    header = ["t", "y"] + STANDIN_COLUMNS
    rows = []
    for i in range(n):
        rows.append([int(t[i]), repr(float(y[i]))]
                    + [repr(float(cols[c][i])) for c in STANDIN_COLUMNS])
    return header, rows


def write_standin_cohort(path, n: int = 3000, seed: int = 7) -> None:
    header, rows = standin_cohort(n=n, seed=seed)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        w.writerows(rows)
