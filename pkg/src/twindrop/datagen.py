"""Closed-form synthetic generators with covariate and noise shift.

Three outcome surfaces over x = (x1, x2), each paired with an effect
surface:

  v1: y0 = sin(pi*x1*x2),                  tau = 1.5 + 0.5*x1
  v2: y0 = (x1^2 + x2^2)/2,                tau = 2 + x1*x2
  v3: y0 = sin(x1) + cos(x2) + 0.3*x1*x2,  tau = 1 + sin(x1 + x2)

Base covariates are i.i.d. Uniform(-2, 2). Sampling shift restricts the
training draw by rejection to x1 + x2 < s (strong: s = 0, mild:
s = 1.5) while the test draw stays unshifted, leaving a test region
unsupported by training. Noise shift doubles the outcome noise standard
deviation for test points with x1 + x2 >= s. Shift strength defaults
per version: strong for v1/v2, mild for v3. Treatment is an unconfounded
coin flip; noise lives inside the realized potential outcomes, so
tau_true = y1_true - y0_true holds exactly row by row.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, replace

import numpy as np

from .errors import DataError
from .nn_core import RngStream
from .twin_model import LabeledDataset

VERSIONS = ("v1", "v2", "v3")

SHIFT_NONE = "none"
SHIFT_SAMPLING = "sampling"
SHIFT_NOISE = "noise"
SHIFT_BOTH = "both"
SHIFTS = (SHIFT_NONE, SHIFT_SAMPLING, SHIFT_NOISE, SHIFT_BOTH)

STRENGTH_MILD = "mild"
STRENGTH_STRONG = "strong"
THRESHOLDS = {STRENGTH_STRONG: 0.0, STRENGTH_MILD: 1.5}
DEFAULT_STRENGTH = {"v1": STRENGTH_STRONG, "v2": STRENGTH_STRONG, "v3": STRENGTH_MILD}

COV_LOW, COV_HIGH = -2.0, 2.0
TEST_FRACTION = 0.2

DATASET_COLUMNS = ("x1", "x2", "t", "y", "y0_true", "y1_true", "tau_true",
                   "split", "ood_flag")


@dataclass
class SynthConfig:
    """Generator settings; shift_strength None means the per-version default."""

    version: str = "v1"
    n: int = 2000
    noise_sd: float = 0.1
    shift: str = SHIFT_BOTH
    shift_strength: str | None = None
    seed: int = 0

    def __post_init__(self):
        if self.version not in VERSIONS:
            raise DataError(f"unknown generator version {self.version!r}")
        if self.shift not in SHIFTS:
            raise DataError(f"unknown shift {self.shift!r} (valid: {SHIFTS})")
        if self.shift_strength is not None and self.shift_strength not in THRESHOLDS:
            raise DataError(f"unknown shift strength {self.shift_strength!r}")
        if self.n < 1:
            raise DataError(f"n must be >= 1, got {self.n}")
        if self.noise_sd < 0:
            raise DataError(f"noise_sd must be >= 0, got {self.noise_sd}")

    def resolved(self) -> "SynthConfig":
        if self.shift_strength is not None:
            return self
        return replace(self, shift_strength=DEFAULT_STRENGTH[self.version])


def ground_truth(version: str, x: np.ndarray):
    """Noiseless (y0, tau) surfaces at rows of x, shape (n, 2)."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != 2:
        raise DataError(f"x must have shape (n, 2), got {x.shape}")
    x1, x2 = x[:, 0], x[:, 1]
    if version == "v1":
        return np.sin(math.pi * x1 * x2), 1.5 + 0.5 * x1
    if version == "v2":
        return (x1 ** 2 + x2 ** 2) / 2.0, 2.0 + x1 * x2
    if version == "v3":
        return np.sin(x1) + np.cos(x2) + 0.3 * x1 * x2, 1.0 + np.sin(x1 + x2)
    raise DataError(f"unknown generator version {version!r}")


@dataclass
class SyntheticData:
    """Generated train/test pair and the fully resolved config."""

    train: LabeledDataset
    test: LabeledDataset
    config: SynthConfig


def _draw_covariates(m: int, rng: RngStream, threshold: float | None) -> np.ndarray:
    """Uniform(-2,2)^2 draws; if threshold is set, reject x1+x2 >= threshold."""
    if threshold is None:
        return rng.uniform(COV_LOW, COV_HIGH, (m, 2))
    out = np.empty((0, 2))
    while out.shape[0] < m:
        chunk = rng.uniform(COV_LOW, COV_HIGH, (max(m, 64), 2))
        keep = chunk[:, 0] + chunk[:, 1] < threshold
        out = np.vstack([out, chunk[keep]])
    return out[:m]


def _realize(version, x, noise_sd_per_row, t, eps_rng):
    y0_clean, tau = ground_truth(version, x)
    y0_true = y0_clean + eps_rng.normal(0.0, 1.0, x.shape[0]) * noise_sd_per_row
    y1_true = y0_true + tau
    y = np.where(t == 1, y1_true, y0_true)
    # stored effect is the realized difference, so the row identity
    # tau_true == y1_true - y0_true holds bit-exactly (within 1 ulp of
    # the closed form, which evaluators get from ground_truth)
    return LabeledDataset(x=x, t=t, y=y, y0_true=y0_true, y1_true=y1_true,
                          tau_true=y1_true - y0_true)


def generate(config: SynthConfig) -> SyntheticData:
    """Draw a seeded train/test pair (80/20) under the configured shift.

    Test rows get OOD flags from the 10-NN rule against the training
    covariates. With noise_sd = 0 repeated generation is exactly
    deterministic and outcomes equal the closed forms.
    """
    cfg = config.resolved()
    rng = RngStream(cfg.seed)
    n_test = int(round(TEST_FRACTION * cfg.n))
    n_train = cfg.n - n_test
    if n_train < 1:
        raise DataError(f"n={cfg.n} leaves no training rows after the 80/20 split")

    s = THRESHOLDS[cfg.shift_strength]
    sampling = cfg.shift in (SHIFT_SAMPLING, SHIFT_BOTH)
    noise = cfg.shift in (SHIFT_NOISE, SHIFT_BOTH)

    train_x = _draw_covariates(n_train, rng.child(0), s if sampling else None)
    test_x = _draw_covariates(n_test, rng.child(1), None)

    train_sd = np.full(n_train, cfg.noise_sd)
    test_sd = np.full(n_test, cfg.noise_sd)
    if noise:
        test_sd = np.where(test_x[:, 0] + test_x[:, 1] >= s,
                           2.0 * cfg.noise_sd, cfg.noise_sd)

    train_t = (rng.child(2).random(n_train) < 0.5).astype(np.int64)
    test_t = (rng.child(3).random(n_test) < 0.5).astype(np.int64)

    train = _realize(cfg.version, train_x, train_sd, train_t, rng.child(4))
    test = _realize(cfg.version, test_x, test_sd, test_t, rng.child(5))

    if n_test > 0:
        k = min(10, n_train)
        test.ood = ood_flags(train.x, test.x, k=k)
    train.ood = np.zeros(n_train, dtype=bool)
    return SyntheticData(train=train, test=test, config=cfg)


def ood_flags(train_x: np.ndarray, test_x: np.ndarray, k: int = 10,
              quantile: float = 0.20) -> np.ndarray:
    """Flag the lowest-density test rows by mean k-NN distance.

    Each test row is scored by the mean Euclidean distance to its k
    nearest training rows; the ceil(quantile * m) largest scores are
    flagged, with ties at the threshold broken by lower index first.
    """
    train_x = np.asarray(train_x, dtype=np.float64)
    test_x = np.asarray(test_x, dtype=np.float64)
    if train_x.shape[0] == 0:
        raise DataError("ood_flags needs a non-empty training set")
    if k > train_x.shape[0]:
        raise DataError(f"k={k} exceeds the {train_x.shape[0]} training rows")
    scores = knn_scores(train_x, test_x, k)
    m = test_x.shape[0]
    count = math.ceil(quantile * m)
    flags = np.zeros(m, dtype=bool)
    if count > 0:
        order = np.lexsort((np.arange(m), -scores))
        flags[order[:count]] = True
    return flags


def knn_scores(train_x: np.ndarray, test_x: np.ndarray, k: int = 10,
               block: int = 256) -> np.ndarray:
    """Mean distance from each test row to its k nearest training rows."""
    train_x = np.asarray(train_x, dtype=np.float64)
    test_x = np.asarray(test_x, dtype=np.float64)
    m = test_x.shape[0]
    scores = np.empty(m)
    for start in range(0, m, block):
        chunk = test_x[start:start + block]
        d2 = np.square(chunk[:, None, :] - train_x[None, :, :]).sum(axis=2)
        if k < train_x.shape[0]:
            part = np.partition(d2, k - 1, axis=1)[:, :k]
        else:
            part = d2
        scores[start:start + block] = np.sqrt(part).mean(axis=1)
    return scores


# -- dataset csv ------------------------------------------------------------

def write_dataset_csv(data: SyntheticData, path) -> None:
    """One row per unit, train rows first, both in generation order."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(DATASET_COLUMNS)
        for split, ds in (("train", data.train), ("test", data.test)):
            ood = ds.ood if ds.ood is not None else np.zeros(ds.n, dtype=bool)
            for i in range(ds.n):
                w.writerow([
                    repr(float(ds.x[i, 0])), repr(float(ds.x[i, 1])),
                    int(ds.t[i]), repr(float(ds.y[i])),
                    repr(float(ds.y0_true[i])), repr(float(ds.y1_true[i])),
                    repr(float(ds.tau_true[i])), split, int(ood[i]),
                ])


def read_dataset_csv(path) -> tuple[LabeledDataset, LabeledDataset]:
    """Load a dataset CSV back into (train, test) LabeledDatasets."""
    with open(path, "r", newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or tuple(header) != DATASET_COLUMNS:
            raise DataError(
                f"{path} does not match the dataset schema {DATASET_COLUMNS}"
            )
        rows = list(reader)
    parts = {}
    for split in ("train", "test"):
        keep = [r for r in rows if r[7] == split]
        if split == "train" and not keep:
            raise DataError(f"{path} has no training rows")
        x = np.array([[float(r[0]), float(r[1])] for r in keep]) if keep else np.empty((0, 2))
        parts[split] = LabeledDataset(
            x=x,
            t=np.array([int(r[2]) for r in keep], dtype=np.int64),
            y=np.array([float(r[3]) for r in keep]),
            y0_true=np.array([float(r[4]) for r in keep]),
            y1_true=np.array([float(r[5]) for r in keep]),
            tau_true=np.array([float(r[6]) for r in keep]),
            ood=np.array([r[8] == "1" for r in keep], dtype=bool),
        )
    return parts["train"], parts["test"]
