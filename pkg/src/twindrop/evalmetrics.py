"""Evaluation statistics for the uncertainty study.

Rank correlation between uncertainty channels and absolute effect
error, percentile-bootstrap confidence intervals, interval calibration
(reliability curve + ECE) with a split-conformal post-hoc adjustment,
OOD separation (delta sigma^2 and ROC-AUC), the representation-variance
threshold sweep, and the deterministic-ensemble comparator.

Conventions pinned here and relied on by the tests:
  * Spearman = Pearson on average ranks (ties get the mean rank); a
    constant input has no defined rank correlation and yields None,
    never a coerced number.
  * ROC-AUC is the Mann-Whitney probability with ties counting 1/2.
  * Bootstrap CIs are percentile intervals over B unit-level resamples.
  * Conformal: q_hat(q) is the ceil((n+1)q)-th smallest absolute
    normalized residual from the calibration fold (the folded-Gaussian
    analogue of z_{(1+q)/2}), giving marginal coverage >= q on
    exchangeable data.
  * All variances, including the ensemble's, divide by the number of
    samples (population convention).
"""

from __future__ import annotations

import json
import math
import warnings
from dataclasses import dataclass, field, replace
from statistics import NormalDist

import numpy as np

from .errors import DataError, NumericalError
from .nn_core import RngStream
from .twin_model import (
    DropoutMode,
    LabeledDataset,
    TwinNetConfig,
    forward,
    train,
)
from .uncertainty import UncertaintyBreakdown
from .parallel import map_indexed

DEFAULT_LEVELS = tuple(np.round(np.arange(0.1, 0.95, 0.1), 10))
MIN_RELIABLE_UNITS = 20


# -- rank statistics ---------------------------------------------------------

def average_ranks(v: np.ndarray) -> np.ndarray:
    """1-based ranks; tied values share the mean of their rank range."""
    v = np.asarray(v, dtype=np.float64)
    n = v.shape[0]
    order = np.argsort(v, kind="stable")
    sv = v[order]
    ranks = np.empty(n)
    base = np.arange(1, n + 1, dtype=np.float64)
    i = 0
    while i < n:
        j = i
        while j + 1 < n and sv[j + 1] == sv[i]:
            j += 1
        ranks[order[i:j + 1]] = 0.5 * (base[i] + base[j])
        i = j + 1
    return ranks


def spearman(u: np.ndarray, e: np.ndarray) -> float | None:
    """Rank correlation of u with e, or None when either input is constant."""
    u = np.asarray(u, dtype=np.float64)
    e = np.asarray(e, dtype=np.float64)
    if u.shape != e.shape or u.ndim != 1:
        raise DataError(f"spearman needs equal-length vectors, got {u.shape} and {e.shape}")
    if u.shape[0] < 3:
        raise DataError(f"spearman needs at least 3 pairs, got {u.shape[0]}")
    if np.all(u == u[0]) or np.all(e == e[0]):
        return None
    ru = average_ranks(u)
    re = average_ranks(e)
    ru -= ru.mean()
    re -= re.mean()
    denom = math.sqrt(float(ru @ ru) * float(re @ re))
    return float(ru @ re) / denom


def roc_auc(scores: np.ndarray, labels: np.ndarray) -> float:
    """P(random positive outscores random negative), ties count 1/2."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels, dtype=bool)
    if scores.shape != labels.shape or scores.ndim != 1:
        raise DataError("roc_auc needs equal-length score and label vectors")
    n_pos = int(labels.sum())
    n_neg = labels.shape[0] - n_pos
    if n_pos == 0 or n_neg == 0:
        raise DataError("roc_auc needs both classes present")
    ranks = average_ranks(scores)
    rank_sum = float(ranks[labels].sum())
    return (rank_sum - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg)


def delta_sigma(sigmas: np.ndarray, ood: np.ndarray) -> float:
    """Mean uncertainty of flagged rows minus mean of the rest."""
    sigmas = np.asarray(sigmas, dtype=np.float64)
    ood = np.asarray(ood, dtype=bool)
    if sigmas.shape != ood.shape:
        raise DataError("delta_sigma needs aligned sigma and flag vectors")
    if ood.all() or not ood.any():
        raise DataError("delta_sigma needs both OOD and ID rows")
    return float(sigmas[ood].mean() - sigmas[~ood].mean())


# -- bootstrap ---------------------------------------------------------------

@dataclass
class CI:
    """Point estimate with a percentile bootstrap interval around it."""

    point: float
    lo: float
    hi: float
    boot_mean: float
    degenerate: bool = False

    def to_dict(self) -> dict:
        return {"point": self.point, "lo": self.lo, "hi": self.hi,
                "boot_mean": self.boot_mean, "degenerate": self.degenerate}


def bootstrap_ci(data, stat=None, n_boot: int = 200, alpha: float = 0.05,
                 rng: RngStream | None = None) -> CI:
    """Percentile bootstrap of a statistic over unit-level resamples.

    ``data`` is one array or a tuple of aligned arrays; each resample
    draws unit indices with replacement and applies ``stat`` (default:
    mean of the single array). Replicates where the statistic is
    undefined (stat returns None) are dropped. A zero-width interval is
    flagged degenerate.
    """
    arrays = data if isinstance(data, tuple) else (data,)
    arrays = tuple(np.asarray(a) for a in arrays)
    n = arrays[0].shape[0]
    if any(a.shape[0] != n for a in arrays):
        raise DataError("bootstrap_ci arrays must share their first dimension")
    if n < 2:
        raise DataError(f"bootstrap_ci needs a sample of >= 2, got {n}")
    if stat is None:
        stat = lambda a: float(np.mean(a))
    if rng is None:
        rng = RngStream(0)

    point = stat(*arrays)
    reps = []
    for _ in range(n_boot):
        idx = rng.integers(0, n, n)
        val = stat(*(a[idx] for a in arrays))
        if val is not None:
            reps.append(float(val))
    if not reps:
        raise NumericalError("statistic undefined on every bootstrap resample")
    reps = np.array(reps)
    lo, hi = np.quantile(reps, [alpha / 2.0, 1.0 - alpha / 2.0])
    degenerate = bool(lo == hi)
    return CI(point=float(point) if point is not None else float("nan"),
              lo=float(lo), hi=float(hi),
              boot_mean=float(reps.mean()), degenerate=degenerate)


# -- interval calibration ----------------------------------------------------

def gaussian_multiplier(level: float) -> float:
    """Half-width multiplier z_{(1+q)/2} of a central Gaussian interval."""
    return NormalDist().inv_cdf((1.0 + level) / 2.0)


@dataclass
class IntervalSet:
    """Central predictive intervals mean +- width(q) against realized targets.

    By default width(q) = z_{(1+q)/2} * sd. A conformal adjustment
    replaces the per-level multipliers and adds absolute fallback
    widths used for units with sd = 0 (whose normalized residual is
    undefined).
    """

    mean: np.ndarray
    sd: np.ndarray
    targets: np.ndarray
    levels: tuple[float, ...] = DEFAULT_LEVELS
    multipliers: np.ndarray | None = None
    fallback_widths: np.ndarray | None = None
    n_calibration_fallback: int = 0

    def __post_init__(self):
        self.mean = np.asarray(self.mean, dtype=np.float64)
        self.sd = np.asarray(self.sd, dtype=np.float64)
        self.targets = np.asarray(self.targets, dtype=np.float64)
        if not (self.mean.shape == self.sd.shape == self.targets.shape):
            raise DataError("mean, sd and targets must be aligned vectors")
        if self.mean.shape[0] == 0:
            raise DataError("IntervalSet needs at least one unit")
        if np.any(self.sd < 0):
            raise DataError("predictive sd must be >= 0")
        lv = np.asarray(self.levels, dtype=np.float64)
        if np.any(lv <= 0) or np.any(lv >= 1) or np.any(np.diff(lv) <= 0):
            raise DataError("levels must be strictly increasing within (0, 1)")
        self.levels = tuple(float(q) for q in lv)

    @property
    def n(self) -> int:
        return self.mean.shape[0]

    def half_widths(self, level_index: int) -> np.ndarray:
        if self.multipliers is not None:
            mult = float(self.multipliers[level_index])
        else:
            mult = gaussian_multiplier(self.levels[level_index])
        hw = mult * self.sd
        if self.fallback_widths is not None:
            hw = np.where(self.sd > 0, hw, float(self.fallback_widths[level_index]))
        return hw


def reliability_and_ece(intervals: IntervalSet):
    """Empirical coverage per nominal level, and their mean absolute gap.

    Returns (curve, ece) with curve a list of (nominal, empirical)
    pairs. A unit with sd = 0 and no fallback width is covered only
    when its target equals its mean exactly.
    """
    abs_err = np.abs(intervals.targets - intervals.mean)
    curve = []
    gaps = []
    for i, q in enumerate(intervals.levels):
        covered = float((abs_err <= intervals.half_widths(i)).mean())
        curve.append((q, covered))
        gaps.append(abs(covered - q))
    return curve, float(np.mean(gaps))


def conformal_quantile(sorted_scores: np.ndarray, level: float) -> float:
    """ceil((n+1)*q)-th smallest score; +inf when that exceeds the sample."""
    n = sorted_scores.shape[0]
    k = math.ceil((n + 1) * level)
    if k > n:
        return float("inf")
    return float(sorted_scores[k - 1])


def conformal_adjust(calibration: IntervalSet, target: IntervalSet) -> IntervalSet:
    """Split-conformal rescaling of the target intervals.

    Normalized scores |y - mean| / sd from the calibration fold set the
    per-level width multipliers; calibration units with sd = 0 are
    routed to an absolute-residual channel whose quantiles serve as
    fallback widths for zero-sd target units. The calibration fold must
    be disjoint from the target fold and exchangeable with it for the
    coverage guarantee to hold.
    """
    abs_resid = np.abs(calibration.targets - calibration.mean)
    ok = calibration.sd > 0
    n_fallback = int((~ok).sum())
    if not ok.any():
        raise DataError("conformal_adjust needs calibration units with sd > 0")
    if n_fallback:
        warnings.warn(
            f"{n_fallback} calibration units have sd = 0; they use the "
            "absolute-residual fallback channel", stacklevel=2)
    scores = np.sort(abs_resid[ok] / calibration.sd[ok])
    abs_scores = np.sort(abs_resid)
    mult = np.array([conformal_quantile(scores, q) for q in target.levels])
    fallback = np.array([conformal_quantile(abs_scores, q) for q in target.levels])
    return replace(target, multipliers=mult, fallback_widths=fallback,
                   n_calibration_fallback=n_fallback)


# -- threshold sweep ---------------------------------------------------------

@dataclass
class SweepPoint:
    threshold: float
    rho_pred: float | None
    n_retained: int
    reliable: bool

    def to_dict(self) -> dict:
        return {"threshold": self.threshold, "rho_pred": self.rho_pred,
                "n_retained": self.n_retained, "reliable": self.reliable}


def rep_threshold_sweep(var_rep, var_pred, abs_err, grid=None) -> list[SweepPoint]:
    """Recompute rho(var_pred, abs_err) under a max-var_rep filter.

    The default grid is 20 var_rep quantiles from 0.05 to 1.0. Points
    retaining fewer than 20 units are marked unreliable but kept.
    """
    var_rep = np.asarray(var_rep, dtype=np.float64)
    var_pred = np.asarray(var_pred, dtype=np.float64)
    abs_err = np.asarray(abs_err, dtype=np.float64)
    if not (var_rep.shape == var_pred.shape == abs_err.shape):
        raise DataError("sweep inputs must be aligned vectors")
    if grid is None:
        grid = np.quantile(var_rep, np.linspace(0.05, 1.0, 20))
    points = []
    for thr in np.asarray(grid, dtype=np.float64):
        keep = var_rep <= thr
        n_kept = int(keep.sum())
        rho = None
        if n_kept >= 3:
            rho = spearman(var_pred[keep], abs_err[keep])
        points.append(SweepPoint(
            threshold=float(thr), rho_pred=rho, n_retained=n_kept,
            reliable=n_kept >= MIN_RELIABLE_UNITS,
        ))
    return points


# -- deterministic ensemble --------------------------------------------------

@dataclass
class EnsembleResult:
    """Per-unit spread of deterministic effect estimates across members."""

    var_tau: np.ndarray
    tau_mean: np.ndarray
    member_seeds: list[int]
    rho: CI | None = None


def member_spread(taus):
    """Mean and population variance across the member axis of (M, n) taus.

    Units on which all members agree collapse to exactly zero variance.
    """
    taus = np.asarray(taus, dtype=np.float64)
    mean = taus.mean(axis=0)
    var = np.square(taus - mean).mean(axis=0)
    constant = (taus == taus[0]).all(axis=0)
    if constant.any():
        mean = np.where(constant, taus[0], mean)
        var = np.where(constant, 0.0, var)
    return mean, var


def ensemble_baseline(
    train_data: LabeledDataset,
    test_x: np.ndarray,
    config: TwinNetConfig,
    n_members: int = 5,
    tau_true=None,
    member_seeds=None,
    rng: RngStream | None = None,
    n_boot: int = 200,
) -> EnsembleResult:
    """Train n_members twins on distinct seeds; spread of tau_hat per unit.

    Members run dropout during training exactly like the main model but
    predict deterministically (mode OFF). Variance across members uses
    the population convention. When tau_true is given, the spread is
    rank-correlated with |mean tau_hat - tau_true| and bootstrapped.
    """
    if n_members < 2:
        raise DataError(f"ensemble needs >= 2 members, got {n_members}")
    if member_seeds is None:
        member_seeds = [config.seed + i for i in range(n_members)]
    if len(member_seeds) != n_members:
        raise DataError("member_seeds length must equal n_members")
    test_x = np.asarray(test_x, dtype=np.float64)

    def fit_member(item):
        i, seed = item
        member_config = replace(config, seed=seed)
        try:
            net = train(train_data, member_config)
        except Exception as e:
            raise NumericalError(f"ensemble member {i} (seed {seed}) failed: {e}") from e
        return forward(net, test_x, 1, DropoutMode.OFF) - forward(net, test_x, 0, DropoutMode.OFF)

    taus = np.stack(map_indexed(fit_member, enumerate(member_seeds)))
    tau_mean, var_tau = member_spread(taus)

    rho = None
    if tau_true is not None:
        abs_err = np.abs(tau_mean - np.asarray(tau_true, dtype=np.float64))
        if spearman(var_tau, abs_err) is not None:
            rho = bootstrap_ci((var_tau, abs_err), spearman, n_boot=n_boot,
                               rng=rng or RngStream(0))
    return EnsembleResult(var_tau=var_tau, tau_mean=tau_mean,
                          member_seeds=list(member_seeds), rho=rho)


# -- report assembly ---------------------------------------------------------

CHANNELS = ("rep", "pred", "tot", "pred0", "pred1")


def channel_values(bd: UncertaintyBreakdown) -> dict[str, np.ndarray]:
    """Uncertainty channels: arm sums plus the per-head prediction parts."""
    return {
        "rep": bd.var_rep0 + bd.var_rep1,
        "pred": bd.var_pred0 + bd.var_pred1,
        "tot": bd.var_tot0 + bd.var_tot1,
        "pred0": bd.var_pred0,
        "pred1": bd.var_pred1,
    }


@dataclass
class ChannelMetrics:
    """rho / delta sigma^2 / ROC-AUC for one uncertainty channel.

    rho is None when the channel is constant (degenerate); the OOD
    metrics are None when no flags were supplied.
    """

    rho: CI | None
    delta_sigma: CI | None = None
    auc: CI | None = None

    def to_dict(self) -> dict:
        return {
            "rho": "degenerate" if self.rho is None else self.rho.to_dict(),
            "delta_sigma": None if self.delta_sigma is None else self.delta_sigma.to_dict(),
            "auc": None if self.auc is None else self.auc.to_dict(),
        }


def evaluate_breakdown(
    bd: UncertaintyBreakdown,
    abs_err: np.ndarray,
    ood: np.ndarray | None = None,
    rng: RngStream | None = None,
    n_boot: int = 200,
) -> dict[str, ChannelMetrics]:
    """Per-channel error correlation and, when flags exist, OOD separation."""
    abs_err = np.asarray(abs_err, dtype=np.float64)
    if abs_err.shape[0] != bd.n:
        raise DataError("abs_err must align with the breakdown units")
    if rng is None:
        rng = RngStream(0)
    out = {}
    for ci, (name, sig) in enumerate(channel_values(bd).items()):
        rho = None
        if spearman(sig, abs_err) is not None:
            rho = bootstrap_ci((sig, abs_err), spearman, n_boot=n_boot,
                               rng=rng.child(ci, 0))
        dsig = auc = None
        if ood is not None:
            ood = np.asarray(ood, dtype=bool)
            if not ood.any() or ood.all():
                raise DataError("ood flags must contain both classes")
            safe_delta = lambda s, o: delta_sigma(s, o) if (o.any() and not o.all()) else None
            safe_auc = lambda s, o: roc_auc(s, o) if (o.any() and not o.all()) else None
            dsig = bootstrap_ci((sig, ood), safe_delta, n_boot=n_boot, rng=rng.child(ci, 1))
            auc = bootstrap_ci((sig, ood), safe_auc, n_boot=n_boot, rng=rng.child(ci, 2))
        out[name] = ChannelMetrics(rho=rho, delta_sigma=dsig, auc=auc)
    return out


@dataclass
class EvalReport:
    """Everything a single evaluation run reports, serializable to JSON/CSV."""

    channels: dict[str, ChannelMetrics]
    ece_raw: float | None = None
    ece_conformal: float | None = None
    reliability_raw: list | None = None
    reliability_conformal: list | None = None
    sweep: list | None = None
    meta: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "channels": {k: v.to_dict() for k, v in self.channels.items()},
            "ece": {"raw": self.ece_raw, "conformal": self.ece_conformal},
            "reliability": {
                "raw": self.reliability_raw,
                "conformal": self.reliability_conformal,
            },
            "sweep": None if self.sweep is None else [p.to_dict() for p in self.sweep],
            "meta": self.meta,
        }

    def to_json(self, path=None) -> str:
        text = json.dumps(self.to_dict(), indent=2, sort_keys=True)
        if path is not None:
            with open(path, "w", encoding="utf-8") as fh:
                fh.write(text)
                fh.write("\n")
        return text

    def write_metrics_csv(self, path) -> None:
        """Flat channel-by-metric table with CI bounds."""
        import csv as _csv
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = _csv.writer(fh)
            w.writerow(["channel", "metric", "point", "lo", "hi", "degenerate"])
            for name, cm in self.channels.items():
                rows = (("rho", cm.rho), ("delta_sigma", cm.delta_sigma), ("auc", cm.auc))
                for metric, ci in rows:
                    if ci is None:
                        status = "degenerate" if metric == "rho" else ""
                        w.writerow([name, metric, status, "", "", ""])
                    else:
                        w.writerow([name, metric, repr(ci.point), repr(ci.lo),
                                    repr(ci.hi), int(ci.degenerate)])
            if self.ece_raw is not None:
                w.writerow(["tau", "ece_raw", repr(self.ece_raw), "", "", ""])
            if self.ece_conformal is not None:
                w.writerow(["tau", "ece_conformal", repr(self.ece_conformal), "", "", ""])

    def write_reliability_csv(self, path) -> None:
        """Plot-ready (x, y, series) rows for the reliability curves."""
        import csv as _csv
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = _csv.writer(fh)
            w.writerow(["x", "y", "series"])
            for series, curve in (("raw", self.reliability_raw),
                                  ("conformal", self.reliability_conformal)):
                if curve is None:
                    continue
                for q, cov in curve:
                    w.writerow([repr(float(q)), repr(float(cov)), series])

    def write_sweep_csv(self, path) -> None:
        """Plot-ready (x, y, series) rows for the threshold sweep."""
        import csv as _csv
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = _csv.writer(fh)
            w.writerow(["x", "y", "series", "n_retained", "reliable"])
            for p in self.sweep or []:
                y = "" if p.rho_pred is None else repr(p.rho_pred)
                w.writerow([repr(p.threshold), y, "rho_pred", p.n_retained,
                            int(p.reliable)])
