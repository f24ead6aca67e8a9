"""Monte Carlo variance estimators and the representation/prediction split.

Total predictive variance over dropout masks decomposes by the law of
total variance into a representation part (variance of the head's
conditional mean as encoder masks vary) and a prediction part (mean of
the head's conditional variance). Operationally, each part is estimated
by sampling masks only in the corresponding subnetwork:

  TOTAL     -> Var_tot(x, t)
  REP_ONLY  -> Var_rep(x, t)   (heads deterministic)
  PRED_ONLY -> Var_pred(x, t)  (encoder deterministic)

All variances use the population convention (divide by N). The effect
variance is the four-component sum

  Var(tau_hat) = Var_rep(x,1) + Var_rep(x,0) + Var_pred(x,1) + Var_pred(x,0),

which treats the arms as independent even though they share the
encoder; the induced cross-arm correlation is deliberately ignored, and
the additivity gap Var_tot - (Var_rep + Var_pred) is tracked per arm as
a diagnostic.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from .errors import DataError
from .nn_core import RngStream
from .twin_model import DropoutMode, TwinNet, forward

GAP_FLOOR = 1e-12

BREAKDOWN_COLUMNS = (
    "unit_id", "tau_hat", "var_rep0", "var_rep1", "var_pred0", "var_pred1",
    "var_tot0", "var_tot1", "var_tau", "gap0", "gap1",
)


@dataclass
class MCResult:
    """Mean and population variance over N stochastic passes."""

    mean: np.ndarray
    variance: np.ndarray
    n_samples: int
    mode: DropoutMode


@dataclass
class UncertaintyBreakdown:
    """Per-unit variance components for both arms, plus the effect estimate.

    All fields are vectors over the units passed to ``decompose``.
    mean0/mean1 are the TOTAL-mode predictive means the effect estimate
    is built from; gap0/gap1 are the per-arm additivity gaps
    var_tot - (var_rep + var_pred).
    """

    tau_hat: np.ndarray
    var_rep0: np.ndarray
    var_rep1: np.ndarray
    var_pred0: np.ndarray
    var_pred1: np.ndarray
    var_tot0: np.ndarray
    var_tot1: np.ndarray
    var_tau: np.ndarray
    gap0: np.ndarray
    gap1: np.ndarray
    mean0: np.ndarray
    mean1: np.ndarray
    n_samples: int

    @property
    def n(self) -> int:
        return self.tau_hat.shape[0]


def mc_predict(
    net: TwinNet,
    x: np.ndarray,
    t: int,
    mode: DropoutMode,
    n_samples: int,
    rng: RngStream | None = None,
) -> MCResult:
    """Mean and variance of f_t(encoder(x)) over n_samples mask draws.

    Every pass samples fresh masks from ``rng``; variance divides by N.
    With mode OFF the passes are identical and the variance is exactly
    zero.
    """
    if n_samples < 2:
        raise DataError(f"n_samples must be >= 2, got {n_samples}")
    x = np.asarray(x, dtype=np.float64)
    samples = np.empty((n_samples, x.shape[0]))
    for i in range(n_samples):
        samples[i] = forward(net, x, t, mode, rng)
    mean = samples.mean(axis=0)
    variance = np.square(samples - mean).mean(axis=0)
    # units whose passes were identical (mode OFF, rate 0, or no dropout
    # site on the stochastic path) must collapse bit-exactly, not to the
    # rounding residue of averaging N equal floats
    constant = (samples == samples[0]).all(axis=0)
    if constant.any():
        mean = np.where(constant, samples[0], mean)
        variance = np.where(constant, 0.0, variance)
    return MCResult(mean=mean, variance=variance, n_samples=n_samples, mode=mode)


def decompose(
    net: TwinNet,
    x: np.ndarray,
    n_samples: int,
    rng: RngStream,
) -> UncertaintyBreakdown:
    """Run the three modes on both arms and assemble the breakdown.

    The six mc_predict calls receive independently derived child
    streams in a fixed order, so the result does not depend on how a
    caller might schedule them.
    """
    tot0 = mc_predict(net, x, 0, DropoutMode.TOTAL, n_samples, rng.child(0))
    tot1 = mc_predict(net, x, 1, DropoutMode.TOTAL, n_samples, rng.child(1))
    rep0 = mc_predict(net, x, 0, DropoutMode.REP_ONLY, n_samples, rng.child(2))
    rep1 = mc_predict(net, x, 1, DropoutMode.REP_ONLY, n_samples, rng.child(3))
    pred0 = mc_predict(net, x, 0, DropoutMode.PRED_ONLY, n_samples, rng.child(4))
    pred1 = mc_predict(net, x, 1, DropoutMode.PRED_ONLY, n_samples, rng.child(5))

    var_tau = rep0.variance + rep1.variance + pred0.variance + pred1.variance
    return UncertaintyBreakdown(
        tau_hat=tot1.mean - tot0.mean,
        var_rep0=rep0.variance,
        var_rep1=rep1.variance,
        var_pred0=pred0.variance,
        var_pred1=pred1.variance,
        var_tot0=tot0.variance,
        var_tot1=tot1.variance,
        var_tau=var_tau,
        gap0=tot0.variance - (rep0.variance + pred0.variance),
        gap1=tot1.variance - (rep1.variance + pred1.variance),
        mean0=tot0.mean,
        mean1=tot1.mean,
        n_samples=n_samples,
    )


def relative_gaps(breakdown: UncertaintyBreakdown, arm: int) -> np.ndarray:
    """|gap| / max(var_tot, floor) for one arm; zero variances give 0."""
    gap = breakdown.gap0 if arm == 0 else breakdown.gap1
    tot = breakdown.var_tot0 if arm == 0 else breakdown.var_tot1
    return np.abs(gap) / np.maximum(tot, GAP_FLOOR)


@dataclass
class AdditivitySummary:
    """Distribution of relative additivity gaps over a batch of breakdowns."""

    median0: float
    p95_0: float
    median1: float
    p95_1: float
    median: float
    p95: float
    n_units: int


def additivity_report(breakdowns: list[UncertaintyBreakdown]) -> AdditivitySummary:
    """Median and 95th percentile of the per-arm relative additivity gap."""
    if not breakdowns:
        raise DataError("additivity_report needs at least one breakdown")
    g0 = np.concatenate([relative_gaps(b, 0) for b in breakdowns])
    g1 = np.concatenate([relative_gaps(b, 1) for b in breakdowns])
    both = np.concatenate([g0, g1])
    return AdditivitySummary(
        median0=float(np.median(g0)), p95_0=float(np.quantile(g0, 0.95)),
        median1=float(np.median(g1)), p95_1=float(np.quantile(g1, 0.95)),
        median=float(np.median(both)), p95=float(np.quantile(both, 0.95)),
        n_units=int(g0.size),
    )


def write_breakdown_csv(breakdown: UncertaintyBreakdown, path, unit_ids=None) -> None:
    """Export per-unit rows with the fixed breakdown column set."""
    n = breakdown.n
    ids = np.arange(n) if unit_ids is None else np.asarray(unit_ids)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(BREAKDOWN_COLUMNS)
        for i in range(n):
            w.writerow([
                int(ids[i]),
                repr(float(breakdown.tau_hat[i])),
                repr(float(breakdown.var_rep0[i])),
                repr(float(breakdown.var_rep1[i])),
                repr(float(breakdown.var_pred0[i])),
                repr(float(breakdown.var_pred1[i])),
                repr(float(breakdown.var_tot0[i])),
                repr(float(breakdown.var_tot1[i])),
                repr(float(breakdown.var_tau[i])),
                repr(float(breakdown.gap0[i])),
                repr(float(breakdown.gap1[i])),
            ])


def read_breakdown_csv(path) -> dict[str, np.ndarray]:
    """Load a breakdown CSV back into column arrays."""
    with open(path, "r", newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or tuple(header) != BREAKDOWN_COLUMNS:
            raise DataError(f"{path} does not have the breakdown column set")
        rows = [row for row in reader]
    cols = {name: np.array([float(r[j]) for r in rows])
            for j, name in enumerate(BREAKDOWN_COLUMNS)}
    cols["unit_id"] = cols["unit_id"].astype(np.int64)
    return cols
