"""Experiment orchestration: gen / train / uncertainty / eval / reproduce.

Run configuration is a JSON file with a flat, dotted key hierarchy
(e.g. ``{"generator.version": "v2", "model.epochs": 10}``); every key
has a default mirroring the reference hyperparameters (Adam lr 1e-3,
weight decay 1e-4, 50 epochs, dropout 0.2, N=1000 MC samples, batch
128) and every run writes its fully resolved config into a manifest,
together with the seeds used, artifact checksums, wall-clock timings
and the package version. Outputs are a pure function of the manifest
minus its timings.

Exit codes: 0 success, 2 usage/config error, 3 data error (unreadable
or corrupt files, schema violations), 4 numerical failure.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from .datagen import (
    SHIFTS,
    VERSIONS,
    SynthConfig,
    generate,
    read_dataset_csv,
    write_dataset_csv,
)
from .errors import DataError, NumericalError, ShapeError
from .evalmetrics import (
    IntervalSet,
    conformal_adjust,
    ensemble_baseline,
    evaluate_breakdown,
    EvalReport,
    reliability_and_ece,
    rep_threshold_sweep,
    spearman,
)
from .nn_core import RngStream
from .twin_model import (
    DropoutMode,
    LabeledDataset,
    TwinNetConfig,
    forward,
    load_checkpoint,
    predict_tau,
    save_checkpoint,
    train,
)
from .twins_ingest import (
    STANDIN_SCHEMA,
    BiasConfig,
    CohortTable,
    induce_bias,
    load_cohort,
    write_bias_manifest,
    write_standin_cohort,
)
from .uncertainty import decompose, mc_predict, write_breakdown_csv, read_breakdown_csv
from .parallel import map_indexed

DEFAULTS = {
    "seed": 0,
    "generator.version": "v1",
    "generator.n": 2000,
    "generator.noise_sd": 0.1,
    "generator.shift": "both",
    "generator.shift_strength": None,
    "model.latent_dim": 32,
    "model.encoder_hidden": [64, 64],
    "model.head_hidden": [32],
    "model.dropout": 0.2,
    "model.epochs": 50,
    "model.batch_size": 128,
    "model.lr": 1e-3,
    "model.weight_decay": 1e-4,
    "mc.n_samples": 1000,
    "bias.component_index": 1,
    "bias.bias_strength": 4.0,
    "bias.keep_prob_floor": 0.02,
    "metrics.n_boot": 200,
    "metrics.alpha": 0.05,
    "reproduce.n_seeds": 5,
    "twins.n": 3000,
    "twins.cohort_seed": 7,
}


class UsageError(ValueError):
    """Bad command line or config content; maps to exit 2."""


def load_config(path: str | None, seed_override: int | None = None) -> dict:
    """Resolve the flat config against DEFAULTS; unknown keys are errors."""
    resolved = {k: (list(v) if isinstance(v, list) else v) for k, v in DEFAULTS.items()}
    if path is not None:
        try:
            with open(path, "r", encoding="utf-8") as fh:
                user = json.load(fh)
        except OSError as e:
            raise UsageError(f"cannot read config {path}: {e}")
        except json.JSONDecodeError as e:
            raise UsageError(f"config {path} is not valid JSON: {e}")
        if not isinstance(user, dict):
            raise UsageError(f"config {path} must be a JSON object")
        unknown = sorted(set(user) - set(DEFAULTS))
        if unknown:
            raise UsageError(f"unknown config keys: {unknown}")
        resolved.update(user)
    if seed_override is not None:
        resolved["seed"] = int(seed_override)
    _validate_config(resolved)
    return resolved


def _validate_config(cfg: dict) -> None:
    if cfg["generator.version"] not in VERSIONS:
        raise UsageError(
            f"invalid generator.version {cfg['generator.version']!r} "
            f"(valid: {', '.join(VERSIONS)})"
        )
    if cfg["generator.shift"] not in SHIFTS:
        raise UsageError(f"invalid generator.shift {cfg['generator.shift']!r}")
    if cfg["generator.shift_strength"] not in (None, "mild", "strong"):
        raise UsageError(
            f"invalid generator.shift_strength {cfg['generator.shift_strength']!r}"
        )
    for key in ("generator.n", "model.epochs", "model.batch_size",
                "mc.n_samples", "metrics.n_boot", "reproduce.n_seeds", "twins.n"):
        if int(cfg[key]) < 1:
            raise UsageError(f"config key {key} must be >= 1")


def synth_config(cfg: dict) -> SynthConfig:
    return SynthConfig(
        version=cfg["generator.version"],
        n=int(cfg["generator.n"]),
        noise_sd=float(cfg["generator.noise_sd"]),
        shift=cfg["generator.shift"],
        shift_strength=cfg["generator.shift_strength"],
        seed=int(cfg["seed"]),
    )


def model_config(cfg: dict, input_dim: int, seed: int | None = None) -> TwinNetConfig:
    return TwinNetConfig(
        input_dim=input_dim,
        latent_dim=int(cfg["model.latent_dim"]),
        encoder_hidden=tuple(cfg["model.encoder_hidden"]),
        head_hidden=tuple(cfg["model.head_hidden"]),
        dropout=float(cfg["model.dropout"]),
        epochs=int(cfg["model.epochs"]),
        batch_size=int(cfg["model.batch_size"]),
        lr=float(cfg["model.lr"]),
        weight_decay=float(cfg["model.weight_decay"]),
        seed=int(cfg["seed"]) if seed is None else int(seed),
    )


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def write_manifest(out_dir: Path, command: str, cfg: dict, inputs: dict,
                   outputs: dict, started: float, seeds: dict) -> None:
    manifest = {
        "command": command,
        "config": cfg,
        "seeds": seeds,
        "inputs": {k: {"path": str(p), "sha256": _sha256(Path(p))} for k, p in inputs.items()},
        "outputs": {k: {"path": str(p), "sha256": _sha256(Path(p))} for k, p in outputs.items()},
        "version": __version__,
        "timings": {"wall_seconds": time.time() - started},
    }
    path = out_dir / f"manifest-{command}.json"
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _out_dir(args) -> Path:
    out = Path(args.out)
    try:
        out.mkdir(parents=True, exist_ok=True)
        probe = out / ".write-probe"
        probe.write_text("")
        probe.unlink()
    except OSError as e:
        raise DataError(f"output directory {out} is not writable: {e}")
    return out


# -- commands ----------------------------------------------------------------

def cmd_gen(args) -> int:
    started = time.time()
    cfg = load_config(args.config, args.seed)
    out = _out_dir(args)
    data = generate(synth_config(cfg))
    dataset_path = out / "dataset.csv"
    write_dataset_csv(data, dataset_path)
    cfg["generator.shift_strength"] = data.config.shift_strength
    write_manifest(out, "gen", cfg, {}, {"dataset": dataset_path}, started,
                   {"master": cfg["seed"]})
    print(f"wrote {dataset_path} ({data.train.n} train / {data.test.n} test rows)")
    return 0


def cmd_train(args) -> int:
    started = time.time()
    cfg = load_config(args.config, args.seed)
    out = _out_dir(args)
    ckpt_path = out / "checkpoint.json"
    if ckpt_path.exists():
        load_checkpoint(ckpt_path)  # raises DataError when corrupt
        print(f"checkpoint {ckpt_path} already exists and verifies; nothing to do")
        return 0
    train_ds, _ = read_dataset_csv(args.dataset)
    config = model_config(cfg, input_dim=train_ds.x.shape[1])
    net = train(train_ds, config)
    save_checkpoint(net, ckpt_path)
    write_manifest(out, "train", cfg, {"dataset": args.dataset},
                   {"checkpoint": ckpt_path}, started, {"master": cfg["seed"]})
    print(f"trained {config.epochs} epochs; factual MSE "
          f"{net.train_loss[0]:.4f} -> {net.train_loss[-1]:.4f}; wrote {ckpt_path}")
    return 0


def cmd_uncertainty(args) -> int:
    started = time.time()
    cfg = load_config(args.config, args.seed)
    out = _out_dir(args)
    net = load_checkpoint(args.checkpoint)
    _, test_ds = read_dataset_csv(args.dataset)
    if test_ds.n == 0:
        raise DataError(f"dataset {args.dataset} has no test rows")
    n_mc = int(cfg["mc.n_samples"])
    rng = RngStream(int(cfg["seed"])).child(1)
    breakdown_path = out / "breakdown.csv"

    if args.mode is None:
        bd = decompose(net, test_ds.x, n_mc, rng)
        write_breakdown_csv(bd, breakdown_path)
    else:
        mode = DropoutMode.from_string(args.mode)
        r0 = mc_predict(net, test_ds.x, 0, mode, n_mc, rng.child(0))
        r1 = mc_predict(net, test_ds.x, 1, mode, n_mc, rng.child(1))
        _write_single_mode_csv(breakdown_path, mode, r0, r1)
    write_manifest(out, "uncertainty", cfg,
                   {"checkpoint": args.checkpoint, "dataset": args.dataset},
                   {"breakdown": breakdown_path}, started,
                   {"master": cfg["seed"]})
    print(f"wrote {breakdown_path} for {test_ds.n} test units (N={n_mc})")
    return 0


def _write_single_mode_csv(path, mode, r0, r1):
    """Restricted export: only the requested mode's columns are present."""
    import csv as _csv
    tag = {"total": "var_tot", "rep_only": "var_rep", "pred_only": "var_pred"}[mode.value]
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = _csv.writer(fh)
        if mode is DropoutMode.TOTAL:
            w.writerow(["unit_id", "mean0", "mean1", "tau_hat", "var_tot0", "var_tot1"])
            for i in range(r0.mean.shape[0]):
                w.writerow([i, repr(float(r0.mean[i])), repr(float(r1.mean[i])),
                            repr(float(r1.mean[i] - r0.mean[i])),
                            repr(float(r0.variance[i])), repr(float(r1.variance[i]))])
        else:
            w.writerow(["unit_id", f"{tag}0", f"{tag}1"])
            for i in range(r0.mean.shape[0]):
                w.writerow([i, repr(float(r0.variance[i])), repr(float(r1.variance[i]))])


def _tau_calibration(bd_cols: dict, tau_true: np.ndarray, seed: int):
    """Raw and conformal ECE for tau intervals on a seeded half split.

    Intervals: mean = tau_hat, sd = sqrt(var_tau), target = true tau.
    Returns (ece_raw, ece_conf, curve_raw, curve_conf) or Nones when the
    fold would be too small.
    """
    n = tau_true.shape[0]
    if n < 40:
        return None, None, None, None
    perm = RngStream(seed).child(2).permutation(n)
    cal_idx, eval_idx = perm[: n // 2], perm[n // 2:]
    sd = np.sqrt(bd_cols["var_tau"])

    def subset(idx):
        return IntervalSet(mean=bd_cols["tau_hat"][idx], sd=sd[idx],
                           targets=tau_true[idx])

    cal, ev = subset(cal_idx), subset(eval_idx)
    curve_raw, ece_raw = reliability_and_ece(ev)
    adjusted = conformal_adjust(cal, ev)
    curve_conf, ece_conf = reliability_and_ece(adjusted)
    return ece_raw, ece_conf, curve_raw, curve_conf


def cmd_eval(args) -> int:
    started = time.time()
    cfg = load_config(args.config, args.seed)
    out = _out_dir(args)
    cols = read_breakdown_csv(args.breakdown)
    _, test_ds = read_dataset_csv(args.dataset)
    if test_ds.n != cols["tau_hat"].shape[0]:
        raise DataError(
            f"breakdown has {cols['tau_hat'].shape[0]} units but the dataset "
            f"has {test_ds.n} test rows"
        )
    if test_ds.ood is None or not test_ds.ood.any() or test_ds.ood.all():
        raise DataError("dataset test rows lack usable ood_flag values")

    abs_err = np.abs(cols["tau_hat"] - test_ds.tau_true)
    rng = RngStream(int(cfg["seed"])).child(2)

    from .uncertainty import UncertaintyBreakdown
    bd = UncertaintyBreakdown(
        tau_hat=cols["tau_hat"], var_rep0=cols["var_rep0"], var_rep1=cols["var_rep1"],
        var_pred0=cols["var_pred0"], var_pred1=cols["var_pred1"],
        var_tot0=cols["var_tot0"], var_tot1=cols["var_tot1"],
        var_tau=cols["var_tau"], gap0=cols["gap0"], gap1=cols["gap1"],
        mean0=np.zeros_like(cols["tau_hat"]), mean1=np.zeros_like(cols["tau_hat"]),
        n_samples=int(cfg["mc.n_samples"]),
    )
    channels = evaluate_breakdown(bd, abs_err, ood=test_ds.ood, rng=rng,
                                  n_boot=int(cfg["metrics.n_boot"]))
    sweep = rep_threshold_sweep(cols["var_rep0"] + cols["var_rep1"],
                                cols["var_pred0"] + cols["var_pred1"], abs_err)
    ece_raw, ece_conf, curve_raw, curve_conf = _tau_calibration(
        cols, test_ds.tau_true, int(cfg["seed"]))

    report = EvalReport(
        channels=channels, ece_raw=ece_raw, ece_conformal=ece_conf,
        reliability_raw=curve_raw, reliability_conformal=curve_conf,
        sweep=sweep,
        meta={"config": cfg, "n_units": int(test_ds.n)},
    )
    report_path = out / "report.json"
    report.to_json(report_path)
    report.write_metrics_csv(out / "metrics.csv")
    report.write_reliability_csv(out / "reliability.csv")
    report.write_sweep_csv(out / "sweep.csv")
    write_manifest(out, "eval", cfg,
                   {"breakdown": args.breakdown, "dataset": args.dataset},
                   {"report": report_path, "metrics": out / "metrics.csv",
                    "reliability": out / "reliability.csv", "sweep": out / "sweep.csv"},
                   started, {"master": cfg["seed"]})
    print(f"wrote {report_path}")
    return 0


# -- reproduce ---------------------------------------------------------------

def _seed_run(data, cfg, model_seed):
    """Train one model seed and evaluate the uncertainty channels."""
    config = model_config(cfg, input_dim=data.train.x.shape[1], seed=model_seed)
    net = train(data.train, config)
    bd = decompose(net, data.test.x, int(cfg["mc.n_samples"]),
                   RngStream(model_seed).child(1))
    abs_err = np.abs(bd.tau_hat - data.test.tau_true)
    from .evalmetrics import channel_values
    rhos = {name: spearman(sig, abs_err) for name, sig in channel_values(bd).items()}
    return bd, abs_err, rhos


def _seed_ci(values):
    """Normal-approximation mean and 95% interval over per-seed statistics."""
    vals = np.array([v for v in values if v is not None], dtype=np.float64)
    if vals.size == 0:
        return None
    half = 1.96 * vals.std(ddof=1) / np.sqrt(vals.size) if vals.size > 1 else 0.0
    return float(vals.mean()), float(vals.mean() - half), float(vals.mean() + half)


def reproduce_synthetic(cfg: dict, out: Path) -> None:
    master = int(cfg["seed"])
    n_seeds = int(cfg["reproduce.n_seeds"])
    table1_rows, table2_rows = [], []
    for version in VERSIONS:
        gen_cfg = dict(cfg)
        gen_cfg["generator.version"] = version
        data = generate(synth_config(gen_cfg))
        run_dir = out / "synthetic" / version
        run_dir.mkdir(parents=True, exist_ok=True)
        write_dataset_csv(data, run_dir / "dataset.csv")

        per_seed = map_indexed(lambda s: _seed_run(data, gen_cfg, master + s),
                               range(n_seeds))
        for i, (bd, _, _) in enumerate(per_seed):
            write_breakdown_csv(bd, run_dir / f"breakdown-seed{i}.csv")
        for channel in ("rep", "pred", "tot", "pred0", "pred1"):
            ci = _seed_ci([rhos[channel] for _, _, rhos in per_seed])
            if ci is None:
                table1_rows.append([version, channel, "degenerate", "", "", n_seeds])
            else:
                table1_rows.append([version, channel, repr(ci[0]), repr(ci[1]),
                                    repr(ci[2]), n_seeds])

        ens = ensemble_baseline(data.train, data.test.x,
                                model_config(gen_cfg, data.train.x.shape[1], master),
                                n_members=5, tau_true=data.test.tau_true,
                                rng=RngStream(master).child(3))
        tot_ci = _seed_ci([rhos["tot"] for _, _, rhos in per_seed])
        ens_cells = (["degenerate", "", ""] if ens.rho is None
                     else [repr(ens.rho.point), repr(ens.rho.lo), repr(ens.rho.hi)])
        table2_rows.append([version, repr(tot_ci[0]), repr(tot_ci[1]),
                            repr(tot_ci[2])] + ens_cells)

    _write_csv(out / "synthetic" / "table1.csv",
               ["generator", "channel", "rho_mean", "rho_lo", "rho_hi", "n_seeds"],
               table1_rows)
    _write_csv(out / "synthetic" / "table2.csv",
               ["generator", "mc_rho_tot", "mc_lo", "mc_hi",
                "ensemble_rho", "ens_lo", "ens_hi"],
               table2_rows)


def reproduce_twins(cfg: dict, out: Path) -> None:
    master = int(cfg["seed"])
    twins_dir = out / "twins-standin"
    twins_dir.mkdir(parents=True, exist_ok=True)
    cohort_path = twins_dir / "cohort.csv"
    write_standin_cohort(cohort_path, n=int(cfg["twins.n"]),
                         seed=int(cfg["twins.cohort_seed"]))
    table = load_cohort(cohort_path, STANDIN_SCHEMA)

    rows = []
    conditions = (("no_bias", 0.0), ("bias", float(cfg["bias.bias_strength"])))
    for name, beta in conditions:
        bias_cfg = BiasConfig(
            component_index=int(cfg["bias.component_index"]),
            bias_strength=beta,
            keep_prob_floor=float(cfg["bias.keep_prob_floor"]),
            seed=master,
        )
        report = twins_condition_report(table, bias_cfg, cfg, master)
        write_bias_manifest(report["split"], twins_dir / f"bias-manifest-{name}.csv")
        for channel, cm in report["channels"].items():
            for metric, ci in (("rho", cm.rho), ("delta_sigma", cm.delta_sigma),
                               ("auc", cm.auc)):
                if ci is None:
                    rows.append([name, channel, metric, "degenerate", "", ""])
                else:
                    rows.append([name, channel, metric, repr(ci.point),
                                 repr(ci.lo), repr(ci.hi)])
    _write_csv(twins_dir / "table3.csv",
               ["condition", "channel", "metric", "point", "lo", "hi"], rows)


def twins_condition_report(table: CohortTable, bias_cfg: BiasConfig, cfg: dict,
                           master: int) -> dict:
    """Train under one bias condition and evaluate the OOD/error metrics.

    The error signal is the factual absolute error |f_T(x) - y| from the
    deterministic pass, since the cohort has no effect ground truth.
    """
    split = induce_bias(table, bias_cfg)
    train_ds = LabeledDataset(
        x=table.covariates[split.train_idx],
        t=table.treatment[split.train_idx],
        y=table.outcome[split.train_idx],
    )
    config = model_config(cfg, input_dim=table.covariates.shape[1], seed=master)
    net = train(train_ds, config)

    test_x = table.covariates[split.test_idx]
    bd = decompose(net, test_x, int(cfg["mc.n_samples"]), RngStream(master).child(1))
    pred0 = forward(net, test_x, 0, DropoutMode.OFF)
    pred1 = forward(net, test_x, 1, DropoutMode.OFF)
    t_test = table.treatment[split.test_idx]
    factual = np.where(t_test == 1, pred1, pred0)
    abs_err = np.abs(factual - table.outcome[split.test_idx])

    channels = evaluate_breakdown(bd, abs_err, ood=split.ood,
                                  rng=RngStream(master).child(2),
                                  n_boot=int(cfg["metrics.n_boot"]))
    return {"split": split, "channels": channels, "breakdown": bd,
            "abs_err": abs_err}


def _write_csv(path, header, rows):
    import csv as _csv
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = _csv.writer(fh)
        w.writerow(header)
        w.writerows(rows)


def cmd_reproduce(args) -> int:
    started = time.time()
    cfg = load_config(args.config, args.seed)
    out = _out_dir(args)
    if args.suite in ("synthetic", "all"):
        reproduce_synthetic(cfg, out)
    if args.suite in ("twins-standin", "all"):
        reproduce_twins(cfg, out)
    write_manifest(out, "reproduce", cfg, {}, {}, started,
                   {"master": cfg["seed"],
                    "model_seeds": [cfg["seed"] + i
                                    for i in range(int(cfg["reproduce.n_seeds"]))]})
    print(f"wrote results tree under {out}")
    return 0


# -- entry point -------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="twindrop",
        description="Twin-network effect estimation with factorized "
                    "MC-Dropout uncertainty",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", default=None, help="flat JSON config file")
        p.add_argument("--seed", type=int, default=None, help="master seed override")
        p.add_argument("--out", default="twindrop_out", help="output directory")

    p = sub.add_parser("gen", help="generate a synthetic dataset CSV")
    common(p)
    p.set_defaults(func=cmd_gen)

    p = sub.add_parser("train", help="train a twin network on a dataset CSV")
    common(p)
    p.add_argument("--dataset", required=True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("uncertainty", help="MC-dropout variance breakdown")
    common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--dataset", required=True)
    p.add_argument("--mode", choices=["total", "rep_only", "pred_only"],
                   default=None,
                   help="restrict to one mode (default: full decomposition)")
    p.set_defaults(func=cmd_uncertainty)

    p = sub.add_parser("eval", help="metric report from a breakdown CSV")
    common(p)
    p.add_argument("--breakdown", required=True)
    p.add_argument("--dataset", required=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("reproduce", help="run the full experiment grid")
    common(p)
    p.add_argument("--suite", choices=["synthetic", "twins-standin", "all"],
                   default="all")
    p.set_defaults(func=cmd_reproduce)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except UsageError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except (DataError, ShapeError, OSError) as e:
        print(f"data error: {e}", file=sys.stderr)
        return 3
    except NumericalError as e:
        print(f"numerical failure: {e}", file=sys.stderr)
        return 4


if __name__ == "__main__":
    sys.exit(main())
