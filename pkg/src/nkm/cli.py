"""Command-line entry point.

    nkm <command> [--config PATH] [--seed INT] [--out DIR]
                  [--preset {desk,adni-full}] [--set key=value ...]

Commands: synth, train, eval, cv, ablate, edmd, verify-bound,
verify-descent, importance, export-latents. Every run writes
effective-config.json to the output directory before doing work, then its
metrics.csv / report.json (plus command-specific files). Exit codes: 0 ok,
1 runtime or data error, 2 usage error.
"""
from __future__ import annotations

import argparse
import csv
import json
import sys
from pathlib import Path

import numpy as np

from . import schema
from .analysis import (export_latents, feature_importance, verify_bound,
                       verify_descent, write_latents_csv)
from .config import (COMMAND_DEFAULTS, ConfigError, arch_from_config,
                     build_config, load_config_file, loss_from_config,
                     optim_from_config, parse_override,
                     write_effective_config)
from .data import (Preprocessor, Windows, build_windows, load_visits_csv,
                   materialize_fold, train_val_split, write_visits_csv)
from .edmd import EdmdConfig, EdmdModel
from .model import AblationFlags, NkmModel, load_checkpoint, save_checkpoint
from .synthetic import SyntheticConfig, generate_synthetic
from .training import (CvResult, evaluate, run_ablation, run_cv, run_edmd_cv,
                       train)

METRIC_COLUMNS = ["setup", "fold", "target", "pearson", "spearman", "mae",
                  "rmse"]


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="nkm",
        description="Koopman-style longitudinal forecasting toolkit")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMAND_DEFAULTS:
        p = sub.add_parser(name)
        p.add_argument("--config", default=None,
                       help="JSON file of dotted config keys")
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--out", default=None, help="output directory")
        p.add_argument("--preset", choices=["desk", "adni-full"], default=None)
        p.add_argument("--set", dest="overrides", action="append", default=[],
                       metavar="KEY=VALUE", help="override one config key")
    return parser


# ---- shared plumbing -------------------------------------------------------

def _fmt(x) -> str:
    return format(float(x), ".17g")


def _write_metrics_csv(path: Path, rows: list[dict]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(METRIC_COLUMNS)
        for r in rows:
            w.writerow([r["setup"], r.get("fold", 0), r["target"],
                        _fmt(r["pearson"]), _fmt(r["spearman"]),
                        _fmt(r["mae"]), _fmt(r["rmse"])])


def _write_report(out_dir: Path, report: dict) -> None:
    (out_dir / "report.json").write_text(
        json.dumps(report, indent=2, sort_keys=True) + "\n")


def _synthetic_config(cfg: dict) -> SyntheticConfig:
    return SyntheticConfig(
        n_subjects=cfg["data.n_subjects"],
        visits_per_subject=cfg["data.visits"],
        latent_dim=cfg["data.latent_dim"],
        noise_sd=cfg["data.noise_sd"],
        missing_rate=cfg["data.missing_rate"],
        drift_sd=cfg["data.drift_sd"],
        base_drift_scale=cfg["data.base_drift_scale"],
        observation=cfg["data.observation"],
        target_noise_sd=cfg["data.target_noise_sd"],
        observed_rank=cfg["data.observed_rank"])


def _load_table(cfg: dict):
    """(table, sidecar-or-None) from data.path or the synthesizer."""
    if cfg["data.path"]:
        path = Path(cfg["data.path"])
        if not path.exists():
            raise FileNotFoundError(f"input data file not found: {path}")
        return load_visits_csv(path), None
    table, sidecar = generate_synthetic(_synthetic_config(cfg), cfg["seed"])
    return table, sidecar


def _cv_summary(res: CvResult) -> dict:
    per_target = {}
    for t in schema.TARGET_COLUMNS:
        for metric in ("pearson", "spearman", "mae", "rmse"):
            vals = [getattr(f.metrics, metric)[t] for f in res.folds]
            per_target.setdefault(t, {})[f"{metric}_mean"] = float(np.mean(vals))
            per_target[t][f"{metric}_std"] = float(np.std(vals))
    fold_r = res.fold_mean_pearson()
    fold_mae = [f.metrics.mean_mae for f in res.folds]
    fold_rmse = [f.metrics.mean_rmse for f in res.folds]
    fold_rho = [float(np.mean([f.metrics.spearman[t]
                               for t in schema.TARGET_COLUMNS]))
                for f in res.folds]
    return {"setup": res.setup, "folds": len(res.folds),
            "mean_pearson": float(np.mean(fold_r)),
            "std_pearson": float(np.std(fold_r)),
            "mean_spearman": float(np.mean(fold_rho)),
            "std_spearman": float(np.std(fold_rho)),
            "mean_mae": float(np.mean(fold_mae)),
            "std_mae": float(np.std(fold_mae)),
            "mean_rmse": float(np.mean(fold_rmse)),
            "std_rmse": float(np.std(fold_rmse)),
            "per_fold_mean_pearson": fold_r, "per_target": per_target}


def _print_table_row(summary: dict) -> None:
    print(f"{summary['setup']:>24s}  "
          f"r={summary['mean_pearson']:.4f}±{summary['std_pearson']:.4f}  "
          f"rho={summary['mean_spearman']:.4f}±{summary['std_spearman']:.4f}  "
          f"MAE={summary['mean_mae']:.4f}±{summary['std_mae']:.4f}  "
          f"RMSE={summary['mean_rmse']:.4f}±{summary['std_rmse']:.4f}")


# ---- command handlers ------------------------------------------------------

def _cmd_synth(cfg: dict, out_dir: Path) -> None:
    table, sidecar = generate_synthetic(_synthetic_config(cfg), cfg["seed"])
    write_visits_csv(table, out_dir / "cohort.csv")
    (out_dir / "sidecar.json").write_text(
        json.dumps(sidecar, indent=2, sort_keys=True, default=str) + "\n")
    windows = build_windows(table, w=cfg["data.window"])
    _write_report(out_dir, {
        "rows": len(table.subject_ids),
        "subjects": len(table.unique_subjects()),
        "windows": len(windows), "seed": cfg["seed"]})
    print(f"wrote {out_dir / 'cohort.csv'} "
          f"({len(table.subject_ids)} rows, {len(windows)} windows)")


def _cmd_train(cfg: dict, out_dir: Path) -> None:
    table, _ = _load_table(cfg)
    train_subjects, val_subjects = train_val_split(
        table.unique_subjects(), cfg["train.val_frac"], cfg["seed"])
    pre = Preprocessor().fit(table.subset_subjects(train_subjects).X)
    prepped = table.with_features(pre.transform(table.X))
    tr = build_windows(prepped.subset_subjects(train_subjects),
                       w=cfg["data.window"])
    va = build_windows(prepped.subset_subjects(val_subjects),
                       w=cfg["data.window"])
    model = NkmModel(arch_from_config(cfg), seed=cfg["seed"],
                     ablation=AblationFlags.from_name(cfg["model.ablation"]))
    result = train(model, tr, va, optim_from_config(cfg),
                   loss_from_config(cfg), mode=cfg["train.mode"],
                   seed=cfg["seed"])
    save_checkpoint(model, str(out_dir / "model"), history=result.history)
    pre.save(out_dir / "preprocessor.npz")
    metrics = evaluate(model, va)
    _write_metrics_csv(out_dir / "metrics.csv",
                       metrics.rows(cfg["model.ablation"]))
    _write_report(out_dir, {"train": result.report(),
                            "val_metrics": metrics.to_dict()})
    print(f"best val loss {result.best_val:.6f} at epoch {result.best_epoch}; "
          f"checkpoint at {out_dir / 'model'}.json/.bin")


def _cmd_eval(cfg: dict, out_dir: Path) -> None:
    if not cfg["eval.model"]:
        raise ValueError("eval.model must point to a checkpoint stem")
    if not cfg["eval.preprocessor"]:
        raise ValueError("eval.preprocessor must point to a preprocessor .npz")
    pre_path = Path(cfg["eval.preprocessor"])
    if not pre_path.exists():
        raise FileNotFoundError(f"preprocessor file not found: {pre_path}")
    model, manifest = load_checkpoint(cfg["eval.model"])
    pre = Preprocessor.load(pre_path)
    table, _ = _load_table(cfg)
    prepped = table.with_features(pre.transform(table.X))
    windows = build_windows(prepped, w=cfg["data.window"])
    metrics = evaluate(model, windows)
    flags = manifest.get("ablation") or {}
    setup = next((k for k, v in flags.items() if v), "full")
    _write_metrics_csv(out_dir / "metrics.csv", metrics.rows(setup))
    _write_report(out_dir, {"windows": len(windows),
                            "metrics": metrics.to_dict()})
    print(f"evaluated {len(windows)} windows; "
          f"mean r={metrics.mean_pearson:.4f}")


def _cmd_cv(cfg: dict, out_dir: Path) -> None:
    table, _ = _load_table(cfg)
    res = run_cv(table, arch=arch_from_config(cfg),
                 optim_cfg=optim_from_config(cfg),
                 loss_cfg=loss_from_config(cfg), k=cfg["cv.k"],
                 seed=cfg["seed"], mode=cfg["train.mode"],
                 ablation=AblationFlags.from_name(cfg["model.ablation"]),
                 setup_name=cfg["model.ablation"], w=cfg["data.window"],
                 val_frac=cfg["train.val_frac"])
    _write_metrics_csv(out_dir / "metrics.csv", res.rows())
    summary = _cv_summary(res)
    _write_report(out_dir, summary)
    _print_table_row(summary)


def _cmd_ablate(cfg: dict, out_dir: Path) -> None:
    table, _ = _load_table(cfg)
    results = run_ablation(table, setups=list(cfg["ablate.setups"]),
                           arch=arch_from_config(cfg),
                           optim_cfg=optim_from_config(cfg),
                           loss_cfg=loss_from_config(cfg), k=cfg["cv.k"],
                           seed=cfg["seed"], mode=cfg["train.mode"])
    rows = [r for res in results for r in res.rows()]
    _write_metrics_csv(out_dir / "metrics.csv", rows)
    summaries = {res.setup: _cv_summary(res) for res in results}
    report: dict = {"setups": summaries}
    by_name = {res.setup: res for res in results}
    if "full" in by_name and "no_control" in by_name:
        full_r = by_name["full"].fold_mean_pearson()
        nc_r = by_name["no_control"].fold_mean_pearson()
        report["full_vs_no_control"] = {
            "wins": int(sum(a > b for a, b in zip(full_r, nc_r))),
            "folds": len(full_r)}
    _write_report(out_dir, report)
    for res in results:
        _print_table_row(summaries[res.setup])


def _cmd_edmd(cfg: dict, out_dir: Path) -> None:
    table, _ = _load_table(cfg)
    edmd_cfg = EdmdConfig(n_centers=cfg["edmd.n_centers"],
                          include_identity=cfg["edmd.include_identity"],
                          include_constant=cfg["edmd.include_constant"],
                          alpha=cfg["edmd.alpha"],
                          readout_alpha=cfg["edmd.readout_alpha"],
                          seed=cfg["seed"])
    res = run_edmd_cv(table, edmd_cfg, k=cfg["cv.k"], seed=cfg["seed"],
                      w=cfg["data.window"], val_frac=cfg["train.val_frac"])
    _write_metrics_csv(out_dir / "metrics.csv", res.rows())
    summary = _cv_summary(res)
    _write_report(out_dir, summary)
    _print_table_row(summary)


def _cmd_verify_bound(cfg: dict, out_dir: Path) -> None:
    table, _ = _load_table(cfg)
    tau_max = cfg["bound.tau_max"]
    if cfg["bound.source"] == "edmd":
        # raw-table fit: standardization is a similarity transform that can
        # push the recovered operator norm past 1 on purely linear cohorts
        edmd_cfg = EdmdConfig(n_centers=cfg["edmd.n_centers"],
                              include_identity=cfg["edmd.include_identity"],
                              include_constant=cfg["edmd.include_constant"],
                              alpha=cfg["edmd.alpha"],
                              readout_alpha=cfg["edmd.readout_alpha"],
                              seed=cfg["seed"])
        model = EdmdModel(edmd_cfg).fit(table)
        report = verify_bound(model, table, tau_max=tau_max)
        meta = {"source": "edmd"}
    elif cfg["bound.source"] == "nkm":
        _, held_out = train_val_split(table.unique_subjects(),
                                      cfg["train.val_frac"], cfg["seed"])
        fold = materialize_fold(table, held_out, seed=cfg["seed"],
                                w=cfg["data.window"],
                                val_frac=cfg["train.val_frac"])
        model = NkmModel(arch_from_config(cfg), seed=cfg["seed"])
        train(model, fold.train, fold.val, optim_from_config(cfg),
              loss_from_config(cfg), mode=cfg["train.mode"], seed=cfg["seed"])
        test_table = table.subset_subjects(fold.test_subjects)
        test_table = test_table.with_features(
            fold.preprocessor.transform(test_table.X))
        report = verify_bound(model, test_table, tau_max=tau_max)
        meta = {"source": "nkm", "held_out_subjects": len(held_out)}
    else:
        raise ValueError("bound.source must be 'nkm' or 'edmd'")
    _write_report(out_dir, {**meta, **report.to_dict()})
    print(f"bound check ({meta['source']}): "
          f"{'PASS' if report.passed else 'FAIL'}  "
          f"eps={report.eps_tilde:.6g} |K|={report.norm_k:.6g} "
          f"limit={report.limit:.6g}")


def _cmd_verify_descent(cfg: dict, out_dir: Path) -> None:
    table, _ = _load_table(cfg)
    pre = Preprocessor().fit(table.X)
    prepped = table.with_features(pre.transform(table.X))
    windows = build_windows(prepped, w=cfg["data.window"])
    n = min(cfg["descent.n_windows"], len(windows))
    batch = Windows(windows.X[:n], windows.y[:n], windows.subjects[:n],
                    windows.starts[:n])
    arch = arch_from_config(cfg)
    loss_cfg = loss_from_config(cfg)
    main_report = verify_descent(NkmModel(arch, seed=cfg["seed"]), batch,
                                 loss_cfg, iters=cfg["descent.iters"],
                                 theta_step=cfg["descent.theta_step"],
                                 k_step=cfg["descent.k_step"])
    report = {"descent": main_report.to_dict()}
    passed = main_report.passed
    if cfg["descent.negative_control"]:
        nc = verify_descent(NkmModel(arch, seed=cfg["seed"]), batch, loss_cfg,
                            iters=cfg["descent.iters"], theta_step=1e6,
                            backtracking=False)
        report["negative_control"] = nc.to_dict()
        passed = passed and not nc.passed
        print(f"negative control: {'diverged as expected' if not nc.passed else 'UNEXPECTEDLY PASSED'}")
    report["passed"] = passed
    _write_report(out_dir, report)
    print(f"descent check: {'PASS' if passed else 'FAIL'} "
          f"({cfg['descent.iters']} iterations, {n} windows)")


def _cmd_importance(cfg: dict, out_dir: Path) -> None:
    table, _ = _load_table(cfg)
    report = feature_importance(table, runs=cfg["importance.runs"],
                                seed=cfg["seed"], arch=arch_from_config(cfg),
                                optim_cfg=optim_from_config(cfg),
                                loss_cfg=loss_from_config(cfg),
                                train_models=cfg["importance.train"],
                                test_frac=cfg["importance.test_frac"],
                                w=cfg["data.window"])
    _write_report(out_dir, report.to_dict())
    with open(out_dir / "metrics.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        targets = schema.TARGET_COLUMNS
        w.writerow(["feature", "mean_importance", "top10_frequency"]
                   + [f"importance_{t}" for t in targets])
        for i, name in enumerate(report.features):
            w.writerow([name, _fmt(report.mean_importance[i]),
                        _fmt(report.top10_frequency[i])]
                       + [_fmt(report.per_target[t][i]) for t in targets])
    top = int(np.argmax(report.mean_importance))
    print(f"{report.runs} runs; top feature {report.features[top]} "
          f"(mean r drop {report.mean_importance[top]:.4f})")


def _cmd_export_latents(cfg: dict, out_dir: Path) -> None:
    table, _ = _load_table(cfg)
    steps = cfg["export.rollout_steps"]
    if cfg["export.model"]:
        if not cfg["export.preprocessor"]:
            raise ValueError("export.preprocessor is required with export.model")
        pre_path = Path(cfg["export.preprocessor"])
        if not pre_path.exists():
            raise FileNotFoundError(f"preprocessor file not found: {pre_path}")
        model, _ = load_checkpoint(cfg["export.model"])
        pre = Preprocessor.load(pre_path)
        prepped = table.with_features(pre.transform(table.X))
        windows = build_windows(prepped, w=cfg["data.window"])
        rows = export_latents(model, windows, rollout_steps=steps)
    else:
        _, held_out = train_val_split(table.unique_subjects(),
                                      cfg["train.val_frac"], cfg["seed"])
        fold = materialize_fold(table, held_out, seed=cfg["seed"],
                                w=cfg["data.window"],
                                val_frac=cfg["train.val_frac"])
        model = NkmModel(arch_from_config(cfg), seed=cfg["seed"])
        train(model, fold.train, fold.val, optim_from_config(cfg),
              loss_from_config(cfg), mode=cfg["train.mode"], seed=cfg["seed"])
        rows = export_latents(model, fold.test, train_windows=fold.train,
                              rollout_steps=steps)
    write_latents_csv(out_dir / "latents.csv", rows)
    _write_report(out_dir, {"rows": len(rows), "rollout_steps": steps})
    print(f"wrote {len(rows)} trajectory rows to {out_dir / 'latents.csv'}")


_HANDLERS = {
    "synth": _cmd_synth,
    "train": _cmd_train,
    "eval": _cmd_eval,
    "cv": _cmd_cv,
    "ablate": _cmd_ablate,
    "edmd": _cmd_edmd,
    "verify-bound": _cmd_verify_bound,
    "verify-descent": _cmd_verify_descent,
    "importance": _cmd_importance,
    "export-latents": _cmd_export_latents,
}


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        file_values = load_config_file(args.config) if args.config else None
        overrides = [parse_override(s) for s in args.overrides]
        cfg = build_config(args.command, preset=args.preset,
                           file_values=file_values, overrides=overrides,
                           seed=args.seed, out=args.out)
        out_dir = Path(cfg["out"])
        write_effective_config(cfg, out_dir)
        _HANDLERS[args.command](cfg, out_dir)
        return 0
    except ConfigError as err:
        print(f"nkm: {err}", file=sys.stderr)
        return 2
    except (FileNotFoundError, ValueError, RuntimeError) as err:
        print(f"nkm: {err}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
