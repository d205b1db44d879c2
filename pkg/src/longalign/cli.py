"""Experiment commands: synth, train-reg, train-risk, evaluate, plot, sweep.

Every command takes --config (JSON), repeatable --override KEY=VALUE,
--seed and --out, rejects unknown keys, and writes the resolved
configuration next to its outputs as resolved-config.json. Exit codes:
0 success, 2 configuration error, 3 data error, 4 runtime failure.
Intermediate artifacts (resume checkpoints) go to $LONGALIGN_CACHE when set,
else to <out>/cache.
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys
from pathlib import Path

import numpy as np
import torch

from . import datasets, metrics, plots, regnet, risk
from .datasets import SynthConfig, load_reg_pairs, load_risk_examples, synthesize_dataset
from .errors import ConfigError, DataError
from .fields import load_field, njd_percent
from .metrics import metric_rows, metrics_filename, registration_report, stratified_report, write_metric_rows
from .regnet import RegConfig, load_checkpoint, save_checkpoint, train_registration
from .risk import (
    RiskConfig,
    VariantKind,
    load_risk_checkpoint,
    load_risk_model,
    predict_records,
    save_risk_checkpoint,
    train_risk,
)

SYNTH_DEFAULTS = {
    "n_patients": 20,
    "height": 256,
    "width": 128,
    "deform_amplitude_min": 2.0,
    "deform_amplitude_max": 8.0,
    "deform_smoothness": 128.0,
    "cancer_fraction": 0.35,
    "lesion_growth_min": 0.5,
    "lesion_growth_max": 3.0,
    "seed": 0,
}

TRAIN_REG_DEFAULTS = {
    "dataset": None,
    "encoder_channels": [8, 16, 32, 64, 128],
    "window_size": 4,
    "share_encoder": False,
    "learning_rate": 1e-4,
    "weight_decay": 1e-6,
    "batch_size": 20,
    "epochs": 100,
    "pairs_per_epoch": 1500,
    "gamma": 1.0,
    "lambda_jd": 1e-5,
    "bootstrap_iterations": 1000,
    "seed": 0,
}

TRAIN_RISK_DEFAULTS = {
    "dataset": None,
    "variant": "NoAlign",
    "reg_checkpoint": None,
    "mode": "joint",
    "encoder_widths": [16, 32, 64, 128],
    "encoder_blocks": [2, 2, 2, 2],
    "encoder_pool": True,
    "alpha": 1e-2,
    "lambda_jd": 1e-5,
    "learning_rate": 1e-4,
    "weight_decay": 1e-5,
    "batch_size": 12,
    "max_epochs": 100,
    "lr_halve_patience": 5,
    "early_stop_patience": 15,
    "bootstrap_iterations": 1000,
    "seed": 0,
}

EVALUATE_DEFAULTS = {
    "dataset": None,
    "checkpoint": None,
    "split": "test",
    "bootstrap_iterations": 1000,
    "seed": 0,
}

PLOT_DEFAULTS = {
    "field": None,
    "density_metrics": None,
    "sweep_table": None,
    "quiver_step": 8,
    "seed": 0,
}

SWEEP_DEFAULTS = dict(
    TRAIN_RISK_DEFAULTS,
    variant="FeatAlign",
    alphas=[1e-3, 4.64e-3, 2.15e-2, 1e-1],
)


def cache_dir(out: Path) -> Path:
    root = os.environ.get("LONGALIGN_CACHE")
    path = Path(root) if root else out / "cache"
    path.mkdir(parents=True, exist_ok=True)
    return path


def _parse_value(raw: str):
    try:
        return json.loads(raw)
    except json.JSONDecodeError:
        return raw


def _apply_key(config: dict, key: str, value, source: str) -> None:
    parts = key.split(".")
    node = config
    for part in parts[:-1]:
        if part not in node or not isinstance(node[part], dict):
            raise ConfigError(f"unknown configuration key {key!r} (from {source})")
        node = node[part]
    if parts[-1] not in node:
        raise ConfigError(f"unknown configuration key {key!r} (from {source})")
    node[parts[-1]] = value


def resolve_config(args, defaults: dict) -> dict:
    config = json.loads(json.dumps(defaults))  # deep copy
    if args.config:
        path = Path(args.config)
        if not path.exists():
            raise ConfigError(f"config file not found: {path}")
        try:
            loaded = json.loads(path.read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config file {path} is not valid JSON: {exc}") from exc
        if not isinstance(loaded, dict):
            raise ConfigError(f"config file {path} must contain a JSON object")
        for key, value in loaded.items():
            _apply_key(config, key, value, str(path))
    for raw in args.override or []:
        if "=" not in raw:
            raise ConfigError(f"override must look like KEY=VALUE, got {raw!r}")
        key, value = raw.split("=", 1)
        _apply_key(config, key, _parse_value(value), "--override")
    if args.seed is not None:
        config["seed"] = args.seed
    return config


def _write_resolved(config: dict, command: str, out: Path) -> None:
    out.mkdir(parents=True, exist_ok=True)
    payload = {"command": command, **config}
    (out / "resolved-config.json").write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")


def _require_dataset(config: dict) -> Path:
    if not config.get("dataset"):
        raise ConfigError("a dataset directory is required (key: dataset)")
    path = Path(config["dataset"])
    if not path.exists():
        raise DataError(f"dataset directory not found: {path}")
    return path


def cmd_synth(args) -> int:
    config = resolve_config(args, SYNTH_DEFAULTS)
    out = Path(args.out)
    _write_resolved(config, "synth", out)
    synth = SynthConfig(**config)
    synthesize_dataset(synth, out)
    print(f"wrote {config['n_patients']}-patient dataset to {out}")
    return 0


def _reg_config_from(config: dict) -> RegConfig:
    return RegConfig(
        encoder_channels=tuple(config["encoder_channels"]),
        window_size=config["window_size"],
        share_encoder=config["share_encoder"],
        learning_rate=config["learning_rate"],
        weight_decay=config["weight_decay"],
        batch_size=config["batch_size"],
        epochs=config["epochs"],
        pairs_per_epoch=config["pairs_per_epoch"],
        gamma=config["gamma"],
        lambda_jd=config["lambda_jd"],
        seed=config["seed"],
    )


def cmd_train_reg(args) -> int:
    config = resolve_config(args, TRAIN_REG_DEFAULTS)
    out = Path(args.out)
    _write_resolved(config, "train-reg", out)
    dataset = _require_dataset(config)
    reg_config = _reg_config_from(config)
    train_pairs = load_reg_pairs(dataset, "train")
    val_pairs = load_reg_pairs(dataset, "val")
    test_pairs = load_reg_pairs(dataset, "test")
    if not train_pairs or not val_pairs:
        raise DataError("dataset has an empty train or val split")
    ckpt = train_registration(train_pairs, val_pairs, reg_config, progress=True)
    save_checkpoint(ckpt, out / "regnet.pt")
    save_checkpoint(ckpt, cache_dir(out) / "regnet-resume.pt")
    with (out / "train_log.csv").open("w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=["epoch", "train_loss", "val_ncc"])
        writer.writeheader()
        writer.writerows(ckpt.log)
    report = registration_report(
        ckpt, test_pairs or val_pairs, iterations=config["bootstrap_iterations"], seed=config["seed"]
    )
    (out / "registration_report.json").write_text(json.dumps(report, indent=2) + "\n")
    print(
        "registration report:",
        {k: round(report[k]["mean"], 4) for k in metrics.REGISTRATION_COLUMNS},
    )
    return 0


def _risk_config_from(config: dict) -> RiskConfig:
    return RiskConfig(
        encoder_widths=tuple(config["encoder_widths"]),
        encoder_blocks=tuple(config["encoder_blocks"]),
        encoder_pool=config["encoder_pool"],
        alpha=config["alpha"],
        lambda_jd=config["lambda_jd"],
        learning_rate=config["learning_rate"],
        weight_decay=config["weight_decay"],
        batch_size=config["batch_size"],
        max_epochs=config["max_epochs"],
        lr_halve_patience=config["lr_halve_patience"],
        early_stop_patience=config["early_stop_patience"],
        seed=config["seed"],
    )


def _load_reg_for_variant(kind: VariantKind, config: dict):
    ckpt_path = config.get("reg_checkpoint")
    if kind.requires_registration and not ckpt_path:
        raise ConfigError(f"variant {kind.value} requires reg_checkpoint")
    if not kind.requires_registration and ckpt_path:
        raise ConfigError(f"variant {kind.value} must not set reg_checkpoint")
    if not ckpt_path:
        return None
    path = Path(ckpt_path)
    if not path.exists():
        raise DataError(f"registration checkpoint not found: {path}")
    return load_checkpoint(path)


def _emit_risk_outputs(records, variant: str, dataset_name: str, seed: int, iterations: int, out: Path) -> Path:
    rows = metric_rows(records, iterations=iterations, seed=seed)
    csv_path = out / metrics_filename(variant, dataset_name, seed)
    write_metric_rows(rows, csv_path, variant, seed)
    pred_path = out / f"{variant}_{dataset_name}_{seed}.predictions.csv"
    with pred_path.open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(
            ["exam_id", "risk_1", "risk_2", "risk_3", "risk_4", "risk_5", "cancer_free_5y", "variant", "seed"]
        )
        for r in records:
            writer.writerow([r.exam_id, *[f"{v:.6f}" for v in r.risk], variant, seed])
    strata = stratified_report(records, iterations=iterations, seed=seed)
    density_path = out / f"{variant}_{dataset_name}_{seed}.density.csv"
    with density_path.open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["stratum", "point", "lo", "hi"])
        for name, ci in strata.items():
            writer.writerow([name, f"{ci.point:.6f}", f"{ci.lo:.6f}", f"{ci.hi:.6f}"])
    return csv_path


def cmd_train_risk(args) -> int:
    config = resolve_config(args, TRAIN_RISK_DEFAULTS)
    out = Path(args.out)
    _write_resolved(config, "train-risk", out)
    kind = VariantKind.parse(config["variant"])
    reg_ckpt = _load_reg_for_variant(kind, config)  # config errors before any training
    dataset = _require_dataset(config)
    risk_config = _risk_config_from(config)
    train_set = load_risk_examples(dataset, "train")
    val_set = load_risk_examples(dataset, "val")
    test_set = load_risk_examples(dataset, "test")
    ckpt = train_risk(train_set, val_set, kind, risk_config, reg_ckpt=reg_ckpt,
                      mode=config["mode"], progress=True)
    save_risk_checkpoint(ckpt, out / f"risk_{kind.value}.pt")
    model = load_risk_model(ckpt)
    records = predict_records(model, test_set or val_set)
    csv_path = _emit_risk_outputs(
        records, kind.value, dataset.name, config["seed"], config["bootstrap_iterations"], out
    )
    print(f"metrics written to {csv_path}")
    return 0


def cmd_evaluate(args) -> int:
    config = resolve_config(args, EVALUATE_DEFAULTS)
    out = Path(args.out)
    _write_resolved(config, "evaluate", out)
    if not config.get("checkpoint"):
        raise ConfigError("a risk checkpoint path is required (key: checkpoint)")
    ckpt_path = Path(config["checkpoint"])
    if not ckpt_path.exists():
        raise DataError(f"risk checkpoint not found: {ckpt_path}")
    dataset = _require_dataset(config)
    ckpt = load_risk_checkpoint(ckpt_path)
    model = load_risk_model(ckpt)
    examples = load_risk_examples(dataset, config["split"])
    if not examples:
        raise DataError(f"split {config['split']!r} has no examples")
    records = predict_records(model, examples)
    csv_path = _emit_risk_outputs(
        records, ckpt.kind.value, dataset.name, config["seed"], config["bootstrap_iterations"], out
    )
    print(f"metrics written to {csv_path}")
    return 0


def cmd_plot(args) -> int:
    config = resolve_config(args, PLOT_DEFAULTS)
    out = Path(args.out)
    _write_resolved(config, "plot", out)
    made = []
    if config["field"]:
        field_path = Path(config["field"])
        if not field_path.exists():
            raise DataError(f"field file not found: {field_path}")
        disp = load_field(field_path)
        quiver_path = out / f"{field_path.stem}.quiver.png"
        plots.quiver_plot(disp, quiver_path, step=config["quiver_step"])
        jac_path = out / f"{field_path.stem}.jacobian.png"
        folded = plots.jacobian_map(disp, jac_path)
        made += [quiver_path, jac_path]
        print(f"field {field_path.name}: njd {njd_percent(disp):.4f}% ({folded} folded px)")
    if config["density_metrics"]:
        path = Path(config["density_metrics"])
        if not path.exists():
            raise DataError(f"density metrics file not found: {path}")
        strata = {}
        with path.open() as fh:
            for row in csv.DictReader(fh):
                strata[row["stratum"]] = {
                    "point": float(row["point"]),
                    "lo": float(row["lo"]),
                    "hi": float(row["hi"]),
                }
        bar_path = out / f"{path.stem}.bars.png"
        plots.density_bars(strata, bar_path)
        made.append(bar_path)
    if config["sweep_table"]:
        path = Path(config["sweep_table"])
        if not path.exists():
            raise DataError(f"sweep table not found: {path}")
        with path.open() as fh:
            rows = [{k: float(v) for k, v in row.items()} for row in csv.DictReader(fh)]
        curve_path = out / f"{path.stem}.curves.png"
        plots.weighting_curves(rows, curve_path)
        made.append(curve_path)
    if not made:
        raise ConfigError("nothing to plot: set field, density_metrics, or sweep_table")
    print("wrote", ", ".join(str(p) for p in made))
    return 0


def cmd_sweep(args) -> int:
    config = resolve_config(args, SWEEP_DEFAULTS)
    out = Path(args.out)
    _write_resolved(config, "sweep", out)
    kind = VariantKind.parse(config["variant"])
    if not kind.uses_feature_alignment:
        raise ConfigError("sweep requires a FeatAlign-family variant")
    dataset = _require_dataset(config)
    base_config = _risk_config_from(config)
    train_set = load_risk_examples(dataset, "train")
    val_set = load_risk_examples(dataset, "val")
    test_set = load_risk_examples(dataset, "test") or val_set

    def train_fn(alpha: float):
        cfg = RiskConfig(**{**base_config.__dict__, "alpha": alpha})
        ckpt = train_risk(train_set, val_set, kind, cfg, mode=config["mode"], progress=True)
        model = load_risk_model(ckpt)
        records = predict_records(model, test_set)
        njds = []
        with torch.no_grad():
            for ex in test_set:
                _, bundle = model(ex.current, ex.prior, torch.tensor([ex.delta_t_months]))
                njds.append(njd_percent(bundle.phi_feat))
        return records, float(np.mean(njds))

    rows = metrics.weight_sweep(train_fn, config["alphas"], seed=config["seed"])
    table_path = out / "sweep.csv"
    fieldnames = ["alpha", "c_index", "auc_1", "auc_2", "auc_3", "auc_4", "auc_5", "njd_percent"]
    with table_path.open("w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=fieldnames)
        writer.writeheader()
        writer.writerows(rows)
    plots.weighting_curves(rows, out / "sweep.curves.png")
    print(f"sweep table written to {table_path}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="longalign", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)
    for name, func in (
        ("synth", cmd_synth),
        ("train-reg", cmd_train_reg),
        ("train-risk", cmd_train_risk),
        ("evaluate", cmd_evaluate),
        ("plot", cmd_plot),
        ("sweep", cmd_sweep),
    ):
        p = sub.add_parser(name)
        p.add_argument("--config", default=None, help="JSON configuration file")
        p.add_argument("--seed", type=int, default=None, help="seed override")
        p.add_argument("--out", required=True, help="output directory")
        p.add_argument(
            "--override",
            action="append",
            default=[],
            metavar="KEY=VALUE",
            help="override a configuration key (repeatable; values parsed as JSON)",
        )
        p.set_defaults(func=func)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return 2
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 3
    except Exception as exc:  # noqa: BLE001 - runtime failures map to exit code 4
        print(f"runtime failure: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 4


if __name__ == "__main__":
    sys.exit(main())
