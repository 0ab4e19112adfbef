"""Command line entry points.

Exit codes: 0 on success, 1 on runtime failure, 2 on bad configuration or
usage.  Every flag can also be supplied through a YAML file passed as
--config; explicit flags win over file values.  If DETTA_OUTPUT_ROOT is set,
relative output paths are resolved under it.
"""

from __future__ import annotations

import json
import os
import sys
from pathlib import Path

import click
import numpy as np
import yaml

from .baselines import POLICIES
from .corruptions import CORRUPTION_KINDS, CorruptionSpec, apply_corruption
from .detector import (
    TrainConfig,
    dataset_ground_truth,
    load_checkpoint,
    save_checkpoint,
    train_detector,
)
from .evaluation import Detection, average_precision_r40
from .harness import (
    ConfigError,
    ExperimentConfig,
    load_config,
    render_report,
    run_experiment,
)
from .scenes import generate_scenes, load_dataset, save_dataset
from .streams import build_stream, write_manifest

OUTPUT_ROOT_VAR = "DETTA_OUTPUT_ROOT"


def _resolve_out(path: str) -> Path:
    root = os.environ.get(OUTPUT_ROOT_VAR)
    p = Path(path)
    if root and not p.is_absolute():
        return Path(root) / p
    return p


def _load_option_file(path: str | None) -> dict:
    if path is None:
        return {}
    try:
        data = yaml.safe_load(Path(path).read_text())
    except (OSError, yaml.YAMLError) as exc:
        raise click.UsageError(f"cannot read config {path}: {exc}")
    if data is None:
        return {}
    if not isinstance(data, dict):
        raise click.UsageError(f"config {path} must contain a mapping")
    return data


def _pick(cfg: dict, name: str, cli_value, default):
    if cli_value is not None:
        return cli_value
    return cfg.get(name, default)


def _fail(message: str, code: int = 1) -> None:
    click.echo(f"error: {message}", err=True)
    sys.exit(code)


@click.group()
def main() -> None:
    """Test-time adaptation toolkit for the toy detection benchmark."""


@main.command("train-toy")
@click.option("--out", required=True, help="Output directory for datasets and checkpoint.")
@click.option("--config", "config_path", default=None, help="YAML file with option defaults.")
@click.option("--n-train", type=int, default=None, help="Training scenes (default 2000).")
@click.option("--n-val", type=int, default=None, help="Validation scenes (default 500).")
@click.option("--seed", type=int, default=None, help="Dataset and training seed (default 0).")
@click.option("--epochs", type=int, default=None, help="Max training epochs (default 30).")
@click.option("--learning-rate", type=float, default=None, help="Adam learning rate (default 2e-3).")
@click.option("--batch-size", type=int, default=None, help="Training batch size (default 32).")
def train_toy(out, config_path, n_train, n_val, seed, epochs, learning_rate, batch_size):
    """Generate scene datasets and train the toy detector."""
    cfg = _load_option_file(config_path)
    n_train = _pick(cfg, "n_train", n_train, 2000)
    n_val = _pick(cfg, "n_val", n_val, 500)
    seed = _pick(cfg, "seed", seed, 0)
    try:
        train_cfg = TrainConfig(
            epochs=_pick(cfg, "epochs", epochs, TrainConfig.epochs),
            batch_size=_pick(cfg, "batch_size", batch_size, TrainConfig.batch_size),
            learning_rate=_pick(cfg, "learning_rate", learning_rate, TrainConfig.learning_rate),
            seed=seed,
        )
    except ValueError as exc:
        _fail(str(exc), code=2)
    out_dir = _resolve_out(out)
    out_dir.mkdir(parents=True, exist_ok=True)
    try:
        train_set = generate_scenes(n_train, seed=seed)
        val_set = generate_scenes(n_val, seed=seed + 1)
        save_dataset(train_set, out_dir / "train")
        save_dataset(val_set, out_dir / "val")
        model = train_detector(train_set, val_set, train_cfg)
        save_checkpoint(model, out_dir / "checkpoint.npz")
    except (ValueError, RuntimeError) as exc:
        _fail(str(exc))
    summary = {
        "clean_map": model.meta["clean_map"],
        "clean_per_class_ap": model.meta["clean_per_class_ap"],
        "epochs_run": model.meta["train_config"]["epochs_run"],
        "checkpoint": str(out_dir / "checkpoint.npz"),
    }
    (out_dir / "train_summary.json").write_text(json.dumps(summary, indent=2) + "\n")
    click.echo(f"clean mAP {model.meta['clean_map']:.4f} -> {out_dir / 'checkpoint.npz'}")


@main.command("corrupt")
@click.option("--images", "images_dir", required=True, help="Directory of clean scene PNGs.")
@click.option("--out", required=True, help="Output directory for corrupted PNGs.")
@click.option("--config", "config_path", default=None, help="YAML file with option defaults.")
@click.option("--kind", default=None, help=f"One of: {', '.join(CORRUPTION_KINDS)}.")
@click.option("--severity", type=int, default=None, help="Severity level 1..5 (default 3).")
@click.option("--seed", type=int, default=None, help="Corruption seed (default 0).")
def corrupt(images_dir, out, config_path, kind, severity, seed):
    """Apply one corruption to every image in a directory."""
    from PIL import Image

    cfg = _load_option_file(config_path)
    kind = _pick(cfg, "kind", kind, None)
    severity = _pick(cfg, "severity", severity, 3)
    seed = _pick(cfg, "seed", seed, 0)
    if kind is None:
        _fail("--kind is required", code=2)
    if kind not in CORRUPTION_KINDS:
        _fail(f"unknown corruption kind {kind!r}", code=2)
    try:
        spec = CorruptionSpec(kind=kind, severity=severity, seed=seed)
    except ValueError as exc:
        _fail(str(exc), code=2)
    out_dir = _resolve_out(out)
    (out_dir / "images").mkdir(parents=True, exist_ok=True)
    try:
        stream, manifest = build_stream(images_dir, spec, batch_size=16)
        position = 0
        emitted = manifest.emitted()
        for batch in stream:
            for image in batch:
                quantized = np.round(image * 255.0).astype(np.uint8)
                Image.fromarray(quantized).save(out_dir / "images" / emitted[position].filename)
                position += 1
    except (ValueError, OSError) as exc:
        _fail(str(exc))
    write_manifest(manifest, out_dir / "manifest.csv")
    annotations = Path(images_dir) / "annotations.json"
    if annotations.exists():
        (out_dir / "annotations.json").write_text(annotations.read_text())
    click.echo(f"wrote {position} corrupted images to {out_dir}")


@main.command("adapt")
@click.option("--checkpoint", required=True, help="Detector checkpoint (.npz).")
@click.option("--images", "images_dir", required=True, help="Directory of scene PNGs.")
@click.option("--out", required=True, help="Output directory for logs and detections.")
@click.option("--config", "config_path", default=None, help="YAML file with option defaults.")
@click.option("--policy", default=None, help=f"One of: {', '.join(sorted(POLICIES))} (default monotta).")
@click.option("--kind", default=None, help="Optional corruption kind applied on the fly.")
@click.option("--severity", type=int, default=None, help="Corruption severity (default 3).")
@click.option("--seed", type=int, default=None, help="Stream and sampling seed (default 0).")
@click.option("--batch-size", type=int, default=None, help="Stream batch size (default 16).")
@click.option("--learning-rate", type=float, default=None, help="Step size (default: half the training rate).")
@click.option("--lambda-balance", type=float, default=None, help="Regularizer weight (default 1.0).")
@click.option("--beta", type=float, default=None, help="Threshold EMA rate (default 0.1).")
@click.option("--eta", type=float, default=None, help="Reporting floor (default 0.05).")
@click.option("--gamma", type=float, default=None, help="Eligibility floor (default 0.2).")
@click.option("--n-max", type=int, default=None, help="Max detections per image (default 20).")
@click.option("--momentum", type=float, default=None, help="SGD momentum (default 0.9).")
def adapt(
    checkpoint,
    images_dir,
    out,
    config_path,
    policy,
    kind,
    severity,
    seed,
    batch_size,
    learning_rate,
    lambda_balance,
    beta,
    eta,
    gamma,
    n_max,
    momentum,
):
    """Run one adaptation policy over one image stream."""
    cfg = _load_option_file(config_path)
    policy = _pick(cfg, "policy", policy, "monotta")
    kind = _pick(cfg, "kind", kind, None)
    severity = _pick(cfg, "severity", severity, 3)
    seed = _pick(cfg, "seed", seed, 0)
    batch_size = _pick(cfg, "batch_size", batch_size, 16)
    if policy not in POLICIES:
        _fail(f"unknown policy {policy!r}; choose from {sorted(POLICIES)}", code=2)
    tta = {
        "eta": _pick(cfg, "eta", eta, 0.05),
        "gamma": _pick(cfg, "gamma", gamma, 0.2),
        "n_max": _pick(cfg, "n_max", n_max, 20),
        "learning_rate": _pick(cfg, "learning_rate", learning_rate, None),
        "lambda_balance": _pick(cfg, "lambda_balance", lambda_balance, 1.0),
        "beta": _pick(cfg, "beta", beta, 0.1),
        "momentum": _pick(cfg, "momentum", momentum, 0.9),
    }
    corruptions = (
        [{"kind": "none", "severity": 0}]
        if kind is None
        else [{"kind": kind, "severity": severity}]
    )
    out_dir = _resolve_out(out)
    try:
        experiment = ExperimentConfig.from_dict(
            {
                "checkpoint": checkpoint,
                "images_dir": images_dir,
                "output_dir": str(out_dir),
                "policies": [policy],
                "corruptions": corruptions,
                "seeds": [seed],
                "batch_size": batch_size,
                "tta": {k: v for k, v in tta.items() if v is not None},
            }
        )
    except ConfigError as exc:
        _fail(str(exc), code=2)
    result = run_experiment(experiment)
    if result.failures:
        _fail("; ".join(f"{cell}: {msg}" for cell, msg in result.failures))
    record = result.records[0]
    map_text = "n/a" if record.mean_ap is None else f"{record.mean_ap:.4f}"
    click.echo(f"{policy}: mAP {map_text}, {record.n_detections} detections -> {out_dir}")


@main.command("evaluate")
@click.option("--detections", "detections_path", required=True, help="detections.jsonl file.")
@click.option("--images", "images_dir", required=True, help="Dataset directory with annotations.json.")
@click.option("--config", "config_path", default=None, help="YAML file with option defaults.")
@click.option("--iou-threshold", type=float, default=None, help="Match threshold (default 0.5).")
@click.option("--out", default=None, help="Optional JSON file for the result.")
def evaluate(detections_path, images_dir, config_path, iou_threshold, out):
    """Score saved detections against dataset annotations."""
    cfg = _load_option_file(config_path)
    iou_threshold = _pick(cfg, "iou_threshold", iou_threshold, 0.5)
    try:
        detections = []
        with open(detections_path) as fh:
            for line in fh:
                if not line.strip():
                    continue
                row = json.loads(line)
                detections.append(
                    Detection(
                        image_index=row["image_index"],
                        class_id=row["class_id"],
                        score=row["score"],
                        box=(row["cx"], row["cy"], row["w"], row["h"]),
                    )
                )
        dataset = load_dataset(images_dir)
        gt = dataset_ground_truth(dataset)
        result = average_precision_r40(detections, gt, iou_threshold)
    except (ValueError, OSError, KeyError) as exc:
        _fail(str(exc))
    payload = {
        "mean_ap": result.mean_ap,
        "per_class_ap": {str(k): v for k, v in result.per_class_ap.items()},
        "n_ground_truth": result.n_ground_truth,
        "n_detections": result.n_detections,
    }
    if out is not None:
        out_path = _resolve_out(out)
        out_path.parent.mkdir(parents=True, exist_ok=True)
        out_path.write_text(json.dumps(payload, indent=2) + "\n")
    for class_id, ap in sorted(result.per_class_ap.items()):
        ap_text = "n/a" if ap is None else f"{ap:.4f}"
        click.echo(f"class {class_id}: AP {ap_text}")
    map_text = "n/a" if result.mean_ap is None else f"{result.mean_ap:.4f}"
    click.echo(f"mAP {map_text}")


@main.command("compare")
@click.option("--config", "config_path", required=True, help="Experiment YAML (see ExperimentConfig).")
@click.option("--out", default=None, help="Override the output directory from the config.")
def compare(config_path, out):
    """Run the full policy x corruption x seed grid and print the report."""
    try:
        config = load_config(config_path)
        if out is not None:
            config.output_dir = str(_resolve_out(out))
        else:
            config.output_dir = str(_resolve_out(config.output_dir))
    except (ConfigError, OSError) as exc:
        _fail(str(exc), code=2)
    result = run_experiment(config)
    text, _ = render_report(result.records)
    click.echo(text, nl=False)
    if result.failures:
        for cell, message in result.failures:
            click.echo(f"failed cell {cell}: {message}", err=True)
        sys.exit(1)


if __name__ == "__main__":
    main()
