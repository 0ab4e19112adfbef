"""Experiment harness: run policy x corruption x seed grids and report.

Every cell starts from a fresh checkpoint copy and a freshly built stream,
so cell order can never leak state.  All CSV and JSONL outputs are
deterministic functions of (config, seeds); wall-clock timings go to a
separate sidecar file to keep the data outputs byte-reproducible.
"""

from __future__ import annotations

import json
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
import yaml

from .baselines import POLICIES
from .corruptions import CORRUPTION_KINDS, CorruptionSpec
from .detector import load_checkpoint
from .evaluation import GroundTruthBox, average_precision_r40, score_histogram
from .scenes import load_dataset
from .streams import build_stream, write_manifest

__all__ = [
    "ConfigError",
    "CorruptionSetting",
    "ExperimentConfig",
    "MetricsRecord",
    "ExperimentResult",
    "load_config",
    "save_config",
    "run_experiment",
    "render_report",
]


class ConfigError(ValueError):
    """Invalid experiment configuration (CLI exit code 2)."""


@dataclass(frozen=True)
class CorruptionSetting:
    """One stream flavor; kind None means the clean, unmodified stream."""

    kind: Optional[str]
    severity: int = 0

    def label(self) -> str:
        return "none" if self.kind is None else f"{self.kind}_s{self.severity}"


@dataclass
class ExperimentConfig:
    checkpoint: str
    images_dir: str
    output_dir: str
    policies: list[str]
    corruptions: list[CorruptionSetting]
    seeds: list[int]
    batch_size: int = 16
    iou_threshold: float = 0.5
    histogram_bins: int = 20
    tta: dict = field(default_factory=dict)

    def __post_init__(self) -> None:
        if not self.policies:
            raise ConfigError("at least one policy is required")
        if "eata" in self.policies:
            raise ConfigError("policy 'eata' is not implemented")
        unknown = [p for p in self.policies if p not in POLICIES]
        if unknown:
            raise ConfigError(f"unknown policies {unknown}; choose from {sorted(POLICIES)}")
        if not self.corruptions:
            raise ConfigError("at least one corruption setting is required")
        for c in self.corruptions:
            if c.kind is not None:
                if c.kind not in CORRUPTION_KINDS:
                    raise ConfigError(f"unknown corruption kind {c.kind!r}")
                if not 1 <= c.severity <= 5:
                    raise ConfigError(f"severity must be 1..5, got {c.severity}")
            elif c.severity != 0:
                raise ConfigError("severity must be 0 for the clean stream")
        if not self.seeds:
            raise ConfigError("at least one seed is required")
        if any((not isinstance(s, int)) or s < 0 for s in self.seeds):
            raise ConfigError("seeds must be non-negative integers")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.histogram_bins < 2:
            raise ConfigError(f"histogram_bins must be >= 2, got {self.histogram_bins}")
        if not 0.0 < self.iou_threshold < 1.0:
            raise ConfigError(f"iou_threshold must lie in (0, 1), got {self.iou_threshold}")

    def to_dict(self) -> dict:
        data = asdict(self)
        data["corruptions"] = [
            {"kind": c.kind if c.kind is not None else "none", "severity": c.severity}
            for c in self.corruptions
        ]
        return data

    @classmethod
    def from_dict(cls, data: dict) -> "ExperimentConfig":
        try:
            corruptions = [
                CorruptionSetting(
                    kind=None if c.get("kind") in (None, "none") else c["kind"],
                    severity=int(c.get("severity", 0)),
                )
                for c in data["corruptions"]
            ]
            return cls(
                checkpoint=data["checkpoint"],
                images_dir=data["images_dir"],
                output_dir=data["output_dir"],
                policies=list(data["policies"]),
                corruptions=corruptions,
                seeds=[int(s) for s in data["seeds"]],
                batch_size=int(data.get("batch_size", 16)),
                iou_threshold=float(data.get("iou_threshold", 0.5)),
                histogram_bins=int(data.get("histogram_bins", 20)),
                tta=dict(data.get("tta", {})),
            )
        except KeyError as exc:
            raise ConfigError(f"missing config field: {exc}") from exc


def load_config(path: str | Path) -> ExperimentConfig:
    try:
        data = yaml.safe_load(Path(path).read_text())
    except yaml.YAMLError as exc:
        raise ConfigError(f"cannot parse {path}: {exc}") from exc
    if not isinstance(data, dict):
        raise ConfigError(f"{path} does not contain a mapping")
    return ExperimentConfig.from_dict(data)


def save_config(config: ExperimentConfig, path: str | Path) -> None:
    Path(path).write_text(yaml.safe_dump(config.to_dict(), sort_keys=False))


@dataclass
class MetricsRecord:
    """Evaluation summary of one (policy, corruption, seed) cell."""

    policy: str
    kind: str
    severity: int
    seed: int
    mean_ap: Optional[float]
    per_class_ap: dict
    n_images: int
    n_detections: int
    frozen_unchanged: bool
    alpha_first: Optional[float]
    alpha_last: Optional[float]
    n_above_gamma_q1: Optional[float]
    n_above_gamma_q5: Optional[float]
    mean_score_q1: Optional[float]
    mean_score_q5: Optional[float]
    mean_negative_score_q1: Optional[float]
    mean_negative_score_q5: Optional[float]
    wall_seconds: float  # reported in the timing sidecar only


@dataclass
class ExperimentResult:
    records: list[MetricsRecord]
    failures: list[tuple[str, str]]
    output_dir: Path


def _make_policy(name: str, model, tta: dict, seed: int):
    common = {"eta": tta.get("eta", 0.05), "n_max": tta.get("n_max", 20)}
    if name == "source_only" or name == "bn_adapt":
        return POLICIES[name](model, **common)
    if name == "entropy_min":
        return POLICIES[name](
            model,
            learning_rate=tta.get("learning_rate"),
            momentum=tta.get("momentum", 0.9),
            **common,
        )
    return POLICIES[name](
        model,
        lambda_balance=tta.get("lambda_balance", 1.0),
        beta=tta.get("beta", 0.1),
        gamma=tta.get("gamma", 0.2),
        learning_rate=tta.get("learning_rate"),
        momentum=tta.get("momentum", 0.9),
        seed=seed,
        **common,
    )


def _quintile_mean(values: list, take_first: bool) -> Optional[float]:
    if not values:
        return None
    chunks = np.array_split(np.arange(len(values)), 5)
    chunk = chunks[0] if take_first else chunks[-1]
    vals = [values[i] for i in chunk if values[i] is not None]
    if not vals:
        return None
    return float(np.mean(vals))


def _stream_quintile_stats(detections, n_images: int, gamma: float) -> dict:
    """Detection counts and mean scores over five equal image chunks.

    Chunking by image (not by batch) keeps the first and last quintile the
    same size even when the final batch is partial.
    """
    if n_images <= 0:
        return {
            "n_above_gamma_q1": None,
            "n_above_gamma_q5": None,
            "mean_score_q1": None,
            "mean_score_q5": None,
        }
    chunks = np.array_split(np.arange(n_images), 5)
    bounds = [(int(c[0]), int(c[-1])) for c in chunks if len(c)]
    counts = [0] * len(bounds)
    sums = [0.0] * len(bounds)
    totals = [0] * len(bounds)
    for d in detections:
        for i, (lo, hi) in enumerate(bounds):
            if lo <= d.image_index <= hi:
                totals[i] += 1
                sums[i] += d.score
                if d.score >= gamma:
                    counts[i] += 1
                break
    return {
        "n_above_gamma_q1": float(counts[0]),
        "n_above_gamma_q5": float(counts[-1]),
        "mean_score_q1": sums[0] / totals[0] if totals[0] else None,
        "mean_score_q5": sums[-1] / totals[-1] if totals[-1] else None,
    }


def _ground_truth_for_stream(images_dir: Path, manifest) -> list[GroundTruthBox]:
    dataset = load_dataset(images_dir)
    by_name = {}
    payload = json.loads((Path(images_dir) / "annotations.json").read_text())
    for entry, objects in zip(payload["images"], dataset.annotations):
        by_name[entry["filename"]] = objects
    gt = []
    for row in manifest.emitted():
        for obj in by_name[row.filename]:
            gt.append(
                GroundTruthBox(
                    image_index=row.index,
                    class_id=obj.class_id,
                    box=(obj.cx, obj.cy, obj.w, obj.h),
                )
            )
    return gt


def _fmt(value) -> str:
    if value is None:
        return ""
    if isinstance(value, bool):
        return str(value).lower()
    if isinstance(value, float):
        return repr(value)
    return str(value)


def run_experiment(config: ExperimentConfig) -> ExperimentResult:
    """Run the full policy x corruption x seed grid sequentially.

    A failing cell is recorded and skipped; everything else still runs.
    Outputs land under config.output_dir: per-cell logs and trajectories in
    cells/, grid-level records.csv, comparison.csv and comparison.txt, and
    wall-clock timings in timings.txt.
    """
    out = Path(config.output_dir)
    (out / "cells").mkdir(parents=True, exist_ok=True)
    records: list[MetricsRecord] = []
    failures: list[tuple[str, str]] = []

    for setting in config.corruptions:
        for policy_name in config.policies:
            for seed in config.seeds:
                cell = f"{setting.label()}__{policy_name}__seed{seed}"
                try:
                    records.append(
                        _run_cell(config, setting, policy_name, seed, out / "cells" / cell)
                    )
                except Exception as exc:  # cell isolation: record and continue
                    failures.append((cell, f"{type(exc).__name__}: {exc}"))

    _write_records_csv(records, out / "records.csv")
    report_text, report_rows = render_report(records)
    _write_comparison_csv(report_rows, out / "comparison.csv")
    (out / "comparison.txt").write_text(report_text)
    with open(out / "timings.txt", "w") as fh:
        for r in records:
            fh.write(f"{r.kind}_s{r.severity}__{r.policy}__seed{r.seed} {r.wall_seconds:.3f}s\n")
    if failures:
        with open(out / "failures.txt", "w") as fh:
            for cell, message in failures:
                fh.write(f"{cell}: {message}\n")
    return ExperimentResult(records=records, failures=failures, output_dir=out)


def _run_cell(
    config: ExperimentConfig,
    setting: CorruptionSetting,
    policy_name: str,
    seed: int,
    cell_dir: Path,
) -> MetricsRecord:
    cell_dir.mkdir(parents=True, exist_ok=True)
    model = load_checkpoint(config.checkpoint)
    spec = (
        None
        if setting.kind is None
        else CorruptionSpec(kind=setting.kind, severity=setting.severity, seed=seed)
    )
    stream, manifest = build_stream(config.images_dir, spec, config.batch_size)
    write_manifest(manifest, cell_dir / "manifest.csv")

    policy = _make_policy(policy_name, model, config.tta, seed)
    start = time.perf_counter()
    detections = policy.fit_predict(stream)
    wall = time.perf_counter() - start

    gt = _ground_truth_for_stream(Path(config.images_dir), manifest)
    ap = average_precision_r40(detections, gt, config.iou_threshold)

    log = policy.metrics_log_
    frozen_unchanged = (
        policy.frozen_digest_start_ is not None
        and policy.frozen_digest_start_ == policy.frozen_digest_end_
    )

    with open(cell_dir / "metrics.jsonl", "w") as fh:
        for record in log:
            fh.write(json.dumps(record) + "\n")
    with open(cell_dir / "detections.jsonl", "w") as fh:
        for d in detections:
            fh.write(
                json.dumps(
                    {
                        "image_index": d.image_index,
                        "class_id": d.class_id,
                        "score": d.score,
                        "cx": d.box[0],
                        "cy": d.box[1],
                        "w": d.box[2],
                        "h": d.box[3],
                    }
                )
                + "\n"
            )
    alphas = [r["alpha"] for r in log]
    if any(a is not None for a in alphas):
        with open(cell_dir / "alpha_trajectory.csv", "w") as fh:
            fh.write("step,alpha\n")
            for r in log:
                fh.write(f"{r['step']},{_fmt(r['alpha'])}\n")

    eta = config.tta.get("eta", 0.05)
    gamma = config.tta.get("gamma", 0.2)
    last_alpha = next((a for a in reversed(alphas) if a is not None), gamma)
    hist = score_histogram(
        [d.score for d in detections],
        config.histogram_bins,
        eta=eta,
        gamma=gamma,
        alpha=last_alpha,
    )
    with open(cell_dir / "score_histogram.csv", "w") as fh:
        fh.write("bin_low,bin_high,count\n")
        for lo, hi, count in zip(hist.edges[:-1], hist.edges[1:], hist.counts):
            fh.write(f"{_fmt(lo)},{_fmt(hi)},{count}\n")

    quintiles = _stream_quintile_stats(detections, policy.n_images_, gamma)
    return MetricsRecord(
        policy=policy_name,
        kind=setting.kind if setting.kind is not None else "none",
        severity=setting.severity,
        seed=seed,
        mean_ap=ap.mean_ap,
        per_class_ap=ap.per_class_ap,
        n_images=policy.n_images_,
        n_detections=len(detections),
        frozen_unchanged=frozen_unchanged,
        alpha_first=next((a for a in alphas if a is not None), None),
        alpha_last=next((a for a in reversed(alphas) if a is not None), None),
        mean_negative_score_q1=_quintile_mean([r["mean_negative_score"] for r in log], True),
        mean_negative_score_q5=_quintile_mean([r["mean_negative_score"] for r in log], False),
        wall_seconds=wall,
        **quintiles,
    )


def _write_records_csv(records: list[MetricsRecord], path: Path) -> None:
    columns = [
        "policy",
        "kind",
        "severity",
        "seed",
        "mean_ap",
        "per_class_ap",
        "n_images",
        "n_detections",
        "frozen_unchanged",
        "alpha_first",
        "alpha_last",
        "n_above_gamma_q1",
        "n_above_gamma_q5",
        "mean_score_q1",
        "mean_score_q5",
        "mean_negative_score_q1",
        "mean_negative_score_q5",
    ]
    with open(path, "w") as fh:
        fh.write(",".join(columns) + "\n")
        for r in records:
            values = []
            for col in columns:
                v = getattr(r, col)
                if col == "per_class_ap":
                    v = json.dumps(v, sort_keys=True).replace(",", ";")
                values.append(_fmt(v))
            fh.write(",".join(values) + "\n")


def render_report(records: list[MetricsRecord]) -> tuple[str, list[dict]]:
    """Seed-averaged mAP per (corruption, policy) plus gain over source_only.

    Returns the human-readable table and the raw rows used for the CSV.
    """
    groups: dict[tuple[str, int], dict[str, list[float]]] = {}
    policy_order: list[str] = []
    for r in records:
        groups.setdefault((r.kind, r.severity), {}).setdefault(r.policy, []).append(
            r.mean_ap if r.mean_ap is not None else 0.0
        )
        if r.policy not in policy_order:
            policy_order.append(r.policy)

    rows = []
    for (kind, severity), by_policy in sorted(groups.items()):
        row: dict = {"corruption": kind, "severity": severity}
        for policy in policy_order:
            values = by_policy.get(policy)
            row[policy] = float(np.mean(values)) if values else None
        source = row.get("source_only")
        for policy in policy_order:
            gain = None
            if source is not None and source > 0 and row.get(policy) is not None:
                gain = (row[policy] / source - 1.0) * 100.0
            row[f"gain_{policy}_pct"] = gain
        rows.append(row)

    headers = ["corruption", "severity"] + policy_order + [f"gain_{p}_pct" for p in policy_order]
    widths = {h: max(len(h), 14) for h in headers}
    lines = ["  ".join(h.ljust(widths[h]) for h in headers)]
    for row in rows:
        cells = []
        for h in headers:
            v = row.get(h)
            if v is None:
                text = "-"
            elif isinstance(v, float):
                text = f"{v:+.1f}%" if h.startswith("gain_") else f"{v:.4f}"
            else:
                text = str(v)
            cells.append(text.ljust(widths[h]))
        lines.append("  ".join(cells))
    return "\n".join(lines) + "\n", rows


def _write_comparison_csv(rows: list[dict], path: Path) -> None:
    if not rows:
        path.write_text("corruption,severity\n")
        return
    headers = list(rows[0].keys())
    with open(path, "w") as fh:
        fh.write(",".join(headers) + "\n")
        for row in rows:
            fh.write(",".join(_fmt(row.get(h)) for h in headers) + "\n")
