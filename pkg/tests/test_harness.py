"""Tests for the experiment harness: configs, the grid runner, and the CLI."""

from __future__ import annotations

import csv
import json

import numpy as np
import pytest
from click.testing import CliRunner

from detta.cli import main
from detta.harness import (
    ConfigError,
    CorruptionSetting,
    ExperimentConfig,
    MetricsRecord,
    load_config,
    render_report,
    run_experiment,
    save_config,
)


def _config(trained_bundle, images_dir, output_dir, **overrides) -> ExperimentConfig:
    base = dict(
        checkpoint=str(trained_bundle.checkpoint),
        images_dir=str(images_dir),
        output_dir=str(output_dir),
        policies=["source_only", "monotta"],
        corruptions=[
            CorruptionSetting(kind=None),
            CorruptionSetting(kind="gaussian_noise", severity=3),
        ],
        seeds=[0],
    )
    base.update(overrides)
    return ExperimentConfig(**base)


@pytest.fixture(scope="module")
def grid_result(trained_bundle, small_scene_dir, tmp_path_factory):
    out = tmp_path_factory.mktemp("grid")
    config = _config(trained_bundle, small_scene_dir, out)
    return run_experiment(config)


def test_corruption_setting_labels():
    assert CorruptionSetting(kind=None).label() == "none"
    assert CorruptionSetting(kind="fog", severity=4).label() == "fog_s4"


def test_config_yaml_round_trip(tmp_path):
    config = ExperimentConfig(
        checkpoint="ckpt.npz",
        images_dir="imgs",
        output_dir="out",
        policies=["monotta", "bn_adapt"],
        corruptions=[CorruptionSetting(kind=None), CorruptionSetting(kind="snow", severity=2)],
        seeds=[0, 1],
        batch_size=8,
        iou_threshold=0.4,
        histogram_bins=12,
        tta={"gamma": 0.25, "learning_rate": 0.002},
    )
    path = tmp_path / "config.yaml"
    save_config(config, path)
    loaded = load_config(path)
    assert loaded == config
    assert loaded.to_dict() == config.to_dict()


def test_config_validation_errors():
    good = dict(
        checkpoint="c",
        images_dir="i",
        output_dir="o",
        policies=["source_only"],
        corruptions=[CorruptionSetting(kind=None)],
        seeds=[0],
    )

    def bad(match, **overrides):
        with pytest.raises(ConfigError, match=match):
            ExperimentConfig(**{**good, **overrides})

    bad("at least one policy", policies=[])
    bad("not implemented", policies=["monotta", "eata"])
    bad("unknown policies", policies=["monotta", "tent"])
    bad("at least one corruption", corruptions=[])
    bad("unknown corruption kind", corruptions=[CorruptionSetting(kind="rain", severity=3)])
    bad("severity must be 1..5", corruptions=[CorruptionSetting(kind="fog", severity=0)])
    bad("severity must be 1..5", corruptions=[CorruptionSetting(kind="fog", severity=6)])
    bad("severity must be 0", corruptions=[CorruptionSetting(kind=None, severity=2)])
    bad("at least one seed", seeds=[])
    bad("non-negative", seeds=[0, -1])
    bad("batch_size", batch_size=0)
    bad("histogram_bins", histogram_bins=1)
    bad("iou_threshold", iou_threshold=0.0)
    bad("iou_threshold", iou_threshold=1.0)
    with pytest.raises(ConfigError, match="missing config field"):
        ExperimentConfig.from_dict({"checkpoint": "c"})


def test_load_config_rejects_bad_yaml(tmp_path):
    broken = tmp_path / "broken.yaml"
    broken.write_text("policies: [monotta\n")
    with pytest.raises(ConfigError, match="cannot parse"):
        load_config(broken)
    listy = tmp_path / "list.yaml"
    listy.write_text("- 1\n- 2\n")
    with pytest.raises(ConfigError, match="mapping"):
        load_config(listy)


def test_grid_runs_every_cell(grid_result):
    assert grid_result.failures == []
    assert len(grid_result.records) == 4
    labels = {(r.kind, r.severity, r.policy, r.seed) for r in grid_result.records}
    assert labels == {
        ("none", 0, "source_only", 0),
        ("none", 0, "monotta", 0),
        ("gaussian_noise", 3, "source_only", 0),
        ("gaussian_noise", 3, "monotta", 0),
    }
    for r in grid_result.records:
        assert r.n_images == 48
        assert r.frozen_unchanged, "non-normalization weights must never move"
        assert r.mean_ap is not None and 0.0 <= r.mean_ap <= 1.0
        assert r.wall_seconds > 0


def test_grid_writes_cell_and_summary_files(grid_result):
    out = grid_result.output_dir
    for name in ("records.csv", "comparison.csv", "comparison.txt", "timings.txt"):
        assert (out / name).exists(), f"missing {name}"
    assert not (out / "failures.txt").exists()
    cells = out / "cells"
    cell_dirs = sorted(p.name for p in cells.iterdir())
    assert cell_dirs == [
        "gaussian_noise_s3__monotta__seed0",
        "gaussian_noise_s3__source_only__seed0",
        "none__monotta__seed0",
        "none__source_only__seed0",
    ]
    for cell in cells.iterdir():
        for name in ("manifest.csv", "metrics.jsonl", "detections.jsonl", "score_histogram.csv"):
            assert (cell / name).exists(), f"{cell.name} missing {name}"
        with open(cell / "detections.jsonl") as fh:
            for line in fh:
                row = json.loads(line)
                assert set(row) == {"image_index", "class_id", "score", "cx", "cy", "w", "h"}
        with open(cell / "metrics.jsonl") as fh:
            steps = [json.loads(line) for line in fh]
        assert len(steps) == 3, "48 images at batch size 16 is three steps"
        assert {"step", "alpha", "l_ao", "l_nreg", "total", "n_high", "n_low"} <= set(steps[0])
    assert (cells / "none__monotta__seed0" / "alpha_trajectory.csv").exists()
    assert not (cells / "none__source_only__seed0" / "alpha_trajectory.csv").exists()


def test_grid_records_csv_matches_records(grid_result):
    with open(grid_result.output_dir / "records.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert len(rows) == 4
    by_key = {(r["kind"], int(r["severity"]), r["policy"]): r for r in rows}
    for record in grid_result.records:
        row = by_key[(record.kind, record.severity, record.policy)]
        assert float(row["mean_ap"]) == pytest.approx(record.mean_ap, abs=1e-12)
        assert int(row["n_images"]) == record.n_images
        assert row["frozen_unchanged"] == "true"
        assert "wall_seconds" not in row, "timings belong in the sidecar, not the metrics table"


def test_corruption_drops_scores_on_this_grid(grid_result):
    clean = next(
        r for r in grid_result.records if r.kind == "none" and r.policy == "source_only"
    )
    noisy = next(
        r
        for r in grid_result.records
        if r.kind == "gaussian_noise" and r.policy == "source_only"
    )
    assert noisy.mean_ap < clean.mean_ap, "severity-3 noise must hurt the frozen model"


def test_failing_cell_is_recorded_and_skipped(monkeypatch, trained_bundle, small_scene_dir, tmp_path):
    import detta.baselines as baselines

    class ExplodingPolicy:
        def __init__(self, *args, **kwargs):
            pass

        def fit_predict(self, stream):
            raise RuntimeError("synthetic cell failure")

    monkeypatch.setitem(baselines.POLICIES, "bn_adapt", ExplodingPolicy)
    config = _config(
        trained_bundle,
        small_scene_dir,
        tmp_path / "out",
        policies=["source_only", "bn_adapt"],
        corruptions=[CorruptionSetting(kind=None)],
    )
    result = run_experiment(config)
    assert len(result.records) == 1 and result.records[0].policy == "source_only"
    assert len(result.failures) == 1
    cell, message = result.failures[0]
    assert cell == "none__bn_adapt__seed0"
    assert "synthetic cell failure" in message
    failures_text = (tmp_path / "out" / "failures.txt").read_text()
    assert "synthetic cell failure" in failures_text
    assert (tmp_path / "out" / "records.csv").exists()


def test_missing_checkpoint_fails_every_cell(trained_bundle, small_scene_dir, tmp_path):
    config = _config(
        trained_bundle,
        small_scene_dir,
        tmp_path / "out",
        checkpoint=str(tmp_path / "missing.npz"),
        policies=["source_only"],
        corruptions=[CorruptionSetting(kind=None)],
    )
    result = run_experiment(config)
    assert result.records == []
    assert len(result.failures) == 1
    assert (tmp_path / "out" / "failures.txt").exists()


def _record(policy, kind, severity, seed, mean_ap):
    return MetricsRecord(
        policy=policy,
        kind=kind,
        severity=severity,
        seed=seed,
        mean_ap=mean_ap,
        per_class_ap={},
        n_images=8,
        n_detections=10,
        frozen_unchanged=True,
        alpha_first=None,
        alpha_last=None,
        n_above_gamma_q1=None,
        n_above_gamma_q5=None,
        mean_score_q1=None,
        mean_score_q5=None,
        mean_negative_score_q1=None,
        mean_negative_score_q5=None,
        wall_seconds=0.1,
    )


def test_render_report_averages_seeds_and_reports_gain():
    records = [
        _record("source_only", "fog", 3, 0, 0.4),
        _record("source_only", "fog", 3, 1, 0.6),
        _record("monotta", "fog", 3, 0, 0.6),
        _record("monotta", "fog", 3, 1, 0.9),
    ]
    text, rows = render_report(records)
    (row,) = rows
    assert row["corruption"] == "fog" and row["severity"] == 3
    assert row["source_only"] == pytest.approx(0.5)
    assert row["monotta"] == pytest.approx(0.75)
    assert row["gain_source_only_pct"] == pytest.approx(0.0)
    assert row["gain_monotta_pct"] == pytest.approx(50.0)
    assert "+50.0%" in text and "0.5000" in text and "0.7500" in text


def test_render_report_orders_groups_and_handles_missing():
    records = [
        _record("source_only", "none", 0, 0, 0.9),
        _record("source_only", "fog", 3, 0, None),
        _record("monotta", "fog", 3, 0, 0.5),
    ]
    text, rows = render_report(records)
    assert [r["corruption"] for r in rows] == ["fog", "none"], "groups sort by kind then severity"
    assert rows[0]["source_only"] == 0.0, "a cell without defined mAP counts as zero"
    assert rows[0]["gain_monotta_pct"] is None, "no gain against a zero source"
    assert rows[1]["monotta"] is None
    assert "-" in text
    empty_text, empty_rows = render_report([])
    assert empty_rows == [] and empty_text.strip() != ""


def _write_perfect_detections(dataset_dir, path):
    with open(dataset_dir / "annotations.json") as fh:
        payload = json.load(fh)
    rng = np.random.default_rng(0)
    with open(path, "w") as fh:
        for image_index, entry in enumerate(payload["images"]):
            for obj in entry["objects"]:
                fh.write(
                    json.dumps(
                        {
                            "image_index": image_index,
                            "class_id": obj["class_id"],
                            "score": float(rng.uniform(0.5, 1.0)),
                            "cx": obj["cx"],
                            "cy": obj["cy"],
                            "w": obj["w"],
                            "h": obj["h"],
                        }
                    )
                    + "\n"
                )


def test_cli_corrupt_writes_images_and_manifest(small_scene_dir, tmp_path):
    runner = CliRunner()
    result = runner.invoke(
        main,
        [
            "corrupt",
            "--images",
            str(small_scene_dir),
            "--out",
            "corrupted",
            "--kind",
            "fog",
            "--severity",
            "2",
            "--seed",
            "1",
        ],
        env={"DETTA_OUTPUT_ROOT": str(tmp_path)},
    )
    assert result.exit_code == 0, result.output
    out = tmp_path / "corrupted"
    pngs = sorted((out / "images").glob("*.png"))
    assert len(pngs) == 48
    assert (out / "manifest.csv").exists()
    assert (out / "annotations.json").exists(), "labels ride along for later scoring"
    original = (small_scene_dir / "images" / pngs[0].name).read_bytes()
    assert pngs[0].read_bytes() != original, "corruption must actually change pixels"
    assert "wrote 48" in result.output


def test_cli_corrupt_rejects_bad_usage(small_scene_dir, tmp_path):
    runner = CliRunner()
    env = {"DETTA_OUTPUT_ROOT": str(tmp_path)}
    result = runner.invoke(
        main,
        ["corrupt", "--images", str(small_scene_dir), "--out", "x", "--kind", "rain"],
        env=env,
    )
    assert result.exit_code == 2
    result = runner.invoke(
        main,
        ["corrupt", "--images", str(small_scene_dir), "--out", "x"],
        env=env,
    )
    assert result.exit_code == 2
    result = runner.invoke(
        main,
        ["corrupt", "--images", str(small_scene_dir), "--out", "x", "--kind", "fog", "--severity", "9"],
        env=env,
    )
    assert result.exit_code == 2


def test_cli_evaluate_scores_saved_detections(small_scene_dir, tmp_path):
    detections = tmp_path / "detections.jsonl"
    _write_perfect_detections(small_scene_dir, detections)
    runner = CliRunner()
    result = runner.invoke(
        main,
        [
            "evaluate",
            "--detections",
            str(detections),
            "--images",
            str(small_scene_dir),
            "--out",
            "eval.json",
        ],
        env={"DETTA_OUTPUT_ROOT": str(tmp_path)},
    )
    assert result.exit_code == 0, result.output
    assert "mAP 1.0000" in result.output
    payload = json.loads((tmp_path / "eval.json").read_text())
    assert payload["mean_ap"] == 1.0
    assert set(payload["per_class_ap"]) == {"0", "1", "2"}


def test_cli_evaluate_fails_on_garbage_input(small_scene_dir, tmp_path):
    bad = tmp_path / "bad.jsonl"
    bad.write_text('{"image_index": 0}\n')
    runner = CliRunner()
    result = runner.invoke(
        main,
        ["evaluate", "--detections", str(bad), "--images", str(small_scene_dir)],
    )
    assert result.exit_code == 1


def test_cli_adapt_runs_one_policy(trained_bundle, small_scene_dir, tmp_path):
    runner = CliRunner()
    result = runner.invoke(
        main,
        [
            "adapt",
            "--checkpoint",
            str(trained_bundle.checkpoint),
            "--images",
            str(small_scene_dir),
            "--out",
            "run",
            "--policy",
            "source_only",
        ],
        env={"DETTA_OUTPUT_ROOT": str(tmp_path)},
    )
    assert result.exit_code == 0, result.output
    assert "mAP" in result.output
    cell = tmp_path / "run" / "cells" / "none__source_only__seed0"
    assert (cell / "detections.jsonl").exists()

    result = runner.invoke(
        main,
        [
            "adapt",
            "--checkpoint",
            str(trained_bundle.checkpoint),
            "--images",
            str(small_scene_dir),
            "--out",
            "run2",
            "--policy",
            "nonsense",
        ],
        env={"DETTA_OUTPUT_ROOT": str(tmp_path)},
    )
    assert result.exit_code == 2


def test_cli_compare_runs_grid_and_prints_report(trained_bundle, small_scene_dir, tmp_path):
    config = ExperimentConfig(
        checkpoint=str(trained_bundle.checkpoint),
        images_dir=str(small_scene_dir),
        output_dir="cmp_out",
        policies=["source_only"],
        corruptions=[CorruptionSetting(kind=None)],
        seeds=[0],
    )
    path = tmp_path / "config.yaml"
    save_config(config, path)
    runner = CliRunner()
    result = runner.invoke(
        main,
        ["compare", "--config", str(path)],
        env={"DETTA_OUTPUT_ROOT": str(tmp_path)},
    )
    assert result.exit_code == 0, result.output
    assert "corruption" in result.output and "source_only" in result.output
    assert (tmp_path / "cmp_out" / "records.csv").exists()


def test_cli_compare_exit_codes(trained_bundle, small_scene_dir, tmp_path):
    runner = CliRunner()
    env = {"DETTA_OUTPUT_ROOT": str(tmp_path)}

    bad = tmp_path / "bad.yaml"
    bad.write_text("checkpoint: c\n")
    result = runner.invoke(main, ["compare", "--config", str(bad)], env=env)
    assert result.exit_code == 2, "incomplete config is a usage error"

    failing = ExperimentConfig(
        checkpoint=str(tmp_path / "missing.npz"),
        images_dir=str(small_scene_dir),
        output_dir="fail_out",
        policies=["source_only"],
        corruptions=[CorruptionSetting(kind=None)],
        seeds=[0],
    )
    path = tmp_path / "failing.yaml"
    save_config(failing, path)
    result = runner.invoke(main, ["compare", "--config", str(path)], env=env)
    assert result.exit_code == 1, "failing cells exit 1, not 2"


def test_cli_train_toy_rejects_bad_budget(tmp_path):
    runner = CliRunner()
    result = runner.invoke(
        main,
        ["train-toy", "--out", "toy", "--epochs", "0"],
        env={"DETTA_OUTPUT_ROOT": str(tmp_path)},
    )
    assert result.exit_code == 2

    result = runner.invoke(
        main,
        ["train-toy", "--out", "toy", "--n-train", "40", "--n-val", "16", "--epochs", "1"],
        env={"DETTA_OUTPUT_ROOT": str(tmp_path)},
    )
    assert result.exit_code == 1, "an unreachable accuracy target is a runtime failure"
    assert "below target" in result.output
