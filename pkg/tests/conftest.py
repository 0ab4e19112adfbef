"""Shared fixtures: one full-scale trained detector per session plus small
scene directories, so expensive setup is paid once.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import pytest

from detta import (
    SceneDataset,
    TrainConfig,
    generate_scenes,
    save_checkpoint,
    save_dataset,
    train_detector,
)

# One line per acceptance criterion, printed in the terminal summary so the
# verdicts are visible in every pytest run, pass or fail.
CRITERION_LINES: list[str] = []


def record_criterion(name: str, passed: bool, detail: str) -> None:
    CRITERION_LINES.append(f"{name} {'PASS' if passed else 'FAIL'}: {detail}")


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if CRITERION_LINES:
        terminalreporter.section("acceptance criteria")
        for line in CRITERION_LINES:
            terminalreporter.write_line(line)


@dataclass
class TrainedBundle:
    """Full-scale detector plus the datasets and files it was trained on."""

    model: object
    checkpoint: Path
    train_set: SceneDataset
    val_set: SceneDataset
    val_dir: Path
    clean_map: float


@pytest.fixture(scope="session")
def trained_bundle(tmp_path_factory) -> TrainedBundle:
    """Train the detector at the pinned recipe: 2000/500 scenes, seed 0."""
    root = tmp_path_factory.mktemp("bundle")
    train_set = generate_scenes(2000, seed=0)
    val_set = generate_scenes(500, seed=1)
    model = train_detector(train_set, val_set, TrainConfig())
    save_dataset(val_set, root / "val")
    checkpoint = root / "checkpoint.npz"
    save_checkpoint(model, checkpoint)
    return TrainedBundle(
        model=model,
        checkpoint=checkpoint,
        train_set=train_set,
        val_set=val_set,
        val_dir=root / "val",
        clean_map=model.meta["clean_map"],
    )


@pytest.fixture(scope="session")
def small_scene_dir(tmp_path_factory) -> Path:
    """48 scenes on disk for stream and harness tests."""
    root = tmp_path_factory.mktemp("scenes48")
    save_dataset(generate_scenes(48, seed=11), root)
    return root
