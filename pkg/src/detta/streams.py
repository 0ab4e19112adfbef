"""Corrupted evaluation streams built from a directory of clean images."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator, Optional

import numpy as np
from PIL import Image

from .corruptions import CorruptionSpec, apply_corruption
from .validation import check_image

__all__ = ["ManifestRow", "StreamManifest", "build_stream", "write_manifest", "read_manifest"]

_IMAGE_SUFFIXES = {".png", ".jpg", ".jpeg", ".bmp"}


@dataclass(frozen=True)
class ManifestRow:
    index: int  # position among emitted images; -1 for skipped files
    filename: str
    kind: str  # "none" for an identity stream
    severity: int  # 0 for an identity stream
    image_seed: int
    status: str  # "ok" or "skipped"


@dataclass
class StreamManifest:
    """Exact record of what a stream emitted, reproducible from disk."""

    rows: list[ManifestRow]

    def emitted(self) -> list[ManifestRow]:
        return [r for r in self.rows if r.status == "ok"]


def _load_image(path: Path) -> np.ndarray:
    arr = np.asarray(Image.open(path).convert("RGB")).astype(np.float64) / 255.0
    return check_image(arr, name=path.name)


def _image_seed(spec: Optional[CorruptionSpec], index: int) -> int:
    base = 0 if spec is None else spec.seed
    return int(np.random.SeedSequence([base, index]).generate_state(1)[0])


def build_stream(
    clean_dir: str | Path,
    spec: Optional[CorruptionSpec],
    batch_size: int,
) -> tuple[Iterator[np.ndarray], StreamManifest]:
    """Prepare a single-pass batch iterator over a directory of images.

    Files are visited in sorted filename order; each readable image is
    corrupted with a per-image seed derived from (spec.seed, file position),
    so the manifest alone reproduces the stream bit for bit.  Unreadable
    files are recorded as skipped and the stream continues.  spec=None
    yields the images unchanged.
    """
    if batch_size < 1:
        raise ValueError(f"batch_size must be >= 1, got {batch_size}")
    root = Path(clean_dir)
    if root.joinpath("images").is_dir():
        root = root / "images"
    files = sorted(p for p in root.iterdir() if p.suffix.lower() in _IMAGE_SUFFIXES)
    if not files:
        raise ValueError(f"no images found under {root}")

    rows: list[ManifestRow] = []
    readable: list[tuple[Path, int]] = []
    emitted = 0
    for position, path in enumerate(files):
        seed = _image_seed(spec, position)
        try:
            with Image.open(path) as probe:
                probe.verify()
        except Exception:
            rows.append(
                ManifestRow(
                    index=-1,
                    filename=path.name,
                    kind=spec.kind if spec else "none",
                    severity=spec.severity if spec else 0,
                    image_seed=seed,
                    status="skipped",
                )
            )
            continue
        rows.append(
            ManifestRow(
                index=emitted,
                filename=path.name,
                kind=spec.kind if spec else "none",
                severity=spec.severity if spec else 0,
                image_seed=seed,
                status="ok",
            )
        )
        readable.append((path, seed))
        emitted += 1

    manifest = StreamManifest(rows=rows)

    def batches() -> Iterator[np.ndarray]:
        buffer = []
        for path, seed in readable:
            image = _load_image(path)
            if spec is not None:
                per_image = CorruptionSpec(kind=spec.kind, severity=spec.severity, seed=seed)
                image = apply_corruption(image, per_image)
            buffer.append(image)
            if len(buffer) == batch_size:
                yield np.stack(buffer)
                buffer = []
        if buffer:
            yield np.stack(buffer)

    return batches(), manifest


def write_manifest(manifest: StreamManifest, path: str | Path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["index", "filename", "kind", "severity", "image_seed", "status"])
        for row in manifest.rows:
            writer.writerow(
                [row.index, row.filename, row.kind, row.severity, row.image_seed, row.status]
            )


def read_manifest(path: str | Path) -> StreamManifest:
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        rows = [
            ManifestRow(
                index=int(r["index"]),
                filename=r["filename"],
                kind=r["kind"],
                severity=int(r["severity"]),
                image_seed=int(r["image_seed"]),
                status=r["status"],
            )
            for r in reader
        ]
    return StreamManifest(rows=rows)
