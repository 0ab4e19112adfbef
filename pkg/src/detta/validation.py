"""Input validation helpers shared across the toolkit."""

from __future__ import annotations

import numpy as np

__all__ = [
    "check_image",
    "check_image_batch",
    "check_seed",
    "check_severity",
]


def check_image(image: np.ndarray, name: str = "image") -> np.ndarray:
    """Validate a single H x W x 3 float image with values in [0, 1].

    Returns the image as a float64 array (copy only if a cast is needed).
    """
    arr = np.asarray(image)
    if arr.ndim != 3 or arr.shape[2] != 3:
        raise ValueError(f"{name} must have shape (H, W, 3), got {arr.shape}")
    arr = arr.astype(np.float64, copy=False)
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} contains non-finite values")
    if arr.min() < 0.0 or arr.max() > 1.0:
        raise ValueError(f"{name} values must lie in [0, 1]")
    return arr


def check_image_batch(images: np.ndarray, name: str = "images") -> np.ndarray:
    """Validate a B x H x W x 3 float image batch in [0, 1], returned as float64."""
    arr = np.asarray(images)
    if arr.ndim != 4 or arr.shape[3] != 3:
        raise ValueError(f"{name} must have shape (B, H, W, 3), got {arr.shape}")
    if arr.shape[0] < 1:
        raise ValueError(f"{name} must contain at least one image")
    arr = arr.astype(np.float64, copy=False)
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} contains non-finite values")
    if arr.min() < 0.0 or arr.max() > 1.0:
        raise ValueError(f"{name} values must lie in [0, 1]")
    return arr


def check_seed(seed: int, name: str = "seed") -> int:
    if not isinstance(seed, (int, np.integer)) or isinstance(seed, bool):
        raise ValueError(f"{name} must be an integer, got {seed!r}")
    if seed < 0:
        raise ValueError(f"{name} must be non-negative, got {seed}")
    return int(seed)


def check_severity(severity: int) -> int:
    if not isinstance(severity, (int, np.integer)) or isinstance(severity, bool):
        raise ValueError(f"severity must be an integer, got {severity!r}")
    if not 1 <= severity <= 5:
        raise ValueError(f"severity must be in 1..5, got {severity}")
    return int(severity)
