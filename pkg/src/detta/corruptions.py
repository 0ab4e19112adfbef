"""Procedural image corruptions at five severity levels.

All recipes take and return H x W x 3 float images in [0, 1] and are pure
functions of (pixels, severity, rng), so a stored seed reproduces a stream
bit for bit.  Severity parameters come from fixed per-kind tables sized for
small images; weather effects (snow, frost, glass blur) are procedural
approximations built from seeded noise rather than photo overlays.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from matplotlib.colors import hsv_to_rgb, rgb_to_hsv
from PIL import Image
from scipy import ndimage

from .validation import check_image, check_seed, check_severity

__all__ = ["CORRUPTION_KINDS", "CorruptionSpec", "apply_corruption"]


# -- severity tables ---------------------------------------------------------
# Index severity - 1.  Gaussian sigmas above ~0.22 lose noticeable variance to
# the [0, 1] clip, so tests that check injected variance must compare against
# the clipped-normal value, not sigma^2 itself.

_GAUSSIAN_SIGMA = (0.08, 0.18, 0.34, 0.38, 0.42)
_SHOT_PHOTONS = (60.0, 25.0, 12.0, 6.0, 3.0)
_IMPULSE_AMOUNT = (0.02, 0.04, 0.07, 0.11, 0.17)
_DEFOCUS = ((1.0, 0.3), (1.5, 0.3), (2.0, 0.4), (3.0, 0.4), (4.0, 0.5))  # radius, alias sigma
_GLASS = ((0.4, 1, 1), (0.6, 1, 2), (0.7, 2, 1), (0.9, 2, 2), (1.1, 3, 2))  # sigma, delta, iters
_MOTION_LENGTH = (3, 5, 7, 9, 12)
_SNOW = (  # layer_mean, layer_scale, keep_quantile, streak_len, whiten
    (0.1, 0.3, 0.965, 4, 0.10),
    (0.2, 0.3, 0.950, 5, 0.15),
    (0.55, 0.3, 0.930, 7, 0.20),
    (0.55, 0.35, 0.900, 9, 0.25),
    (0.55, 0.4, 0.865, 11, 0.30),
)
_FROST = ((0.92, 0.22), (0.86, 0.32), (0.80, 0.42), (0.74, 0.52), (0.68, 0.62))  # keep, overlay
_FOG = ((0.6, 2.0), (0.9, 2.0), (1.2, 1.7), (1.5, 1.6), (1.9, 1.5))  # amount, octave decay
_BRIGHTNESS = (0.1, 0.2, 0.3, 0.4, 0.5)  # value-channel gain - 1
_CONTRAST = (0.60, 0.45, 0.30, 0.20, 0.10)  # blend factor toward the mean
_PIXELATE = (0.5, 0.4, 0.3, 0.22, 0.15)  # downscale fraction
_SATURATE = (1.3, 1.8, 2.5, 3.5, 5.0)  # saturation-channel gain


def _gaussian_noise(x, severity, rng):
    sigma = _GAUSSIAN_SIGMA[severity - 1]
    return x + rng.normal(0.0, sigma, size=x.shape)


def _shot_noise(x, severity, rng):
    photons = _SHOT_PHOTONS[severity - 1]
    return rng.poisson(x * photons) / photons


def _impulse_noise(x, severity, rng):
    amount = _IMPULSE_AMOUNT[severity - 1]
    out = x.copy()
    flip = rng.random(x.shape) < amount
    salt = rng.random(x.shape) < 0.5
    out[flip & salt] = 1.0
    out[flip & ~salt] = 0.0
    return out


def _disk_kernel(radius: float, alias_sigma: float) -> np.ndarray:
    r = int(np.ceil(radius))
    yy, xx = np.mgrid[-r : r + 1, -r : r + 1]
    kernel = (yy**2 + xx**2 <= radius**2).astype(np.float64)
    if alias_sigma > 0:
        kernel = ndimage.gaussian_filter(kernel, alias_sigma)
    return kernel / kernel.sum()


def _filter_channels(x: np.ndarray, kernel: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    for c in range(x.shape[2]):
        out[..., c] = ndimage.convolve(x[..., c], kernel, mode="reflect")
    return out


def _defocus_blur(x, severity, rng):
    radius, alias = _DEFOCUS[severity - 1]
    return _filter_channels(x, _disk_kernel(radius, alias))


def _glass_blur(x, severity, rng):
    sigma, delta, iters = _GLASS[severity - 1]
    h, w = x.shape[:2]
    out = ndimage.gaussian_filter(x, (sigma, sigma, 0))
    rows, cols = np.mgrid[0:h, 0:w]
    for _ in range(iters):
        dr = rng.integers(-delta, delta + 1, size=(h, w))
        dc = rng.integers(-delta, delta + 1, size=(h, w))
        rr = np.clip(rows + dr, 0, h - 1)
        cc = np.clip(cols + dc, 0, w - 1)
        out = out[rr, cc]
    return ndimage.gaussian_filter(out, (sigma / 2.0, sigma / 2.0, 0))


def _motion_kernel(length: int, angle_deg: float) -> np.ndarray:
    half = (length - 1) / 2.0
    size = int(np.ceil(half)) * 2 + 1
    kernel = np.zeros((size, size))
    theta = np.deg2rad(angle_deg)
    center = size // 2
    for t in np.linspace(-half, half, 4 * length):
        r = int(round(center + t * np.sin(theta)))
        c = int(round(center + t * np.cos(theta)))
        kernel[r, c] = 1.0
    return kernel / kernel.sum()


def _motion_blur(x, severity, rng):
    length = _MOTION_LENGTH[severity - 1]
    angle = rng.uniform(-45.0, 45.0)
    return _filter_channels(x, _motion_kernel(length, angle))


def _snow(x, severity, rng):
    mean, scale, keep_q, streak, whiten = _SNOW[severity - 1]
    h, w = x.shape[:2]
    layer = rng.normal(mean, scale, size=(h, w))
    layer[layer < np.quantile(layer, keep_q)] = 0.0
    angle = rng.uniform(-60.0, -30.0)
    layer = ndimage.convolve(layer, _motion_kernel(streak, angle), mode="constant")
    layer = np.clip(layer, 0.0, 1.0)
    gray = x.mean(axis=2, keepdims=True)
    whitened = (1.0 - whiten) * x + whiten * np.maximum(x, gray * 1.5 + 0.5)
    return whitened + layer[..., None] + np.rot90(layer, 2)[..., None]


def _octave_noise(shape: tuple[int, int], rng, decay: float) -> np.ndarray:
    """Multi-scale value noise: sum of bilinearly upsampled random grids."""
    h, w = shape
    out = np.zeros(shape)
    amplitude, cells = 1.0, 4
    while cells <= max(h, w):
        grid = rng.random((cells + 1, cells + 1))
        zoomed = ndimage.zoom(grid, (h / (cells + 1), w / (cells + 1)), order=1)
        out += amplitude * zoomed[:h, :w]
        amplitude /= decay
        cells *= 2
    out -= out.min()
    return out / max(out.max(), 1e-12)


def _frost(x, severity, rng):
    keep, overlay = _FROST[severity - 1]
    pattern = _octave_noise(x.shape[:2], rng, decay=1.8)
    crystals = np.clip((pattern - 0.35) / 0.65, 0.0, 1.0) ** 0.7
    frost_rgb = np.stack([crystals * 0.95, crystals * 0.97, crystals], axis=2)
    return keep * x + overlay * frost_rgb


def _fog(x, severity, rng):
    amount, decay = _FOG[severity - 1]
    plasma = _octave_noise(x.shape[:2], rng, decay=decay)
    max_val = x.max()
    return (x + amount * plasma[..., None]) * max_val / (max_val + amount)


def _brightness(x, severity, rng):
    gain = 1.0 + _BRIGHTNESS[severity - 1]
    hsv = rgb_to_hsv(np.clip(x, 0.0, 1.0))
    hsv[..., 2] = np.clip(hsv[..., 2] * gain, 0.0, 1.0)
    return hsv_to_rgb(hsv)


def _contrast(x, severity, rng):
    factor = _CONTRAST[severity - 1]
    mean = x.mean(axis=(0, 1), keepdims=True)
    return (x - mean) * factor + mean


def _pixelate(x, severity, rng):
    fraction = _PIXELATE[severity - 1]
    h, w = x.shape[:2]
    small = (max(1, int(round(h * fraction))), max(1, int(round(w * fraction))))
    img = Image.fromarray((np.clip(x, 0.0, 1.0) * 255.0).round().astype(np.uint8))
    img = img.resize(small[::-1], Image.BOX).resize((w, h), Image.NEAREST)
    return np.asarray(img).astype(np.float64) / 255.0


def _saturate(x, severity, rng):
    gain = _SATURATE[severity - 1]
    hsv = rgb_to_hsv(np.clip(x, 0.0, 1.0))
    hsv[..., 1] = np.clip(hsv[..., 1] * gain, 0.0, 1.0)
    return hsv_to_rgb(hsv)


_RECIPES = {
    "gaussian_noise": _gaussian_noise,
    "shot_noise": _shot_noise,
    "impulse_noise": _impulse_noise,
    "defocus_blur": _defocus_blur,
    "glass_blur": _glass_blur,
    "motion_blur": _motion_blur,
    "snow": _snow,
    "frost": _frost,
    "fog": _fog,
    "brightness": _brightness,
    "contrast": _contrast,
    "pixelate": _pixelate,
    "saturate": _saturate,
}

CORRUPTION_KINDS = tuple(_RECIPES)


@dataclass(frozen=True)
class CorruptionSpec:
    """One corruption setting: kind, severity in 1..5 and the noise seed."""

    kind: str
    severity: int
    seed: int = 0

    def __post_init__(self) -> None:
        if self.kind not in _RECIPES:
            raise ValueError(
                f"unknown corruption kind {self.kind!r}; expected one of {CORRUPTION_KINDS}"
            )
        check_severity(self.severity)
        check_seed(self.seed)


def apply_corruption(image: np.ndarray, spec: CorruptionSpec) -> np.ndarray:
    """Corrupt one image; output is float64 in [0, 1], same shape as input."""
    x = check_image(image)
    rng = np.random.default_rng(np.random.SeedSequence([spec.seed]))
    out = _RECIPES[spec.kind](x, spec.severity, rng)
    out = np.clip(out, 0.0, 1.0)
    if not np.all(np.isfinite(out)):
        raise RuntimeError(f"corruption {spec.kind} produced non-finite values")
    return out
