"""Heatmap score decoding for center-point detectors.

A detector emits per-class heatmaps; objects are read off as local maxima.
Decoding keeps the gathered score entries differentiable with respect to the
heatmap (selection indices are constants, values carry gradients), which is
what lets adaptation losses backpropagate into the model.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import torch
import torch.nn.functional as F

__all__ = [
    "EPS",
    "HeatmapBatch",
    "ScoreBatch",
    "MultiClassScoreBatch",
    "Detection",
    "extract_peaks",
]

# Scores live strictly inside (0, 1) so that log terms stay finite.
EPS = 1e-7


@dataclass
class HeatmapBatch:
    """Per-class detection heatmaps, shape (B, K, H, W), entries in (0, 1).

    Values are clamped to [EPS, 1 - EPS] on construction; the clamp is a
    torch op, so gradients still flow through unclamped entries.
    """

    values: torch.Tensor

    def __post_init__(self) -> None:
        if self.values.ndim != 4:
            raise ValueError(f"heatmap must be (B, K, H, W), got {tuple(self.values.shape)}")
        b, k, h, w = self.values.shape
        if min(b, k, h, w) < 1:
            raise ValueError(f"heatmap dimensions must be >= 1, got {tuple(self.values.shape)}")
        self.values = self.values.clamp(EPS, 1.0 - EPS)

    @property
    def batch_size(self) -> int:
        return self.values.shape[0]

    @property
    def n_classes(self) -> int:
        return self.values.shape[1]

    @property
    def spatial_shape(self) -> tuple[int, int]:
        return self.values.shape[2], self.values.shape[3]


@dataclass
class ScoreBatch:
    """Top-scoring decoded slots per image.

    scores:    (B, N) float; invalid slots hold 0 and join no loss or statistic.
    class_ids: (B, N) long; -1 on invalid slots.
    locations: (B, N, 2) long (row, col); -1 on invalid slots.
    valid:     (B, N) bool.

    Within each image, valid slots are sorted by descending score and precede
    all invalid slots.
    """

    scores: torch.Tensor
    class_ids: torch.Tensor
    locations: torch.Tensor
    valid: torch.Tensor

    def __post_init__(self) -> None:
        if self.scores.shape != self.valid.shape or self.scores.shape != self.class_ids.shape:
            raise ValueError("scores, class_ids and valid must share shape (B, N)")
        if self.locations.shape != (*self.scores.shape, 2):
            raise ValueError("locations must have shape (B, N, 2)")

    @property
    def batch_size(self) -> int:
        return self.scores.shape[0]

    @property
    def n_slots(self) -> int:
        return self.scores.shape[1]

    def n_valid(self) -> int:
        return int(self.valid.sum().item())


@dataclass
class MultiClassScoreBatch:
    """Full class-score vectors for decoded slots, shape (B, N, K).

    Rows of invalid slots are zero.  For valid slots the max over classes
    equals the paired ScoreBatch score.
    """

    class_scores: torch.Tensor
    valid: torch.Tensor

    def __post_init__(self) -> None:
        if self.class_scores.ndim != 3:
            raise ValueError("class_scores must have shape (B, N, K)")
        if self.valid.shape != self.class_scores.shape[:2]:
            raise ValueError("valid must have shape (B, N)")

    @property
    def n_classes(self) -> int:
        return self.class_scores.shape[2]


@dataclass
class Detection:
    """One reported object: image index, class, confidence and a pixel box."""

    image_index: int
    class_id: int
    score: float
    box: tuple[float, float, float, float]  # (cx, cy, w, h) in pixels
    extras: dict = field(default_factory=dict)

    def __post_init__(self) -> None:
        if self.class_id < 0:
            raise ValueError("class_id must be >= 0")
        if not 0.0 <= self.score <= 1.0:
            raise ValueError(f"score must lie in [0, 1], got {self.score}")
        if self.box[2] <= 0 or self.box[3] <= 0:
            raise ValueError(f"box must have positive width and height, got {self.box}")


def extract_peaks(heatmap: HeatmapBatch, n_max: int) -> tuple[ScoreBatch, MultiClassScoreBatch]:
    """Decode the top n_max peak slots per image from a heatmap batch.

    A cell (k, r, c) is a candidate when it ties the maximum of its 3x3
    spatial neighborhood within channel k (plateau ties all qualify) and
    channel k attains the cross-channel maximum at (r, c), lowest index
    winning ties.  The dominance condition keeps each slot's score equal to
    the max of its class-score vector.  Candidates are pooled across classes,
    sorted by descending score with ties broken in (row, col, class) scan
    order, and the top n_max kept.

    Gathered score entries stay connected to the heatmap graph; invalid
    slots are exact zeros.
    """
    if n_max < 1:
        raise ValueError(f"n_max must be >= 1, got {n_max}")
    h = heatmap.values
    b, k, hh, ww = h.shape

    # Plateau-friendly local maxima: max_pool includes the cell itself so the
    # test is equality.  Padding acts as -inf and never wins.
    neighborhood_max = F.max_pool2d(h, kernel_size=3, stride=1, padding=1)
    is_peak = h == neighborhood_max

    # Cross-channel dominance with lowest-index tie-break.
    channel_max = h.max(dim=1, keepdim=True).values
    ties = h == channel_max
    dominant = ties & (ties.cumsum(dim=1) == 1)

    candidate = is_peak & dominant

    # Arrange as (row, col, class) so a stable sort breaks ties in scan order.
    h_rc = h.permute(0, 2, 3, 1).reshape(b, -1)
    cand_rc = candidate.permute(0, 2, 3, 1).reshape(b, -1)
    masked = torch.where(cand_rc, h_rc, torch.zeros((), dtype=h.dtype, device=h.device))

    n_keep = min(n_max, masked.shape[1])
    order = torch.sort(masked.detach(), dim=1, descending=True, stable=True).indices[:, :n_keep]

    scores = h_rc.gather(1, order)
    valid = cand_rc.gather(1, order)
    if n_keep < n_max:
        pad = n_max - n_keep
        scores = F.pad(scores, (0, pad))
        valid = F.pad(valid, (0, pad), value=False)
        order = F.pad(order, (0, pad))

    # Invalid slots become exact zeros (and drop out of the graph).
    scores = scores * valid.to(scores.dtype)

    cls = order % k
    rc = order // k
    rows, cols = rc // ww, rc % ww
    neg1 = torch.full_like(cls, -1)
    class_ids = torch.where(valid, cls, neg1)
    locations = torch.stack([torch.where(valid, rows, neg1), torch.where(valid, cols, neg1)], dim=2)

    # Full class vectors at each retained location, gathered differentiably.
    h_loc = h.permute(0, 2, 3, 1).reshape(b, hh * ww, k)
    rc_safe = torch.where(valid, rc, torch.zeros_like(rc))
    class_scores = h_loc.gather(1, rc_safe.unsqueeze(2).expand(-1, -1, k))
    class_scores = class_scores * valid.unsqueeze(2).to(class_scores.dtype)

    score_batch = ScoreBatch(scores=scores, class_ids=class_ids, locations=locations, valid=valid)
    multi = MultiClassScoreBatch(class_scores=class_scores, valid=valid)
    return score_batch, multi
