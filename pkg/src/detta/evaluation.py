"""Detection quality metrics: IoU matching, interpolated AP, score histograms."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .decoding import Detection

__all__ = [
    "GroundTruthBox",
    "MatchRecord",
    "APResult",
    "ScoreHistogram",
    "iou",
    "match_detections",
    "average_precision_r40",
    "score_histogram",
    "RECALL_POINTS",
]

# 40-point interpolated AP: recall levels 1/40, 2/40, ..., 1.
RECALL_POINTS = tuple((i + 1) / 40.0 for i in range(40))


@dataclass(frozen=True)
class GroundTruthBox:
    image_index: int
    class_id: int
    box: tuple[float, float, float, float]  # (cx, cy, w, h) in pixels


@dataclass(frozen=True)
class MatchRecord:
    """Outcome of greedy matching for one detection."""

    detection_index: int
    image_index: int
    class_id: int
    score: float
    matched: bool
    iou: float
    gt_index: Optional[int]


@dataclass(frozen=True)
class APResult:
    per_class_ap: dict[int, Optional[float]]
    mean_ap: Optional[float]
    n_ground_truth: dict[int, int]
    n_detections: dict[int, int]


@dataclass(frozen=True)
class ScoreHistogram:
    edges: tuple[float, ...]
    counts: tuple[int, ...]
    n_total: int
    n_below_gamma: int
    n_above_gamma: int
    n_below_alpha: int
    n_above_alpha: int


def iou(box_a: Sequence[float], box_b: Sequence[float]) -> float:
    """Intersection over union of two (cx, cy, w, h) boxes."""
    for box in (box_a, box_b):
        if box[2] <= 0 or box[3] <= 0:
            raise ValueError(f"box must have positive width and height, got {tuple(box)}")
    ax0, ay0 = box_a[0] - box_a[2] / 2, box_a[1] - box_a[3] / 2
    ax1, ay1 = box_a[0] + box_a[2] / 2, box_a[1] + box_a[3] / 2
    bx0, by0 = box_b[0] - box_b[2] / 2, box_b[1] - box_b[3] / 2
    bx1, by1 = box_b[0] + box_b[2] / 2, box_b[1] + box_b[3] / 2
    iw = min(ax1, bx1) - max(ax0, bx0)
    ih = min(ay1, by1) - max(ay0, by0)
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    union = box_a[2] * box_a[3] + box_b[2] * box_b[3] - inter
    return inter / union


def _canonical_order(detections: Sequence[Detection], indices: Sequence[int]) -> list[int]:
    """Descending score; ties by content (image, class, box), index last.

    A content key keeps the processing order a function of the detection
    multiset rather than the list order, so permuting equal-score detections
    cannot change what matches.  The index matters only for fully identical
    detections, whose outcomes are interchangeable anyway.
    """
    return sorted(
        indices,
        key=lambda i: (
            -detections[i].score,
            detections[i].image_index,
            detections[i].class_id,
            detections[i].box,
            i,
        ),
    )


def match_detections(
    detections: Sequence[Detection],
    ground_truth: Sequence[GroundTruthBox],
    iou_threshold: float = 0.5,
) -> list[MatchRecord]:
    """Greedy one-to-one matching in descending score order.

    Score ties are broken by a canonical content key and finally by detection
    index; a detection takes the still-unmatched ground-truth box of its image
    and class with the highest IoU, provided that IoU reaches the threshold.
    Matching is per class: a detection never matches a box of another class.
    """
    order = _canonical_order(detections, range(len(detections)))
    by_image_class: dict[tuple[int, int], list[int]] = {}
    for g_idx, gt in enumerate(ground_truth):
        by_image_class.setdefault((gt.image_index, gt.class_id), []).append(g_idx)
    taken = set()
    records = []
    for det_idx in order:
        det = detections[det_idx]
        best_iou, best_gt = 0.0, None
        for g_idx in by_image_class.get((det.image_index, det.class_id), []):
            if g_idx in taken:
                continue
            overlap = iou(det.box, ground_truth[g_idx].box)
            if overlap > best_iou:
                best_iou, best_gt = overlap, g_idx
        matched = best_gt is not None and best_iou >= iou_threshold
        if matched:
            taken.add(best_gt)
        records.append(
            MatchRecord(
                detection_index=det_idx,
                image_index=det.image_index,
                class_id=det.class_id,
                score=det.score,
                matched=matched,
                iou=best_iou if matched else 0.0,
                gt_index=best_gt if matched else None,
            )
        )
    return records


def average_precision_r40(
    detections: Sequence[Detection],
    ground_truth: Sequence[GroundTruthBox],
    iou_threshold: float = 0.5,
) -> APResult:
    """Per-class interpolated average precision over 40 recall levels.

    Precision is interpolated as the maximum precision at any recall at or
    beyond the query level.  A class with no ground truth has undefined AP,
    reported as None and excluded from the mean.
    """
    classes = sorted({g.class_id for g in ground_truth} | {d.class_id for d in detections})
    records = match_detections(detections, ground_truth, iou_threshold)
    matched_by_det = {r.detection_index: r.matched for r in records}

    per_class_ap: dict[int, Optional[float]] = {}
    n_gt = {k: sum(1 for g in ground_truth if g.class_id == k) for k in classes}
    n_det = {k: sum(1 for d in detections if d.class_id == k) for k in classes}
    for k in classes:
        if n_gt[k] == 0:
            per_class_ap[k] = None
            continue
        det_order = _canonical_order(
            detections, [i for i, d in enumerate(detections) if d.class_id == k]
        )
        hits = np.array([matched_by_det[i] for i in det_order], dtype=np.float64)
        tp = np.cumsum(hits)
        ranks = np.arange(1, len(det_order) + 1, dtype=np.float64)
        precisions = tp / ranks
        recalls = tp / n_gt[k]
        # Interpolated precision: running max from the right, then sample the
        # first point reaching each recall level.
        interp = np.maximum.accumulate(precisions[::-1])[::-1] if len(det_order) else precisions
        ap = 0.0
        for r in RECALL_POINTS:
            idx = np.searchsorted(recalls, r, side="left")
            ap += float(interp[idx]) if idx < len(recalls) else 0.0
        per_class_ap[k] = ap / len(RECALL_POINTS)

    defined = [v for v in per_class_ap.values() if v is not None]
    mean_ap = sum(defined) / len(defined) if defined else None
    return APResult(
        per_class_ap=per_class_ap,
        mean_ap=mean_ap,
        n_ground_truth=n_gt,
        n_detections=n_det,
    )


def score_histogram(
    scores: Sequence[float],
    bins: int,
    eta: float = 0.05,
    gamma: float = 0.2,
    alpha: float = 0.2,
) -> ScoreHistogram:
    """Histogram of detection scores at or above eta over (0, 1).

    Also reports how many counted scores fall below/at-or-above gamma and
    alpha, mirroring the thresholds the adaptation losses split on.
    """
    if bins < 2:
        raise ValueError(f"bins must be >= 2, got {bins}")
    arr = np.asarray(list(scores), dtype=np.float64)
    arr = arr[arr >= eta] if arr.size else arr
    edges = np.linspace(0.0, 1.0, bins + 1)
    counts, _ = np.histogram(arr, bins=edges)
    return ScoreHistogram(
        edges=tuple(float(e) for e in edges),
        counts=tuple(int(c) for c in counts),
        n_total=int(arr.size),
        n_below_gamma=int((arr < gamma).sum()),
        n_above_gamma=int((arr >= gamma).sum()),
        n_below_alpha=int((arr < alpha).sum()),
        n_above_alpha=int((arr >= alpha).sum()),
    )
