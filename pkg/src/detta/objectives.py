"""Adaptation objectives: the dynamic score threshold and the two loss terms.

The engine splits decoded slots by a threshold alpha that tracks the mean of
high-confidence scores: slots at or above alpha get a confidence-raising
log-likelihood term, slots in the low window [eta, alpha) get a
negative-class regularizer that counters indiscriminate score inflation.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Optional

import numpy as np
import torch

from .decoding import EPS, MultiClassScoreBatch, ScoreBatch

__all__ = [
    "ThresholdState",
    "batch_mean_score",
    "update_threshold",
    "adaptive_optimization_loss",
    "sample_negative_classes",
    "negative_regularization_loss",
    "combined_loss",
    "bernoulli_entropy",
    "LossBreakdown",
]


@dataclass(frozen=True)
class ThresholdState:
    """EMA state of the high-confidence threshold alpha.

    gamma is the fixed eligibility floor, beta the EMA weight of the newest
    batch mean, step the number of updates applied so far.
    """

    alpha: float
    gamma: float
    beta: float
    step: int = 0

    def __post_init__(self) -> None:
        if not 0.0 < self.gamma < 1.0:
            raise ValueError(f"gamma must lie in (0, 1), got {self.gamma}")
        if not 0.0 <= self.beta <= 1.0:
            raise ValueError(f"beta must lie in [0, 1], got {self.beta}")
        if not 0.0 < self.alpha < 1.0:
            raise ValueError(f"alpha must lie in (0, 1), got {self.alpha}")
        if self.step < 0:
            raise ValueError("step must be >= 0")

    @classmethod
    def initial(cls, gamma: float, beta: float) -> "ThresholdState":
        """State before any batch; alpha is pinned to gamma on the first update."""
        return cls(alpha=gamma, gamma=gamma, beta=beta, step=0)


def batch_mean_score(scores: ScoreBatch, gamma: float) -> Optional[float]:
    """Mean over images of the per-image mean score among slots >= gamma.

    Images with no eligible slot are excluded from the outer mean.  Returns
    None when no image has an eligible slot (the caller leaves alpha alone).
    """
    with torch.no_grad():
        eligible = scores.valid & (scores.scores >= gamma)
        per_image_sum = (scores.scores * eligible).sum(dim=1)
        per_image_n = eligible.sum(dim=1)
        has = per_image_n > 0
        if not bool(has.any()):
            return None
        means = per_image_sum[has] / per_image_n[has]
        return float(means.mean().item())


def update_threshold(state: ThresholdState, scores: ScoreBatch) -> ThresholdState:
    """Advance the threshold EMA by one batch.

    The first update pins alpha to gamma; afterwards alpha moves by
    beta * batch_mean + (1 - beta) * alpha, or stays put when the batch has
    no eligible score.
    """
    if state.step == 0:
        return replace(state, alpha=state.gamma, step=1)
    mean = batch_mean_score(scores, state.gamma)
    if mean is None:
        return replace(state, step=state.step + 1)
    alpha = state.beta * mean + (1.0 - state.beta) * state.alpha
    return replace(state, alpha=alpha, step=state.step + 1)


def adaptive_optimization_loss(scores: ScoreBatch, alpha: float) -> torch.Tensor:
    """Confidence-raising loss: (1/B) * sum of -log s over valid slots with s >= alpha.

    The sum is over selected slots only and divides by the batch size B, not
    the selection count.  Returns a differentiable scalar; zero when nothing
    is selected.
    """
    selected = scores.valid & (scores.scores >= alpha)
    if not bool(selected.any()):
        return scores.scores.new_zeros(())
    s = scores.scores[selected].clamp(EPS, 1.0 - EPS)
    return -torch.log(s).sum() / scores.batch_size


def sample_negative_classes(multi: MultiClassScoreBatch, seed: int) -> torch.Tensor:
    """Draw one non-argmax class per valid slot, uniformly, reproducibly.

    Returns a (B, N) long tensor; invalid slots hold -1.  The argmax uses the
    lowest index on ties, matching the decoded class id.
    """
    k = multi.n_classes
    if k < 2:
        raise ValueError("sampling a negative class requires at least 2 classes")
    valid = multi.valid.cpu().numpy()
    pos = multi.class_scores.detach().cpu().numpy().argmax(axis=2)
    rng = np.random.default_rng(np.random.SeedSequence([int(seed)]))
    offsets = rng.integers(1, k, size=pos.shape)
    neg = (pos + offsets) % k
    neg[~valid] = -1
    return torch.from_numpy(neg).to(torch.long)


def negative_regularization_loss(
    multi: MultiClassScoreBatch,
    scores: ScoreBatch,
    negative_classes: torch.Tensor,
    eta: float,
    alpha: float,
) -> tuple[torch.Tensor, torch.Tensor]:
    """Class-balanced negative-learning loss over the low window [eta, alpha).

    Each windowed slot contributes -(1 - s_neg) * log(1 - s_neg) for its
    sampled negative class; the weight (1 - s_neg) is a detached constant.
    Per-class sums are divided by the number of slots drawn for that class
    and classes never drawn are skipped.

    Returns (loss, per-class draw counts of shape (K,)).
    """
    if not eta < alpha:
        raise ValueError(f"eta must be < alpha, got eta={eta}, alpha={alpha}")
    k = multi.n_classes
    window = scores.valid & (scores.scores >= eta) & (scores.scores < alpha)
    counts = torch.zeros(k, dtype=torch.long)
    if not bool(window.any()):
        return multi.class_scores.new_zeros(()), counts

    neg = negative_classes[window]
    s_neg = multi.class_scores[window].gather(1, neg.unsqueeze(1)).squeeze(1)
    weight = (1.0 - s_neg).detach()
    terms = -weight * torch.log((1.0 - s_neg).clamp(EPS, 1.0 - EPS))

    counts = torch.bincount(neg, minlength=k)
    e_k = torch.zeros(k, dtype=terms.dtype).index_add(0, neg, terms)
    drawn = counts > 0
    loss = (e_k[drawn] / counts[drawn]).sum()
    return loss, counts


def combined_loss(l_ao: torch.Tensor, l_nreg: torch.Tensor, lambda_balance: float) -> torch.Tensor:
    """Total objective: l_ao + lambda_balance * l_nreg."""
    if lambda_balance < 0:
        raise ValueError(f"lambda_balance must be >= 0, got {lambda_balance}")
    return l_ao + lambda_balance * l_nreg


def bernoulli_entropy(s: torch.Tensor) -> torch.Tensor:
    """Elementwise -s*log(s) - (1-s)*log(1-s) with clamped log arguments."""
    sc = s.clamp(EPS, 1.0 - EPS)
    return -sc * torch.log(sc) - (1.0 - sc) * torch.log(1.0 - sc)


@dataclass(frozen=True)
class LossBreakdown:
    """Detached per-batch loss diagnostics for the metrics log."""

    l_ao: float
    l_nreg: float
    total: float
    n_high: int
    n_low: int
    per_class_counts: tuple[int, ...]
