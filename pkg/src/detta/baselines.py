"""Reference policies the adaptive method is compared against."""

from __future__ import annotations

from typing import Optional

import numpy as np
import torch

from .adaptation import (
    MonoTTA,
    StepOutput,
    StreamPolicy,
    batch_stat_normalization,
    resolve_learning_rate,
    select_adaptable_parameters,
)
from .objectives import LossBreakdown, bernoulli_entropy

__all__ = ["SourceOnly", "BNAdapt", "EntropyMinimization", "POLICIES"]


class SourceOnly(StreamPolicy):
    """Frozen source model: eval-mode forward, no parameter or buffer change."""

    name = "source_only"

    def __init__(self, model, eta: float = 0.05, n_max: int = 20):
        self.model = model
        self.eta = eta
        self.n_max = n_max

    def _setup(self) -> None:
        self.params_ = select_adaptable_parameters(self.model)
        self._image_offset = 0
        self.metrics_log_ = []

    def process_batch(self, images: np.ndarray) -> StepOutput:
        x = self._to_tensor(images)
        self.model.eval()
        with torch.no_grad():
            heatmap, sizes, score_batch, _ = self._decode(x, self.n_max)
        detections = self._report(heatmap, sizes, score_batch)
        mean_score, n_above_gamma, n_valid = self._batch_stats(score_batch, detections, 0.2)
        return StepOutput(
            detections=detections,
            breakdown=None,
            alpha=None,
            mean_score=mean_score,
            mean_negative_score=None,
            n_above_gamma=n_above_gamma,
            n_valid_slots=n_valid,
            stepped=False,
        )


class BNAdapt(SourceOnly):
    """Normalization-statistics adaptation: the forward pass normalizes with
    current-batch moments; no gradient step, running buffers untouched."""

    name = "bn_adapt"

    def process_batch(self, images: np.ndarray) -> StepOutput:
        x = self._to_tensor(images)
        self.model.eval()
        with torch.no_grad(), batch_stat_normalization(self.model):
            heatmap, sizes, score_batch, _ = self._decode(x, self.n_max)
        detections = self._report(heatmap, sizes, score_batch)
        mean_score, n_above_gamma, n_valid = self._batch_stats(score_batch, detections, 0.2)
        return StepOutput(
            detections=detections,
            breakdown=None,
            alpha=None,
            mean_score=mean_score,
            mean_negative_score=None,
            n_above_gamma=n_above_gamma,
            n_valid_slots=n_valid,
            stepped=False,
        )


class EntropyMinimization(StreamPolicy):
    """Entropy minimization over detection confidences.

    Treats every reported slot score as a Bernoulli variable and takes one
    momentum-SGD step per batch on the mean entropy of slots with s >= eta,
    updating normalization affine parameters only.
    """

    name = "entropy_min"

    def __init__(
        self,
        model,
        eta: float = 0.05,
        n_max: int = 20,
        learning_rate: Optional[float] = None,
        momentum: float = 0.9,
    ):
        self.model = model
        self.eta = eta
        self.n_max = n_max
        self.learning_rate = learning_rate
        self.momentum = momentum

    def _setup(self) -> None:
        lr = resolve_learning_rate(self.model, self.learning_rate)
        self.params_ = select_adaptable_parameters(self.model)
        self.optimizer_ = torch.optim.SGD(self.params_.handles, lr=lr, momentum=self.momentum)
        self._image_offset = 0
        self.metrics_log_ = []

    def process_batch(self, images: np.ndarray) -> StepOutput:
        x = self._to_tensor(images)
        with batch_stat_normalization(self.model):
            heatmap, sizes, score_batch, _ = self._decode(x, self.n_max)
        detections = self._report(heatmap, sizes, score_batch)

        eligible = score_batch.valid & (score_batch.scores >= self.eta)
        stepped = bool(eligible.any())
        loss_value = 0.0
        if stepped:
            loss = bernoulli_entropy(score_batch.scores[eligible]).mean()
            self.optimizer_.zero_grad()
            loss.backward()
            self.optimizer_.step()
            loss_value = float(loss.detach().item())

        mean_score, n_above_gamma, n_valid = self._batch_stats(score_batch, detections, 0.2)
        breakdown = LossBreakdown(
            l_ao=0.0,
            l_nreg=0.0,
            total=loss_value,
            n_high=int(eligible.sum().item()),
            n_low=0,
            per_class_counts=(),
        )
        return StepOutput(
            detections=detections,
            breakdown=breakdown,
            alpha=None,
            mean_score=mean_score,
            mean_negative_score=None,
            n_above_gamma=n_above_gamma,
            n_valid_slots=n_valid,
            stepped=stepped,
        )


POLICIES = {
    SourceOnly.name: SourceOnly,
    BNAdapt.name: BNAdapt,
    EntropyMinimization.name: EntropyMinimization,
    MonoTTA.name: MonoTTA,
}
