"""Streaming test-time adaptation engine and the main adaptation policy.

Policies follow the estimator convention: hyperparameters go in the
constructor, `fit_predict(stream)` consumes an iterator of image batches
exactly once and returns the detections reported along the way.  Fitted
attributes (`metrics_log_`, `threshold_trajectory_`, ...) end in an
underscore.

Only normalization-layer affine parameters are ever updated; everything
else stays bit-identical, which `AdaptableParameterSet.frozen_digest`
makes checkable.
"""

from __future__ import annotations

import hashlib
from contextlib import contextmanager
from dataclasses import asdict, dataclass, field
from typing import Iterable, Iterator, Optional

import numpy as np
import torch
from sklearn.base import BaseEstimator
from torch import nn
from torch.nn.modules.batchnorm import _BatchNorm
from torch.nn.modules.instancenorm import _InstanceNorm

from .decoding import Detection, extract_peaks
from .objectives import (
    LossBreakdown,
    ThresholdState,
    adaptive_optimization_loss,
    batch_mean_score,
    bernoulli_entropy,
    combined_loss,
    negative_regularization_loss,
    sample_negative_classes,
    update_threshold,
)

__all__ = [
    "NORMALIZATION_TYPES",
    "AdaptableParameterSet",
    "select_adaptable_parameters",
    "batch_stat_normalization",
    "TTAConfig",
    "StepOutput",
    "StreamPolicy",
    "MonoTTA",
]

NORMALIZATION_TYPES = (_BatchNorm, _InstanceNorm, nn.GroupNorm, nn.LayerNorm)


@dataclass
class AdaptableParameterSet:
    """Handles to normalization affine parameters plus the frozen remainder."""

    layer_names: list[str]
    handles: list[nn.Parameter]
    frozen_names: list[str]
    frozen: list[nn.Parameter]

    @property
    def count(self) -> int:
        return sum(p.numel() for p in self.handles)

    def snapshot(self) -> list[torch.Tensor]:
        return [p.detach().clone() for p in self.handles]

    def restore(self, snapshot: list[torch.Tensor]) -> None:
        if len(snapshot) != len(self.handles):
            raise ValueError("snapshot does not match the handle list")
        with torch.no_grad():
            for p, saved in zip(self.handles, snapshot):
                p.copy_(saved)

    def frozen_digest(self) -> str:
        """SHA-256 over the frozen parameters, in deterministic name order."""
        digest = hashlib.sha256()
        for name, p in zip(self.frozen_names, self.frozen):
            digest.update(name.encode())
            digest.update(p.detach().cpu().numpy().tobytes())
        return digest.hexdigest()


def select_adaptable_parameters(model: nn.Module) -> AdaptableParameterSet:
    """Collect affine (weight, bias) pairs of every normalization layer.

    Sets requires_grad True on the handles and False on everything else.
    Raises ValueError when the model has no affine normalization layer.
    """
    layer_names: list[str] = []
    handles: list[nn.Parameter] = []
    adaptable_ids: set[int] = set()
    for name, module in model.named_modules():
        if isinstance(module, NORMALIZATION_TYPES) and module.weight is not None:
            layer_names.append(name)
            handles.extend([module.weight, module.bias])
            adaptable_ids.update(id(p) for p in (module.weight, module.bias))
    if not handles:
        raise ValueError("model has no normalization layer with affine parameters")

    frozen_names, frozen = [], []
    for name, p in model.named_parameters():
        if id(p) in adaptable_ids:
            p.requires_grad_(True)
        else:
            p.requires_grad_(False)
            frozen_names.append(name)
            frozen.append(p)
    return AdaptableParameterSet(
        layer_names=layer_names, handles=handles, frozen_names=frozen_names, frozen=frozen
    )


@contextmanager
def batch_stat_normalization(model: nn.Module) -> Iterator[nn.Module]:
    """Make batch-norm layers normalize with current-batch statistics.

    Running buffers are neither read nor written inside the context: the
    layers are put in training mode with tracking disabled, which routes
    normalization through batch moments and skips every buffer update.
    All prior mode flags are restored on exit.
    """
    saved = []
    for module in model.modules():
        if isinstance(module, _BatchNorm):
            saved.append((module, module.training, module.track_running_stats))
            module.training = True
            module.track_running_stats = False
    try:
        yield model
    finally:
        for module, training, track in saved:
            module.training = training
            module.track_running_stats = track


@dataclass(frozen=True)
class TTAConfig:
    """Hyperparameters of one adaptation run."""

    learning_rate: float
    lambda_balance: float = 1.0
    beta: float = 0.1
    eta: float = 0.05
    gamma: float = 0.2
    n_max: int = 20
    batch_size: int = 16
    momentum: float = 0.9
    seed: int = 0

    def __post_init__(self) -> None:
        if not 0.0 < self.eta < self.gamma < 1.0:
            raise ValueError(
                f"need 0 < eta < gamma < 1, got eta={self.eta}, gamma={self.gamma}"
            )
        if self.lambda_balance < 0:
            raise ValueError(f"lambda_balance must be >= 0, got {self.lambda_balance}")
        if not 0.0 <= self.beta <= 1.0:
            raise ValueError(f"beta must lie in [0, 1], got {self.beta}")
        if self.learning_rate <= 0:
            raise ValueError(f"learning_rate must be > 0, got {self.learning_rate}")
        if not 0.0 <= self.momentum < 1.0:
            raise ValueError(f"momentum must lie in [0, 1), got {self.momentum}")
        if self.n_max < 1:
            raise ValueError(f"n_max must be >= 1, got {self.n_max}")
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.seed < 0:
            raise ValueError(f"seed must be >= 0, got {self.seed}")

    def to_dict(self) -> dict:
        return asdict(self)


def resolve_learning_rate(model: nn.Module, learning_rate: Optional[float]) -> float:
    """Explicit rate if given, else half the model's recorded training rate."""
    if learning_rate is not None:
        return float(learning_rate)
    meta = getattr(model, "meta", None) or {}
    base = (meta.get("train_config") or {}).get("learning_rate")
    if base is None:
        raise ValueError(
            "learning_rate not set and the model carries no training-rate metadata"
        )
    return float(base) / 2.0


@dataclass
class StepOutput:
    """Everything one processed batch reports back."""

    detections: list[Detection]
    breakdown: Optional[LossBreakdown]
    alpha: Optional[float]
    mean_score: Optional[float]
    mean_negative_score: Optional[float]
    n_above_gamma: int
    n_valid_slots: int
    stepped: bool


class StreamPolicy(BaseEstimator):
    """Shared single-pass streaming skeleton for all policies."""

    name: str = "abstract"

    # Subclasses override; base implementations keep the estimator abstract.
    def process_batch(self, images: np.ndarray) -> StepOutput:
        raise NotImplementedError

    def _setup(self) -> None:
        raise NotImplementedError

    # -- streaming loop ----------------------------------------------------

    def fit_predict(self, stream: Iterable[np.ndarray]) -> list[Detection]:
        """Consume the stream once, adapting (if applicable) batch by batch.

        Returns all reported detections; per-batch diagnostics land in
        `metrics_log_` and the full detection list also in `detections_`.
        """
        self._setup()
        self._image_offset = 0
        self.detections_: list[Detection] = []
        self.metrics_log_: list[dict] = []
        self.frozen_digest_start_ = self._frozen_digest()
        for images in stream:
            out = self.process_batch(images)
            self.detections_.extend(out.detections)
            self.metrics_log_.append(self._log_record(out))
            self._image_offset += images.shape[0]
        self.n_images_ = self._image_offset
        self.frozen_digest_end_ = self._frozen_digest()
        return self.detections_

    def _frozen_digest(self) -> Optional[str]:
        params = getattr(self, "params_", None)
        return params.frozen_digest() if params is not None else None

    def _log_record(self, out: StepOutput) -> dict:
        b = out.breakdown
        return {
            "policy": self.name,
            "step": len(self.metrics_log_) + 1,
            "alpha": out.alpha,
            "l_ao": None if b is None else b.l_ao,
            "l_nreg": None if b is None else b.l_nreg,
            "total": None if b is None else b.total,
            "n_high": None if b is None else b.n_high,
            "n_low": None if b is None else b.n_low,
            "per_class_counts": None if b is None else list(b.per_class_counts),
            "mean_score": out.mean_score,
            "mean_negative_score": out.mean_negative_score,
            "n_above_gamma": out.n_above_gamma,
            "n_detections": len(out.detections),
            "stepped": out.stepped,
        }

    # -- shared helpers ----------------------------------------------------

    def _to_tensor(self, images: np.ndarray) -> torch.Tensor:
        from .validation import check_image_batch

        arr = check_image_batch(images)
        dtype = next(self.model.parameters()).dtype
        return torch.from_numpy(np.ascontiguousarray(arr.transpose(0, 3, 1, 2))).to(dtype)

    def _decode(self, x: torch.Tensor, n_max: int):
        heatmap, sizes = self.model(x)
        score_batch, multi = extract_peaks(heatmap, n_max)
        return heatmap, sizes, score_batch, multi

    def _report(self, heatmap, sizes, score_batch) -> list[Detection]:
        return self.model.build_detections(
            heatmap, sizes, score_batch, eta=self.eta, image_index_offset=self._image_offset
        )

    @staticmethod
    def _batch_stats(score_batch, detections, gamma: float):
        with torch.no_grad():
            valid_scores = score_batch.scores[score_batch.valid]
            n_above_gamma = int((valid_scores >= gamma).sum().item())
        mean_score = (
            float(np.mean([d.score for d in detections])) if detections else None
        )
        return mean_score, n_above_gamma, int(score_batch.valid.sum().item())


class MonoTTA(StreamPolicy):
    """Threshold-adaptive confidence optimization with negative regularization.

    Per batch: forward under batch-statistics normalization, decode peaks,
    report detections from the pre-step parameters, advance the threshold
    EMA, then take one momentum-SGD step on the normalization affine
    parameters using the combined objective.
    """

    name = "monotta"

    def __init__(
        self,
        model,
        lambda_balance: float = 1.0,
        beta: float = 0.1,
        eta: float = 0.05,
        gamma: float = 0.2,
        n_max: int = 20,
        learning_rate: Optional[float] = None,
        momentum: float = 0.9,
        seed: int = 0,
    ):
        self.model = model
        self.lambda_balance = lambda_balance
        self.beta = beta
        self.eta = eta
        self.gamma = gamma
        self.n_max = n_max
        self.learning_rate = learning_rate
        self.momentum = momentum
        self.seed = seed

    def _setup(self) -> None:
        lr = resolve_learning_rate(self.model, self.learning_rate)
        self.config_ = TTAConfig(
            learning_rate=lr,
            lambda_balance=self.lambda_balance,
            beta=self.beta,
            eta=self.eta,
            gamma=self.gamma,
            n_max=self.n_max,
            momentum=self.momentum,
            seed=self.seed,
        )
        self.params_ = select_adaptable_parameters(self.model)
        self.optimizer_ = torch.optim.SGD(
            self.params_.handles, lr=lr, momentum=self.momentum
        )
        self.state_ = ThresholdState.initial(self.gamma, self.beta)
        self.threshold_trajectory_: list[float] = []
        self._image_offset = 0
        self.metrics_log_ = []

    def process_batch(self, images: np.ndarray) -> StepOutput:
        x = self._to_tensor(images)
        with batch_stat_normalization(self.model):
            heatmap, sizes, score_batch, multi = self._decode(x, self.n_max)
        detections = self._report(heatmap, sizes, score_batch)

        # Threshold first, then the losses use the fresh alpha.
        self.state_ = update_threshold(self.state_, score_batch)
        alpha = self.state_.alpha
        self.threshold_trajectory_.append(alpha)

        l_ao = adaptive_optimization_loss(score_batch, alpha)
        neg = sample_negative_classes(
            multi, seed=_step_seed(self.seed, self.state_.step)
        )
        l_nreg, counts = negative_regularization_loss(
            multi, score_batch, neg, self.eta, alpha
        )
        total = combined_loss(l_ao, l_nreg, self.lambda_balance)

        with torch.no_grad():
            n_high = int(
                (score_batch.valid & (score_batch.scores >= alpha)).sum().item()
            )
            n_low = int(counts.sum().item())
        stepped = n_high > 0 or (self.lambda_balance > 0 and n_low > 0)
        if stepped:
            self.optimizer_.zero_grad()
            total.backward()
            self.optimizer_.step()

        breakdown = LossBreakdown(
            l_ao=float(l_ao.detach().item()),
            l_nreg=float(l_nreg.detach().item()),
            total=float(total.detach().item()),
            n_high=n_high,
            n_low=n_low,
            per_class_counts=tuple(int(c) for c in counts),
        )
        mean_score, n_above_gamma, n_valid = self._batch_stats(
            score_batch, detections, self.gamma
        )
        return StepOutput(
            detections=detections,
            breakdown=breakdown,
            alpha=alpha,
            mean_score=mean_score,
            mean_negative_score=_mean_negative_score(multi, score_batch, neg, self.eta),
            n_above_gamma=n_above_gamma,
            n_valid_slots=n_valid,
            stepped=stepped,
        )


def _step_seed(seed: int, step: int) -> int:
    """Deterministic per-step seed for negative-class draws."""
    return int(np.random.SeedSequence([int(seed), int(step)]).generate_state(1)[0])


def _mean_negative_score(multi, score_batch, negative_classes, eta: float):
    """Mean sampled-negative-class score over reported slots (s >= eta)."""
    with torch.no_grad():
        window = score_batch.valid & (score_batch.scores >= eta)
        if not bool(window.any()):
            return None
        neg = negative_classes[window]
        s_neg = multi.class_scores[window].gather(1, neg.unsqueeze(1)).squeeze(1)
        return float(s_neg.mean().item())
