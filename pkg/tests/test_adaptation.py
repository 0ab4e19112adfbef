"""Parameter selection, batch-stat normalization, and the adaptive policy."""

from __future__ import annotations

import numpy as np
import pytest
import torch
from torch import nn

from detta import (
    MonoTTA,
    TTAConfig,
    batch_stat_normalization,
    build_detector,
    resolve_learning_rate,
    select_adaptable_parameters,
)


def _model_with_meta(bias: float = -2.19):
    """Fresh detector with a recorded training rate and a chosen score level."""
    torch.manual_seed(0)
    model = build_detector()
    nn.init.constant_(model.heatmap_head.bias, bias)
    model.meta = {"train_config": {"learning_rate": 2e-3}}
    return model


def _batch(n: int = 4, seed: int = 0) -> np.ndarray:
    rng = np.random.default_rng(seed)
    return rng.random((n, 64, 64, 3))


def _state_bytes(model) -> bytes:
    return b"".join(
        p.detach().cpu().numpy().tobytes() for _, p in sorted(model.state_dict().items())
    )


# -- select_adaptable_parameters ------------------------------------------------


def test_selection_finds_128_scalars():
    """4 norm layers x (weight + bias) x 16 channels = 128 parameters."""
    params = select_adaptable_parameters(_model_with_meta())
    assert params.count == 128
    assert len(params.layer_names) == 4
    assert len(params.handles) == 8  # weight and bias per layer


def test_selection_sets_requires_grad_flags():
    model = _model_with_meta()
    params = select_adaptable_parameters(model)
    for p in params.handles:
        assert p.requires_grad
    for p in params.frozen:
        assert not p.requires_grad
    total = sum(p.numel() for _, p in model.named_parameters())
    assert params.count + sum(p.numel() for p in params.frozen) == total


def test_selection_rejects_model_without_norm_layers():
    with pytest.raises(ValueError):
        select_adaptable_parameters(nn.Sequential(nn.Linear(4, 4), nn.ReLU()))


def test_snapshot_restore_is_bit_exact():
    model = _model_with_meta()
    params = select_adaptable_parameters(model)
    saved = params.snapshot()
    with torch.no_grad():
        for p in params.handles:
            p.add_(0.731)
    assert not torch.equal(params.handles[0], saved[0])
    params.restore(saved)
    for p, s in zip(params.handles, saved):
        assert torch.equal(p, s)
    with pytest.raises(ValueError):
        params.restore(saved[:-1])


def test_frozen_digest_tracks_only_frozen_parameters():
    model = _model_with_meta()
    params = select_adaptable_parameters(model)
    digest = params.frozen_digest()
    assert digest == params.frozen_digest()  # stable across calls
    with torch.no_grad():
        params.handles[0].add_(1.0)  # adaptable change: digest unaffected
    assert params.frozen_digest() == digest
    with torch.no_grad():
        model.heatmap_head.weight.add_(1e-3)  # frozen change: digest moves
    assert params.frozen_digest() != digest


# -- batch_stat_normalization ----------------------------------------------------


def test_batch_stats_normalize_to_unit_moments():
    """Inside the context, the pre-affine output has mean 0 and var 1."""
    bn = nn.BatchNorm2d(3)
    with torch.no_grad():
        bn.weight.copy_(torch.tensor([2.0, 0.5, 1.5]))
        bn.bias.copy_(torch.tensor([1.0, -1.0, 0.3]))
        bn.running_mean.copy_(torch.tensor([5.0, -5.0, 9.0]))  # deliberately stale
        bn.running_var.copy_(torch.tensor([100.0, 100.0, 100.0]))
    bn.eval()
    x = torch.randn(8, 3, 16, 16, dtype=torch.float64) * 2.0 + 3.0
    bn = bn.double()
    buffers_before = {k: v.clone() for k, v in bn.state_dict().items() if "running" in k or "batches" in k}

    with batch_stat_normalization(bn):
        assert bn.training and not bn.track_running_stats
        out = bn(x)
    normalized = (out - bn.bias.view(1, -1, 1, 1)) / bn.weight.view(1, -1, 1, 1)
    mean = normalized.mean(dim=(0, 2, 3))
    var = normalized.var(dim=(0, 2, 3), unbiased=False)
    assert torch.allclose(mean, torch.zeros(3, dtype=torch.float64), atol=1e-4)
    assert torch.allclose(var, torch.ones(3, dtype=torch.float64), atol=1e-4)

    # Buffers untouched and mode flags restored.
    for k, v in buffers_before.items():
        assert torch.equal(bn.state_dict()[k], v), f"{k} changed"
    assert not bn.training and bn.track_running_stats


def test_context_restores_modes_on_error():
    bn = nn.BatchNorm2d(2)
    bn.eval()
    with pytest.raises(RuntimeError):
        with batch_stat_normalization(bn):
            raise RuntimeError("boom")
    assert not bn.training and bn.track_running_stats


def test_batch_stat_forward_ignores_running_buffers():
    """Identical batches give identical outputs regardless of stored stats."""
    bn1, bn2 = nn.BatchNorm2d(2), nn.BatchNorm2d(2)
    with torch.no_grad():
        bn2.running_mean.fill_(42.0)
        bn2.running_var.fill_(0.01)
    x = torch.randn(4, 2, 8, 8)
    with batch_stat_normalization(bn1):
        y1 = bn1(x)
    with batch_stat_normalization(bn2):
        y2 = bn2(x)
    assert torch.equal(y1, y2)


# -- TTAConfig / resolve_learning_rate --------------------------------------------


def test_tta_config_validates_threshold_ordering():
    TTAConfig(learning_rate=1e-3)  # defaults are valid
    with pytest.raises(ValueError):
        TTAConfig(learning_rate=1e-3, eta=0.3, gamma=0.2)
    with pytest.raises(ValueError):
        TTAConfig(learning_rate=1e-3, eta=0.2, gamma=0.2)
    with pytest.raises(ValueError):
        TTAConfig(learning_rate=0.0)
    with pytest.raises(ValueError):
        TTAConfig(learning_rate=1e-3, beta=1.1)
    with pytest.raises(ValueError):
        TTAConfig(learning_rate=1e-3, momentum=1.0)
    with pytest.raises(ValueError):
        TTAConfig(learning_rate=1e-3, n_max=0)
    with pytest.raises(ValueError):
        TTAConfig(learning_rate=1e-3, batch_size=0)
    with pytest.raises(ValueError):
        TTAConfig(learning_rate=1e-3, seed=-1)


def test_resolve_learning_rate_prefers_explicit_value():
    model = _model_with_meta()
    assert resolve_learning_rate(model, 0.05) == 0.05


def test_resolve_learning_rate_halves_recorded_training_rate():
    model = _model_with_meta()
    assert resolve_learning_rate(model, None) == pytest.approx(1e-3)


def test_resolve_learning_rate_requires_metadata():
    model = build_detector()
    model.meta = {}
    with pytest.raises(ValueError):
        resolve_learning_rate(model, None)


# -- MonoTTA streaming behavior ----------------------------------------------------


def test_first_alpha_is_gamma():
    policy = MonoTTA(_model_with_meta(bias=1.0), gamma=0.2, seed=0)
    policy.fit_predict([_batch()])
    assert policy.threshold_trajectory_[0] == 0.2
    assert policy.metrics_log_[0]["alpha"] == 0.2


def test_reported_detections_precede_the_step():
    """Detections come from the pre-step parameters on every batch."""
    model = _model_with_meta(bias=1.0)
    reference = _model_with_meta(bias=1.0)
    reference.load_state_dict(model.state_dict())

    x = _batch()
    policy = MonoTTA(model, seed=0)
    detections = policy.fit_predict([x])
    assert policy.metrics_log_[0]["stepped"], "high-confidence batch must step"

    # Rebuild the same report from the untouched reference model.  The
    # forward runs with gradients enabled like the policy's does; the
    # grad-free kernel rounds batch statistics differently at float32 ulp.
    from detta import extract_peaks

    reference.eval()
    tensor = torch.from_numpy(np.ascontiguousarray(x.transpose(0, 3, 1, 2))).to(torch.float32)
    with batch_stat_normalization(reference):
        heatmap, sizes = reference(tensor)
        score_batch, _ = extract_peaks(heatmap, n_max=20)
        expected = reference.build_detections(heatmap, sizes, score_batch, eta=0.05)
    assert len(detections) == len(expected)
    for got, want in zip(detections, expected):
        assert got.image_index == want.image_index
        assert got.class_id == want.class_id
        assert got.score == want.score
        assert got.box == want.box


def test_step_changes_only_adaptable_parameters():
    model = _model_with_meta(bias=1.0)
    params = select_adaptable_parameters(model)
    frozen_before = params.frozen_digest()
    adaptable_before = params.snapshot()

    policy = MonoTTA(model, seed=0)
    policy.fit_predict([_batch()])
    assert policy.metrics_log_[0]["stepped"]
    assert params.frozen_digest() == frozen_before
    assert policy.frozen_digest_start_ == policy.frozen_digest_end_
    moved = any(not torch.equal(p, s) for p, s in zip(params.handles, adaptable_before))
    assert moved, "adaptable parameters did not move"

    # Restoring the snapshot recovers the pre-adaptation model exactly.
    params.restore(adaptable_before)
    assert _state_bytes(model) == _state_bytes(_load_copy(model))


def _load_copy(model):
    copy = build_detector()
    copy.load_state_dict(model.state_dict())
    return copy


def test_no_selection_and_lambda_zero_leaves_parameters_unchanged():
    """Low-confidence batch with lambda 0: loss is 0 and nothing moves."""
    model = _model_with_meta()  # untrained head: scores sit near 0.1 < gamma
    before = _state_bytes(model)
    policy = MonoTTA(model, lambda_balance=0.0, seed=0)
    policy.fit_predict([_batch()])
    record = policy.metrics_log_[0]
    assert record["n_high"] == 0
    assert not record["stepped"]
    assert record["total"] == 0.0
    assert _state_bytes(model) == before


def test_metrics_log_carries_the_expected_keys():
    policy = MonoTTA(_model_with_meta(bias=1.0), seed=0)
    policy.fit_predict([_batch()])
    record = policy.metrics_log_[0]
    for key in (
        "step",
        "alpha",
        "l_ao",
        "l_nreg",
        "total",
        "n_high",
        "n_low",
        "per_class_counts",
        "mean_score",
    ):
        assert key in record, f"missing metrics key {key}"
    assert record["step"] == 1


def test_empty_stream_yields_nothing():
    policy = MonoTTA(_model_with_meta(), seed=0)
    detections = policy.fit_predict([])
    assert detections == []
    assert policy.n_images_ == 0
    assert policy.frozen_digest_start_ == policy.frozen_digest_end_


def test_image_indices_offset_across_batches():
    policy = MonoTTA(_model_with_meta(bias=1.0), seed=0)
    detections = policy.fit_predict([_batch(3, seed=1), _batch(2, seed=2)])
    indices = {d.image_index for d in detections}
    assert indices <= set(range(5))
    assert any(d.image_index >= 3 for d in detections), "second batch unreported"
    assert policy.n_images_ == 5


def test_same_seed_same_stream_is_reproducible():
    results = []
    for _ in range(2):
        model = _model_with_meta(bias=1.0)
        policy = MonoTTA(model, seed=7)
        detections = policy.fit_predict([_batch(4, seed=3), _batch(4, seed=4)])
        results.append(
            (
                [(d.image_index, d.class_id, d.score, d.box) for d in detections],
                _state_bytes(model),
                policy.threshold_trajectory_,
            )
        )
    assert results[0] == results[1]


def test_get_params_exposes_hyperparameters():
    policy = MonoTTA(_model_with_meta(), lambda_balance=0.5, beta=0.2, seed=3)
    exposed = policy.get_params()
    assert exposed["lambda_balance"] == 0.5
    assert exposed["beta"] == 0.2
    assert exposed["seed"] == 3
    clone = MonoTTA(**exposed)
    assert clone.lambda_balance == 0.5
