"""Fully test-time adaptation for a toy center-point detector.

The package covers the full loop: scene generation, detector training,
corruption streams, adaptation policies, and AP-based evaluation.
"""

from .adaptation import (
    AdaptableParameterSet,
    MonoTTA,
    StepOutput,
    TTAConfig,
    batch_stat_normalization,
    resolve_learning_rate,
    select_adaptable_parameters,
)
from .baselines import POLICIES, BNAdapt, EntropyMinimization, SourceOnly
from .corruptions import CORRUPTION_KINDS, CorruptionSpec, apply_corruption
from .decoding import (
    Detection,
    HeatmapBatch,
    MultiClassScoreBatch,
    ScoreBatch,
    extract_peaks,
)
from .detector import (
    CenterPointDetector,
    TrainConfig,
    build_detector,
    dataset_ground_truth,
    evaluate_detector,
    load_checkpoint,
    save_checkpoint,
    train_detector,
)
from .evaluation import (
    APResult,
    GroundTruthBox,
    average_precision_r40,
    iou,
    match_detections,
    score_histogram,
)
from .harness import (
    ConfigError,
    CorruptionSetting,
    ExperimentConfig,
    ExperimentResult,
    MetricsRecord,
    load_config,
    render_report,
    run_experiment,
    save_config,
)
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
from .scenes import (
    CLASS_NAMES,
    SceneDataset,
    SceneObject,
    generate_scenes,
    load_dataset,
    save_dataset,
)
from .streams import StreamManifest, build_stream, read_manifest, write_manifest

__version__ = "0.1.0"

__all__ = [
    "AdaptableParameterSet",
    "APResult",
    "BNAdapt",
    "CenterPointDetector",
    "build_detector",
    "CLASS_NAMES",
    "ConfigError",
    "CORRUPTION_KINDS",
    "CorruptionSetting",
    "CorruptionSpec",
    "Detection",
    "EntropyMinimization",
    "ExperimentConfig",
    "ExperimentResult",
    "GroundTruthBox",
    "HeatmapBatch",
    "LossBreakdown",
    "MetricsRecord",
    "MonoTTA",
    "MultiClassScoreBatch",
    "POLICIES",
    "SceneDataset",
    "SceneObject",
    "ScoreBatch",
    "SourceOnly",
    "StepOutput",
    "StreamManifest",
    "TTAConfig",
    "ThresholdState",
    "TrainConfig",
    "adaptive_optimization_loss",
    "apply_corruption",
    "average_precision_r40",
    "batch_mean_score",
    "batch_stat_normalization",
    "bernoulli_entropy",
    "build_stream",
    "combined_loss",
    "dataset_ground_truth",
    "evaluate_detector",
    "extract_peaks",
    "generate_scenes",
    "iou",
    "load_checkpoint",
    "load_config",
    "load_dataset",
    "match_detections",
    "negative_regularization_loss",
    "read_manifest",
    "render_report",
    "resolve_learning_rate",
    "run_experiment",
    "sample_negative_classes",
    "save_checkpoint",
    "save_config",
    "save_dataset",
    "score_histogram",
    "select_adaptable_parameters",
    "train_detector",
    "update_threshold",
    "write_manifest",
]
