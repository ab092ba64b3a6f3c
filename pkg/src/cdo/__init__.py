"""Unsupervised image anomaly localization by collaborative discrepancy optimization.

A frozen expert network and a trainable apprentice map images into two feature
domains. The apprentice is trained to agree with the expert on normal pixels
and to disagree on synthetically perturbed ones, with tail-aware weighting, so
that real anomalies land far out in the discrepancy distribution at test time.
"""

from .data import (
    DatasetSpec,
    IMAGENET_MEAN,
    IMAGENET_STD,
    Sample,
    denormalize,
    generate_toy_dataset,
    load_mvtec_category,
    preprocess,
    resize_mask,
    split_samples,
)
from .losses import (
    DDBatch,
    EmptySyntheticSetWarning,
    LossMode,
    WeightBatch,
    baseline_loss,
    cdo_loss,
    mom_loss,
    oom_weights,
    pool_discrepancies,
    training_loss,
)
from .metrics import (
    AggregateStat,
    DDStats,
    MetricsReport,
    ScoredSet,
    aupro,
    auroc_pixel,
    dd_stats,
    validate_report,
)
from .models import (
    ApprenticeModel,
    DiscrepancyField,
    ExpertModel,
    FeaturePyramid,
    apprentice_from_checkpoint,
    discrepancy,
    load_checkpoint,
    normalize_features,
    save_checkpoint,
    state_hash,
)
from .perturbation import (
    PerturbationConfig,
    PerturbationOutcome,
    partition_pixels,
    perturb,
    perturb_batch,
)
from .scoring import (
    AnomalyMap,
    anomaly_map,
    anomaly_map_batch,
    image_score,
    read_heatmap_png,
    write_heatmap_png,
)
from .training import (
    EpochLog,
    RunConfig,
    TrainResult,
    evaluate_last_k,
    score_test_set,
    train,
)

__version__ = "0.1.0"

__all__ = [
    "AggregateStat",
    "AnomalyMap",
    "ApprenticeModel",
    "DDBatch",
    "DDStats",
    "DatasetSpec",
    "DiscrepancyField",
    "EmptySyntheticSetWarning",
    "EpochLog",
    "ExpertModel",
    "FeaturePyramid",
    "IMAGENET_MEAN",
    "IMAGENET_STD",
    "LossMode",
    "MetricsReport",
    "PerturbationConfig",
    "PerturbationOutcome",
    "RunConfig",
    "Sample",
    "ScoredSet",
    "TrainResult",
    "WeightBatch",
    "anomaly_map",
    "anomaly_map_batch",
    "apprentice_from_checkpoint",
    "aupro",
    "auroc_pixel",
    "baseline_loss",
    "cdo_loss",
    "dd_stats",
    "denormalize",
    "discrepancy",
    "evaluate_last_k",
    "generate_toy_dataset",
    "image_score",
    "load_checkpoint",
    "load_mvtec_category",
    "mom_loss",
    "normalize_features",
    "oom_weights",
    "partition_pixels",
    "perturb",
    "perturb_batch",
    "pool_discrepancies",
    "preprocess",
    "read_heatmap_png",
    "resize_mask",
    "save_checkpoint",
    "score_test_set",
    "split_samples",
    "state_hash",
    "train",
    "training_loss",
    "validate_report",
    "write_heatmap_png",
]
