"""Losses, distillation weights and the two training stages."""

from .losses import kd_loss, l2_distance, total_loss, triplet_loss
from .stages import (
    BASELINE_MODES,
    StageConfig,
    TeacherCache,
    TrainResult,
    fit,
    train_baseline,
    train_stage1,
    train_stage2,
)
from .weights import KINDS, WeightScheme, weight_phi, weight_table

__all__ = [
    "BASELINE_MODES",
    "KINDS",
    "StageConfig",
    "TeacherCache",
    "TrainResult",
    "WeightScheme",
    "fit",
    "kd_loss",
    "l2_distance",
    "total_loss",
    "train_baseline",
    "train_stage1",
    "train_stage2",
    "triplet_loss",
    "weight_phi",
    "weight_table",
]
