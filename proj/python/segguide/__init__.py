"""SegGuidedNet: 3D residual U-Net with a supervised attention gate."""

import torch  # noqa: F401  loads libtorch before the extension

from ._segguide import (
    CHECKPOINT_FORMAT_VERSION,
    METRICS_SCHEMA_VERSION,
    Model,
    ValidationError,
    attention_gate_parameter_count,
    attention_loss,
    cosine_lr,
    cross_entropy_loss,
    dice_loss,
    dsc,
    evaluate_case,
    generate_phantom,
    generate_phantom_cohort,
    hd95,
    init_checkpoint,
    instantiated_parameter_count,
    load_subject_dir,
    network_parameter_count,
    percentile,
    split_ids,
)

__all__ = [
    "CHECKPOINT_FORMAT_VERSION",
    "METRICS_SCHEMA_VERSION",
    "Model",
    "ValidationError",
    "attention_gate_parameter_count",
    "attention_loss",
    "cosine_lr",
    "cross_entropy_loss",
    "dice_loss",
    "dsc",
    "evaluate_case",
    "generate_phantom",
    "generate_phantom_cohort",
    "hd95",
    "init_checkpoint",
    "instantiated_parameter_count",
    "load_subject_dir",
    "network_parameter_count",
    "percentile",
    "split_ids",
]
