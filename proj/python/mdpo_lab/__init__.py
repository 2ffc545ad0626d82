# SPDX-License-Identifier: Apache-2.0
"""Python surface over the mdpo-lab core.

The heavy lifting (autodiff, the image-conditioned token model, training,
evaluation) lives in the compiled `_core` extension; this package re-exports
its operations.
"""

from ._core import (  # noqa: F401
    ConfigError,
    DomainError,
    IoError,
    SeededRng,
    ShapeError,
    TrainingError,
    ancpo_loss,
    copo_loss,
    default_train_config,
    dpo_loss,
    evaluate_checkpoint,
    generate_dataset,
    generate_dataset_jsonl,
    log_sigmoid,
    lr_at,
    mdpo_loss,
    softplus,
    train_from_config,
)

__all__ = [
    "ConfigError",
    "DomainError",
    "IoError",
    "SeededRng",
    "ShapeError",
    "TrainingError",
    "ancpo_loss",
    "copo_loss",
    "default_train_config",
    "dpo_loss",
    "evaluate_checkpoint",
    "generate_dataset",
    "generate_dataset_jsonl",
    "log_sigmoid",
    "lr_at",
    "mdpo_loss",
    "softplus",
    "train_from_config",
]
