"""Valence-arousal estimation with soft-prompt region labels.

A small numpy autodiff engine drives modality projections, GRU/TCN temporal
encoders, cross-modal attention with gated fusion, and a joint CCC + KL
objective trained on synthetic stand-ins for precomputed backbone features.
"""

from .labels import GridConfig, grid_regions, soft_label, soft_labels
from .model import ModelConfig, VAModel
from .objectives import ccc, ccc_loss, kl_loss, total_loss
from .trainer import TrainConfig, ablate, evaluate, train

__version__ = "0.1.0"

__all__ = [
    "GridConfig",
    "ModelConfig",
    "TrainConfig",
    "VAModel",
    "ablate",
    "ccc",
    "ccc_loss",
    "evaluate",
    "grid_regions",
    "kl_loss",
    "soft_label",
    "soft_labels",
    "total_loss",
    "train",
]
