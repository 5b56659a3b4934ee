"""Multimodal training with unimodal testing: correlation alignment between
per-modality 3-D convolutional networks, gated by a focal weight."""

from .alignment import (
    FocalGate,
    LossBreakdown,
    NormalizedFeatureMap,
    correlation_matrix,
    focal_rho,
    normalize_feature_map,
    ssa_loss,
    ssa_loss_grad,
    total_objective,
)
from .numerics import RngStream, splitmix64

__version__ = "0.1.0"

__all__ = [
    "FocalGate",
    "LossBreakdown",
    "NormalizedFeatureMap",
    "RngStream",
    "correlation_matrix",
    "focal_rho",
    "normalize_feature_map",
    "splitmix64",
    "ssa_loss",
    "ssa_loss_grad",
    "total_objective",
]
