"""Parkinson's disease severity staging from foot-sensor gait signals with a
hybrid 1D ConvNet / Transformer classifier."""

from .model import ModelConfig, HybridModel, apply_ablation, build_model, forward
from .numerics import Tensor, backward
from .training import TrainConfig, fit

__all__ = [
    "HybridModel",
    "ModelConfig",
    "Tensor",
    "TrainConfig",
    "apply_ablation",
    "backward",
    "build_model",
    "fit",
    "forward",
]

__version__ = "0.1.0"
