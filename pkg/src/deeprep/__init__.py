"""Encoder-decoder Transformer on numpy with pluggable layer-fusion strategies."""

from .config import AggFn, ConfigError, FusionStrategy, ModelConfig, ResidualMode, Strategy, TrainConfig
from .model import Model
from .tensor import DimensionError, NumericalError, Tensor

__all__ = [
    "AggFn", "ConfigError", "DimensionError", "FusionStrategy", "Model", "ModelConfig",
    "NumericalError", "ResidualMode", "Strategy", "Tensor", "TrainConfig",
]
