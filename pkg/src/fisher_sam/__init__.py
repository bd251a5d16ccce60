"""Fisher-metric sharpness-aware minimisation on flat parameter vectors."""

from .model_api import Batch, DifferentiableModel, UnsupportedError
from .optim import OptimConfig, OptimState, step
from .params import DimensionError, NumericError, RandomSource

__all__ = [
    "Batch",
    "DifferentiableModel",
    "DimensionError",
    "NumericError",
    "OptimConfig",
    "OptimState",
    "RandomSource",
    "UnsupportedError",
    "step",
]
