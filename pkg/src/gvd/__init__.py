"""Cartoon/texture decomposition with spatially adaptive quadratic regularization."""

from .config import ModelConfig, load_config, parse_config
from .errors import ConvergenceError, FormatError, GVDError, NumericalError
from .grid_ops import StackedState, WeightPair

__all__ = [
    "ModelConfig", "load_config", "parse_config",
    "GVDError", "ConvergenceError", "NumericalError", "FormatError",
    "StackedState", "WeightPair",
]
__version__ = "0.1.0"
