"""Multi-scale graph convolution with residual cross fusion for hyperspectral pixel classification."""

from .errors import (
    ConfigurationError,
    DataError,
    MgrnetError,
    NumericError,
    StructuralError,
    UsageError,
)
from .model import AblationVariant, MgrnetModel, ModelConfig, build_variant
from .tensor import Tape, Tensor, backward

__version__ = "0.1.0"

__all__ = [
    "AblationVariant",
    "ConfigurationError",
    "DataError",
    "MgrnetError",
    "MgrnetModel",
    "ModelConfig",
    "NumericError",
    "StructuralError",
    "Tape",
    "Tensor",
    "UsageError",
    "backward",
    "build_variant",
]
