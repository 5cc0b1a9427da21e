"""Hybrid quantum-classical image super-resolution with shifted quantum window attention."""

from .errors import (
    CapacityError,
    FormatError,
    NumericalFailure,
    QuietSRError,
    StructuralError,
    ValidationError,
)
from .model import ModelConfig, ModelParams, forward, init_params, load_checkpoint, save_checkpoint

__all__ = [
    "CapacityError",
    "FormatError",
    "ModelConfig",
    "ModelParams",
    "NumericalFailure",
    "QuietSRError",
    "StructuralError",
    "ValidationError",
    "forward",
    "init_params",
    "load_checkpoint",
    "save_checkpoint",
]

__version__ = "0.1.0"
