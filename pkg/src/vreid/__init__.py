"""Deterministic vehicle re-identification engine on a float64 autodiff core."""

from .errors import (
    CheckpointError,
    ConfigError,
    DegenerateBatchError,
    DivergenceError,
    LabelError,
    ManifestError,
    NonFiniteError,
    PairingError,
    PhaseOrderError,
    ShapeError,
    VreidError,
)
from .tensor import Tape, Tensor, backward

__all__ = [
    "Tensor",
    "Tape",
    "backward",
    "VreidError",
    "ShapeError",
    "DegenerateBatchError",
    "LabelError",
    "NonFiniteError",
    "PairingError",
    "ConfigError",
    "ManifestError",
    "CheckpointError",
    "PhaseOrderError",
    "DivergenceError",
]

__version__ = "0.1.0"
