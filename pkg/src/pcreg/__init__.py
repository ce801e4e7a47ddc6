"""Learned partial-to-partial point-cloud registration with an ICP baseline."""

from .errors import (
    CheckpointError,
    DegenerateError,
    FormatError,
    ParameterError,
    ParseError,
    PcregError,
    ShapeError,
    TrainingError,
    ValidationError,
)
from .geometry import PointCloud, RigidTransform

__version__ = "0.1.0"

__all__ = [
    "CheckpointError",
    "DegenerateError",
    "FormatError",
    "ParameterError",
    "ParseError",
    "PcregError",
    "PointCloud",
    "RigidTransform",
    "ShapeError",
    "TrainingError",
    "ValidationError",
]
