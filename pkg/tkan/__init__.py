"""Temporal Kolmogorov-Arnold networks for silhouette gait recognition."""

from .errors import (
    CheckpointMismatchError,
    ContractError,
    FormatError,
    NumericalError,
    ProtocolError,
)
from .head import TkanCell
from .model import GaitModel
from .spline import KanLayer, SplineGrid

__all__ = [
    "CheckpointMismatchError",
    "ContractError",
    "FormatError",
    "GaitModel",
    "KanLayer",
    "NumericalError",
    "ProtocolError",
    "SplineGrid",
    "TkanCell",
]
