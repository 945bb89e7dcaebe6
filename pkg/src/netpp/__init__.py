"""Spatio-temporal Hawkes processes on street networks with attention-based
mark interactions."""

__version__ = "0.1.0"

from .errors import (DomainError, InternalError, NetppError, NumericError, PreconditionError,
                     StructuralError, SupercriticalError)
from .network import DistanceIndex, NetworkLocation, StreetNetwork, net_distance
from .zoning import DEFAULT_MARKS, EventSet, MarkSpace, make_mark, unmake_mark
from .intensity import HawkesState, PreparedSequence, hawkes_loglik, intensity
from .model import Model, load_model, save_model
from .training import TrainConfig, fit

__all__ = [
    "DomainError", "InternalError", "NetppError", "NumericError", "PreconditionError",
    "StructuralError", "SupercriticalError", "DistanceIndex", "NetworkLocation", "StreetNetwork",
    "net_distance", "DEFAULT_MARKS", "EventSet", "MarkSpace", "make_mark", "unmake_mark",
    "HawkesState", "PreparedSequence", "hawkes_loglik", "intensity", "Model", "load_model",
    "save_model", "TrainConfig", "fit",
]
