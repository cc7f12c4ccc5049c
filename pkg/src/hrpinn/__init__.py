"""Hybrid recurrent physics-informed models with hard-constraint projection."""

from . import autodiff, battery, integrate, metrics, models, nn, projection, systems, train
from .errors import (ConfigError, ConstraintQualificationError, DivergenceError, DomainError,
                     HrpinnError, NonConvergenceError, NonDegeneracyError, SingularityError,
                     StateError, StructuralError)

__version__ = "0.1.0"

__all__ = [
    "autodiff", "battery", "integrate", "metrics", "models", "nn", "projection", "systems",
    "train", "ConfigError", "ConstraintQualificationError", "DivergenceError", "DomainError",
    "HrpinnError", "NonConvergenceError", "NonDegeneracyError", "SingularityError",
    "StateError", "StructuralError",
]
