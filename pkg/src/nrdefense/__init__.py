"""Neural-rejection defense and universal adversarial perturbations for
radio modulation classification."""

from nrdefense.errors import (
    ArgumentError,
    CalibrationError,
    ConfigurationError,
    ConvergenceError,
    FormatError,
    StratificationError,
    TrainingError,
)

__version__ = "0.1.0"

__all__ = [
    "ArgumentError",
    "CalibrationError",
    "ConfigurationError",
    "ConvergenceError",
    "FormatError",
    "StratificationError",
    "TrainingError",
]
