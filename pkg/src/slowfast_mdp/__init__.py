"""Slow-fast interacting particle systems: averaging and moderate deviations."""

__version__ = "0.1.0"

from .errors import (AssumptionViolation, ConfigError, NumericalFault,  # noqa: E402
                     SlowFastError)
from .measures import MeasureHandle  # noqa: E402
from .model import BUILTINS, ModelSpec, build_model, validate_assumptions  # noqa: E402

__all__ = ["AssumptionViolation", "BUILTINS", "ConfigError", "MeasureHandle", "ModelSpec",
           "NumericalFault", "SlowFastError", "build_model", "validate_assumptions",
           "__version__"]
