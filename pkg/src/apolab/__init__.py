"""Preference-optimization dynamics on small synthetic sequence tasks."""

from .errors import InputDomainError, NoSeparation, NumericFailure, UndefinedRate

__version__ = "0.1.0"

__all__ = ["InputDomainError", "NoSeparation", "NumericFailure", "UndefinedRate", "__version__"]
