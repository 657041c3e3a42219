"""Desk-scale laboratory for SimSiam, SimSiam K-aug and EnSiam pretraining."""

from siamlab.errors import (
    ConfigurationError,
    DegenerateInputError,
    IngestionError,
    InputError,
    IntegrityError,
    NumericalError,
    SiamLabError,
)

__version__ = "0.1.0"

__all__ = [
    "ConfigurationError",
    "DegenerateInputError",
    "IngestionError",
    "InputError",
    "IntegrityError",
    "NumericalError",
    "SiamLabError",
]
