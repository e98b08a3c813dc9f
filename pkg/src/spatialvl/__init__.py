"""Spatial-relation-aware vision-and-language pre-training at desk scale."""

from spatialvl.errors import NumericError, ValidationError

__version__ = "0.1.0"

__all__ = ["NumericError", "ValidationError", "__version__"]
