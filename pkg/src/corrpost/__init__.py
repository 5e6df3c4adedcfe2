"""Correlation filters with a CNN post-processor for the correlation response."""
from .errors import (ConfigError, CorrpostError, DataError, DegenerateFilterError,
                     NumericError)

__version__ = "0.1.0"

__all__ = ["ConfigError", "CorrpostError", "DataError", "DegenerateFilterError", "NumericError",
           "__version__"]
