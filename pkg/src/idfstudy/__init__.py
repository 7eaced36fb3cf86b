"""Stationary and nonstationary IDF curves from disaggregated, bias-corrected climate model ensembles."""

__version__ = "0.1.0"

from .data import AnnualMaxSeries, DepthSeries, EnsembleSet  # noqa: E402
from .errors import (ContractError, ConvergenceError, EstimationError, IdfError, ParseError,  # noqa: E402
                     ValidationError)
from .gev import GevParams  # noqa: E402

__all__ = [
    "AnnualMaxSeries", "DepthSeries", "EnsembleSet", "GevParams",
    "IdfError", "ContractError", "ValidationError", "ParseError", "EstimationError", "ConvergenceError",
    "__version__",
]
