"""Neural-network implied-volatility maps for Heston and rough Bergomi, with LM and MCMC calibration."""
from .errors import (ConvergenceError, DeepVolError, InputError, NumericalError)

__all__ = ["ConvergenceError", "DeepVolError", "InputError", "NumericalError"]
__version__ = "0.1.0"
