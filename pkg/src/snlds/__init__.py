"""Collapsed amortized variational inference for switching nonlinear dynamical systems."""

import jax

# every array in the package is float64; the oracle tests rely on it
jax.config.update("jax_enable_x64", True)

from snlds.errors import (  # noqa: E402
    ConfigurationError,
    DivergenceError,
    NumericError,
    SnldsError,
    UsageError,
)

__version__ = "0.1.0"

__all__ = [
    "ConfigurationError",
    "DivergenceError",
    "NumericError",
    "SnldsError",
    "UsageError",
    "__version__",
]
