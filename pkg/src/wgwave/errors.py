"""Exception hierarchy shared across the package.

The CLI maps these onto exit codes: usage problems exit 1, data/shape
problems exit 2, numeric failures exit 3.
"""


class WgwaveError(Exception):
    """Base class for all package errors."""


class ShapeError(WgwaveError, ValueError):
    """Tensor arguments have incompatible or invalid shapes."""


class ConfigError(WgwaveError, ValueError):
    """A configuration value violates an invariant."""


class DataError(WgwaveError, ValueError):
    """A file or dataset is malformed, truncated, or mismatched."""


class NumericError(WgwaveError, ArithmeticError):
    """A numeric failure: NaN/Inf loss, singular matrix, zero-energy reference."""


class StateError(WgwaveError, RuntimeError):
    """Optimizer or model state is inconsistent (e.g. missing gradient)."""
