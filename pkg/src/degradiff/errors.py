"""Exception hierarchy shared across the package."""


class DegradiffError(Exception):
    """Base class for all package errors."""


class ConfigurationError(DegradiffError, ValueError):
    """Inconsistent or invalid configuration."""


class LengthError(DegradiffError, ValueError):
    """Signal too short (or lengths disagree)."""


class RangeError(DegradiffError, ValueError):
    """Parameter outside its supported range."""


class GeometryError(DegradiffError, ValueError):
    """Invalid room geometry."""


class DegenerateInputError(DegradiffError, ValueError):
    """Silent or otherwise degenerate input signal."""


class EstimationError(DegradiffError, RuntimeError):
    """An estimator could not produce a value."""


class DivergenceError(DegradiffError, FloatingPointError):
    """Non-finite state encountered while integrating."""


class NumericError(DegradiffError, FloatingPointError):
    """Non-finite loss or gradient."""


class VersioningError(DegradiffError, ValueError):
    """Checkpoint format or config mismatch."""
