"""Exception types shared across the package."""


class RemaskError(Exception):
    """Base class for all package errors."""


class InvalidScheduleError(RemaskError, ValueError):
    """Mask schedule request is infeasible (T=0 or T>N)."""


class InfeasibleSampleError(RemaskError, ValueError):
    """Weighted sampling asked for more draws than positive-weight items."""


class EnumerationTooLargeError(RemaskError, ValueError):
    """K^N exceeds the exact-enumeration budget."""


class ImpossibleEvidenceError(RemaskError, ValueError):
    """Revealed cells have zero probability under the condition."""


class InvalidComponentError(RemaskError, ValueError):
    """Component label not part of the condition."""


class ShapeError(RemaskError, ValueError):
    """Array dimensions inconsistent with the model or grid."""


class ConfigurationError(RemaskError, ValueError):
    """Invalid run/strategy configuration (e.g. TCTS without a selector)."""


class TrainingFailureError(RemaskError, RuntimeError):
    """Training diverged (non-finite loss)."""


class UndefinedAucError(RemaskError, ValueError):
    """ROC-AUC undefined because labels contain a single class."""


class EmptyInputError(RemaskError, ValueError):
    """Metric received an empty sample list or region."""


class InvalidTilingError(RemaskError, ValueError):
    """Tiling window does not fit inside the grid."""
