"""Exception hierarchy shared across the package.

Validation-type errors map to CLI exit code 1, numeric failures to exit
code 2.
"""


class SurvFusionError(Exception):
    """Base class for all package-specific errors."""


class ValidationError(SurvFusionError, ValueError):
    """Bad user input: malformed data, inconsistent arguments, bad config."""


class ShapeError(ValidationError):
    """Array dimensions incompatible with the requested operation."""


class ConfigError(ValidationError):
    """Inconsistent or out-of-range configuration values."""


class FormatError(ValidationError):
    """Malformed file content.  ``offset`` is the byte position, when known."""

    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} (byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class StratificationError(ValidationError):
    """Fold splitting cannot honor the event-stratification contract."""


class NumericError(SurvFusionError, ArithmeticError):
    """Non-finite values or numerically undefined quantities."""


class UndefinedMetricError(NumericError):
    """A metric or loss has no defined value for the given sample."""


class RankDeficiencyError(NumericError):
    """Observed information matrix is singular; names the offending column."""


class ConvergenceError(NumericError):
    """Iterative fit failed to converge or diverged."""
