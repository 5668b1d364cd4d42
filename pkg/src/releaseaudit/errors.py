"""Exception hierarchy shared across the toolkit.

The CLI maps these onto exit codes: ConfigError -> 2, DataError -> 3,
EstimationError -> 4.
"""


class AuditError(Exception):
    """Base class for all toolkit errors."""


class ConfigError(AuditError):
    """Invalid configuration (bad keys, inconsistent analysis requests)."""


class DataError(AuditError):
    """Malformed or exhausted input data."""


class EstimationError(AuditError):
    """Numerical estimation failure."""


class CollinearityError(EstimationError):
    """Design matrix rank deficient beyond what the drop policy permits."""


class SeparationError(EstimationError):
    """Perfect separation detected in a binary-response fit."""


class ConvergenceError(EstimationError):
    """Iterative optimizer failed to converge."""
