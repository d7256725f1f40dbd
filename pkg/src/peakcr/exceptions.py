"""Exception hierarchy for peakcr.

Every error carries the exit code the CLI reports for it.
"""


class PeakcrError(Exception):
    """Base error for peakcr."""

    exit_code = 1


class ConfigError(PeakcrError):
    """Error raised for invalid configuration or flag combinations."""

    exit_code = 1


class UnsupportedOperationError(ConfigError):
    """Error raised when a method/target combination has no implementation."""


class DataError(PeakcrError):
    """Error raised for invalid input data."""

    exit_code = 2


class DomainError(DataError):
    """Error raised when a location falls outside a field's domain."""


class ContainerFormatError(DataError):
    """Error raised for a malformed PKCR container."""


class NumericError(PeakcrError):
    """Error raised for numerical failures."""

    exit_code = 3


class DegenerateVarianceError(NumericError):
    """Error raised when the sample variance is at or below the variance floor."""


class SingularCovarianceError(NumericError):
    """Error raised when a covariance estimate cannot be inverted reliably."""


class SingularHessianError(NumericError):
    """Error raised when a peak Hessian is singular."""


class TruncationDominatesError(NumericError):
    """Error raised when most Monte Carlo Hessian draws are discarded."""


class ExperimentError(NumericError):
    """Error raised when too many simulation replicates fail."""
