"""Exception and warning types shared across the package.

The CLI maps these onto exit codes: validation and configuration problems
exit 2, estimation failures exit 3, I/O problems exit 4.
"""


class RgivError(Exception):
    """Base class for all package-specific errors."""


class ValidationError(RgivError, ValueError):
    """Input data or configuration violates a documented invariant."""


class DimensionError(ValidationError):
    """Array shapes are inconsistent with the panel dimensions."""


class ConfigurationError(ValidationError):
    """Estimation or simulation settings are unusable as given."""


class EstimationError(RgivError):
    """An estimator could not produce a usable result."""


class WeakInstrumentError(EstimationError):
    """The granular instrument carries no identifying variation."""


class SingularEstimandError(RgivError):
    """A closed-form estimand's denominator vanishes."""


class DegenerateRegressorError(EstimationError):
    """A regressor has zero variation, so no slope is defined."""


class RankDeficiencyError(EstimationError):
    """The Jacobian quadratic form is numerically rank deficient."""


class NotOveridentifiedError(ValidationError):
    """The overidentification test needs more moments than parameters."""


class OptimizerInconsistencyError(EstimationError):
    """The restricted optimum lies below the unrestricted one."""


class DegenerateDataWarning(UserWarning):
    """A moment column is identically zero; its weight was floored."""
