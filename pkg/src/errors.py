"""Defines the exceptions raised by the causal decomposition toolkit.

Every exception carries the module and operation it originated from, so that messages surfaced by the CLI
can always be traced back, e.g. ``[glm.fit_logistic] Complete or quasi-complete separation detected ...``.
"""


class CausalDecompError(Exception):
    """Base class of all toolkit errors.

    Attributes:
        origin: The ``module.operation`` in which the error was raised.
    """

    def __init__(self, origin: str, message: str) -> None:
        self.origin = origin
        self.message = message
        super().__init__(f"[{origin}] {message}")


class ConfigError(CausalDecompError, ValueError):
    """Raised for invalid configuration files or invalid parameter values (CLI exit code 1)."""


class DataError(CausalDecompError, ValueError):
    """Raised when input data violates the dataset contract (CLI exit code 2)."""


class SchemaError(DataError):
    """Raised for missing or unexpected columns, non-numeric cells and out-of-range codes."""


class MissingDataError(DataError):
    """Raised when a cell is empty or NA. Imputation is not supported."""


class EmptyGroupError(DataError):
    """Raised when the comparison or the reference group has no units."""


class DimensionError(DataError):
    """Raised when vectors or matrices that should line up do not."""


class EstimationError(CausalDecompError, RuntimeError):
    """Raised when a model cannot be fitted or an estimand cannot be computed (CLI exit code 2)."""


class RankDeficiencyError(EstimationError):
    """Raised when a design matrix does not have full column rank."""


class SeparationError(EstimationError):
    """Raised when a logistic regression diverges because of complete or quasi-complete separation."""


class SingleArmError(EstimationError):
    """Raised when only one value of the risk factor occurs in a fitted stratum."""


class NoCompliantUnitError(EstimationError):
    """Raised when no unit (in a group) follows the decision rule."""


class EmptyArmError(EstimationError):
    """Raised when a weighted arm or compliance arm has no units."""


class ZeroWeightError(EstimationError):
    """Raised when all weights of a fit are zero."""


class GridTooNarrowError(EstimationError):
    """Raised when the posterior of a continuous confounder piles up at the edge of its grid."""


class CalibrationError(EstimationError):
    """Raised when the benchmark calibration cannot bracket or reach its target."""


class ReplicateFailureError(EstimationError):
    """Raised when too many bootstrap replicates, confounder draws or simulation iterations fail."""
