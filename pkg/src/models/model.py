"""Defines the `AbstractEstimator`, the parent class of the pluggable estimators (OTR methods, IIE estimators)."""

from abc import ABC


class AbstractEstimator(ABC):
    """The parent class of the estimators an analysis can be configured with.

    Attributes:
        name: The name under which the estimator is selected in the YAML configs.
        settings: The configuration options the estimator was created with, reported alongside its results.
    """

    name: str = ""

    def __init__(self, **settings) -> None:
        super().__init__()

        self.settings = dict(settings)

    def describe(self) -> dict:
        """Returns the estimator name and settings, for report metadata."""

        return {"name": self.name, **self.settings}
