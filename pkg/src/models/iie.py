"""Defines the IIE estimators an analysis can be configured with."""

from __future__ import annotations

from abc import abstractmethod

import numpy as np

from src.dataset import Dataset
from src.decompose import DecompositionSettings, estimate_iie_regression, estimate_iie_weighting
from src.errors import ConfigError
from src.models.model import AbstractEstimator
from src.rules import DecisionRule


class IIEEstimator(AbstractEstimator):
    """The abstract base IIE estimator class that all implementations inherit from."""

    @abstractmethod
    def estimate(self, ds: Dataset, rule: DecisionRule, c_center: np.ndarray, propensity: np.ndarray | None = None) -> tuple[float, float]:
        """Estimates the IIE disparity reduction and disparity remaining.

        Raises:
            NotImplementedError: When called, since the `IIEEstimator` is abstract and should not be used.
        """

        raise NotImplementedError("IIEEstimator class is abstract, please use an implementation.")


class RegressionIIE(IIEEstimator):
    """An `IIEEstimator` implementation that combines a compliance model with a weighted outcome model."""

    name = "regression"

    def __init__(self, interaction: bool = False, am_reference: str = "full", truncation: tuple[float, float] | None = None) -> None:
        super().__init__(interaction=interaction, am_reference=am_reference, truncation=truncation)

        self.interaction = interaction
        self.am_reference = am_reference
        self.truncation = truncation

    def estimate(self, ds, rule, c_center, propensity=None):
        return estimate_iie_regression(
            ds, rule, c_center,
            interaction=self.interaction,
            am_reference=self.am_reference,
            truncation=self.truncation,
            propensity=propensity,
        )


class WeightingIIE(IIEEstimator):
    """An `IIEEstimator` implementation that reweights comparison-group outcomes to the reference group's compliance."""

    name = "weighting"

    def __init__(self, truncation: tuple[float, float] | None = None) -> None:
        super().__init__(truncation=truncation)

        self.truncation = truncation

    def estimate(self, ds, rule, c_center, propensity=None):
        return estimate_iie_weighting(ds, rule, c_center, truncation=self.truncation, propensity=propensity)


IIE_ESTIMATORS = {RegressionIIE.name: RegressionIIE, WeightingIIE.name: WeightingIIE}


def create_iie_estimator(settings: DecompositionSettings) -> IIEEstimator:
    """Returns the IIE estimator named by `settings.estimator`, configured from the remaining settings.

    Raises:
        ConfigError: When the estimator name is unknown.
    """

    if settings.estimator == RegressionIIE.name:
        return RegressionIIE(interaction=settings.interaction, am_reference=settings.am_reference, truncation=settings.truncation)

    if settings.estimator == WeightingIIE.name:
        return WeightingIIE(truncation=settings.truncation)

    raise ConfigError("iie.create_iie_estimator", f"estimator should be one of {sorted(IIE_ESTIMATORS)}, but found {settings.estimator!r}.")
