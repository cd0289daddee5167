"""Defines the optimal treatment regime (OTR) estimators and the operations to evaluate their rules.

Two estimators are available: Q-learning, which fits a linear Q-function with risk factor by effect modifier
interactions, and the weighting method, which labels units by the sign of an inverse-probability-weighted contrast
and fits a weighted classification tree to those labels. The contrast can be augmented with the Q-function outcome
model, which removes most of the noise the raw outcome scale adds to the labels.
"""

from __future__ import annotations

from abc import abstractmethod
from dataclasses import dataclass

import numpy as np

from src.dataset import Dataset
from src.errors import DimensionError, NoCompliantUnitError, SchemaError, SingleArmError, ZeroWeightError
from src.glm import fit_propensity, fit_wls, observed_arm_probability, with_intercept
from src.models.model import AbstractEstimator
from src.rules import DecisionRule, GroupedRule, LinearRule, TreeRule
from src.tree import grow_tree

GROUP_ORDER = (1, 0)
DEFAULT_MAX_DEPTH = 3
DEFAULT_MIN_LEAF_FRACTION = 0.01


@dataclass
class ContrastVector:
    """Per-unit IPW contrasts C(Y, M, H), the labels Z = I(C > 0) and the weights |C|."""

    values: np.ndarray
    z_labels: np.ndarray
    abs_weights: np.ndarray


@dataclass
class ValueEstimate:
    """An estimate of the value V(d) = E[Y(d)] of a decision rule."""

    value: float
    compliant_count: int
    method: str = "ipw-hajek"


def _strata(ds: Dataset, stratify_by_group: bool) -> list[tuple[int | None, np.ndarray]]:
    if stratify_by_group:
        return [(group, ds.group(group)) for group in GROUP_ORDER]

    return [(None, np.ones(ds.n, dtype=bool))]


def _combine(rules: dict[int | None, DecisionRule]) -> DecisionRule:
    if None in rules:
        return rules[None]

    return GroupedRule(rules)


def fit_qlearning(ds: Dataset, stratify_by_group: bool = True) -> DecisionRule:
    """Estimates an OTR by Q-learning.

    Fits Q(H, M) = b0 + b1 H + (b2 + b3 H1) M by least squares, per group when stratified (R then drops out of H),
    and returns the linear rule d(H) = I(b2 + b3 H1 > 0).

    Args:
        ds (Dataset): The dataset, with at least one effect modifier.
        stratify_by_group (bool, optional): Whether to fit separate models per group. Defaults to True.

    Raises:
        SchemaError: When no effect modifiers are designated.
        SingleArmError: When a fitted stratum has only one value of M.

    Returns:
        DecisionRule: A linear rule, grouped when stratified.
    """

    origin = "otr.fit_qlearning"

    if not ds.h1_cols:
        raise SchemaError(origin, "Q-learning needs at least one effect modifier (h1) column.")

    rules = {}

    for group, mask in _strata(ds, stratify_by_group):
        fit, interaction_names = _fit_q_function(ds, mask, stratify_by_group, origin, group)

        rules[group] = LinearRule(
            intercept=fit.coefficient(ds.m_name),
            coefficients=np.array([fit.coefficient(name) for name in interaction_names]),
            h1_names=ds.h1_names,
            schema=ds.history_names,
        )

    return _combine(rules)


def _q_design(ds: Dataset, mask: np.ndarray, m: np.ndarray, stratified: bool) -> np.ndarray:
    main_effects = [ds.x[mask], ds.c[mask]] if stratified else [ds.r[mask], ds.x[mask], ds.c[mask]]

    return with_intercept(*main_effects, m, m[:, None] * ds.h1()[mask])


def _fit_q_function(ds: Dataset, mask: np.ndarray, stratified: bool, origin: str, group: int | None):
    m = ds.m[mask]
    if m.min() == m.max():
        raise SingleArmError(origin, f"Only M={int(m[0])} occurs among the {int(mask.sum())} units of stratum R={group}.")

    main_names = list(ds.covariate_names) if stratified else [ds.r_name, *ds.covariate_names]
    interaction_names = [f"{ds.m_name}:{name}" for name in ds.h1_names]
    fit = fit_wls(_q_design(ds, mask, m, stratified), ds.y[mask], names=["(Intercept)", *main_names, ds.m_name, *interaction_names])

    return fit, interaction_names


def predict_outcomes(ds: Dataset, stratify_by_group: bool = True) -> tuple[np.ndarray, np.ndarray]:
    """Predicts Y under M = 0 and M = 1 for every unit from the Q-function model of `fit_qlearning`.

    Returns:
        tuple[np.ndarray, np.ndarray]: The predictions mu_0(H) and mu_1(H).
    """

    origin = "otr.predict_outcomes"

    if not ds.h1_cols:
        raise SchemaError(origin, "The outcome model needs at least one effect modifier (h1) column.")

    mu_0, mu_1 = np.empty(ds.n), np.empty(ds.n)

    for group, mask in _strata(ds, stratify_by_group):
        fit, _ = _fit_q_function(ds, mask, stratify_by_group, origin, group)
        size = int(mask.sum())
        mu_0[mask] = _q_design(ds, mask, np.zeros(size), stratify_by_group) @ fit.coefficients
        mu_1[mask] = _q_design(ds, mask, np.ones(size), stratify_by_group) @ fit.coefficients

    return mu_0, mu_1


def compute_contrast(ds: Dataset, propensity: np.ndarray, outcomes: tuple[np.ndarray, np.ndarray] | None = None) -> ContrastVector:
    """Computes the contrast C(Y, M, H) = M Y / P(M=1|H) - (1 - M) Y / (1 - P(M=1|H)).

    With outcome predictions (mu_0, mu_1) the augmented contrast
    mu_1 - mu_0 + M (Y - mu_1) / P(M=1|H) - (1 - M) (Y - mu_0) / (1 - P(M=1|H)) is returned instead. It has the
    same conditional mean when either model is correct, but its sign no longer tracks M whenever Y is far from 0.

    Args:
        ds (Dataset): The dataset.
        propensity (np.ndarray): P(M = 1 | H) per unit, already clamped away from 0 and 1.
        outcomes (tuple[np.ndarray, np.ndarray] | None, optional): Predicted Y under M = 0 and M = 1. Defaults to None.

    Raises:
        DimensionError: When `propensity` or the predictions do not have one entry per unit.

    Returns:
        ContrastVector: The contrasts, labels Z = I(C > 0) and weights |C|.
    """

    origin = "otr.compute_contrast"
    propensity = np.asarray(propensity, dtype=float)
    if propensity.shape != (ds.n,):
        raise DimensionError(origin, f"Expected {ds.n} propensities, found {propensity.size}.")

    if outcomes is None:
        values = ds.m * ds.y / propensity - (1 - ds.m) * ds.y / (1 - propensity)
    else:
        mu_0, mu_1 = (np.asarray(mu, dtype=float) for mu in outcomes)
        if mu_0.shape != (ds.n,) or mu_1.shape != (ds.n,):
            raise DimensionError(origin, f"Expected {ds.n} outcome predictions per arm, found {mu_0.size} and {mu_1.size}.")

        values = mu_1 - mu_0 + ds.m * (ds.y - mu_1) / propensity - (1 - ds.m) * (ds.y - mu_0) / (1 - propensity)

    return ContrastVector(values=values, z_labels=(values > 0).astype(int), abs_weights=np.abs(values))


def fit_weighting_rule(
    ds: Dataset,
    max_depth: int = DEFAULT_MAX_DEPTH,
    min_leaf_weight: float | None = None,
    stratify_by_group: bool = True,
    augment: bool = False,
) -> DecisionRule:
    """Estimates an OTR by the weighting method with a weighted classification tree.

    A propensity model P(M | R, X, C) (per group when stratified) gives the contrast of every unit; a tree over
    H = (R, X, C) is then grown to minimize sum |C| [Z != d(H)].

    Args:
        ds (Dataset): The dataset.
        max_depth (int, optional): Maximum tree depth, at least 1. Defaults to 3.
        min_leaf_weight (float | None, optional): Minimum |C| weight per leaf. Defaults to 1% of the stratum's total |C|.
        stratify_by_group (bool, optional): Whether to fit separate propensity models and trees per group. Defaults to True.
        augment (bool, optional): Whether to augment the contrast with the Q-function outcome model. Defaults to False.

    Raises:
        SchemaError: When `augment` is set but no effect modifiers are designated.
        ZeroWeightError: When all contrasts of a stratum are zero.
        SeparationError: When the propensity model is separated.

    Returns:
        DecisionRule: A tree rule, grouped when stratified.
    """

    origin = "otr.fit_weighting_rule"

    if max_depth < 1:
        raise SchemaError(origin, f"max_depth must be at least 1, found {max_depth}.")

    propensity = fit_propensity(ds, stratify_by_group=stratify_by_group)
    outcomes = predict_outcomes(ds, stratify_by_group=stratify_by_group) if augment else None
    contrast = compute_contrast(ds, propensity, outcomes)
    history = ds.history()
    rules = {}

    for group, mask in _strata(ds, stratify_by_group):
        weights = contrast.abs_weights[mask]
        if weights.sum() <= 0:
            raise ZeroWeightError(origin, f"All contrast weights are zero in stratum R={group}.")

        leaf_weight = DEFAULT_MIN_LEAF_FRACTION * weights.sum() if min_leaf_weight is None else min_leaf_weight
        tree = grow_tree(history[mask], contrast.z_labels[mask], weights, max_depth=max_depth, min_leaf_weight=leaf_weight)
        rules[group] = TreeRule(tree, schema=ds.history_names)

    return _combine(rules)


def apply_rule(rule: DecisionRule, ds: Dataset) -> np.ndarray:
    """Returns the recommendations d(H_i) in {0, 1} of `rule` for every unit.

    Raises:
        SchemaError: When the dataset's history variables differ from those the rule was trained on.
    """

    if rule.schema is not None and tuple(rule.schema) != ds.history_names:
        raise SchemaError("otr.apply_rule", f"The rule was trained on history {list(rule.schema)} but the dataset has {list(ds.history_names)}.")

    return rule.recommend(ds)


def estimate_value(ds: Dataset, rule: DecisionRule, propensity: np.ndarray, mask: np.ndarray | None = None) -> ValueEstimate:
    """Estimates V(d) by the Hajek inverse-probability-weighted mean of Y among units that follow the rule.

    Args:
        ds (Dataset): The dataset.
        rule (DecisionRule): The rule to evaluate.
        propensity (np.ndarray): P(M = 1 | H) per unit.
        mask (np.ndarray | None, optional): Restricts the estimate to a subset of units, e.g. one group.

    Raises:
        NoCompliantUnitError: When no (selected) unit follows the rule.

    Returns:
        ValueEstimate: The value estimate.
    """

    follows = ds.m == apply_rule(rule, ds)
    if mask is not None:
        follows = follows & mask

    if not follows.any():
        raise NoCompliantUnitError("otr.estimate_value", "No unit follows the rule, so its value cannot be estimated.")

    weights = follows / observed_arm_probability(ds.m, np.asarray(propensity, dtype=float))

    return ValueEstimate(value=float(np.sum(weights * ds.y) / np.sum(weights)), compliant_count=int(follows.sum()))


def compliance_stats(ds: Dataset, rule: DecisionRule) -> dict[str, float]:
    """Returns recommendation and compliance rates (in %) per group and in total.

    The recommendation rate is the mean of d(H_i); the compliance rate the mean of I(M_i = d(H_i)).

    Returns:
        dict[str, float]: Keys ``recommended_<scope>`` and ``compliance_<scope>`` for scope in comparison, reference, total.
    """

    recommendations = apply_rule(rule, ds)
    follows = ds.m == recommendations
    scopes = {"comparison": ds.group(1), "reference": ds.group(0), "total": np.ones(ds.n, dtype=bool)}
    stats = {}

    for scope, mask in scopes.items():
        stats[f"recommended_{scope}"] = 100 * float(recommendations[mask].mean())
    for scope, mask in scopes.items():
        stats[f"compliance_{scope}"] = 100 * float(follows[mask].mean())

    return stats


class OTREstimator(AbstractEstimator):
    """The abstract base OTR estimator class that all implementations inherit from."""

    @abstractmethod
    def fit(self, ds: Dataset) -> DecisionRule:
        """Estimates an optimal decision rule from `ds`.

        Raises:
            NotImplementedError: When called, since the `OTREstimator` is abstract and should not be used.
        """

        raise NotImplementedError("OTREstimator class is abstract, please use an implementation.")


class QLearning(OTREstimator):
    """An `OTREstimator` implementation that uses Q-learning with a linear Q-function."""

    name = "qlearning"

    def __init__(self, stratify: bool = True) -> None:
        super().__init__(stratify=stratify)

        self.stratify = stratify

    def fit(self, ds: Dataset) -> DecisionRule:
        return fit_qlearning(ds, stratify_by_group=self.stratify)


class WeightingTree(OTREstimator):
    """An `OTREstimator` implementation that uses the weighting method with a weighted classification tree."""

    name = "weighting"

    def __init__(
        self,
        stratify: bool = True,
        max_depth: int = DEFAULT_MAX_DEPTH,
        min_leaf_weight: float | None = None,
        augment: bool = False,
    ) -> None:
        super().__init__(stratify=stratify, max_depth=max_depth, min_leaf_weight=min_leaf_weight, augment=augment)

        self.stratify = stratify
        self.max_depth = max_depth
        self.min_leaf_weight = min_leaf_weight
        self.augment = augment

    def fit(self, ds: Dataset) -> DecisionRule:
        return fit_weighting_rule(
            ds,
            max_depth=self.max_depth,
            min_leaf_weight=self.min_leaf_weight,
            stratify_by_group=self.stratify,
            augment=self.augment,
        )


OTR_ESTIMATORS = {QLearning.name: QLearning, WeightingTree.name: WeightingTree}
