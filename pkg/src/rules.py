"""Defines the decision rules d(H) that map history variables to a recommended value of the risk factor."""

from __future__ import annotations

from abc import ABC, abstractmethod

import numpy as np

from src.dataset import Dataset
from src.tree import TreeNode


class DecisionRule(ABC):
    """The abstract base decision rule all rule kinds inherit from.

    Attributes:
        kind: One of "linear", "tree" or "constant".
        schema: The history variable names the rule was trained on, None when the rule reads no variables.
        stratified: Whether the rule holds separate parameters per group.
    """

    kind: str = ""
    schema: tuple[str, ...] | None = None
    stratified: bool = False

    @abstractmethod
    def recommend(self, ds: Dataset) -> np.ndarray:
        """Returns d(H_i) in {0, 1} for every unit of `ds`.

        Raises:
            NotImplementedError: When called, since `DecisionRule` is abstract.
        """

        raise NotImplementedError("DecisionRule class is abstract, please use an implementation.")

    @abstractmethod
    def to_dict(self) -> dict:
        """Returns a JSON-serializable description of the rule."""

        raise NotImplementedError("DecisionRule class is abstract, please use an implementation.")


class ConstantRule(DecisionRule):
    """Recommends the same value to every unit."""

    kind = "constant"

    def __init__(self, value: int) -> None:
        self.value = int(value)

    def recommend(self, ds: Dataset) -> np.ndarray:
        return np.full(ds.n, self.value, dtype=int)

    def to_dict(self) -> dict:
        return {"kind": self.kind, "value": self.value}


class LinearRule(DecisionRule):
    """Recommends M = 1 when intercept + coefficients . H1 > 0, e.g. the Q-learning rule I(beta2 + beta3 H1 > 0).

    A score of exactly 0 recommends 0.
    """

    kind = "linear"

    def __init__(self, intercept: float, coefficients: np.ndarray, h1_names: tuple[str, ...], schema: tuple[str, ...]) -> None:
        self.intercept = float(intercept)
        self.coefficients = np.asarray(coefficients, dtype=float)
        self.h1_names = tuple(h1_names)
        self.schema = tuple(schema)

    def score(self, ds: Dataset) -> np.ndarray:
        columns = [ds.covariate_names.index(name) for name in self.h1_names]
        return self.intercept + ds.covariates()[:, columns] @ self.coefficients

    def recommend(self, ds: Dataset) -> np.ndarray:
        return (self.score(ds) > 0).astype(int)

    def to_dict(self) -> dict:
        return {
            "kind": self.kind,
            "intercept": self.intercept,
            "coefficients": dict(zip(self.h1_names, map(float, self.coefficients))),
        }


class TreeRule(DecisionRule):
    """Recommends the leaf label of a classification tree over H = (R, X, C)."""

    kind = "tree"

    def __init__(self, tree: TreeNode, schema: tuple[str, ...]) -> None:
        self.tree = tree
        self.schema = tuple(schema)

    def recommend(self, ds: Dataset) -> np.ndarray:
        return self.tree.predict(ds.history())

    def to_dict(self) -> dict:
        return {"kind": self.kind, "tree": self.tree.to_dict(self.schema), "leaves": self.tree.describe(self.schema)}


class GroupedRule(DecisionRule):
    """Applies a separate rule to each group, e.g. rules fitted separately for the comparison and reference groups."""

    stratified = True

    def __init__(self, rules: dict[int, DecisionRule]) -> None:
        self.rules = dict(rules)
        first = next(iter(self.rules.values()))
        self.kind = first.kind
        self.schema = first.schema

    def recommend(self, ds: Dataset) -> np.ndarray:
        recommendations = np.zeros(ds.n, dtype=int)

        for group, rule in self.rules.items():
            mask = ds.group(group)
            recommendations[mask] = rule.recommend(ds)[mask]

        return recommendations

    def to_dict(self) -> dict:
        return {"kind": self.kind, "stratified": True, "groups": {str(group): rule.to_dict() for group, rule in sorted(self.rules.items(), reverse=True)}}
