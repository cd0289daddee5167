"""A binary classification tree grown by minimizing weighted misclassification error.

The tree splits on axis-aligned thresholds placed at midpoints between consecutive sorted unique values,
sending units with ``x <= threshold`` left. The two lowest levels of every subtree are searched exactly
(a split is chosen by the best depth-2 subtree it allows, not only by its own error), so a tree of depth 2
attains the minimum weighted error over all axis-aligned trees of depth at most 2. Ties are broken towards
the lowest feature index, then the smallest threshold. Tree growing uses no randomness.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np


@dataclass
class TreeNode:
    """A node of a classification tree with {0, 1} labels.

    Attributes:
        label: The weighted-majority label of the training units in the node (ties go to 0).
        feature: Column index of the split, None for leaves.
        threshold: Split value, units with ``x <= threshold`` go left.
        left: Subtree for ``x <= threshold``.
        right: Subtree for ``x > threshold``.
    """

    label: int
    feature: int | None = None
    threshold: float | None = None
    left: TreeNode | None = None
    right: TreeNode | None = None

    @property
    def is_leaf(self) -> bool:
        return self.feature is None

    def depth(self) -> int:
        if self.is_leaf:
            return 0

        return 1 + max(self.left.depth(), self.right.depth())

    def predict(self, features: np.ndarray) -> np.ndarray:
        """Returns the leaf label of every row of `features`."""

        features = np.asarray(features, dtype=float)
        labels = np.empty(features.shape[0], dtype=int)
        self._fill(features, np.arange(features.shape[0]), labels)

        return labels

    def _fill(self, features: np.ndarray, rows: np.ndarray, labels: np.ndarray) -> None:
        if self.is_leaf:
            labels[rows] = self.label
            return

        goes_left = features[rows, self.feature] <= self.threshold
        self.left._fill(features, rows[goes_left], labels)
        self.right._fill(features, rows[~goes_left], labels)

    def to_dict(self, names: Sequence[str] | None = None) -> dict:
        """Returns a JSON-serializable nested representation of the tree."""

        if self.is_leaf:
            return {"label": int(self.label)}

        feature = names[self.feature] if names is not None else int(self.feature)

        return {
            "feature": feature,
            "threshold": float(self.threshold),
            "left": self.left.to_dict(names),
            "right": self.right.to_dict(names),
        }

    def describe(self, names: Sequence[str], conditions: tuple[str, ...] = ()) -> list[str]:
        """Returns one human-readable line per leaf, e.g. ``X1 > 0.1 and X2 > 0.1 -> 1``."""

        if self.is_leaf:
            return [f"{' and '.join(conditions) or 'always'} -> {self.label}"]

        name = names[self.feature]

        return (
            self.left.describe(names, conditions + (f"{name} <= {self.threshold:.4g}",))
            + self.right.describe(names, conditions + (f"{name} > {self.threshold:.4g}",))
        )


@dataclass
class _Split:
    cost: float
    feature: int
    threshold: float


def _leaf(labels: np.ndarray, weights: np.ndarray) -> tuple[int, float]:
    weight_1 = float(weights[labels == 1].sum())
    weight_0 = float(weights[labels == 0].sum())

    return (1, weight_0) if weight_1 > weight_0 else (0, weight_1)


def _first_minimum(costs: np.ndarray, tolerance: float) -> int | None:
    if costs.size == 0 or not np.isfinite(costs).any():
        return None

    return int(np.flatnonzero(costs <= np.min(costs) + tolerance)[0])


def _best_stump(features, labels, weights, min_leaf_weight, tolerance) -> _Split | None:
    best = None

    for j in range(features.shape[1]):
        uniques, ranks = np.unique(features[:, j], return_inverse=True)
        if len(uniques) < 2:
            continue

        cum_1 = np.cumsum(np.bincount(ranks, weights * (labels == 1), minlength=len(uniques)))[:-1]
        cum_0 = np.cumsum(np.bincount(ranks, weights * (labels == 0), minlength=len(uniques)))[:-1]
        total_1, total_0 = float(weights[labels == 1].sum()), float(weights[labels == 0].sum())

        costs = np.minimum(cum_0, cum_1) + np.minimum(total_0 - cum_0, total_1 - cum_1)
        left_weight = cum_0 + cum_1
        valid = (left_weight >= min_leaf_weight) & (total_0 + total_1 - left_weight >= min_leaf_weight)
        costs = np.where(valid, costs, np.inf)

        t = _first_minimum(costs, tolerance)
        if t is not None and (best is None or costs[t] < best.cost - tolerance):
            best = _Split(float(costs[t]), j, float((uniques[t] + uniques[t + 1]) / 2))

    return best


def _child_costs(diff, weight, total_diff, total_weight, leaf_costs, min_leaf_weight, tolerance):
    """Best depth-1 cost of each candidate child, given 2D prefix sums over (root threshold, child threshold)."""

    total_0 = (total_weight + total_diff) / 2
    total_1 = (total_weight - total_diff) / 2
    costs = np.minimum(total_1 + diff, total_0 - diff)
    valid = (weight >= min_leaf_weight) & (total_weight - weight >= min_leaf_weight)
    split_costs = np.where(valid, costs, np.inf).min(axis=1)

    return np.where(split_costs < leaf_costs - tolerance, split_costs, leaf_costs)


def _best_depth2_split(features, labels, weights, min_leaf_weight, tolerance) -> _Split | None:
    signed = np.where(labels == 1, -weights, weights)
    ranked = [np.unique(features[:, k], return_inverse=True) for k in range(features.shape[1])]
    best = None

    for j, (uniques_j, ranks_j) in enumerate(ranked):
        u_j = len(uniques_j)
        if u_j < 2:
            continue

        left_diff = np.cumsum(np.bincount(ranks_j, signed, minlength=u_j))[:-1, None]
        left_weight = np.cumsum(np.bincount(ranks_j, weights, minlength=u_j))[:-1, None]
        total_diff, total_weight = float(signed.sum()), float(weights.sum())
        right_diff, right_weight = total_diff - left_diff, total_weight - left_weight

        best_left = np.minimum((left_weight + left_diff) / 2, (left_weight - left_diff) / 2).ravel()
        best_right = np.minimum((right_weight + right_diff) / 2, (right_weight - right_diff) / 2).ravel()

        for uniques_k, ranks_k in ranked:
            u_k = len(uniques_k)
            if u_k < 2:
                continue

            cells = ranks_j * u_k + ranks_k
            grid_diff = np.bincount(cells, signed, minlength=u_j * u_k).reshape(u_j, u_k).cumsum(0).cumsum(1)
            grid_weight = np.bincount(cells, weights, minlength=u_j * u_k).reshape(u_j, u_k).cumsum(0).cumsum(1)

            inner_diff, inner_weight = grid_diff[:-1, :-1], grid_weight[:-1, :-1]
            best_left = np.minimum(best_left, _child_costs(inner_diff, inner_weight, left_diff, left_weight, best_left, min_leaf_weight, tolerance))

            outer_diff = grid_diff[-1:, :-1] - inner_diff
            outer_weight = grid_weight[-1:, :-1] - inner_weight
            best_right = np.minimum(best_right, _child_costs(outer_diff, outer_weight, right_diff, right_weight, best_right, min_leaf_weight, tolerance))

        valid = (left_weight.ravel() >= min_leaf_weight) & (right_weight.ravel() >= min_leaf_weight)
        costs = np.where(valid, best_left + best_right, np.inf)

        t = _first_minimum(costs, tolerance)
        if t is not None and (best is None or costs[t] < best.cost - tolerance):
            best = _Split(float(costs[t]), j, float((uniques_j[t] + uniques_j[t + 1]) / 2))

    return best


def _grow(features, labels, weights, depth, min_leaf_weight, tolerance) -> TreeNode:
    label, leaf_cost = _leaf(labels, weights)

    if depth == 0 or leaf_cost <= tolerance:
        return TreeNode(label=label)

    search = _best_depth2_split if depth >= 2 else _best_stump
    split = search(features, labels, weights, min_leaf_weight, tolerance)

    if split is None or split.cost >= leaf_cost - tolerance:
        return TreeNode(label=label)

    goes_left = features[:, split.feature] <= split.threshold

    return TreeNode(
        label=label,
        feature=split.feature,
        threshold=split.threshold,
        left=_grow(features[goes_left], labels[goes_left], weights[goes_left], depth - 1, min_leaf_weight, tolerance),
        right=_grow(features[~goes_left], labels[~goes_left], weights[~goes_left], depth - 1, min_leaf_weight, tolerance),
    )


def grow_tree(
    features: np.ndarray,
    labels: np.ndarray,
    weights: np.ndarray,
    max_depth: int = 3,
    min_leaf_weight: float = 0.0,
) -> TreeNode:
    """Grows a classification tree minimizing sum_i weights_i * [labels_i != tree(features_i)].

    Args:
        features (np.ndarray): The (n, p) feature matrix.
        labels (np.ndarray): The 0/1 labels.
        weights (np.ndarray): Nonnegative misclassification weights.
        max_depth (int, optional): Maximum depth of the tree. Defaults to 3.
        min_leaf_weight (float, optional): Minimum total weight in every leaf. Defaults to 0.

    Returns:
        TreeNode: The root of the tree. A pure (or unsplittable) root yields a depth-0 tree.
    """

    features = np.asarray(features, dtype=float)
    labels = np.asarray(labels).astype(int)
    weights = np.asarray(weights, dtype=float)
    tolerance = 1e-9 * max(1.0, float(weights.sum()))

    return _grow(features, labels, weights, max_depth, min_leaf_weight, tolerance)


def weighted_error(tree: TreeNode, features: np.ndarray, labels: np.ndarray, weights: np.ndarray) -> float:
    """Returns the weighted misclassification error of `tree`."""

    return float(np.sum(weights * (tree.predict(features) != np.asarray(labels))))
