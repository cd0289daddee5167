import numpy as np
import pytest

from src.tree import TreeNode, grow_tree, weighted_error


def leaf_cost(labels, weights):
    return min(weights[labels == 0].sum(), weights[labels == 1].sum())


def thresholds(values):
    uniques = np.unique(values)
    return (uniques[:-1] + uniques[1:]) / 2


def best_depth1(features, labels, weights):
    best = leaf_cost(labels, weights)
    for j in range(features.shape[1]):
        for t in thresholds(features[:, j]):
            left = features[:, j] <= t
            best = min(best, leaf_cost(labels[left], weights[left]) + leaf_cost(labels[~left], weights[~left]))
    return best


def exhaustive_depth2(features, labels, weights):
    best = leaf_cost(labels, weights)
    for j in range(features.shape[1]):
        for t in thresholds(features[:, j]):
            left = features[:, j] <= t
            cost = best_depth1(features[left], labels[left], weights[left]) + best_depth1(features[~left], labels[~left], weights[~left])
            best = min(best, cost)
    return best


@pytest.mark.parametrize("instance", range(50))
def test_depth2_tree_matches_exhaustive_enumeration(instance):
    rng = np.random.default_rng(1000 + instance)
    features = np.round(rng.standard_normal((30, 3)), 1)
    labels = rng.integers(0, 2, size=30)
    weights = rng.exponential(size=30)

    tree = grow_tree(features, labels, weights, max_depth=2, min_leaf_weight=0.0)

    assert tree.depth() <= 2
    assert weighted_error(tree, features, labels, weights) == pytest.approx(exhaustive_depth2(features, labels, weights), abs=1e-6)


def test_depth1_tree_is_the_best_stump():
    rng = np.random.default_rng(7)
    features = rng.standard_normal((40, 2))
    labels = (features[:, 1] > 0.3).astype(int)
    labels[:4] = 1 - labels[:4]
    weights = np.ones(40)

    tree = grow_tree(features, labels, weights, max_depth=1)

    assert tree.feature == 1
    assert weighted_error(tree, features, labels, weights) == pytest.approx(best_depth1(features, labels, weights))


def test_pure_node_is_a_leaf():
    tree = grow_tree(np.arange(10.0).reshape(-1, 1), np.ones(10, dtype=int), np.ones(10))

    assert tree.is_leaf
    assert tree.label == 1


def test_min_leaf_weight_blocks_small_leaves():
    features = np.arange(10.0).reshape(-1, 1)
    labels = np.array([1, 0, 0, 0, 0, 0, 0, 0, 0, 0])

    assert not grow_tree(features, labels, np.ones(10), max_depth=1).is_leaf
    assert grow_tree(features, labels, np.ones(10), max_depth=1, min_leaf_weight=2.0).is_leaf


def test_ties_prefer_the_lowest_feature_and_threshold():
    features = np.array([[0.0, 0.0], [1.0, 1.0], [2.0, 2.0], [3.0, 3.0]])
    labels = np.array([0, 0, 1, 1])

    tree = grow_tree(features, labels, np.ones(4), max_depth=1)

    assert (tree.feature, tree.threshold) == (0, 1.5)


def test_tree_predict_and_describe():
    tree = TreeNode(label=0, feature=0, threshold=0.5, left=TreeNode(label=0), right=TreeNode(label=1, feature=1, threshold=0.1, left=TreeNode(label=0), right=TreeNode(label=1)))

    np.testing.assert_array_equal(tree.predict(np.array([[0.0, 5.0], [1.0, 0.0], [1.0, 0.2]])), [0, 0, 1])
    assert tree.describe(["X1", "X2"])[-1] == "X1 > 0.5 and X2 > 0.1 -> 1"
    assert tree.to_dict(["X1", "X2"])["right"]["feature"] == "X2"
    assert tree.depth() == 2


def test_grow_tree_is_deterministic():
    rng = np.random.default_rng(8)
    features = rng.standard_normal((60, 3))
    labels = rng.integers(0, 2, size=60)
    weights = rng.random(60)

    first = grow_tree(features, labels, weights, max_depth=3)
    second = grow_tree(features, labels, weights, max_depth=3)

    assert first.to_dict() == second.to_dict()
