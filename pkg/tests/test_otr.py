import dataclasses

import numpy as np
import pytest

from src.dataset import Dataset
from src.errors import DimensionError, NoCompliantUnitError, SchemaError, SingleArmError, ZeroWeightError
from src.metrics import accuracy
from src.models.otr import (
    OTR_ESTIMATORS,
    QLearning,
    WeightingTree,
    apply_rule,
    compliance_stats,
    compute_contrast,
    estimate_value,
    fit_qlearning,
    fit_weighting_rule,
    predict_outcomes,
)
from src.rules import ConstantRule, GroupedRule, LinearRule, TreeRule
from tests.conftest import make_dataset


def test_qlearning_recovers_linear_contrast(dataset):
    x1 = dataset.x[:, 0]
    ds = dataset.with_outcome(1.0 + x1 + dataset.m * (0.5 - x1))

    pooled = fit_qlearning(ds, stratify_by_group=False)
    assert isinstance(pooled, LinearRule)
    assert pooled.intercept == pytest.approx(0.5)
    np.testing.assert_allclose(pooled.coefficients, [-1.0], atol=1e-9)
    np.testing.assert_array_equal(pooled.recommend(ds), (x1 < 0.5).astype(int))

    stratified = fit_qlearning(ds)
    assert isinstance(stratified, GroupedRule)
    for rule in stratified.rules.values():
        assert rule.intercept == pytest.approx(0.5)
    assert set(stratified.to_dict()["groups"]) == {"0", "1"}


def test_qlearning_finds_who_benefits(dataset):
    rule = QLearning().fit(dataset)

    assert accuracy(apply_rule(rule, dataset), dataset.oracle["M_opt"]) > 0.9


def test_qlearning_needs_effect_modifiers_and_both_arms(dataset):
    with pytest.raises(SchemaError):
        fit_qlearning(dataclasses.replace(dataset, h1_cols=()))

    one_arm = dataset.subset(np.flatnonzero((dataset.m == 0) | (dataset.r == 0)))
    with pytest.raises(SingleArmError):
        fit_qlearning(one_arm)


def test_compute_contrast_by_hand():
    ds = Dataset(y=[2.0, 3.0, 4.0, 5.0], m=[1, 0, 1, 0], r=[0, 0, 1, 1])
    contrast = compute_contrast(ds, np.array([0.5, 0.25, 0.8, 0.5]))

    np.testing.assert_allclose(contrast.values, [4.0, -4.0, 5.0, -10.0])
    np.testing.assert_array_equal(contrast.z_labels, [1, 0, 1, 0])
    np.testing.assert_allclose(contrast.abs_weights, [4.0, 4.0, 5.0, 10.0])


def test_weighting_rule_finds_who_benefits():
    ds = make_dataset(n=2000, seed=3, effect_noise=0.5)
    rule = WeightingTree().fit(ds)

    assert isinstance(rule, GroupedRule)
    assert rule.kind == "tree"
    assert accuracy(apply_rule(rule, ds), ds.oracle["M_opt"]) > 0.75


def test_weighting_rule_pooled_tree_reads_history(dataset):
    rule = fit_weighting_rule(dataset, max_depth=2, stratify_by_group=False)

    assert isinstance(rule, TreeRule)
    assert rule.schema == dataset.history_names
    assert rule.tree.depth() <= 2


def test_weighting_rule_failures(dataset):
    with pytest.raises(ZeroWeightError):
        fit_weighting_rule(dataset.with_outcome(np.zeros(dataset.n)))

    with pytest.raises(SchemaError):
        fit_weighting_rule(dataset, max_depth=0)


def test_apply_rule_checks_schema(dataset):
    rule = QLearning().fit(dataset)
    extended = dataset.with_covariate("U", np.zeros(dataset.n))

    with pytest.raises(SchemaError):
        apply_rule(rule, extended)

    assert apply_rule(ConstantRule(1), extended).sum() == dataset.n


def test_estimate_value_is_hajek_mean(dataset):
    propensity = np.full(dataset.n, 0.5)
    treated = dataset.m == 1

    value = estimate_value(dataset, ConstantRule(1), propensity)
    assert value.value == pytest.approx(dataset.y[treated].mean())
    assert value.compliant_count == treated.sum()
    assert value.method == "ipw-hajek"

    comparison = estimate_value(dataset, ConstantRule(1), propensity, mask=dataset.group(1))
    assert comparison.value == pytest.approx(dataset.y[treated & (dataset.r == 1)].mean())


def test_estimate_value_is_translation_equivariant(dataset):
    propensity = np.clip(dataset.m * 0.3 + 0.4, 0, 1)
    rule = ConstantRule(0)

    shifted = estimate_value(dataset.with_outcome(dataset.y + 10), rule, propensity).value

    assert shifted == pytest.approx(estimate_value(dataset, rule, propensity).value + 10)


def test_estimate_value_without_compliant_units(dataset):
    with pytest.raises(NoCompliantUnitError):
        estimate_value(dataset, ConstantRule(1), np.full(dataset.n, 0.5), mask=dataset.m == 0)


def test_compliance_stats(dataset):
    stats = compliance_stats(dataset, ConstantRule(0))

    assert stats["recommended_total"] == 0.0
    assert stats["compliance_total"] == pytest.approx(100 * np.mean(dataset.m == 0))
    assert stats["compliance_comparison"] == pytest.approx(100 * np.mean(dataset.m[dataset.r == 1] == 0))
    assert set(stats) == {f"{kind}_{scope}" for kind in ("recommended", "compliance") for scope in ("comparison", "reference", "total")}


def test_estimators_are_registered_by_name():
    assert set(OTR_ESTIMATORS) == {"qlearning", "weighting"}
    assert QLearning(stratify=False).describe() == {"name": "qlearning", "stratify": False}
    assert WeightingTree(max_depth=2).describe()["max_depth"] == 2


def test_qlearning_rule_ignores_outcome_location(dataset):
    for stratify in (False, True):
        rule = fit_qlearning(dataset, stratify_by_group=stratify)
        shifted = fit_qlearning(dataset.with_outcome(dataset.y + 3.0), stratify_by_group=stratify)

        np.testing.assert_array_equal(apply_rule(shifted, dataset), apply_rule(rule, dataset))

    pooled = fit_qlearning(dataset, stratify_by_group=False)
    shifted = fit_qlearning(dataset.with_outcome(dataset.y + 3.0), stratify_by_group=False)
    assert shifted.intercept == pytest.approx(pooled.intercept, abs=1e-9)
    np.testing.assert_allclose(shifted.coefficients, pooled.coefficients, atol=1e-9)


def test_predict_outcomes_follows_the_q_function(dataset):
    x1 = dataset.x[:, 0]
    ds = dataset.with_outcome(1.0 + x1 + dataset.m * (0.5 - x1))

    mu_0, mu_1 = predict_outcomes(ds, stratify_by_group=False)

    np.testing.assert_allclose(mu_0, 1.0 + x1, atol=1e-8)
    np.testing.assert_allclose(mu_1 - mu_0, 0.5 - x1, atol=1e-8)

    with pytest.raises(SchemaError):
        predict_outcomes(dataclasses.replace(dataset, h1_cols=()))


def test_compute_augmented_contrast_by_hand():
    ds = Dataset(y=[2.0, 3.0, 4.0, 5.0], m=[1, 0, 1, 0], r=[0, 0, 1, 1])
    outcomes = (np.array([1.0, 2.0, 3.0, 6.0]), np.array([1.0, 4.0, 5.0, 5.0]))

    contrast = compute_contrast(ds, np.array([0.5, 0.25, 0.8, 0.5]), outcomes)

    np.testing.assert_allclose(contrast.values, [2.0, 2 / 3, 0.75, 1.0])
    np.testing.assert_array_equal(contrast.z_labels, [1, 1, 1, 1])

    with pytest.raises(DimensionError):
        compute_contrast(ds, np.full(4, 0.5), (np.zeros(3), np.zeros(4)))


def test_augmented_weighting_rule_ignores_outcome_location():
    ds = make_dataset(n=2000, seed=3, effect_noise=0.5)
    estimator = WeightingTree(stratify=False, augment=True)

    rule = estimator.fit(ds)
    shifted = estimator.fit(ds.with_outcome(ds.y + 10.0))

    assert accuracy(apply_rule(rule, ds), ds.oracle["M_opt"]) > 0.75
    assert np.mean(apply_rule(shifted, ds) == apply_rule(rule, ds)) > 0.99
    assert estimator.describe()["augment"] is True
