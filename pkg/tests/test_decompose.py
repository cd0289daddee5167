import numpy as np
import pytest

from src.dataset import Dataset
from src.decompose import (
    DecompositionReport,
    DecompositionSettings,
    Estimate,
    bootstrap_se,
    decompose,
    estimate_icde,
    estimate_iie_regression,
    estimate_iie_weighting,
    estimate_initial_disparity,
    inverse_probability_weights,
    percent_reduction,
    reference_compliance_rate,
    resolve_c_center,
)
from src.errors import ConfigError, DimensionError, EmptyArmError, EstimationError, NoCompliantUnitError, ReplicateFailureError
from src.glm import fit_propensity
from src.models.iie import RegressionIIE, WeightingIIE, create_iie_estimator
from src.models.otr import QLearning
from src.rules import ConstantRule


def structural_dataset(n: int = 2000, seed: int = 0) -> Dataset:
    """Noiseless outcome Y = 1 - 0.5 R + 0.3 C + 0.4 R M, so that setting M = 1 leaves a disparity of -0.1."""

    rng = np.random.default_rng(seed)
    r = (rng.random(n) < 0.5).astype(float)
    c = rng.standard_normal(n)
    x = rng.standard_normal(n)
    m = (rng.random(n) < 1 / (1 + np.exp(-(0.3 * x + 0.2 * r)))).astype(float)
    y = 1.0 - 0.5 * r + 0.3 * c + 0.4 * r * m

    return Dataset(y=y, m=m, r=r, c=c, x=x)


def test_initial_disparity_without_c_is_difference_in_means(dataset):
    ds = Dataset(y=dataset.y, m=dataset.m, r=dataset.r, x=dataset.x)

    expected = dataset.y[dataset.r == 1].mean() - dataset.y[dataset.r == 0].mean()
    assert estimate_initial_disparity(ds) == pytest.approx(expected)


def test_percent_reduction():
    assert percent_reduction(-0.4, -0.1) == pytest.approx(75.0)
    assert np.isnan(percent_reduction(0.0, 0.1))


def test_resolve_c_center(dataset):
    assert resolve_c_center(dataset, None).tolist() == [0.0]
    np.testing.assert_allclose(resolve_c_center(dataset, "mean"), dataset.c.mean(axis=0))
    assert resolve_c_center(dataset, [2.0]).tolist() == [2.0]

    with pytest.raises(DimensionError):
        resolve_c_center(dataset, [1.0, 2.0])

    with pytest.raises(ConfigError):
        resolve_c_center(dataset, "median")


def test_inverse_probability_weights_truncation():
    m = np.array([1, 1, 1, 0, 0, 0.0])
    propensity = np.array([0.01, 0.5, 0.9, 0.5, 0.2, 0.99])

    raw = inverse_probability_weights(m, propensity)
    np.testing.assert_allclose(raw, [100, 2, 1 / 0.9, 2, 1.25, 100])

    truncated = inverse_probability_weights(m, propensity, truncation=(10, 90))
    low, high = np.percentile(raw, [10, 90])
    assert truncated.min() == pytest.approx(low)
    assert truncated.max() == pytest.approx(high)


def test_icde_recovers_structural_disparity():
    ds = structural_dataset()

    assert estimate_icde(ds, ConstantRule(1), resolve_c_center(ds, "mean")) == pytest.approx(-0.1, abs=1e-9)
    assert estimate_icde(ds, ConstantRule(0), resolve_c_center(ds, "mean")) == pytest.approx(-0.5, abs=1e-9)
    assert estimate_icde(ds, ConstantRule(1), rc_interaction=True) == pytest.approx(-0.1, abs=1e-9)


def test_icde_needs_compliant_units_in_both_groups(dataset):
    m = np.where(dataset.r == 1, 0.0, dataset.m)
    ds = Dataset(y=dataset.y, m=m, r=dataset.r, c=dataset.c, x=dataset.x)

    with pytest.raises(NoCompliantUnitError):
        estimate_icde(ds, ConstantRule(1), propensity=np.full(ds.n, 0.5))


def test_regression_iie_remaining_plus_reduction_is_initial_disparity(dataset):
    rule = QLearning().fit(dataset)
    c_center = resolve_c_center(dataset, "mean")

    for interaction in (False, True):
        delta, zeta = estimate_iie_regression(dataset, rule, c_center, interaction=interaction)
        assert delta + zeta == pytest.approx(estimate_initial_disparity(dataset, c_center))


def test_regression_iie_is_compliance_gap_times_effect():
    ds = structural_dataset()
    # With d = 1 compliance is M, and the effect of M in the comparison group is 0.4.
    delta, _ = estimate_iie_regression(ds, ConstantRule(1), interaction=True)
    compliance_gap = ds.m[ds.r == 1].mean() - ds.m[ds.r == 0].mean()

    assert delta == pytest.approx(0.4 * compliance_gap, rel=1e-6)


def test_weighting_iie_without_c_splits_the_mean_difference(dataset):
    ds = Dataset(y=dataset.y, m=dataset.m, r=dataset.r, x=dataset.x, h1_cols=(0,))
    rule = QLearning().fit(ds)

    delta, zeta = estimate_iie_weighting(ds, rule)

    assert delta + zeta == pytest.approx(estimate_initial_disparity(ds))


def test_iie_empty_arms(dataset):
    everyone_treated = Dataset(y=dataset.y, m=np.ones(dataset.n), r=dataset.r, x=dataset.x)
    with pytest.raises(EmptyArmError):
        estimate_iie_regression(everyone_treated, ConstantRule(1), propensity=np.full(dataset.n, 0.5))

    m = np.where(dataset.r == 1, 0.0, dataset.m)
    comparison_untreated = Dataset(y=dataset.y, m=m, r=dataset.r, x=dataset.x)
    with pytest.raises(EmptyArmError):
        estimate_iie_weighting(comparison_untreated, ConstantRule(1), propensity=np.full(dataset.n, 0.5))


def test_reference_compliance_rate(dataset):
    rule = ConstantRule(1)
    assert reference_compliance_rate(dataset, rule) == pytest.approx(dataset.m[dataset.r == 0].mean())

    with_am = Dataset(y=dataset.y, m=dataset.m, r=dataset.r, c=dataset.c, x=dataset.x, am_cols=(1,))
    rate = reference_compliance_rate(with_am, rule)
    assert 0 < rate < 1
    assert rate != pytest.approx(dataset.m[dataset.r == 0].mean(), abs=1e-6)


def test_bootstrap_se_of_a_mean(dataset):
    result = bootstrap_se(dataset, lambda ds: np.array([ds.y.mean()]), replicates=200, seed=1)

    assert result.failed == 0
    assert result.replicates.shape == (200, 1)
    assert result.se[0] == pytest.approx(dataset.y.std() / np.sqrt(dataset.n), rel=0.25)


def test_bootstrap_is_independent_of_workers(dataset):
    estimator = lambda ds: np.array([ds.y.mean(), ds.m.mean()])

    sequential = bootstrap_se(dataset, estimator, replicates=20, seed=5, workers=1)
    parallel = bootstrap_se(dataset, estimator, replicates=20, seed=5, workers=4)

    np.testing.assert_array_equal(sequential.replicates, parallel.replicates)


def test_bootstrap_keeps_group_sizes(dataset):
    sizes = bootstrap_se(dataset, lambda ds: np.array([ds.r.sum(), ds.n]), replicates=5, seed=2).replicates

    assert np.all(sizes[:, 0] == dataset.r.sum())
    assert np.all(sizes[:, 1] == dataset.n)


def test_bootstrap_failures(dataset):
    def failing(ds):
        raise EstimationError("tests.failing", "always fails")

    with pytest.raises(ReplicateFailureError):
        bootstrap_se(dataset, failing, replicates=10, seed=0)

    with pytest.raises(ConfigError):
        bootstrap_se(dataset, lambda ds: np.zeros(1), replicates=1, seed=0)


def test_decompose_report(dataset):
    settings = DecompositionSettings(bootstrap=20)
    rule = QLearning().fit(dataset)

    report = decompose(dataset, rule, settings, create_iie_estimator(settings), seed=3)

    assert report.estimator == "regression"
    assert report.delta_icde.value == pytest.approx(report.tau.value - report.zeta_icde.value)
    assert report.zeta_iie.value == pytest.approx(report.tau.value - report.delta_iie.value)
    assert all(estimate.se > 0 for estimate in report.estimates().values())
    assert set(report.to_dict()) >= {"tau", "zeta_icde", "delta_iie", "zeta_iie", "delta_icde", "pct_reduction_icde", "pct_reduction_iie"}

    again = decompose(dataset, rule, settings, create_iie_estimator(settings), seed=3, workers=3)
    assert again.to_dict() == report.to_dict()


def test_decompose_with_rule_refitting(dataset):
    settings = DecompositionSettings(estimator="weighting", bootstrap=10, refit_rule=True)
    estimator = QLearning()

    with pytest.raises(ConfigError):
        decompose(dataset, estimator.fit(dataset), settings, create_iie_estimator(settings), seed=0)

    report = decompose(dataset, estimator.fit(dataset), settings, create_iie_estimator(settings), seed=0, otr_estimator=estimator)
    assert report.estimator == "weighting"
    assert np.isfinite(report.zeta_iie.se)


def test_decomposition_settings_validation():
    assert DecompositionSettings(truncation=[1, 99]).truncation == (1.0, 99.0)

    for options in ({"estimator": "doubly-robust"}, {"truncation": (99, 1)}, {"bootstrap": 1}, {"am_reference": "reference"}):
        with pytest.raises(ConfigError):
            DecompositionSettings(**options)


def test_iie_estimators_follow_settings(dataset):
    regression = create_iie_estimator(DecompositionSettings(interaction=True, truncation=(1, 99)))
    assert isinstance(regression, RegressionIIE)
    assert regression.describe() == {"name": "regression", "interaction": True, "am_reference": "full", "truncation": (1.0, 99.0)}

    weighting = create_iie_estimator(DecompositionSettings(estimator="weighting"))
    assert isinstance(weighting, WeightingIIE)

    rule = ConstantRule(1)
    c_center = resolve_c_center(dataset, "mean")
    assert regression.estimate(dataset, rule, c_center) == pytest.approx(estimate_iie_regression(dataset, rule, c_center, interaction=True, truncation=(1.0, 99.0)))


def test_estimate_and_report_percentages():
    estimate = Estimate(-0.4, 0.1)
    assert estimate.z == pytest.approx(-4.0)
    assert estimate.p_value == pytest.approx(6.334e-5, rel=1e-3)
    assert np.isnan(Estimate(1.0).p_value)

    report = DecompositionReport(
        tau=Estimate(-0.4, 0.1), zeta_icde=Estimate(-0.1, 0.1), delta_iie=Estimate(-0.1, 0.05), zeta_iie=Estimate(-0.3, 0.1),
        estimator="regression", interaction_included=False, c_center=np.zeros(1),
    )
    assert report.pct_reduction_icde == pytest.approx(75.0)
    assert report.pct_reduction_iie == pytest.approx(25.0)
    assert "delta_icde" not in report.estimates()


def test_percent_reduction_is_negative_when_the_rule_widens_the_disparity():
    assert percent_reduction(-0.413, -0.477) == pytest.approx(-15.5, abs=0.05)


@pytest.mark.parametrize("iie", [RegressionIIE(), WeightingIIE()], ids=["regression", "weighting"])
def test_decomposition_is_invariant_to_outcome_location(dataset, iie):
    settings = DecompositionSettings(estimator=iie.name, bootstrap=10)
    rule = QLearning().fit(dataset)

    report = decompose(dataset, rule, settings, iie, seed=5)
    shifted = decompose(dataset.with_outcome(dataset.y + 5.0), rule, settings, iie, seed=5)

    for name, estimate in report.estimates().items():
        assert shifted.estimates()[name].value == pytest.approx(estimate.value, abs=1e-8), name
        assert shifted.estimates()[name].se == pytest.approx(estimate.se, abs=1e-8), name


def test_equal_compliance_across_groups_gives_no_iie_reduction():
    rng = np.random.default_rng(8)
    half = 200
    x = rng.standard_normal(half)
    m = (rng.random(half) < 1 / (1 + np.exp(-0.8 * x))).astype(float)
    c = rng.standard_normal(2 * half)
    r = np.repeat([1.0, 0.0], half)
    y = 1.0 - 0.5 * r + 0.3 * c + 0.4 * np.tile(m, 2) + rng.standard_normal(2 * half)
    ds = Dataset(y=y, m=np.tile(m, 2), r=r, c=c, x=np.tile(x, 2), am_cols=(0,))

    delta, zeta = estimate_iie_regression(ds, ConstantRule(1), resolve_c_center(ds, "mean"))

    assert delta == pytest.approx(0.0, abs=1e-10)
    assert zeta == pytest.approx(estimate_initial_disparity(ds, resolve_c_center(ds, "mean")), abs=1e-10)


def test_swapping_groups_flips_the_icde(dataset):
    propensity = fit_propensity(dataset)
    rule = ConstantRule(1)

    zeta = estimate_icde(dataset, rule, propensity=propensity)
    swapped = estimate_icde(dataset.relabel_groups(), rule, propensity=propensity)

    assert swapped == pytest.approx(-zeta, abs=1e-10)
