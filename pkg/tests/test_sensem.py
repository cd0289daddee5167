import dataclasses

import numpy as np
import pytest
from scipy.special import expit
from scipy.stats import norm

from src import sensem
from src.dataset import Dataset, SensitivitySpec
from src.decompose import DecompositionSettings, decompose, estimate_initial_disparity, resolve_c_center
from src.errors import ConfigError, GridTooNarrowError
from src.glm import fit_logistic, fit_wls
from src.models.iie import RegressionIIE
from src.models.otr import QLearning
from src.sensem import (
    IIE_COVERAGE_NOTE,
    EMParameters,
    adjusted_analysis,
    maximize,
    outcome_design,
    posterior_u_binary,
    posterior_u_continuous,
    risk_design,
    rubin_combine,
    sample_grid,
    sensitivity_grid,
    stochastic_em,
)
from tests.conftest import make_dataset

SHORT_CHAIN = {"max_iter": 20, "burn_in": 5, "window": 5}


@pytest.fixture
def small_dataset():
    return make_dataset(n=300, seed=1)


def test_rubin_combine_by_hand():
    value, se = rubin_combine(np.array([1.0, 2.0, 3.0]), np.array([0.1, 0.2, 0.3]))

    assert value == pytest.approx(2.0)
    assert se == pytest.approx(np.sqrt(0.2 + (1 + 1 / 3) * 1.0))


def test_rubin_combine_needs_two_draws():
    with pytest.raises(ConfigError):
        rubin_combine(np.array([1.0]), np.array([0.1]))

    with pytest.raises(ConfigError):
        rubin_combine(np.array([1.0, 2.0]), np.array([0.1]))


def test_binary_posterior_without_effects_is_the_prior(small_dataset):
    spec = SensitivitySpec(pi=0.3)
    theta = maximize(small_dataset, spec, None)

    np.testing.assert_allclose(posterior_u_binary(small_dataset, theta, spec), 0.3)


def test_binary_posterior_follows_the_outcome(small_dataset):
    spec = SensitivitySpec(beta_u_y=1.0)
    theta = maximize(small_dataset, spec, None)
    posterior = posterior_u_binary(small_dataset, theta, spec)

    assert np.all((posterior >= 0) & (posterior <= 1))

    design, _ = outcome_design(small_dataset)
    order = np.argsort(small_dataset.y - design @ theta.outcome_coefficients)
    assert np.all(np.diff(posterior[order]) >= -1e-12)


def test_binary_posterior_rejects_continuous_spec(small_dataset):
    spec = SensitivitySpec(u_kind="continuous")

    with pytest.raises(ConfigError):
        posterior_u_binary(small_dataset, maximize(small_dataset, spec, None), spec)


def test_continuous_posterior_rows_are_distributions(small_dataset):
    spec = SensitivitySpec(u_kind="continuous", sigma_u=2.0, beta_u_y=0.5, beta_u_m=0.5)
    theta = maximize(small_dataset, spec, None)

    grid, probabilities = posterior_u_continuous(small_dataset, theta, spec)

    assert grid.shape == (201,)
    assert grid[0] == pytest.approx(-10.0) and grid[-1] == pytest.approx(10.0)
    assert probabilities.shape == (small_dataset.n, 201)
    np.testing.assert_allclose(probabilities.sum(axis=1), 1.0)


def test_continuous_posterior_grid_checks(small_dataset):
    spec = SensitivitySpec(u_kind="continuous", beta_u_y=1.0)
    theta = maximize(small_dataset, spec, None)

    with pytest.raises(ConfigError):
        posterior_u_continuous(small_dataset, theta, spec, points=50)

    # A near-deterministic outcome pins U at Y, far outside a grid of +-0.5.
    pinned = dataclasses.replace(theta, outcome_coefficients=np.zeros_like(theta.outcome_coefficients), sigma2=1e-4)
    with pytest.raises(GridTooNarrowError):
        posterior_u_continuous(small_dataset, pinned, spec, half_width=0.5)


def test_sample_grid_stays_within_the_cell():
    grid = np.linspace(-1, 1, 51)
    probabilities = np.zeros((100, 51))
    probabilities[:, 30] = 1.0

    draws = sample_grid(grid, probabilities, np.random.default_rng(0))
    step = grid[1] - grid[0]

    assert np.all(np.abs(draws - grid[30]) <= step / 2)
    assert len(np.unique(draws)) > 1


def test_stochastic_em_shapes_and_determinism(small_dataset):
    spec = SensitivitySpec(beta_u_y=0.5, beta_u_m=0.5)

    first = stochastic_em(small_dataset, spec, draws=3, seed=7, **SHORT_CHAIN)
    second = stochastic_em(small_dataset, spec, draws=3, seed=7, **SHORT_CHAIN)

    assert first.iterations <= 20
    assert first.trajectory.shape == (first.iterations, len(first.theta.vector()))
    assert len(first.u_draws) == 3
    assert all(set(np.unique(u)) <= {0.0, 1.0} for u in first.u_draws)
    np.testing.assert_array_equal(first.theta.vector(), second.theta.vector())
    np.testing.assert_array_equal(first.u_draws[2], second.u_draws[2])
    assert first.theta.sigma2 > 0


def test_stochastic_em_without_effects_keeps_the_naive_fit(small_dataset):
    spec = SensitivitySpec()

    result = stochastic_em(small_dataset, spec, draws=2, seed=0, **SHORT_CHAIN)
    naive = maximize(small_dataset, spec, None)

    np.testing.assert_allclose(result.theta.outcome_coefficients, naive.outcome_coefficients)
    np.testing.assert_allclose(result.theta.risk_coefficients, naive.risk_coefficients, atol=1e-6)
    assert result.converged


def test_stochastic_em_with_continuous_and_heterogeneous_u(small_dataset):
    spec = SensitivitySpec(u_kind="continuous", beta_u_y=0.3, beta_u_m=0.3, heterogeneous_u=True)

    result = stochastic_em(small_dataset, spec, draws=2, seed=3, **SHORT_CHAIN)

    assert len(np.unique(result.u_draws[0])) > 2
    assert result.theta.mu_coefficient != 0.0


def test_stochastic_em_validation(small_dataset):
    with pytest.raises(ConfigError):
        stochastic_em(small_dataset, SensitivitySpec(), draws=1, seed=0)

    with pytest.raises(ConfigError):
        stochastic_em(small_dataset, SensitivitySpec(), draws=2, seed=0, max_iter=10, burn_in=5, window=10)


def test_adjusted_analysis_without_effects_keeps_the_initial_disparity():
    ds = make_dataset(n=500, seed=2)
    settings = DecompositionSettings(bootstrap=10)

    result = adjusted_analysis(ds, SensitivitySpec(), QLearning(), RegressionIIE(), settings, draws=3, seed=4, em_options=SHORT_CHAIN)

    assert result.failed_draws == 0
    assert len(result.per_draw) == len(result.rules) == len(result.rule_summary) == 3
    assert result.draw_index == [0, 1, 2]
    assert result.estimates.tau.value == pytest.approx(estimate_initial_disparity(ds, resolve_c_center(ds, "mean")))
    assert result.estimates.tau.se > 0
    assert IIE_COVERAGE_NOTE in result.estimates.notes
    assert "recommended_total" in result.rule_summary[0]


@pytest.mark.slow
def test_sensitivity_grid_tables():
    ds = make_dataset(n=500, seed=6)
    pairs = [(0.0, 0.0), (0.5, 0.5)]

    grid, contours = sensitivity_grid(ds, pairs, SensitivitySpec(), QLearning(), RegressionIIE(), DecompositionSettings(bootstrap=10), draws=2, seed=1, verbose=False)

    assert list(grid["beta_u_y"]) == [0.0, 0.5]
    assert (grid["error"] == "").all()
    assert {"tau", "tau_se", "tau_p", "zeta_icde", "delta_iie_se", "recommended_total"} <= set(grid.columns)
    assert contours["tau"].shape == (2, 2)
    assert contours["zeta_iie"].loc[0.5, 0.5] == pytest.approx(grid.loc[1, "zeta_iie"])


def test_null_sensitivity_reproduces_the_unadjusted_analysis():
    ds = make_dataset(n=500, seed=3)
    settings = DecompositionSettings(bootstrap=20)
    estimator = QLearning()

    unadjusted = decompose(ds, estimator.fit(ds), settings, RegressionIIE(), seed=0)
    adjusted = adjusted_analysis(ds, SensitivitySpec(), estimator, RegressionIIE(), settings, draws=3, seed=0, em_options=SHORT_CHAIN)

    for name, estimate in adjusted.estimates.estimates().items():
        assert abs(estimate.value - unadjusted.estimates()[name].value) < 2 * estimate.se


def confounded_dataset(seed: int, n: int = 2000, beta_u_y: float = 0.5, beta_u_m: float = 0.5):
    rng = np.random.default_rng(seed)
    r = (rng.random(n) < 0.5).astype(float)
    c = rng.standard_normal(n)
    x1 = rng.standard_normal(n)
    x2 = 0.5 * r + rng.standard_normal(n)
    u = (rng.random(n) < 0.5).astype(float)
    m = (rng.random(n) < expit(-0.3 + 0.3 * r + 0.4 * x2 + 0.2 * c + beta_u_m * u)).astype(float)
    y = 1.0 - 0.5 * r + 0.5 * x1 + 0.3 * x2 + 0.2 * c + m * (0.5 + x1) + beta_u_y * u + rng.standard_normal(n)

    return Dataset(y=y, m=m, r=r, c=c, x=np.column_stack([x1, x2]), h1_cols=(0,)), u


@pytest.mark.slow
def test_stochastic_em_recovers_the_fit_given_u():
    spec = SensitivitySpec(beta_u_y=0.5, beta_u_m=0.5)
    within = []

    for replication in range(50):
        ds, u = confounded_dataset(replication)
        em = stochastic_em(ds, spec, draws=2, seed=replication)

        outcome, outcome_names = outcome_design(ds)
        risk, risk_names = risk_design(ds)
        outcome_fit = fit_wls(outcome, ds.y, offset=spec.beta_u_y * u, names=outcome_names)
        risk_fit = fit_logistic(risk, ds.m, offset=spec.beta_u_m * u, names=risk_names)

        estimates = np.concatenate([em.theta.outcome_coefficients, em.theta.risk_coefficients])
        given_u = np.concatenate([outcome_fit.coefficients, risk_fit.coefficients])
        se = np.concatenate([
            [outcome_fit.standard_error(name) for name in outcome_names],
            [risk_fit.standard_error(name) for name in risk_names],
        ])
        within.append(np.abs(estimates - given_u) <= 2 * se)

    assert np.all(np.mean(within, axis=0) >= 0.9)


def test_binary_posterior_worked_example():
    ds = Dataset(y=[1.0, 2.0, 3.0, 4.0], m=[1, 1, 0, 0], r=[1, 0, 1, 0], x=[0.5, -0.5, 1.0, -1.0])
    outcome, outcome_names = outcome_design(ds)
    risk, risk_names = risk_design(ds)
    theta = EMParameters(
        outcome_coefficients=np.zeros(outcome.shape[1]),
        outcome_names=outcome_names,
        risk_coefficients=np.zeros(risk.shape[1]),
        risk_names=risk_names,
        sigma2=1.0,
    )

    posterior = posterior_u_binary(ds, theta, SensitivitySpec(pi=0.5, beta_u_m=np.log(2)))

    np.testing.assert_allclose(posterior, [4 / 7, 4 / 7, 2 / 5, 2 / 5])


def test_binary_posterior_is_monotone_in_the_effect_on_m(small_dataset):
    theta = maximize(small_dataset, SensitivitySpec(), None)
    exposed = small_dataset.m == 1

    def posteriors(beta_u_m):
        return posterior_u_binary(small_dataset, theta, SensitivitySpec(pi=0.3, beta_u_m=beta_u_m))

    increasing = np.array([posteriors(beta)[exposed] for beta in (0.0, 0.5, 1.0, 2.0)])
    decreasing = np.array([posteriors(beta)[exposed] for beta in (0.0, -0.5, -1.0, -2.0)])

    np.testing.assert_allclose(increasing[0], 0.3)
    assert np.all(np.diff(increasing, axis=0) > 0)
    assert np.all(np.diff(decreasing, axis=0) < 0)
    assert np.all(np.diff([posteriors(beta)[~exposed].mean() for beta in (0.0, 0.5, 1.0, 2.0)]) < 0)


def test_continuous_posterior_matches_the_normal_conjugate(small_dataset):
    spec = SensitivitySpec(u_kind="continuous", sigma_u=1.0, beta_u_y=1.0)
    theta = maximize(small_dataset, spec, None)

    grid, probabilities = posterior_u_continuous(small_dataset, theta, spec)

    design, _ = outcome_design(small_dataset)
    residual = small_dataset.y - design @ theta.outcome_coefficients
    variance = 1 / (1 + 1 / theta.sigma2)
    mean = variance * residual / theta.sigma2
    step = grid[1] - grid[0]
    exact = (
        norm.cdf(grid[None, :] + step / 2, loc=mean[:, None], scale=np.sqrt(variance))
        - norm.cdf(grid[None, :] - step / 2, loc=mean[:, None], scale=np.sqrt(variance))
    )

    total_variation = 0.5 * np.abs(probabilities - exact).sum(axis=1)
    assert total_variation.max() < 0.01


def test_stochastic_em_evaluates_the_final_posterior_once(small_dataset, monkeypatch):
    calls = []
    evaluate = sensem.posterior_u_continuous

    def counted(*args, **kwargs):
        calls.append(1)
        return evaluate(*args, **kwargs)

    monkeypatch.setattr(sensem, "posterior_u_continuous", counted)
    spec = SensitivitySpec(u_kind="continuous", beta_u_y=0.3, beta_u_m=0.3)

    result = stochastic_em(small_dataset, spec, draws=5, seed=3, **SHORT_CHAIN)

    assert len(calls) == result.iterations + 1
    assert len(result.u_draws) == 5
    assert not np.array_equal(result.u_draws[0], result.u_draws[1])
