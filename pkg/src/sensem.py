"""Simulation-based sensitivity analysis for an omitted confounder U.

Given assumed effects of U on the outcome (beta_u_y, linear scale) and on the risk factor (beta_u_m, logit scale),
a stochastic EM algorithm estimates the remaining parameters of

    Y = b0 + b_r R + b_x X + b_m M + b_mh M H1 + b_c C + beta_u_y U [+ b_mu M U] + e,   e ~ N(0, sigma2)
    logit P(M = 1) = g0 + g_r R + g_x X + g_c C + beta_u_m U

while drawing U from its conditional distribution given the observed data. The analysis is then repeated
conditional on several draws of U and the results are pooled by Rubin's rule.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
import pandas as pd
from scipy.special import log_expit, logsumexp
from scipy.stats import norm
from tqdm import tqdm

from src import runtime
from src.dataset import Dataset, SensitivitySpec
from src.decompose import DecompositionReport, DecompositionSettings, Estimate, decompose
from src.errors import ConfigError, EstimationError, GridTooNarrowError, ReplicateFailureError
from src.glm import fit_logistic, fit_wls, with_intercept
from src.models.iie import IIEEstimator
from src.models.otr import OTREstimator, compliance_stats
from src.rules import DecisionRule

BURN_IN = 50
WINDOW = 50
MAX_ITERATIONS = 200
TOLERANCE = 1e-3
GRID_HALF_WIDTH = 5.0
GRID_POINTS = 201
MIN_GRID_POINTS = 51
ENDPOINT_MASS = 0.5
MAX_FAILED_FRACTION = 0.2

IIE_COVERAGE_NOTE = "IIE standard errors are conservative, so confidence intervals may cover above the nominal level."


@dataclass
class EMParameters:
    """The parameters theta of the complete-data likelihood, excluding the fixed sensitivity coefficients.

    Attributes:
        outcome_coefficients: Coefficients of the outcome model over `outcome_names`.
        outcome_names: Names of the outcome design columns (1, R, X, M, M x H1, C).
        risk_coefficients: Logit coefficients of the risk-factor model over `risk_names`.
        risk_names: Names of the risk-factor design columns (1, R, X, C).
        sigma2: Residual variance of the outcome model.
        mu_coefficient: Coefficient of the M x U interaction, 0 unless U modifies the effect of M.
    """

    outcome_coefficients: np.ndarray
    outcome_names: list[str]
    risk_coefficients: np.ndarray
    risk_names: list[str]
    sigma2: float
    mu_coefficient: float = 0.0

    def vector(self) -> np.ndarray:
        return np.concatenate([self.risk_coefficients, self.outcome_coefficients, [self.mu_coefficient, self.sigma2]])

    @classmethod
    def from_vector(cls, vector: np.ndarray, outcome_names: list[str], risk_names: list[str]) -> EMParameters:
        k_r, k_o = len(risk_names), len(outcome_names)
        return cls(
            outcome_coefficients=vector[k_r:k_r + k_o],
            outcome_names=outcome_names,
            risk_coefficients=vector[:k_r],
            risk_names=risk_names,
            sigma2=float(vector[-1]),
            mu_coefficient=float(vector[-2]),
        )


@dataclass
class EMResult:
    """The outcome of a stochastic EM run.

    Attributes:
        theta: The tail-averaged parameter estimates.
        trajectory: One row of `theta.vector()` per iteration.
        u_draws: Independent draws of U at the final estimates.
        converged: Whether the running mean stabilized before the iteration cap.
        iterations: The number of iterations run.
    """

    theta: EMParameters
    trajectory: np.ndarray
    u_draws: list[np.ndarray]
    converged: bool
    iterations: int


@dataclass
class SensitivityResult:
    """A U-adjusted analysis pooled over draws of U.

    Attributes:
        estimates: The pooled decomposition.
        per_draw: The decomposition conditional on each successful draw.
        rule_summary: Recommendation and compliance rates of the rule refitted on each successful draw.
        rules: The rule refitted on each successful draw.
        draw_index: The index into `em.u_draws` of each successful draw.
        spec: The assumed confounder.
        em: The stochastic EM run the draws came from.
        failed_draws: The number of draws whose analysis failed.
    """

    estimates: DecompositionReport
    per_draw: list[DecompositionReport]
    rule_summary: list[dict]
    spec: SensitivitySpec
    em: EMResult
    rules: list[DecisionRule] = field(default_factory=list)
    draw_index: list[int] = field(default_factory=list)
    failed_draws: int = 0


def outcome_design(ds: Dataset) -> tuple[np.ndarray, list[str]]:
    """Returns the outcome design (1, R, X, M, M x H1, C) without U and its column names."""

    names = ["(Intercept)", ds.r_name, *ds.x_names, ds.m_name, *(f"{ds.m_name}:{name}" for name in ds.h1_names), *ds.c_names]
    return with_intercept(ds.r, ds.x, ds.m, ds.m[:, None] * ds.h1(), ds.c), names


def risk_design(ds: Dataset) -> tuple[np.ndarray, list[str]]:
    """Returns the risk-factor design (1, R, X, C) and its column names."""

    return with_intercept(ds.r, ds.x, ds.c), ["(Intercept)", ds.r_name, *ds.x_names, *ds.c_names]


def _log_likelihood(ds: Dataset, theta: EMParameters, spec: SensitivitySpec, u: np.ndarray) -> np.ndarray:
    """log f(Y | R, X, M, C, u) + log P(M | R, X, C, u) per unit; `u` broadcasts against a trailing grid axis."""

    outcome, _ = outcome_design(ds)
    risk, _ = risk_design(ds)
    y, m = ds.y[:, None], ds.m[:, None]

    mean = (outcome @ theta.outcome_coefficients)[:, None] + spec.beta_u_y * u + theta.mu_coefficient * m * u
    eta = (risk @ theta.risk_coefficients)[:, None] + spec.beta_u_m * u

    return norm.logpdf(y, loc=mean, scale=np.sqrt(theta.sigma2)) + m * log_expit(eta) + (1 - m) * log_expit(-eta)


def posterior_u_binary(ds: Dataset, theta: EMParameters, spec: SensitivitySpec) -> np.ndarray:
    """Returns P(U = 1 | Y, M, R, X, C) per unit for a binary U ~ Bernoulli(pi), computed in log space.

    Raises:
        ConfigError: When `spec` describes a continuous U.
        EstimationError: When the likelihood is not finite, which signals a degenerate outcome variance.
    """

    origin = "sensem.posterior_u_binary"

    if spec.u_kind != "binary":
        raise ConfigError(origin, f"Expected a binary confounder, found u_kind={spec.u_kind!r}.")

    log_joint = _log_likelihood(ds, theta, spec, np.array([[0.0, 1.0]])) + np.log([1 - spec.pi, spec.pi])
    if not np.all(np.isfinite(log_joint)):
        raise EstimationError(origin, f"Non-finite likelihood with outcome variance {theta.sigma2:g}.")

    return np.exp(log_joint[:, 1] - np.logaddexp(log_joint[:, 0], log_joint[:, 1]))


def posterior_u_continuous(
    ds: Dataset,
    theta: EMParameters,
    spec: SensitivitySpec,
    half_width: float = GRID_HALF_WIDTH,
    points: int = GRID_POINTS,
) -> tuple[np.ndarray, np.ndarray]:
    """Returns the per-unit posterior of a continuous U ~ N(0, sigma_u^2) discretized on an equispaced grid.

    Args:
        ds (Dataset): The dataset.
        theta (EMParameters): The current parameters.
        spec (SensitivitySpec): The assumed confounder.
        half_width (float, optional): The grid spans +-`half_width` sigma_u. Defaults to 5.
        points (int, optional): The number of grid points, at least 51. Defaults to 201.

    Raises:
        GridTooNarrowError: When some unit has at least half its posterior mass at a grid endpoint.

    Returns:
        tuple[np.ndarray, np.ndarray]: The grid and an (n, points) matrix of probabilities, rows summing to 1.
    """

    origin = "sensem.posterior_u_continuous"

    if spec.u_kind != "continuous":
        raise ConfigError(origin, f"Expected a continuous confounder, found u_kind={spec.u_kind!r}.")

    if points < MIN_GRID_POINTS:
        raise ConfigError(origin, f"The grid needs at least {MIN_GRID_POINTS} points, found {points}.")

    grid = np.linspace(-half_width * spec.sigma_u, half_width * spec.sigma_u, points)
    log_joint = _log_likelihood(ds, theta, spec, grid[None, :]) + norm.logpdf(grid, scale=spec.sigma_u)[None, :]
    if not np.all(np.isfinite(log_joint)):
        raise EstimationError(origin, f"Non-finite likelihood with outcome variance {theta.sigma2:g}.")

    probabilities = np.exp(log_joint - logsumexp(log_joint, axis=1, keepdims=True))

    edge = np.maximum(probabilities[:, 0], probabilities[:, -1])
    if np.any(edge >= ENDPOINT_MASS):
        raise GridTooNarrowError(origin, f"{int(np.sum(edge >= ENDPOINT_MASS))} units have at least {ENDPOINT_MASS:.0%} of their posterior mass at a grid endpoint; widen the grid or reduce the sensitivity coefficients.")

    return grid, probabilities


def sample_grid(grid: np.ndarray, probabilities: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Draws one value per row by inverse-CDF sampling, jittered uniformly within the grid cell."""

    cdf = np.cumsum(probabilities, axis=1)
    uniforms = rng.random(len(cdf))
    index = np.minimum((cdf < uniforms[:, None] * cdf[:, -1:]).sum(axis=1), len(grid) - 1)
    step = grid[1] - grid[0]

    return grid[index] + rng.uniform(-step / 2, step / 2, size=len(index))


def posterior_sampler(ds: Dataset, theta: EMParameters, spec: SensitivitySpec) -> Callable[[np.random.Generator], np.ndarray]:
    """Evaluates the conditional distribution of U once and returns a function drawing one U vector per generator."""

    if spec.u_kind == "binary":
        posterior = posterior_u_binary(ds, theta, spec)
        return lambda rng: (rng.random(ds.n) < posterior).astype(float)

    grid, probabilities = posterior_u_continuous(ds, theta, spec)
    return lambda rng: sample_grid(grid, probabilities, rng)


def draw_u(ds: Dataset, theta: EMParameters, spec: SensitivitySpec, rng: np.random.Generator) -> np.ndarray:
    """Draws one vector of U from its conditional distribution given the observed data."""

    return posterior_sampler(ds, theta, spec)(rng)


def maximize(ds: Dataset, spec: SensitivitySpec, u: np.ndarray | None) -> EMParameters:
    """Refits the outcome and risk-factor models given U, holding the sensitivity coefficients fixed as offsets.

    Without U (the starting values) the U terms are left out.
    """

    outcome, outcome_names = outcome_design(ds)
    risk, risk_names = risk_design(ds)
    outcome_offset = None if u is None else spec.beta_u_y * u
    risk_offset = None if u is None else spec.beta_u_m * u

    with_mu = spec.heterogeneous_u and u is not None
    design = np.column_stack([outcome, ds.m * u]) if with_mu else outcome
    outcome_fit = fit_wls(design, ds.y, offset=outcome_offset)
    risk_fit = fit_logistic(risk, ds.m, offset=risk_offset)

    coefficients = outcome_fit.coefficients
    return EMParameters(
        outcome_coefficients=coefficients[:len(outcome_names)],
        outcome_names=outcome_names,
        risk_coefficients=risk_fit.coefficients,
        risk_names=risk_names,
        sigma2=outcome_fit.residual_variance,
        mu_coefficient=float(coefficients[-1]) if with_mu else 0.0,
    )


def stochastic_em(
    ds: Dataset,
    spec: SensitivitySpec,
    draws: int,
    seed: int,
    max_iter: int = MAX_ITERATIONS,
    burn_in: int = BURN_IN,
    window: int = WINDOW,
    tolerance: float = TOLERANCE,
) -> EMResult:
    """Estimates theta by stochastic EM and draws U at the estimate.

    Every iteration draws one vector of U from its current conditional distribution and refits both models.
    After `burn_in` iterations the estimate is the mean over the last `window` iterations; the chain stops when
    that running mean moves by less than `tolerance` in every component, or at `max_iter`.

    Args:
        ds (Dataset): The dataset.
        spec (SensitivitySpec): The assumed confounder.
        draws (int): The number S of final draws of U, at least 2.
        seed (int): The master seed.
        max_iter (int, optional): The iteration cap. Defaults to 200.
        burn_in (int, optional): The number of iterations discarded. Defaults to 50.
        window (int, optional): The averaging window. Defaults to 50.
        tolerance (float, optional): The convergence tolerance on the running mean. Defaults to 1e-3.

    Raises:
        ConfigError: When fewer than 2 draws are requested or `max_iter` cannot hold burn-in and window.
        SeparationError: When the risk-factor model is separated.

    Returns:
        EMResult: The estimates, the trajectory and the S draws of U.
    """

    origin = "sensem.stochastic_em"

    if draws < 2:
        raise ConfigError(origin, f"At least 2 draws of U are needed for Rubin's rule, found {draws}.")

    if max_iter < burn_in + window:
        raise ConfigError(origin, f"max_iter ({max_iter}) must be at least burn-in ({burn_in}) plus window ({window}).")

    theta = maximize(ds, spec, None)
    outcome_names, risk_names = theta.outcome_names, theta.risk_names
    trajectory = []
    running_mean = None
    converged = False

    for iteration in range(max_iter):
        u = draw_u(ds, theta, spec, runtime.generator(seed, runtime.EM_ITERATION_STREAM, iteration))
        theta = maximize(ds, spec, u)
        trajectory.append(theta.vector())

        if iteration + 1 < burn_in + window:
            continue

        previous, running_mean = running_mean, np.mean(trajectory[-window:], axis=0)
        if previous is not None and np.max(np.abs(running_mean - previous)) < tolerance:
            converged = True
            break

    estimate = EMParameters.from_vector(running_mean, outcome_names, risk_names)
    sample = posterior_sampler(ds, estimate, spec)
    u_draws = [sample(runtime.generator(seed, runtime.U_DRAW_STREAM, s)) for s in range(draws)]

    return EMResult(theta=estimate, trajectory=np.vstack(trajectory), u_draws=u_draws, converged=converged, iterations=len(trajectory))


def rubin_combine(estimates: np.ndarray, variances: np.ndarray) -> tuple[float, float]:
    """Pools estimates over S draws: the mean, with total variance W + (1 + 1/S) B.

    Args:
        estimates (np.ndarray): The per-draw point estimates.
        variances (np.ndarray): The per-draw (within) variances.

    Raises:
        ConfigError: When fewer than 2 draws are given or the lengths differ.

    Returns:
        tuple[float, float]: The pooled point estimate and standard error.
    """

    estimates = np.asarray(estimates, dtype=float)
    variances = np.asarray(variances, dtype=float)
    draws = len(estimates)

    if draws < 2 or len(variances) != draws:
        raise ConfigError("sensem.rubin_combine", f"Rubin's rule needs at least 2 estimates with one variance each, found {draws} and {len(variances)}.")

    within = variances.mean()
    between = estimates.var(ddof=1)

    return float(estimates.mean()), float(np.sqrt(within + (1 + 1 / draws) * between))


def adjusted_analysis(
    ds: Dataset,
    spec: SensitivitySpec,
    otr_estimator: OTREstimator,
    iie: IIEEstimator,
    settings: DecompositionSettings,
    draws: int,
    seed: int,
    workers: int = 1,
    em_options: dict | None = None,
) -> SensitivityResult:
    """Repeats the OTR and decomposition analysis conditional on draws of U and pools the results.

    U is appended to X, so it enters the propensity and outcome models, and to H1 as well when U modifies the
    effect of the risk factor.

    Args:
        ds (Dataset): The dataset.
        spec (SensitivitySpec): The assumed confounder.
        otr_estimator (OTREstimator): Refits the optimal rule on every draw.
        iie (IIEEstimator): The IIE estimator.
        settings (DecompositionSettings): The decomposition options, including the bootstrap size.
        draws (int): The number S of draws of U.
        seed (int): The master seed.
        workers (int, optional): The maximum number of draws analyzed concurrently. Defaults to 1.
        em_options (dict | None, optional): Overrides of the stochastic EM schedule (max_iter, burn_in, window, tolerance).

    Raises:
        ReplicateFailureError: When the analysis fails on more than 20% of the draws.

    Returns:
        SensitivityResult: The pooled and per-draw results.
    """

    em = stochastic_em(ds, spec, draws, seed, **(em_options or {}))

    def analyze(s: int) -> tuple[DecompositionReport, dict, DecisionRule, int] | None:
        adjusted = ds.with_covariate("U", em.u_draws[s], effect_modifier=spec.heterogeneous_u)

        try:
            rule = otr_estimator.fit(adjusted)
            report = decompose(adjusted, rule, settings, iie, seed=runtime.derive_seed(seed, runtime.SENSITIVITY_DRAW_STREAM, s), otr_estimator=otr_estimator)
        except EstimationError:
            return None

        return report, compliance_stats(adjusted, rule), rule, s

    results = [result for result in runtime.parallel_map(analyze, range(draws), workers=workers) if result is not None]
    failed = draws - len(results)

    if failed > MAX_FAILED_FRACTION * draws or len(results) < 2:
        raise ReplicateFailureError("sensem.adjusted_analysis", f"The analysis failed on {failed} of {draws} draws of U, more than the {MAX_FAILED_FRACTION:.0%} allowed.")

    per_draw = [result[0] for result in results]
    pooled = {}
    for name in per_draw[0].estimates():
        values = [report.estimates()[name].value for report in per_draw]
        variances = [report.estimates()[name].se ** 2 for report in per_draw]
        pooled[name] = Estimate(*rubin_combine(values, variances))

    estimates = DecompositionReport(
        **pooled,
        estimator=per_draw[0].estimator,
        interaction_included=per_draw[0].interaction_included,
        c_center=per_draw[0].c_center,
        bootstrap_failed=sum(report.bootstrap_failed for report in per_draw),
        notes=[IIE_COVERAGE_NOTE] + ([] if em.converged else [f"Stochastic EM did not converge within {em.iterations} iterations."]),
    )

    return SensitivityResult(
        estimates=estimates,
        per_draw=per_draw,
        rule_summary=[result[1] for result in results],
        rules=[result[2] for result in results],
        draw_index=[result[3] for result in results],
        spec=spec,
        em=em,
        failed_draws=failed,
    )


def sensitivity_grid(
    ds: Dataset,
    pairs: list[tuple[float, float]],
    base_spec: SensitivitySpec,
    otr_estimator: OTREstimator,
    iie: IIEEstimator,
    settings: DecompositionSettings,
    draws: int,
    seed: int,
    workers: int = 1,
    verbose: bool = True,
) -> tuple[pd.DataFrame, dict[str, pd.DataFrame]]:
    """Runs the adjusted analysis for every (beta_u_y, beta_u_m) pair.

    A pair whose analysis fails is kept as a row with missing estimates and the error message.

    Returns:
        tuple[pd.DataFrame, dict[str, pd.DataFrame]]: One row per pair, and per estimand a contour table with
            beta_u_y as rows and beta_u_m as columns.
    """

    rows = []

    for k, (beta_u_y, beta_u_m) in enumerate(tqdm(pairs, desc="Sensitivity grid", disable=not verbose)):
        row = {"beta_u_y": float(beta_u_y), "beta_u_m": float(beta_u_m), "error": ""}
        spec = dataclasses.replace(base_spec, beta_u_y=float(beta_u_y), beta_u_m=float(beta_u_m))

        try:
            result = adjusted_analysis(ds, spec, otr_estimator, iie, settings, draws, runtime.derive_seed(seed, runtime.SENSITIVITY_GRID_STREAM, k), workers=workers)
        except EstimationError as error:
            row["error"] = str(error)
        else:
            for name, estimate in result.estimates.estimates().items():
                row.update({name: estimate.value, f"{name}_se": estimate.se, f"{name}_p": estimate.p_value})
            row["recommended_total"] = float(np.mean([summary["recommended_total"] for summary in result.rule_summary]))
            row["failed_draws"] = result.failed_draws

        rows.append(row)

    grid = pd.DataFrame(rows)
    contours = {}
    for name in ("tau", "zeta_icde", "delta_iie", "zeta_iie"):
        values = grid[name] if name in grid else pd.Series(np.nan, index=grid.index)
        contours[name] = grid.assign(**{name: values}).pivot_table(index="beta_u_y", columns="beta_u_m", values=name, dropna=False)

    return grid, contours
