"""Expresses the strength of an omitted confounder U relative to an observed covariate X_j.

The analyst states that U changes the odds of M = 1 k_m times as much as X_j does, and that U's coefficient on Y is
k_y times X_j's. The first ratio converts exactly into beta_u_m. The second involves the coefficient of U on Y
*without* conditioning on M (conditioning on M would open a collider path), while the sensitivity analysis needs it
conditional on M; the conversion is calibrated by Monte Carlo on a synthetic population.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import pandas as pd
from scipy.special import expit
from tqdm import tqdm

from src import runtime
from src.dataset import Dataset, SensitivitySpec
from src.decompose import DecompositionSettings
from src.errors import CalibrationError, ConfigError, DataError, EstimationError, SchemaError
from src.glm import fit_logistic, fit_wls, with_intercept
from src.models.iie import IIEEstimator
from src.models.otr import OTREstimator
from src.reports import table_3
from src.sensem import adjusted_analysis

MIN_POPULATION_SIZE = 10**5
MAX_BISECTIONS = 200
BINARY_U_PI = 0.5


@dataclass(frozen=True)
class BenchmarkSpec:
    """The strength of U relative to a benchmark covariate.

    Attributes:
        covariate: The name of the X column X_j.
        k_m: How many times X_j's logit coefficient on M the coefficient of U is, positive.
        k_y: How many times X_j's coefficient on Y the coefficient of U is.
        u_kind: "continuous" (U ~ N(0, sigma_xj^2)) or "binary" (U ~ Bernoulli(0.5)).
        population_size: Size of the synthetic calibration population.
        seed: Seed of the calibration population.
        tolerance: Target absolute error of the ratio k_y.
    """

    covariate: str
    k_m: float
    k_y: float
    u_kind: str = "continuous"
    population_size: int = MIN_POPULATION_SIZE
    seed: int = 0
    tolerance: float = 0.01

    def __post_init__(self) -> None:
        origin = "benchmark.BenchmarkSpec"

        if not self.k_m > 0:
            raise ConfigError(origin, f"k_m must be positive, found {self.k_m}.")

        if self.u_kind not in ("binary", "continuous"):
            raise ConfigError(origin, f"u_kind should be 'binary' or 'continuous', but found {self.u_kind!r}.")

        if self.population_size < MIN_POPULATION_SIZE:
            raise ConfigError(origin, f"The calibration population needs at least {MIN_POPULATION_SIZE} units, found {self.population_size}.")

        if not self.tolerance > 0:
            raise ConfigError(origin, f"tolerance must be positive, found {self.tolerance}.")


@dataclass
class BenchmarkFits:
    """Observed-data coefficients of the benchmark covariate and the models the calibration population is drawn from.

    Attributes:
        beta_xj_m: Logit coefficient of X_j on M given R, X_-j and C.
        beta_xj_y: Coefficient of X_j on Y given R, X_-j and C, not conditioning on M.
        beta_m_y: Coefficient of M on Y given R, X and C.
        sigma_xj: Residual standard deviation of X_j given R, X_-j and C.
        se: Standard errors of the coefficients above, by attribute name.
        risk_coefficients: Logit model of M on (1, R, X, C).
        outcome_coefficients: Linear model of Y on (1, R, X, M, C).
        outcome_sd: Residual standard deviation of that outcome model.
    """

    beta_xj_m: float
    beta_xj_y: float
    beta_m_y: float
    sigma_xj: float
    se: dict[str, float] = field(default_factory=dict)
    risk_coefficients: np.ndarray | None = None
    outcome_coefficients: np.ndarray | None = None
    outcome_sd: float = 0.0


@dataclass
class CalibrationResult:
    """The calibrated beta_u_y with the diagnostics of its calibration population.

    Attributes:
        beta_u_y: The coefficient of U on Y given R, X, M and C.
        achieved_ratio: U's coefficient on Y (not conditioning on M) over beta_xj_y at `beta_u_y`.
        target_ratio: k_y.
        pi_m_u: Linear-probability coefficient of U on M given R, X and C.
        sigma_m: Residual standard deviation of M given R and X.
        bisections: The number of bisection steps taken.
    """

    beta_u_y: float
    achieved_ratio: float
    target_ratio: float
    pi_m_u: float
    sigma_m: float
    bisections: int


@dataclass
class BenchmarkReport:
    """Benchmark results over a grid of (k_m, k_y) cells, `table` in the one-column-per-cell layout."""

    table: pd.DataFrame
    cells: list[dict]


def _split(ds: Dataset, covariate: str) -> tuple[int, np.ndarray, np.ndarray]:
    if covariate not in ds.x_names:
        raise SchemaError("benchmark.fit_benchmarks", f"The benchmark covariate must be an X column, {covariate!r} is not one of {list(ds.x_names)}.")

    j = ds.x_names.index(covariate)
    return j, ds.x[:, j], np.delete(ds.x, j, axis=1)


def fit_benchmarks(ds: Dataset, covariate: str) -> BenchmarkFits:
    """Fits the observed-data models that benchmark U against the covariate `covariate`.

    Args:
        ds (Dataset): The dataset.
        covariate (str): The name of the X column X_j.

    Raises:
        SchemaError: When `covariate` is not an X column.
        DataError: When X_j has no residual variation given R, X_-j and C.

    Returns:
        BenchmarkFits: The benchmark coefficients.
    """

    origin = "benchmark.fit_benchmarks"
    _, xj, x_rest = _split(ds, covariate)

    residual = fit_wls(with_intercept(ds.r, x_rest, ds.c), xj)
    sigma_xj = float(np.sqrt(residual.residual_variance))
    if sigma_xj <= 1e-12:
        raise DataError(origin, f"{covariate} has zero residual standard deviation given R, the other X and C.")

    design = with_intercept(ds.r, x_rest, xj, ds.c)
    names = ["(Intercept)", ds.r_name, *(name for name in ds.x_names if name != covariate), covariate, *ds.c_names]
    on_m = fit_logistic(design, ds.m, names=names)
    on_y = fit_wls(design, ds.y, names=names)

    risk = fit_logistic(with_intercept(ds.r, ds.x, ds.c), ds.m)
    outcome_names = ["(Intercept)", ds.r_name, *ds.x_names, ds.m_name, *ds.c_names]
    outcome = fit_wls(with_intercept(ds.r, ds.x, ds.m, ds.c), ds.y, names=outcome_names)

    return BenchmarkFits(
        beta_xj_m=on_m.coefficient(covariate),
        beta_xj_y=on_y.coefficient(covariate),
        beta_m_y=outcome.coefficient(ds.m_name),
        sigma_xj=sigma_xj,
        se={
            "beta_xj_m": on_m.standard_error(covariate),
            "beta_xj_y": on_y.standard_error(covariate),
            "beta_m_y": outcome.standard_error(ds.m_name),
        },
        risk_coefficients=risk.coefficients,
        outcome_coefficients=outcome.coefficients,
        outcome_sd=float(np.sqrt(outcome.residual_variance)),
    )


def convert_km(spec: BenchmarkSpec, fits: BenchmarkFits) -> float:
    """Returns beta_u_m = ln(k_m) + beta_xj_m."""

    return float(np.log(spec.k_m) + fits.beta_xj_m)


def calibrate_ky(ds: Dataset, spec: BenchmarkSpec, fits: BenchmarkFits, beta_u_m: float) -> CalibrationResult:
    """Finds the beta_u_y at which U's coefficient on Y, not conditioning on M, is k_y times X_j's.

    A synthetic population resamples the observed (R, X, C), draws U independently of them, draws M from the
    observed risk-factor model plus beta_u_m U and Y from the observed outcome model plus beta_u_y U. Every
    candidate beta_u_y reuses the same draws, so the target is monotone in beta_u_y and is solved by bisection
    over [-10 |beta_xj_y| - 10, 10 |beta_xj_y| + 10].

    Args:
        ds (Dataset): The dataset the population is resampled from.
        spec (BenchmarkSpec): The benchmark, including population size, seed and tolerance.
        fits (BenchmarkFits): The output of `fit_benchmarks`.
        beta_u_m (float): The effect of U on M, from `convert_km`.

    Raises:
        CalibrationError: When the bracket does not contain the target or the tolerance is not reached.

    Returns:
        CalibrationResult: The calibrated coefficient and its diagnostics.
    """

    origin = "benchmark.calibrate_ky"
    rng = runtime.generator(spec.seed, runtime.BENCHMARK_STREAM)
    size = spec.population_size

    rows = rng.integers(0, ds.n, size=size)
    r, x, c = ds.r[rows], ds.x[rows], ds.c[rows]
    if spec.u_kind == "continuous":
        u = rng.normal(0.0, fits.sigma_xj, size=size)
    else:
        u = (rng.random(size) < BINARY_U_PI).astype(float)

    m = (rng.random(size) < expit(with_intercept(r, x, c) @ fits.risk_coefficients + beta_u_m * u)).astype(float)
    base = with_intercept(r, x, m, c) @ fits.outcome_coefficients + rng.normal(0.0, fits.outcome_sd, size=size)

    # Y = base + beta_u_y U, so U's coefficient is linear in beta_u_y: coef(base) + beta_u_y coef(U).
    j, _, _ = _split(ds, spec.covariate)
    design = with_intercept(r, np.delete(x, j, axis=1), x[:, j], c, u)
    from_base = fit_wls(design, base).coefficients[-1]
    from_u = fit_wls(design, u).coefficients[-1]

    target = spec.k_y * fits.beta_xj_y
    scale = abs(fits.beta_xj_y) if fits.beta_xj_y != 0 else 1.0
    error = lambda beta: (from_base + beta * from_u - target) / scale

    low, high = -10 * abs(fits.beta_xj_y) - 10, 10 * abs(fits.beta_xj_y) + 10
    if error(low) * error(high) > 0:
        raise CalibrationError(origin, f"No sign change of the ratio error in [{low:.3f}, {high:.3f}]: errors {error(low):.3f} and {error(high):.3f}, U's coefficient at beta_u_y=0 is {from_base:.4f} against a target of {target:.4f}.")

    bisections = 0
    beta = (low + high) / 2
    while abs(error(beta)) >= spec.tolerance:
        if bisections == MAX_BISECTIONS:
            raise CalibrationError(origin, f"The ratio error {error(beta):.4f} did not drop below {spec.tolerance} within {MAX_BISECTIONS} bisections at population size {size}.")
        if error(low) * error(beta) <= 0:
            high = beta
        else:
            low = beta
        beta = (low + high) / 2
        bisections += 1

    pi_m_u = fit_wls(with_intercept(r, x, c, u), m).coefficients[-1]
    sigma_m = np.sqrt(fit_wls(with_intercept(r, x), m).residual_variance)

    return CalibrationResult(
        beta_u_y=float(beta),
        achieved_ratio=float((from_base + beta * from_u) / fits.beta_xj_y) if fits.beta_xj_y != 0 else float("nan"),
        target_ratio=float(spec.k_y),
        pi_m_u=float(pi_m_u),
        sigma_m=float(sigma_m),
        bisections=bisections,
    )


def sensitivity_spec(spec: BenchmarkSpec, fits: BenchmarkFits, beta_u_y: float, beta_u_m: float) -> SensitivitySpec:
    """Returns the assumed confounder of a benchmark cell, a continuous U with the residual SD of X_j or a binary U."""

    if spec.u_kind == "continuous":
        return SensitivitySpec(u_kind="continuous", sigma_u=fits.sigma_xj, beta_u_y=beta_u_y, beta_u_m=beta_u_m)

    return SensitivitySpec(u_kind="binary", pi=BINARY_U_PI, beta_u_y=beta_u_y, beta_u_m=beta_u_m)


def benchmark_table(
    ds: Dataset,
    covariate: str,
    grid: list[tuple[float, float]],
    otr_estimator: OTREstimator,
    iie: IIEEstimator,
    settings: DecompositionSettings,
    draws: int,
    seed: int,
    u_kind: str = "continuous",
    population_size: int = MIN_POPULATION_SIZE,
    tolerance: float = 0.01,
    workers: int = 1,
    verbose: bool = True,
) -> BenchmarkReport:
    """Runs the U-adjusted analysis for every (k_m, k_y) cell of a benchmark grid.

    A cell that fails is marked in the table and the remaining cells still run.

    Args:
        ds (Dataset): The dataset.
        covariate (str): The benchmark covariate X_j.
        grid (list[tuple[float, float]]): The (k_m, k_y) cells.
        otr_estimator (OTREstimator): The OTR estimator.
        iie (IIEEstimator): The IIE estimator.
        settings (DecompositionSettings): The decomposition options.
        draws (int): The number of draws of U per cell.
        seed (int): The master seed; every cell derives its own substream.
        u_kind (str, optional): The kind of U. Defaults to "continuous".
        population_size (int, optional): Size of the calibration population. Defaults to 10^5.
        tolerance (float, optional): Calibration tolerance on the ratio k_y. Defaults to 0.01.
        workers (int, optional): The maximum number of cells run concurrently. Defaults to 1.
        verbose (bool, optional): Whether to show a progress bar. Defaults to True.

    Returns:
        BenchmarkReport: The table and the per-cell records, in grid order.
    """

    fits = fit_benchmarks(ds, covariate)

    def run_cell(item: tuple[int, tuple[float, float]]) -> dict:
        k, (k_m, k_y) = item
        cell = {"k_m": float(k_m), "k_y": float(k_y), "error": ""}

        try:
            spec = BenchmarkSpec(covariate, k_m, k_y, u_kind=u_kind, population_size=population_size, seed=runtime.derive_seed(seed, runtime.BENCHMARK_STREAM, k), tolerance=tolerance)
            beta_u_m = convert_km(spec, fits)
            calibration = calibrate_ky(ds, spec, fits, beta_u_m)
            result = adjusted_analysis(ds, sensitivity_spec(spec, fits, calibration.beta_u_y, beta_u_m), otr_estimator, iie, settings, draws, spec.seed)
        except (EstimationError, ConfigError) as error:
            cell["error"] = str(error)
            return cell

        cell.update({
            "beta_u_m": beta_u_m,
            "beta_u_y": calibration.beta_u_y,
            "upper_bound": True,
            "calibration": calibration,
            "recommended": float(np.mean([summary["recommended_total"] for summary in result.rule_summary])),
            "report": result.estimates,
            "failed_draws": result.failed_draws,
        })
        return cell

    items = list(enumerate(grid))
    cells = runtime.parallel_map(run_cell, tqdm(items, desc="Benchmark cells", disable=not verbose), workers=workers)

    return BenchmarkReport(table=table_3(cells), cells=cells)
