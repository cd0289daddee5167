"""A simulation study of the OTR, decomposition and sensitivity analysis estimators.

Populations are generated with a binary confounder U that the analyses do not observe, in one of two modes:
"constant", where the optimal rule depends on X1 and X2 only, and "heterogeneous", where it depends on X1 and U.
Repeated subsamples of a fixed population are analyzed with and without adjusting for U, and the accuracy of the
estimated rules and the bias and coverage of the estimates are summarized per cell.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import pandas as pd
from scipy.special import expit
from tqdm import tqdm

from src import runtime
from src.dataset import Dataset, SensitivitySpec
from src.decompose import DecompositionSettings, decompose
from src.errors import ConfigError, EstimationError
from src.glm import fit_wls, with_intercept
from src.metrics import MetricTracker, accuracy
from src.models.iie import create_iie_estimator
from src.models.otr import OTR_ESTIMATORS, OTREstimator, apply_rule
from src.sensem import adjusted_analysis

MODES = ("constant", "heterogeneous")
SENSITIVITY_PARAMETERS = ((0.5, 0.5), (1.0, 1.0), (1.5, 1.5))
MIN_POPULATION_SIZE = 10**4
MIN_ITERATIONS = 10
MAX_FAILED_FRACTION = 0.1
ESTIMANDS = ("tau", "zeta_icde", "delta_icde", "delta_iie", "zeta_iie")


@dataclass(frozen=True)
class DgpConfig:
    """The data generating process of a simulated population.

    Attributes:
        mode: "constant" or "heterogeneous", the variables the optimal rule depends on.
        beta_u_y: Effect of U on Y.
        beta_u_m: Effect of U on the logit of M, also the penalty for deviating from the optimal rule.
        population_size: The number of units.
        seed: The population seed.
        redraw_noise: Whether interventional truths redraw the outcome noise instead of reusing it.
    """

    mode: str = "constant"
    beta_u_y: float = 1.0
    beta_u_m: float = 1.0
    population_size: int = 10**6
    seed: int = 0
    redraw_noise: bool = False

    def __post_init__(self) -> None:
        origin = "simstudy.DgpConfig"

        if self.mode not in MODES:
            raise ConfigError(origin, f"mode should be one of {list(MODES)}, but found {self.mode!r}.")

        if self.population_size < MIN_POPULATION_SIZE:
            raise ConfigError(origin, f"The population needs at least {MIN_POPULATION_SIZE} units, found {self.population_size}.")

        if not (np.isfinite(self.beta_u_y) and np.isfinite(self.beta_u_m)):
            raise ConfigError(origin, "Sensitivity parameters must be finite.")


@dataclass
class TrueEstimands:
    """Population values of the estimands, and the value of the true optimal rule."""

    tau: float
    zeta_icde: float
    delta_icde: float
    delta_iie: float
    zeta_iie: float
    value: float
    noise_reused: bool = True

    def get(self, name: str) -> float:
        return getattr(self, name)


@dataclass
class ExperimentResult:
    """The outcome of a simulation experiment.

    Attributes:
        metrics: One row per (n, adjusted, metric) with median, quartiles and mean.
        records: One row per successful (n, adjusted, iteration) with accuracy and every estimate.
        truths: The population values the estimates are compared against.
    """

    metrics: pd.DataFrame
    records: pd.DataFrame
    truths: TrueEstimands


def _draw(cfg: DgpConfig) -> dict[str, np.ndarray]:
    rng = runtime.generator(cfg.seed, runtime.POPULATION_STREAM)
    size = cfg.population_size

    c = (rng.random(size) < 0.4).astype(float)
    r = (rng.random(size) < expit(1 - 0.5 * c)).astype(float)
    u = (rng.random(size) < 0.5).astype(float)
    x1 = -0.8 + r + 1.5 * c + rng.standard_normal(size)
    x2 = 0.5 + 0.5 * r + 0.5 * c + rng.standard_normal(size)
    x3 = -0.8 - r + 0.5 * c + rng.standard_normal(size)

    if cfg.mode == "constant":
        m_opt = ((x1 > 0.1) & (x2 > 0.1)).astype(float)
    else:
        m_opt = ((x1 > 0.1) & (u > 0.5)).astype(float)

    m = (rng.random(size) < expit(0.5 - 0.5 * r + 0.2 * x1 + 0.5 * c + cfg.beta_u_m * u)).astype(float)
    noise = rng.standard_normal(size)

    return {"c": c, "r": r, "u": u, "x1": x1, "x2": x2, "x3": x3, "m_opt": m_opt, "m": m, "noise": noise}


def _outcome(cfg: DgpConfig, draws: dict[str, np.ndarray], m: np.ndarray, noise: np.ndarray) -> np.ndarray:
    return (
        0.5 - 0.5 * draws["r"] + 0.25 * draws["x1"] + 0.25 * draws["x2"] - 0.25 * draws["x3"]
        - cfg.beta_u_m * (m - draws["m_opt"]) ** 2 + 0.25 * draws["c"] + cfg.beta_u_y * draws["u"] + noise
    )


def generate_population(cfg: DgpConfig) -> Dataset:
    """Generates a population, with U and the optimal value M_opt kept as oracle columns.

    C ~ Bernoulli(0.4), R ~ Bernoulli(expit(1 - 0.5 C)), U ~ Bernoulli(0.5), and with standard normal errors
    X1 = -0.8 + R + 1.5 C + e1, X2 = 0.5 + 0.5 R + 0.5 C + e2, X3 = -0.8 - R + 0.5 C + e3,
    logit P(M = 1) = 0.5 - 0.5 R + 0.2 X1 + 0.5 C + beta_u_m U and
    Y = 0.5 - 0.5 R + 0.25 X1 + 0.25 X2 - 0.25 X3 - beta_u_m (M - M_opt)^2 + 0.25 C + beta_u_y U + e4.
    The effect modifiers are (X1, X2) in constant mode and X1 in heterogeneous mode.

    Args:
        cfg (DgpConfig): The data generating process.

    Returns:
        Dataset: The population; the same configuration always yields the same population.
    """

    draws = _draw(cfg)
    h1_cols = (0, 1) if cfg.mode == "constant" else (0,)

    return Dataset(
        y=_outcome(cfg, draws, draws["m"], draws["noise"]),
        m=draws["m"],
        r=draws["r"],
        c=draws["c"],
        x=np.column_stack([draws["x1"], draws["x2"], draws["x3"]]),
        x_names=("X1", "X2", "X3"),
        c_names=("C",),
        h1_cols=h1_cols,
        oracle={"U": draws["u"], "M_opt": draws["m_opt"]},
    )


def _group_coefficient(y: np.ndarray, r: np.ndarray, c: np.ndarray) -> float:
    return float(fit_wls(with_intercept(r, c), y).coefficients[1])


def true_estimands(cfg: DgpConfig) -> TrueEstimands:
    """Computes the estimands on the full population by applying the interventions to the generating equations.

    The ICDE sets M to M_opt for everybody. The IIE gives every comparison unit a compliance indicator drawn from
    the reference group's compliance rate with the true rule and sets M accordingly. Disparities are the R
    coefficients of population regressions on (1, R, C).

    Args:
        cfg (DgpConfig): The data generating process.

    Returns:
        TrueEstimands: The population values.
    """

    draws = _draw(cfg)
    rng = runtime.generator(cfg.seed, runtime.POPULATION_STREAM, 1)
    r, c = draws["r"], draws["c"]
    noise = draws["noise"]
    if cfg.redraw_noise:
        noise = runtime.generator(cfg.seed, runtime.POPULATION_STREAM, 2).standard_normal(cfg.population_size)

    observed = _outcome(cfg, draws, draws["m"], draws["noise"])
    under_rule = _outcome(cfg, draws, draws["m_opt"], noise)

    reference_rate = float(np.mean((draws["m"] == draws["m_opt"])[r == 0]))
    complies = rng.random(cfg.population_size) < reference_rate
    m_iie = np.where(r == 1, np.where(complies, draws["m_opt"], 1 - draws["m_opt"]), draws["m"])
    under_iie = np.where(r == 1, _outcome(cfg, draws, m_iie, noise), observed)

    tau = _group_coefficient(observed, r, c)
    zeta_icde = _group_coefficient(under_rule, r, c)
    zeta_iie = _group_coefficient(under_iie, r, c)

    return TrueEstimands(
        tau=tau,
        zeta_icde=zeta_icde,
        delta_icde=tau - zeta_icde,
        delta_iie=tau - zeta_iie,
        zeta_iie=zeta_iie,
        value=float(under_rule.mean()),
        noise_reused=not cfg.redraw_noise,
    )


def run_experiment(
    cfg: DgpConfig,
    n_grid: list[int],
    iterations: int,
    adjust: list[bool],
    otr_method: str | OTREstimator,
    settings: DecompositionSettings,
    draws: int,
    seed: int,
    workers: int = 1,
    accuracy_on: str = "sample",
    evaluation_size: int = 10**4,
    verbose: bool = True,
) -> ExperimentResult:
    """Analyzes repeated subsamples of a population with and without adjusting for U.

    Every iteration draws a subsample without replacement from its own seed substream, shared by the adjusted
    and unadjusted analyses. Adjusted analyses assume the true sensitivity parameters and a binary U with
    probability 0.5; U modifies the effect of M in heterogeneous mode. A cell with more than 10% failed
    iterations is reported as failed.

    Args:
        cfg (DgpConfig): The data generating process.
        n_grid (list[int]): The subsample sizes.
        iterations (int): The number of subsamples per size, at least 10.
        adjust (list[bool]): Which analyses to run, e.g. ``[False, True]``.
        otr_method (str | OTREstimator): The OTR estimator, or its name "qlearning" or "weighting" for the default options.
        settings (DecompositionSettings): The decomposition options, including the IIE estimator and bootstrap size.
        draws (int): The number of draws of U in adjusted analyses.
        seed (int): The master seed.
        workers (int, optional): The maximum number of iterations run concurrently. Defaults to 1.
        accuracy_on (str, optional): "sample" to score rules on the subsample, "population" on a fresh population sample. Defaults to "sample".
        evaluation_size (int, optional): The size of the fresh population sample. Defaults to 10^4.
        verbose (bool, optional): Whether to show progress bars. Defaults to True.

    Raises:
        ConfigError: For invalid iteration counts, sample sizes, OTR methods or accuracy modes.

    Returns:
        ExperimentResult: The summarized metrics, the per-iteration records and the truths.
    """

    origin = "simstudy.run_experiment"

    if iterations < MIN_ITERATIONS:
        raise ConfigError(origin, f"At least {MIN_ITERATIONS} iterations are needed, found {iterations}.")

    if isinstance(otr_method, str) and otr_method not in OTR_ESTIMATORS:
        raise ConfigError(origin, f"otr_method should be one of {sorted(OTR_ESTIMATORS)}, but found {otr_method!r}.")

    if accuracy_on not in ("sample", "population"):
        raise ConfigError(origin, f"accuracy_on should be 'sample' or 'population', but found {accuracy_on!r}.")

    if any(n > cfg.population_size or n < 2 for n in n_grid):
        raise ConfigError(origin, f"Sample sizes {list(n_grid)} must lie between 2 and the population size {cfg.population_size}.")

    population = generate_population(cfg)
    truths = true_estimands(cfg)
    otr_estimator = OTR_ESTIMATORS[otr_method]() if isinstance(otr_method, str) else otr_method
    iie = create_iie_estimator(settings)
    spec = SensitivitySpec(u_kind="binary", pi=0.5, beta_u_y=cfg.beta_u_y, beta_u_m=cfg.beta_u_m, heterogeneous_u=cfg.mode == "heterogeneous")

    evaluation = None
    if accuracy_on == "population":
        evaluation_rng = runtime.generator(seed, runtime.SIMULATION_STREAM, 0)
        evaluation = population.subset(evaluation_rng.choice(population.n, size=min(evaluation_size, population.n), replace=False))

    def accuracy_of(rule, sample: Dataset, adjusted_sample: Dataset | None) -> float:
        if evaluation is None:
            scored = adjusted_sample if adjusted_sample is not None else sample
        else:
            scored = evaluation if adjusted_sample is None else evaluation.with_covariate("U", evaluation.oracle["U"], effect_modifier=spec.heterogeneous_u)
        return accuracy(apply_rule(rule, scored), scored.oracle["M_opt"])

    def run_iteration(item: tuple[int, int, bool]) -> dict | None:
        n, iteration, adjusted = item
        rng = runtime.generator(seed, runtime.SIMULATION_STREAM, n, iteration)
        sample = population.subset(np.sort(rng.choice(population.n, size=n, replace=False)))
        analysis_seed = runtime.derive_seed(seed, runtime.SIMULATION_STREAM, n, iteration, int(adjusted))

        try:
            if adjusted:
                result = adjusted_analysis(sample, spec, otr_estimator, iie, settings, draws, analysis_seed)
                report = result.estimates
                rule_accuracy = float(np.mean([
                    accuracy_of(rule, sample, sample.with_covariate("U", result.em.u_draws[s], effect_modifier=spec.heterogeneous_u))
                    for rule, s in zip(result.rules, result.draw_index)
                ]))
            else:
                rule = otr_estimator.fit(sample)
                report = decompose(sample, rule, settings, iie, analysis_seed)
                rule_accuracy = accuracy_of(rule, sample, None)
        except EstimationError:
            return None

        record = {"n": n, "adjusted": adjusted, "iteration": iteration, "accuracy": rule_accuracy}
        for name, estimate in report.estimates().items():
            record.update({name: estimate.value, f"{name}_se": estimate.se})

        return record

    items = [(n, iteration, adjusted) for n in n_grid for adjusted in adjust for iteration in range(iterations)]
    results = runtime.parallel_map(run_iteration, tqdm(items, desc=f"Simulation ({cfg.mode})", disable=not verbose), workers=workers)

    records, rows = [], []
    for n in n_grid:
        for adjusted in adjust:
            tracker = MetricTracker()
            cell = [result for item, result in zip(items, results) if item[0] == n and item[2] == adjusted]

            for record in cell:
                if record is None:
                    tracker.failures += 1
                    continue

                records.append(record)
                tracker.record_accuracy(record["accuracy"])
                for name in ESTIMANDS:
                    tracker.record_estimate(name, record[name], record[f"{name}_se"], truths.get(name))

            failed = tracker.failures > MAX_FAILED_FRACTION * iterations
            summary = tracker.get_summary() if tracker.iterations else [{"metric": "accuracy", "median": np.nan, "q25": np.nan, "q75": np.nan, "mean": np.nan, "count": 0}]
            for row in summary:
                rows.append({
                    "mode": cfg.mode, "beta_u_y": cfg.beta_u_y, "beta_u_m": cfg.beta_u_m, "n": n, "adjusted": adjusted,
                    **row, "failed_iterations": tracker.failures, "cell_failed": failed,
                })

    metrics = pd.DataFrame(rows)
    metrics.loc[metrics["cell_failed"], ["median", "q25", "q75", "mean"]] = np.nan

    return ExperimentResult(metrics=metrics, records=pd.DataFrame(records), truths=truths)
