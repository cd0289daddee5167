"""Estimates the initial disparity and the disparity reduction and remaining under individualized interventions.

Two interventions are evaluated. The individualized controlled direct effect (ICDE) sets everybody's risk factor to
the value recommended by the optimal rule; the individualized interventional effect (IIE) equalizes the rate of
compliance with the rule between the groups, within levels of the target-factor-allowable covariates A^m.
All estimands are conditional on the baseline covariates C at a fixed centering value c.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import TYPE_CHECKING, Callable, Sequence

import numpy as np
from scipy.special import expit
from scipy.stats import norm

from src import runtime
from src.dataset import Dataset
from src.errors import ConfigError, DimensionError, EmptyArmError, EstimationError, NoCompliantUnitError, ReplicateFailureError
from src.glm import fit_logistic, fit_propensity, fit_wls, observed_arm_probability, predict_prob, with_intercept
from src.models.otr import apply_rule
from src.rules import DecisionRule

if TYPE_CHECKING:
    from src.models.iie import IIEEstimator
    from src.models.otr import OTREstimator

MAX_FAILED_FRACTION = 0.2


@dataclass
class Estimate:
    """A point estimate with its standard error."""

    value: float
    se: float = float("nan")

    @property
    def z(self) -> float:
        return self.value / self.se if self.se > 0 else float("nan")

    @property
    def p_value(self) -> float:
        """float: Two-sided p-value of the normal-approximation z-test of a zero estimand."""

        return float(2 * norm.sf(abs(self.z))) if np.isfinite(self.z) else float("nan")

    def to_dict(self) -> dict:
        return {"value": self.value, "se": self.se}


@dataclass
class DecompositionSettings:
    """Options of a decomposition analysis.

    Attributes:
        estimator: The IIE estimator, "regression" or "weighting".
        interaction: Whether the IIE outcome model includes the R x I(M = d) interaction.
        rc_interaction: Whether the ICDE marginal structural model includes R x C interactions.
        truncation: Percentiles [q_lo, q_hi] at which inverse-probability weights are truncated, None for no truncation.
        am_reference: Population over which E[A^m] is averaged in the regression IIE estimator, "full" or "comparison".
        c_center: "mean" or explicit baseline covariate values at which the estimands are evaluated.
        bootstrap: Number of bootstrap replicates.
        refit_rule: Whether the optimal rule is re-estimated inside every bootstrap replicate.
    """

    estimator: str = "regression"
    interaction: bool = False
    rc_interaction: bool = False
    truncation: tuple[float, float] | None = None
    am_reference: str = "full"
    c_center: str | list[float] = "mean"
    bootstrap: int = 200
    refit_rule: bool = False

    def __post_init__(self) -> None:
        origin = "decompose.DecompositionSettings"

        if self.estimator not in ("regression", "weighting"):
            raise ConfigError(origin, f"estimator should be 'regression' or 'weighting', but found {self.estimator!r}.")

        if self.am_reference not in ("full", "comparison"):
            raise ConfigError(origin, f"am_reference should be 'full' or 'comparison', but found {self.am_reference!r}.")

        if self.truncation is not None:
            q_lo, q_hi = self.truncation
            if not 0 <= q_lo < q_hi <= 100:
                raise ConfigError(origin, f"truncation percentiles must satisfy 0 <= q_lo < q_hi <= 100, found {self.truncation}.")
            self.truncation = (float(q_lo), float(q_hi))

        if self.bootstrap < 2:
            raise ConfigError(origin, f"At least 2 bootstrap replicates are needed, found {self.bootstrap}.")


@dataclass
class BootstrapResult:
    """Standard errors from a stratified nonparametric bootstrap.

    Attributes:
        se: One standard error per estimated quantity.
        replicates: The successful replicate estimates, one row per replicate.
        failed: The number of replicates dropped because estimation failed.
    """

    se: np.ndarray
    replicates: np.ndarray
    failed: int = 0


@dataclass
class DecompositionReport:
    """The decomposition estimands with bootstrap standard errors.

    `delta_icde` is the ICDE disparity reduction tau - zeta_icde, with the standard error of the difference.
    """

    tau: Estimate
    zeta_icde: Estimate
    delta_iie: Estimate
    zeta_iie: Estimate
    estimator: str
    interaction_included: bool
    c_center: np.ndarray
    delta_icde: Estimate | None = None
    bootstrap_failed: int = 0
    notes: list[str] = field(default_factory=list)

    @property
    def pct_reduction_icde(self) -> float:
        return percent_reduction(self.tau.value, self.zeta_icde.value)

    @property
    def pct_reduction_iie(self) -> float:
        if self.tau.value == 0:
            return float("nan")

        return 100 * self.delta_iie.value / self.tau.value

    def estimates(self) -> dict[str, Estimate]:
        estimates = {"tau": self.tau, "zeta_icde": self.zeta_icde, "delta_iie": self.delta_iie, "zeta_iie": self.zeta_iie}
        if self.delta_icde is not None:
            estimates["delta_icde"] = self.delta_icde

        return estimates

    def to_dict(self) -> dict:
        return {
            **{name: estimate.to_dict() for name, estimate in self.estimates().items()},
            "pct_reduction_icde": self.pct_reduction_icde,
            "pct_reduction_iie": self.pct_reduction_iie,
            "estimator": self.estimator,
            "interaction_included": self.interaction_included,
            "c_center": [float(value) for value in self.c_center],
            "bootstrap_failed": self.bootstrap_failed,
            "notes": list(self.notes),
        }


def percent_reduction(tau: float, zeta: float) -> float:
    """Returns 100 (tau - zeta) / tau, NaN when tau is 0."""

    if tau == 0:
        return float("nan")

    return 100 * (tau - zeta) / tau


def resolve_c_center(ds: Dataset, c_center: str | Sequence[float] | np.ndarray | None) -> np.ndarray:
    """Returns the baseline covariate values c the estimands condition on.

    Raises:
        DimensionError: When explicit values do not match the number of C columns.
    """

    if c_center is None:
        return np.zeros(ds.c.shape[1])

    if isinstance(c_center, str):
        if c_center != "mean":
            raise ConfigError("decompose.resolve_c_center", f"c_center should be 'mean' or a list of values, but found {c_center!r}.")
        return ds.c.mean(axis=0)

    center = np.atleast_1d(np.asarray(c_center, dtype=float))
    if center.shape != (ds.c.shape[1],):
        raise DimensionError("decompose.resolve_c_center", f"Expected {ds.c.shape[1]} centering values, found {center.size}.")

    return center


def _with_u(ds: Dataset, u: np.ndarray | None) -> Dataset:
    return ds if u is None else ds.with_covariate("U", u)


def _centered_c(ds: Dataset, c_center: np.ndarray | None) -> np.ndarray:
    return ds.c - resolve_c_center(ds, c_center)


def inverse_probability_weights(m: np.ndarray, propensity: np.ndarray, truncation: tuple[float, float] | None = None) -> np.ndarray:
    """Returns 1 / P(M = m_i | history), optionally truncated at the given percentiles."""

    weights = 1 / observed_arm_probability(m, propensity)

    if truncation is not None:
        weights = np.clip(weights, *np.percentile(weights, truncation))

    return weights


def _propensity(ds: Dataset, propensity: np.ndarray | None) -> np.ndarray:
    if propensity is None:
        return fit_propensity(ds)

    propensity = np.asarray(propensity, dtype=float)
    if propensity.shape != (ds.n,):
        raise DimensionError("decompose.propensity", f"Expected {ds.n} propensities, found {propensity.size}.")

    return propensity


def compliance(ds: Dataset, rule: DecisionRule) -> np.ndarray:
    """Returns the compliance indicator I(M = d(H)) as 0/1 floats."""

    return (ds.m == apply_rule(rule, ds)).astype(float)


def estimate_initial_disparity(ds: Dataset, c_center: np.ndarray | None = None) -> float:
    """Estimates the initial disparity tau_c, the coefficient of R in the regression of Y on (1, R, C - c).

    Args:
        ds (Dataset): The dataset.
        c_center (np.ndarray | None, optional): The baseline covariate values c. Defaults to the data as given.

    Returns:
        float: The estimated initial disparity.
    """

    design = with_intercept(ds.r, _centered_c(ds, c_center))
    fit = fit_wls(design, ds.y, names=["(Intercept)", ds.r_name, *ds.c_names])

    return fit.coefficient(ds.r_name)


def estimate_icde(
    ds: Dataset,
    rule: DecisionRule,
    c_center: np.ndarray | None = None,
    u: np.ndarray | None = None,
    truncation: tuple[float, float] | None = None,
    rc_interaction: bool = False,
    propensity: np.ndarray | None = None,
) -> float:
    """Estimates the disparity remaining when everybody's risk factor is set to the rule's recommendation.

    Fits the marginal structural model Y = g1 + g2 R + g3 (C - c) [+ g4 R (C - c)] with weights
    I(M = d(H)) / P(M | R, X, [U], C) and returns g2.

    Args:
        ds (Dataset): The dataset.
        rule (DecisionRule): The optimal rule d.
        c_center (np.ndarray | None, optional): The baseline covariate values c. Defaults to the data as given.
        u (np.ndarray | None, optional): A simulated confounder that enters the propensity model.
        truncation (tuple[float, float] | None, optional): Weight truncation percentiles.
        rc_interaction (bool, optional): Whether to include R x C interactions. Defaults to False.
        propensity (np.ndarray | None, optional): P(M = 1 | history) per unit, fitted when not supplied.

    Raises:
        NoCompliantUnitError: When no unit of a group follows the rule.

    Returns:
        float: The estimated disparity remaining.
    """

    follows = compliance(ds, rule)

    for group in (1, 0):
        if not follows[ds.group(group)].any():
            raise NoCompliantUnitError("decompose.estimate_icde", f"No unit in group {ds.r_name}={group} follows the rule.")

    weights = follows * inverse_probability_weights(ds.m, _propensity(_with_u(ds, u), propensity), truncation)
    c = _centered_c(ds, c_center)
    blocks = [ds.r, c, ds.r[:, None] * c] if rc_interaction and c.shape[1] else [ds.r, c]
    fit = fit_wls(with_intercept(*blocks), ds.y, w=weights)

    return float(fit.coefficients[1])


def estimate_iie_regression(
    ds: Dataset,
    rule: DecisionRule,
    c_center: np.ndarray | None = None,
    interaction: bool = False,
    u: np.ndarray | None = None,
    am_reference: str = "full",
    truncation: tuple[float, float] | None = None,
    propensity: np.ndarray | None = None,
) -> tuple[float, float]:
    """Estimates the IIE disparity reduction and remaining with the regression estimator.

    A compliance model logit P(I = 1) = f1 + f2 R + f3 A^m and an outcome model Y = l1 + l2 R + l3 I [+ l5 R I] + l4 (C - c),
    weighted by 1 / P(M | R, X, [U], C), give the reduction
    {expit(f1 + f2 + f3 E[A^m]) - expit(f1 + f3 E[A^m])} (l3 [+ l5]); the disparity remaining is tau - reduction.

    Args:
        ds (Dataset): The dataset.
        rule (DecisionRule): The optimal rule d.
        c_center (np.ndarray | None, optional): The baseline covariate values c. Defaults to the data as given.
        interaction (bool, optional): Whether to include the R x I interaction. Defaults to False.
        u (np.ndarray | None, optional): A simulated confounder that enters the propensity model.
        am_reference (str, optional): "full" or "comparison", the units E[A^m] is averaged over. Defaults to "full".
        truncation (tuple[float, float] | None, optional): Weight truncation percentiles.
        propensity (np.ndarray | None, optional): P(M = 1 | history) per unit, fitted when not supplied.

    Raises:
        EmptyArmError: When nobody or everybody complies with the rule.
        SeparationError: When the compliance model is separated.

    Returns:
        tuple[float, float]: The disparity reduction and the disparity remaining.
    """

    follows = compliance(ds, rule)
    if follows.min() == follows.max():
        raise EmptyArmError("decompose.estimate_iie_regression", f"All units have compliance I(M = d) = {int(follows[0])}, so the compliance model cannot be fitted.")

    am = ds.am()
    phi = fit_logistic(with_intercept(ds.r, am), follows).coefficients
    am_units = am if am_reference == "full" else am[ds.group(1)]
    am_term = float(am_units.mean(axis=0) @ phi[2:]) if am.shape[1] else 0.0

    weights = inverse_probability_weights(ds.m, _propensity(_with_u(ds, u), propensity), truncation)
    c = _centered_c(ds, c_center)
    blocks = [ds.r, follows, ds.r * follows, c] if interaction else [ds.r, follows, c]
    lam = fit_wls(with_intercept(*blocks), ds.y, w=weights).coefficients
    effect = lam[2] + lam[3] if interaction else lam[2]

    delta = float((expit(phi[0] + phi[1] + am_term) - expit(phi[0] + am_term)) * effect)
    tau = estimate_initial_disparity(ds, c_center)

    return delta, tau - delta


def reference_compliance_rate(ds: Dataset, rule: DecisionRule) -> float:
    """Returns the reference-group compliance rate applied to the comparison group.

    Without A^m this is the marginal rate among reference units. With A^m, a logistic model of compliance on A^m is
    fitted to the reference group and its predictions are averaged over the comparison group.
    """

    follows = compliance(ds, rule)
    reference, comparison = ds.group(0), ds.group(1)
    reference_follows = follows[reference]

    if not ds.am_cols or reference_follows.min() == reference_follows.max():
        return float(reference_follows.mean())

    am = ds.am()
    fit = fit_logistic(with_intercept(am[reference]), reference_follows)

    return float(predict_prob(fit, with_intercept(am[comparison])).mean())


def _conditional_mean(y: np.ndarray, c: np.ndarray, weights: np.ndarray | None = None) -> float:
    # Intercept of Y on (1, C - c), i.e. the (weighted) mean of Y at C = c; the Hajek mean without C.
    return float(fit_wls(with_intercept(c), y, w=weights).coefficients[0])


def estimate_iie_weighting(
    ds: Dataset,
    rule: DecisionRule,
    c_center: np.ndarray | None = None,
    truncation: tuple[float, float] | None = None,
    propensity: np.ndarray | None = None,
) -> tuple[float, float]:
    """Estimates the IIE disparity reduction and remaining with the weighting estimator.

    Comparison-group units are weighted by W^t = I(M = t d + (1 - t)(1 - d)) / P(M | R = 1, X, C) for t in {0, 1}, and
    the two Hajek-weighted outcome means are mixed in the reference group's compliance proportions.

    Args:
        ds (Dataset): The dataset.
        rule (DecisionRule): The optimal rule d.
        c_center (np.ndarray | None, optional): The baseline covariate values c. Defaults to the data as given.
        truncation (tuple[float, float] | None, optional): Weight truncation percentiles.
        propensity (np.ndarray | None, optional): P(M = 1 | history) per unit, fitted when not supplied.

    Raises:
        EmptyArmError: When no comparison unit has the risk factor value of a weighted arm with positive mixing weight.

    Returns:
        tuple[float, float]: The disparity reduction and the disparity remaining.
    """

    origin = "decompose.estimate_iie_weighting"
    comparison, reference = ds.group(1), ds.group(0)
    c = _centered_c(ds, c_center)

    rate = reference_compliance_rate(ds, rule)
    recommended = apply_rule(rule, ds)
    weights = inverse_probability_weights(ds.m, _propensity(ds, propensity), truncation)
    mixture = 0.0

    for theta, share in ((1, rate), (0, 1 - rate)):
        if share <= 0:
            continue

        target = recommended if theta == 1 else 1 - recommended
        arm = (ds.m == target)[comparison]
        if not arm.any():
            raise EmptyArmError(origin, f"No comparison unit has the risk factor value of the {'compliant' if theta else 'non-compliant'} arm.")

        mixture += share * _conditional_mean(ds.y[comparison], c[comparison], arm * weights[comparison])

    comparison_mean = _conditional_mean(ds.y[comparison], c[comparison])
    reference_mean = _conditional_mean(ds.y[reference], c[reference])

    return comparison_mean - mixture, mixture - reference_mean


def bootstrap_se(
    ds: Dataset,
    estimator: Callable[[Dataset], np.ndarray],
    replicates: int,
    seed: int,
    workers: int = 1,
) -> BootstrapResult:
    """Estimates standard errors by a nonparametric bootstrap stratified by group.

    Every replicate resamples each group with replacement at its original size, from its own seed substream, so
    the result does not depend on the number of workers.

    Args:
        ds (Dataset): The dataset.
        estimator (Callable[[Dataset], np.ndarray]): Maps a dataset to a vector of estimates.
        replicates (int): The number of replicates B.
        seed (int): The master seed.
        workers (int, optional): The maximum number of concurrent replicates. Defaults to 1.

    Raises:
        ConfigError: When fewer than 2 replicates are requested.
        ReplicateFailureError: When more than 20% of the replicates fail.

    Returns:
        BootstrapResult: The standard errors, the successful replicates and the failure count.
    """

    origin = "decompose.bootstrap_se"

    if replicates < 2:
        raise ConfigError(origin, f"At least 2 bootstrap replicates are needed, found {replicates}.")

    strata = [np.flatnonzero(ds.group(1)), np.flatnonzero(ds.group(0))]

    def replicate(b: int) -> np.ndarray | None:
        rng = runtime.generator(seed, runtime.BOOTSTRAP_STREAM, b)
        index = np.concatenate([rng.choice(units, size=len(units), replace=True) for units in strata])

        try:
            return np.atleast_1d(np.asarray(estimator(ds.subset(index)), dtype=float))
        except EstimationError:
            return None

    results = runtime.parallel_map(replicate, range(replicates), workers=workers)
    successful = [result for result in results if result is not None]
    failed = replicates - len(successful)

    if failed > MAX_FAILED_FRACTION * replicates or len(successful) < 2:
        raise ReplicateFailureError(origin, f"{failed} of {replicates} bootstrap replicates failed, more than the {MAX_FAILED_FRACTION:.0%} allowed.")

    stacked = np.vstack(successful)

    return BootstrapResult(se=stacked.std(axis=0, ddof=1), replicates=stacked, failed=failed)


def point_estimates(
    ds: Dataset,
    rule: DecisionRule,
    settings: DecompositionSettings,
    iie: IIEEstimator,
    c_center: np.ndarray,
) -> np.ndarray:
    """Returns (tau, zeta_icde, delta_iie, zeta_iie) for one dataset, sharing a single propensity fit."""

    propensity = fit_propensity(ds)
    tau = estimate_initial_disparity(ds, c_center)
    zeta_icde = estimate_icde(ds, rule, c_center, truncation=settings.truncation, rc_interaction=settings.rc_interaction, propensity=propensity)
    delta, zeta_iie = iie.estimate(ds, rule, c_center, propensity=propensity)

    return np.array([tau, zeta_icde, delta, zeta_iie])


def decompose(
    ds: Dataset,
    rule: DecisionRule,
    settings: DecompositionSettings,
    iie: IIEEstimator,
    seed: int,
    workers: int = 1,
    otr_estimator: OTREstimator | None = None,
) -> DecompositionReport:
    """Computes all four estimands and their stratified bootstrap standard errors.

    The rule is held fixed across replicates unless `settings.refit_rule` is set, in which case `otr_estimator`
    re-estimates it on every replicate. The centering value c is resolved once on the full data.

    Args:
        ds (Dataset): The dataset.
        rule (DecisionRule): The optimal rule estimated on `ds`.
        settings (DecompositionSettings): The decomposition options.
        iie (IIEEstimator): The IIE estimator.
        seed (int): The master seed of the bootstrap.
        workers (int, optional): The maximum number of concurrent replicates. Defaults to 1.
        otr_estimator (OTREstimator | None, optional): Required when `settings.refit_rule` is set.

    Raises:
        ConfigError: When rule refitting is requested without an OTR estimator.

    Returns:
        DecompositionReport: The estimates with standard errors.
    """

    if settings.refit_rule and otr_estimator is None:
        raise ConfigError("decompose.decompose", "refit_rule needs the OTR estimator the rule was fitted with.")

    c_center = resolve_c_center(ds, settings.c_center)
    estimates = point_estimates(ds, rule, settings, iie, c_center)

    def replicate(sample: Dataset) -> np.ndarray:
        sample_rule = otr_estimator.fit(sample) if settings.refit_rule else rule
        return point_estimates(sample, sample_rule, settings, iie, c_center)

    bootstrap = bootstrap_se(ds, replicate, settings.bootstrap, seed, workers=workers)
    tau, zeta_icde, delta, zeta_iie = (Estimate(float(value), float(se)) for value, se in zip(estimates, bootstrap.se))
    reduction = bootstrap.replicates[:, 0] - bootstrap.replicates[:, 1]

    return DecompositionReport(
        tau=tau,
        zeta_icde=zeta_icde,
        delta_iie=delta,
        zeta_iie=zeta_iie,
        estimator=iie.name,
        interaction_included=bool(getattr(iie, "interaction", False)),
        c_center=c_center,
        delta_icde=Estimate(float(estimates[0] - estimates[1]), float(reduction.std(ddof=1))),
        bootstrap_failed=bootstrap.failed,
    )
