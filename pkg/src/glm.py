"""Weighted least squares and weighted logistic regression with offsets, the fitting engine behind every model.

Both fitters drop zero-weight rows, refuse rank-deficient designs instead of falling back to a pseudo-inverse,
and report failures as explicit errors. Probabilities that are later inverted into weights are clamped to
[PROBABILITY_CLAMP, 1 - PROBABILITY_CLAMP].
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.special import expit, log_expit

from src.dataset import Dataset
from src.errors import DimensionError, RankDeficiencyError, SeparationError, SingleArmError, ZeroWeightError

PROBABILITY_CLAMP = 1e-6
SEPARATION_THRESHOLD = 30.0
IRLS_TOLERANCE = 1e-8
IRLS_MAX_ITERATIONS = 100


@dataclass
class LinearFit:
    """A weighted least squares fit.

    Attributes:
        coefficients: One coefficient per design column.
        residual_variance: Weighted residual sum of squares over (sum of weights - number of columns), NaN when that is not positive.
        design_names: Names of the design columns.
        weights_used: Whether non-unit weights were supplied.
        covariance: Model-based covariance matrix of the coefficients.
    """

    coefficients: np.ndarray
    residual_variance: float
    design_names: list[str] = field(default_factory=list)
    weights_used: bool = False
    covariance: np.ndarray | None = None

    def coefficient(self, name: str) -> float:
        return float(self.coefficients[self.design_names.index(name)])

    def standard_error(self, name: str) -> float:
        j = self.design_names.index(name)
        return float(np.sqrt(self.covariance[j, j]))


@dataclass
class LogisticFit:
    """A weighted logistic regression fit, coefficients on the logit scale.

    Attributes:
        coefficients: One coefficient per design column.
        converged: Whether IRLS met its tolerance before the iteration cap.
        iterations: The number of IRLS iterations run.
        offset_used: Whether a fixed offset entered the linear predictor.
        design_names: Names of the design columns.
        covariance: Inverse of the weighted Fisher information at the solution.
    """

    coefficients: np.ndarray
    converged: bool
    iterations: int
    offset_used: bool = False
    design_names: list[str] = field(default_factory=list)
    covariance: np.ndarray | None = None

    def coefficient(self, name: str) -> float:
        return float(self.coefficients[self.design_names.index(name)])

    def standard_error(self, name: str) -> float:
        j = self.design_names.index(name)
        return float(np.sqrt(self.covariance[j, j]))


def _prepare(origin: str, design: np.ndarray, response: np.ndarray, w: np.ndarray | None, offset: np.ndarray | None):
    design = np.asarray(design, dtype=float)
    if design.ndim == 1:
        design = design.reshape(-1, 1)

    n = design.shape[0]
    response = np.asarray(response, dtype=float).ravel()
    w = np.ones(n) if w is None else np.asarray(w, dtype=float).ravel()
    offset = np.zeros(n) if offset is None else np.asarray(offset, dtype=float).ravel()

    if len(response) != n or len(w) != n or len(offset) != n:
        raise DimensionError(origin, f"Design has {n} rows but response, weights and offset have {len(response)}, {len(w)} and {len(offset)}.")

    if np.any(w < 0) or not np.all(np.isfinite(w)):
        raise DimensionError(origin, "Weights must be finite and nonnegative.")

    if w.sum() <= 0:
        raise ZeroWeightError(origin, "All weights are zero.")

    keep = w > 0
    design, response, w, offset = design[keep], response[keep], w[keep], offset[keep]

    if np.linalg.matrix_rank(design * np.sqrt(w)[:, None]) < design.shape[1]:
        raise RankDeficiencyError(origin, f"The design matrix with {design.shape[1]} columns is rank deficient on the {design.shape[0]} rows with positive weight.")

    return design, response, w, offset


def fit_wls(
    design: np.ndarray,
    y: np.ndarray,
    w: np.ndarray | None = None,
    offset: np.ndarray | None = None,
    names: list[str] | None = None,
) -> LinearFit:
    """Fits y - offset = design @ beta by weighted least squares.

    Args:
        design (np.ndarray): The (n, p) design matrix.
        y (np.ndarray): The response.
        w (np.ndarray | None, optional): Nonnegative weights. Defaults to unit weights.
        offset (np.ndarray | None, optional): A fixed offset subtracted from the response. Defaults to none.
        names (list[str] | None, optional): Names of the design columns.

    Raises:
        ZeroWeightError: When all weights are zero.
        RankDeficiencyError: When the design lacks full column rank on the positive-weight rows.

    Returns:
        LinearFit: The fit, with residual variance weighted RSS / (sum(w) - p); the variance and covariance are NaN when sum(w) <= p.
    """

    weights_used = w is not None
    design, y, w, offset = _prepare("glm.fit_wls", design, y, w, offset)
    p = design.shape[1]
    root_w = np.sqrt(w)
    target = y - offset

    q, r = np.linalg.qr(design * root_w[:, None])
    coefficients = np.linalg.solve(r, q.T @ (target * root_w))

    residuals = target - design @ coefficients
    dof = w.sum() - p
    # Without residual degrees of freedom the variance is unidentified.
    residual_variance = max(float(np.sum(w * residuals**2) / dof), 0.0) if dof > 0 else np.nan
    r_inv = np.linalg.inv(r)

    return LinearFit(
        coefficients=coefficients,
        residual_variance=residual_variance,
        design_names=list(names) if names is not None else [f"x{j}" for j in range(p)],
        weights_used=weights_used,
        covariance=residual_variance * (r_inv @ r_inv.T),
    )


def logistic_log_likelihood(
    coefficients: np.ndarray,
    design: np.ndarray,
    m: np.ndarray,
    w: np.ndarray | None = None,
    offset: np.ndarray | None = None,
) -> float:
    """Returns the weighted Bernoulli log-likelihood of `coefficients`."""

    eta = np.asarray(design, dtype=float) @ np.asarray(coefficients, dtype=float)
    if offset is not None:
        eta = eta + offset
    w = np.ones(len(eta)) if w is None else np.asarray(w, dtype=float)

    return float(np.sum(w * (m * log_expit(eta) + (1 - m) * log_expit(-eta))))


def fit_logistic(
    design: np.ndarray,
    m: np.ndarray,
    w: np.ndarray | None = None,
    offset: np.ndarray | None = None,
    names: list[str] | None = None,
) -> LogisticFit:
    """Fits a weighted logistic regression of a binary response by iteratively reweighted least squares.

    IRLS starts from zero coefficients and stops when the largest coefficient change drops below 1e-8 or after
    100 iterations. A coefficient exceeding 30 in absolute value on the logit scale is treated as divergence.

    Args:
        design (np.ndarray): The (n, p) design matrix.
        m (np.ndarray): The 0/1 response.
        w (np.ndarray | None, optional): Nonnegative case weights. Defaults to unit weights.
        offset (np.ndarray | None, optional): A fixed additive offset on the logit scale. Defaults to none.
        names (list[str] | None, optional): Names of the design columns.

    Raises:
        SeparationError: When the coefficients diverge because of complete or quasi-complete separation.
        RankDeficiencyError: When the design lacks full column rank on the positive-weight rows.
        ZeroWeightError: When all weights are zero.

    Returns:
        LogisticFit: The fit.
    """

    origin = "glm.fit_logistic"
    offset_used = offset is not None
    design, m, w, offset = _prepare(origin, design, m, w, offset)

    if not np.all((m == 0) | (m == 1)):
        raise DimensionError(origin, "The response of a logistic regression must be coded 0/1.")

    coefficients = np.zeros(design.shape[1])
    converged = False
    iteration = 0

    for iteration in range(1, IRLS_MAX_ITERATIONS + 1):
        eta = design @ coefficients + offset
        p = expit(eta)
        variance = np.clip(p * (1 - p), 1e-12, None)
        working_w = w * variance
        working_z = eta - offset + (m - p) / variance

        root_w = np.sqrt(working_w)
        updated, *_ = np.linalg.lstsq(design * root_w[:, None], working_z * root_w, rcond=None)

        if np.max(np.abs(updated)) > SEPARATION_THRESHOLD or not np.all(np.isfinite(updated)):
            raise SeparationError(origin, f"Coefficients diverged beyond |{SEPARATION_THRESHOLD:g}| on the logit scale at iteration {iteration}; the response is (quasi-)completely separated by the design.")

        step = np.max(np.abs(updated - coefficients))
        coefficients = updated

        if step < IRLS_TOLERANCE:
            converged = True
            break

    p = expit(design @ coefficients + offset)
    information = design.T @ (design * (w * p * (1 - p))[:, None])

    return LogisticFit(
        coefficients=coefficients,
        converged=converged,
        iterations=iteration,
        offset_used=offset_used,
        design_names=list(names) if names is not None else [f"x{j}" for j in range(design.shape[1])],
        covariance=np.linalg.pinv(information),
    )


def predict_prob(fit: LogisticFit, design: np.ndarray, offset: np.ndarray | None = None) -> np.ndarray:
    """Returns clamped inverse-logit predictions of a logistic fit.

    Args:
        fit (LogisticFit): The fitted model.
        design (np.ndarray): The (n, p) design matrix.
        offset (np.ndarray | None, optional): A fixed offset on the logit scale. Defaults to none.

    Raises:
        DimensionError: When the design does not have one column per coefficient.

    Returns:
        np.ndarray: Probabilities in [1e-6, 1 - 1e-6].
    """

    design = np.asarray(design, dtype=float)
    if design.ndim == 1:
        design = design.reshape(-1, 1)

    if design.shape[1] != len(fit.coefficients):
        raise DimensionError("glm.predict_prob", f"Design has {design.shape[1]} columns but the fit has {len(fit.coefficients)} coefficients.")

    eta = design @ fit.coefficients
    if offset is not None:
        eta = eta + offset

    return np.clip(expit(eta), PROBABILITY_CLAMP, 1 - PROBABILITY_CLAMP)


def with_intercept(*blocks: np.ndarray) -> np.ndarray:
    """Stacks an intercept column and the given column blocks into a design matrix."""

    n = len(blocks[0]) if blocks else 0
    columns = [np.ones(n)]
    for block in blocks:
        block = np.asarray(block, dtype=float)
        columns.append(block.reshape(n, 1) if block.ndim == 1 else block)

    return np.column_stack(columns)


def propensity_design(ds: Dataset, include_group: bool = True, mask: np.ndarray | None = None) -> tuple[np.ndarray, list[str]]:
    """Returns the design (1, [R], X, C) of the risk-factor model, restricted to `mask`, and its column names."""

    mask = slice(None) if mask is None else mask

    if include_group:
        return with_intercept(ds.r[mask], ds.x[mask], ds.c[mask]), ["(Intercept)", ds.r_name, *ds.covariate_names]

    return with_intercept(ds.x[mask], ds.c[mask]), ["(Intercept)", *ds.covariate_names]


def fit_propensity(ds: Dataset, stratify_by_group: bool = False) -> np.ndarray:
    """Fits P(M = 1 | R, X, C) by logistic regression and returns the clamped probabilities.

    Args:
        ds (Dataset): The dataset. Any appended confounder column is part of X.
        stratify_by_group (bool, optional): Whether to fit separate models per group (without R). Defaults to False.

    Raises:
        SingleArmError: When a fitted stratum has only one value of M.

    Returns:
        np.ndarray: P(M = 1 | history) per unit.
    """

    propensity = np.empty(ds.n)
    strata = [ds.group(1), ds.group(0)] if stratify_by_group else [np.ones(ds.n, dtype=bool)]

    for mask in strata:
        m = ds.m[mask]
        if m.min() == m.max():
            raise SingleArmError("glm.fit_propensity", f"Only M={int(m[0])} occurs in a propensity stratum of {int(mask.sum())} units.")

        design, names = propensity_design(ds, include_group=not stratify_by_group, mask=mask)
        fit = fit_logistic(design, m, names=names)
        propensity[mask] = predict_prob(fit, design)

    return propensity


def observed_arm_probability(m: np.ndarray, propensity: np.ndarray) -> np.ndarray:
    """Returns P(M = m_i | history), the probability of the arm each unit was actually observed in."""

    return np.where(m == 1, propensity, 1 - propensity)
