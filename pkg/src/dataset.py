"""Defines the dataset schema, role mapping and validation shared by every analysis.

Variable roles follow the decomposition setup: outcome Y, binary risk factor M, binary group R
(1 = comparison, 0 = reference), baseline covariates C and intermediate confounders X. The history
variables of a unit are H = (R, X, C); effect modifiers H1 and target-factor-allowable covariates A^m are
index subsets of the covariate block (X, C), X first.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import pandas as pd

from src.errors import ConfigError, DataError, DimensionError, EmptyGroupError, MissingDataError, SchemaError


def _frozen(array: np.ndarray) -> np.ndarray:
    array = np.array(array, dtype=float, copy=True)
    array.setflags(write=False)
    return array


def _as_matrix(values, n: int) -> np.ndarray:
    if values is None:
        return np.zeros((n, 0))

    values = np.asarray(values, dtype=float)

    if values.ndim == 1:
        values = values.reshape(-1, 1)

    return values


@dataclass(frozen=True, eq=False)
class Dataset:
    """Per-unit records with role-tagged columns.

    The dataset is immutable after construction: every transformation returns a new instance.

    Attributes:
        y: Outcome on its original scale.
        m: Binary risk factor.
        r: Binary group indicator, 1 = comparison and 0 = reference.
        c: Baseline covariates, shape (n, p_c).
        x: Intermediate confounders, shape (n, p_x).
        x_names: Column names of `x`.
        c_names: Column names of `c`.
        h1_cols: Indices into the covariate block (x, c) of the effect modifiers H1.
        am_cols: Indices into the covariate block (x, c) of the target-factor-allowable covariates A^m.
        y_name: Column name of the outcome.
        m_name: Column name of the risk factor.
        r_name: Column name of the group indicator.
        oracle: Simulation-only columns (e.g. the true confounder U and the true optimal value M_opt) that travel with the units but never enter a model.
    """

    y: np.ndarray
    m: np.ndarray
    r: np.ndarray
    c: np.ndarray = None
    x: np.ndarray = None
    x_names: tuple[str, ...] = ()
    c_names: tuple[str, ...] = ()
    h1_cols: tuple[int, ...] = ()
    am_cols: tuple[int, ...] = ()
    y_name: str = "Y"
    m_name: str = "M"
    r_name: str = "R"
    oracle: dict[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self) -> None:
        origin = "dataset.Dataset"
        y = _frozen(np.ravel(self.y))
        n = len(y)
        m = _frozen(np.ravel(self.m))
        r = _frozen(np.ravel(self.r))
        c = _frozen(_as_matrix(self.c, n))
        x = _frozen(_as_matrix(self.x, n))
        x_names = tuple(self.x_names) if self.x_names else tuple(f"X{j + 1}" for j in range(x.shape[1]))
        c_names = tuple(self.c_names) if self.c_names else tuple(f"C{j + 1}" for j in range(c.shape[1]))

        object.__setattr__(self, "y", y)
        object.__setattr__(self, "m", m)
        object.__setattr__(self, "r", r)
        object.__setattr__(self, "c", c)
        object.__setattr__(self, "x", x)
        object.__setattr__(self, "x_names", x_names)
        object.__setattr__(self, "c_names", c_names)
        object.__setattr__(self, "h1_cols", tuple(int(j) for j in self.h1_cols))
        object.__setattr__(self, "am_cols", tuple(int(j) for j in self.am_cols))
        object.__setattr__(self, "oracle", {name: _frozen(np.ravel(values)) for name, values in self.oracle.items()})

        if len(m) != n or len(r) != n or c.shape[0] != n or x.shape[0] != n:
            raise DimensionError(origin, f"All columns must have {n} rows, found M={len(m)}, R={len(r)}, C={c.shape[0]}, X={x.shape[0]}.")

        if len(x_names) != x.shape[1] or len(c_names) != c.shape[1]:
            raise DimensionError(origin, "The number of column names does not match the number of X or C columns.")

        for name, values in self.oracle.items():
            if len(values) != n:
                raise DimensionError(origin, f"Oracle column '{name}' has {len(values)} rows, expected {n}.")

        for name, values in (("Y", y), ("M", m), ("R", r), ("C", c), ("X", x)):
            if not np.all(np.isfinite(values)):
                raise MissingDataError(origin, f"Column block {name} contains missing or non-finite values. Missing data is not supported, impute upstream.")

        for name, values in (("M", m), ("R", r)):
            if not np.all((values == 0) | (values == 1)):
                raise SchemaError(origin, f"{name} must be coded 0/1.")

        if r.sum() < 1 or (1 - r).sum() < 1:
            raise EmptyGroupError(origin, f"Both groups must be nonempty, found {int(r.sum())} comparison (R=1) and {int((1 - r).sum())} reference (R=0) units.")

        p = x.shape[1] + c.shape[1]
        for name, cols in (("h1_cols", self.h1_cols), ("am_cols", self.am_cols)):
            if any(j < 0 or j >= p for j in cols):
                raise SchemaError(origin, f"{name} {cols} reference columns outside the {p} covariates.")

    @property
    def n(self) -> int:
        """int: The number of units."""

        return len(self.y)

    @property
    def covariate_names(self) -> tuple[str, ...]:
        """tuple[str, ...]: Names of the covariate block (X, C)."""

        return self.x_names + self.c_names

    @property
    def history_names(self) -> tuple[str, ...]:
        """tuple[str, ...]: Names of the history variables H = (R, X, C)."""

        return (self.r_name,) + self.covariate_names

    @property
    def h1_names(self) -> tuple[str, ...]:
        return tuple(self.covariate_names[j] for j in self.h1_cols)

    @property
    def am_names(self) -> tuple[str, ...]:
        return tuple(self.covariate_names[j] for j in self.am_cols)

    def covariates(self) -> np.ndarray:
        """Returns the covariate block (X, C) as an (n, p_x + p_c) matrix."""

        return np.column_stack([self.x, self.c]) if self.x.shape[1] + self.c.shape[1] else np.zeros((self.n, 0))

    def history(self) -> np.ndarray:
        """Returns the history variables H = (R, X, C) as an (n, 1 + p_x + p_c) matrix."""

        return np.column_stack([self.r, self.covariates()])

    def h1(self) -> np.ndarray:
        return self.covariates()[:, list(self.h1_cols)]

    def am(self) -> np.ndarray:
        return self.covariates()[:, list(self.am_cols)]

    def group(self, value: int) -> np.ndarray:
        """Returns the boolean mask of the units in group R = `value`."""

        return self.r == value

    def subset(self, index: np.ndarray) -> Dataset:
        """Returns the units at `index` (a boolean mask or integer positions, repetitions allowed)."""

        return dataclasses.replace(
            self,
            y=self.y[index],
            m=self.m[index],
            r=self.r[index],
            c=self.c[index],
            x=self.x[index],
            oracle={name: values[index] for name, values in self.oracle.items()},
        )

    def with_outcome(self, y: np.ndarray) -> Dataset:
        return dataclasses.replace(self, y=y)

    def with_covariate(self, name: str, values: np.ndarray, effect_modifier: bool = False) -> Dataset:
        """Appends a covariate to the intermediate confounders X, optionally also as effect modifier.

        Used to condition on a simulated confounder U. Since X comes first in the covariate block, indices of C
        columns in `h1_cols` and `am_cols` are shifted by one.

        Args:
            name (str): Name of the new column.
            values (np.ndarray): The new column.
            effect_modifier (bool, optional): Whether to add the column to H1 as well. Defaults to False.

        Returns:
            Dataset: A copy with the extra X column.
        """

        px = self.x.shape[1]
        shift = lambda cols: tuple(j + 1 if j >= px else j for j in cols)
        h1_cols = shift(self.h1_cols) + ((px,) if effect_modifier else ())

        return dataclasses.replace(
            self,
            x=np.column_stack([self.x, np.ravel(values)]),
            x_names=self.x_names + (name,),
            h1_cols=h1_cols,
            am_cols=shift(self.am_cols),
        )

    def relabel_groups(self) -> Dataset:
        """Swaps the comparison and reference groups (R <-> 1 - R)."""

        return dataclasses.replace(self, r=1 - self.r)


@dataclass(frozen=True)
class RoleMap:
    """Assigns CSV columns to variable roles.

    Attributes:
        y: The outcome column.
        m: The risk factor column.
        r: The group column.
        c: Baseline covariate columns.
        x: Intermediate confounder columns.
        h1: Effect modifier columns, each also listed under `x` or `c`.
        am: Target-factor-allowable columns, each also listed under `x` or `c`.
        ignore: Columns present in the file that are deliberately unused.
        oracle: Columns carried along as simulation oracles.
    """

    y: str
    m: str
    r: str
    c: tuple[str, ...] = ()
    x: tuple[str, ...] = ()
    h1: tuple[str, ...] = ()
    am: tuple[str, ...] = ()
    ignore: tuple[str, ...] = ()
    oracle: tuple[str, ...] = ()

    @classmethod
    def from_dict(cls, roles: dict) -> RoleMap:
        """Builds a role map from the `roles` mapping of a YAML data profile.

        Raises:
            ConfigError: When Y, M or R are not assigned exactly one column.
        """

        for key in ("y", "m", "r"):
            if not isinstance(roles.get(key), str):
                raise ConfigError("dataset.RoleMap", f"Role '{key}' must be assigned exactly one column name, found {roles.get(key)!r}.")

        as_tuple = lambda key: tuple(roles.get(key) or ())

        return cls(
            y=roles["y"], m=roles["m"], r=roles["r"],
            c=as_tuple("c"), x=as_tuple("x"), h1=as_tuple("h1"), am=as_tuple("am"),
            ignore=as_tuple("ignore"), oracle=as_tuple("oracle"),
        )

    def used_columns(self) -> list[str]:
        return [self.y, self.m, self.r, *self.x, *self.c]


@dataclass(frozen=True)
class SensitivitySpec:
    """The assumed omitted confounder U and its sensitivity coefficients.

    Attributes:
        u_kind: "binary" (U ~ Bernoulli(pi)) or "continuous" (U ~ N(0, sigma_u^2)).
        pi: Proportion of U = 1 for a binary U.
        sigma_u: Standard deviation of a continuous U.
        beta_u_y: Effect of U on Y, on the outcome scale.
        beta_u_m: Effect of U on M, on the logit scale.
        heterogeneous_u: Whether the outcome model includes an M x U interaction.
    """

    u_kind: str = "binary"
    pi: float = 0.5
    sigma_u: float = 1.0
    beta_u_y: float = 0.0
    beta_u_m: float = 0.0
    heterogeneous_u: bool = False

    def __post_init__(self) -> None:
        origin = "dataset.SensitivitySpec"

        if self.u_kind not in ("binary", "continuous"):
            raise ConfigError(origin, f"u_kind should be 'binary' or 'continuous', but found {self.u_kind!r}.")

        if self.u_kind == "binary" and not 0 < self.pi < 1:
            raise ConfigError(origin, f"pi must lie in (0, 1), found {self.pi}.")

        if self.u_kind == "continuous" and not self.sigma_u > 0:
            raise ConfigError(origin, f"sigma_u must be positive, found {self.sigma_u}.")

        if not (np.isfinite(self.beta_u_y) and np.isfinite(self.beta_u_m)):
            raise ConfigError(origin, "Sensitivity coefficients must be finite.")


def load_dataset(path: str | Path, role_map: RoleMap) -> Dataset:
    """Loads a comma-delimited file with a header row into a validated `Dataset`.

    Column and unit order are preserved.

    Args:
        path (str | Path): Path to the CSV file.
        role_map (RoleMap): The role assignment of the file's columns.

    Raises:
        SchemaError: For missing or unassigned header names, non-numeric cells, or M/R values outside {0, 1}.
        MissingDataError: For empty or NA cells.
        EmptyGroupError: When one of the groups has no units.

    Returns:
        Dataset: The validated dataset.
    """

    origin = "dataset.load_dataset"
    frame = pd.read_csv(path, encoding="utf-8", float_precision="round_trip")
    header = list(frame.columns)

    used = role_map.used_columns()
    missing = [name for name in used + list(role_map.oracle) if name not in header]
    if missing:
        raise SchemaError(origin, f"Columns {missing} are assigned a role but missing from the header of {path}.")

    unassigned = [name for name in header if name not in used and name not in role_map.ignore and name not in role_map.oracle]
    if unassigned:
        raise SchemaError(origin, f"Columns {unassigned} in {path} have no role; assign one or list them under 'ignore'.")

    covariates = list(role_map.x) + list(role_map.c)
    for role, names in (("h1", role_map.h1), ("am", role_map.am)):
        stray = [name for name in names if name not in covariates]
        if stray:
            raise SchemaError(origin, f"{role} columns {stray} must also be listed under x or c.")

    for name in used + list(role_map.oracle):
        if frame[name].isna().any():
            row = int(np.flatnonzero(frame[name].isna().to_numpy())[0])
            raise MissingDataError(origin, f"Column '{name}' has an empty or NA cell (data row {row + 1}). Missing data is not supported, impute upstream.")

        numeric = pd.to_numeric(frame[name], errors="coerce")
        if numeric.isna().any():
            row = int(np.flatnonzero(numeric.isna().to_numpy())[0])
            raise SchemaError(origin, f"Column '{name}' has a non-numeric cell {frame[name].iloc[row]!r} (data row {row + 1}).")

        frame[name] = numeric.astype(float)

    for name in (role_map.m, role_map.r):
        if not frame[name].isin([0.0, 1.0]).all():
            raise SchemaError(origin, f"Column '{name}' must only contain 0 and 1.")

    r = frame[role_map.r].to_numpy()
    if r.sum() < 1 or (1 - r).sum() < 1:
        raise EmptyGroupError(origin, f"Both groups must be nonempty, found {int(r.sum())} units with {role_map.r}=1 and {int((1 - r).sum())} with {role_map.r}=0.")

    return Dataset(
        y=frame[role_map.y].to_numpy(),
        m=frame[role_map.m].to_numpy(),
        r=r,
        c=frame[list(role_map.c)].to_numpy(),
        x=frame[list(role_map.x)].to_numpy(),
        x_names=tuple(role_map.x),
        c_names=tuple(role_map.c),
        h1_cols=tuple(covariates.index(name) for name in role_map.h1),
        am_cols=tuple(covariates.index(name) for name in role_map.am),
        y_name=role_map.y,
        m_name=role_map.m,
        r_name=role_map.r,
        oracle={name: frame[name].to_numpy() for name in role_map.oracle},
    )


def save_dataset(ds: Dataset, path: str | Path) -> RoleMap:
    """Writes a dataset to CSV with enough digits for `load_dataset` to read it back bit-identically.

    Args:
        ds (Dataset): The dataset to write.
        path (str | Path): Target CSV path.

    Returns:
        RoleMap: The role map that loads the written file.
    """

    columns = {ds.y_name: ds.y, ds.m_name: ds.m, ds.r_name: ds.r}
    columns.update({name: ds.x[:, j] for j, name in enumerate(ds.x_names)})
    columns.update({name: ds.c[:, j] for j, name in enumerate(ds.c_names)})
    columns.update(ds.oracle)

    pd.DataFrame(columns).to_csv(path, index=False, float_format="%.17g")

    return RoleMap(
        y=ds.y_name, m=ds.m_name, r=ds.r_name,
        c=ds.c_names, x=ds.x_names, h1=ds.h1_names, am=ds.am_names,
        oracle=tuple(ds.oracle),
    )


def center_covariates(ds: Dataset, center: str | Sequence[float] = "mean") -> tuple[Dataset, np.ndarray]:
    """Shifts the baseline covariates C so that the chosen center maps to 0.

    Args:
        ds (Dataset): The dataset to center.
        center (str | Sequence[float], optional): "mean" or explicit values, one per C column. Defaults to "mean".

    Raises:
        DimensionError: When explicit centers do not match the number of C columns.

    Returns:
        tuple[Dataset, np.ndarray]: The centered copy and the centers used.
    """

    if isinstance(center, str):
        if center != "mean":
            raise DataError("dataset.center_covariates", f"center should be 'mean' or a list of values, but found {center!r}.")
        centers = ds.c.mean(axis=0) if ds.c.shape[1] else np.zeros(0)
    else:
        centers = np.atleast_1d(np.asarray(center, dtype=float))
        if centers.shape != (ds.c.shape[1],):
            raise DimensionError("dataset.center_covariates", f"Expected {ds.c.shape[1]} explicit centers, found {centers.size}.")

    return dataclasses.replace(ds, c=ds.c - centers), centers
