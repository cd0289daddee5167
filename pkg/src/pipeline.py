"""Defines the analyses the CLI can run: optimal rules, decompositions, sensitivity grids, benchmarks and simulations."""

from __future__ import annotations

import dataclasses
import itertools
from abc import ABC, abstractmethod
from dataclasses import dataclass, field
from pathlib import Path

import pandas as pd

from src import runtime
from src.benchmark import MIN_POPULATION_SIZE, benchmark_table
from src.dataset import Dataset, RoleMap, SensitivitySpec, load_dataset
from src.decompose import DecompositionSettings, decompose
from src.errors import ConfigError
from src.glm import fit_propensity
from src.models.iie import create_iie_estimator
from src.models.otr import OTR_ESTIMATORS, OTREstimator, compliance_stats, estimate_value
from src.reports import ReportWriter, estimates_frame, table_1, table_2
from src.sensem import sensitivity_grid
from src.simstudy import SENSITIVITY_PARAMETERS, DgpConfig, run_experiment

COMMANDS = ("otr", "decompose", "sensitivity", "benchmark", "simstudy")
SECTIONS = {
    "otr": ("data", "otr"),
    "decompose": ("data", "otr", "decompose"),
    "sensitivity": ("data", "otr", "decompose", "sensitivity"),
    "benchmark": ("data", "otr", "decompose", "benchmark"),
    "simstudy": ("otr", "decompose", "simstudy"),
}
DEFAULT_PROFILE = "default"


@dataclass
class RunConfig:
    """The fully parsed configuration of a single run.

    Attributes:
        command: The analysis to run.
        profile: The profile name looked up in every config section.
        seed: The master seed.
        workers: The maximum number of concurrent tasks.
        out_dir: The directory the report files are written to.
        data: The `data` profile (input path, roles and relabel flag).
        otr: The `otr` profile.
        settings: The decomposition options.
        sensitivity: The `sensitivity` profile.
        benchmark: The `benchmark` profile.
        simstudy: The `simstudy` profile.
    """

    command: str
    profile: str
    seed: int
    workers: int
    out_dir: Path
    data: dict = field(default_factory=dict)
    otr: dict = field(default_factory=dict)
    settings: DecompositionSettings = field(default_factory=DecompositionSettings)
    sensitivity: dict = field(default_factory=dict)
    benchmark: dict = field(default_factory=dict)
    simstudy: dict = field(default_factory=dict)


def _build(cls, options: dict, origin: str):
    """Instantiates `cls` from config options, turning unknown keys into a `ConfigError`."""

    try:
        return cls(**options)
    except TypeError as error:
        raise ConfigError(origin, f"Invalid options {sorted(options)} for {cls.__name__}: {error}.") from error


def _pairs(options: dict, key: str, first: str, second: str, origin: str) -> list[tuple[float, float]]:
    """Reads a grid either as an explicit list of pairs under `key` or as the product of the `first` and `second` lists."""

    if key in options:
        try:
            pairs = [(float(a), float(b)) for a, b in options[key]]
        except (TypeError, ValueError) as error:
            raise ConfigError(origin, f"'{key}' should be a list of [{first}, {second}] pairs.") from error
    elif first in options and second in options:
        pairs = [(float(a), float(b)) for a, b in itertools.product(options[first], options[second])]
    else:
        raise ConfigError(origin, f"Specify either '{key}' or both '{first}' and '{second}'.")

    if not pairs:
        raise ConfigError(origin, f"The '{key}' grid is empty.")

    return pairs


class Analysis(ABC):
    """The abstract base class of the analyses, one per CLI command.

    Attributes:
        run_config: The parsed configuration of the run.
        verbose: Whether progress bars and status lines are shown.
    """

    command: str = ""

    def __init__(self, run_config: RunConfig, verbose: bool = True) -> None:
        super().__init__()

        self.run_config = run_config
        self.verbose = verbose

    def load_data(self) -> Dataset:
        """Loads the input CSV of the `data` profile, swapping the group labels if requested."""

        data = self.run_config.data
        if "path" not in data or "roles" not in data:
            raise ConfigError("pipeline.load_data", "The data profile needs a 'path' and a 'roles' mapping.")

        if not Path(data["path"]).is_file():
            raise ConfigError("pipeline.load_data", f"The input file {data['path']} does not exist.")

        ds = load_dataset(Path(data["path"]), RoleMap.from_dict(data["roles"]))
        if data.get("relabel_groups", False):
            ds = ds.relabel_groups()

        self.log(f"Loaded {ds.n} units from {data['path']}.")

        return ds

    def create_otr_estimator(self, method: str | None = None) -> OTREstimator:
        """Returns the OTR estimator named by `method`, or by the `otr` profile when no method is given.

        Raises:
            ConfigError: When the method name is unknown.
        """

        options = dict(self.run_config.otr)
        options.pop("methods", None)
        name = method or options.pop("method", "weighting")
        options.pop("method", None)

        if name not in OTR_ESTIMATORS:
            raise ConfigError("pipeline.create_otr_estimator", f"OTR method should be one of {sorted(OTR_ESTIMATORS)}, but found {name!r}.")

        if name == "qlearning":
            options = {key: value for key, value in options.items() if key == "stratify"}

        return _build(OTR_ESTIMATORS[name], options, "pipeline.create_otr_estimator")

    def log(self, message: str) -> None:
        if self.verbose:
            print(message)

    @abstractmethod
    def run(self, writer: ReportWriter) -> dict:
        """Runs the analysis, writes its tables through `writer`, and returns the results for the JSON summary.

        Raises:
            NotImplementedError: When called, since the `Analysis` is abstract and should not be used.
        """

        raise NotImplementedError("Analysis class is abstract, please use an implementation.")


class OTRAnalysis(Analysis):
    """Estimates optimal rules with one or more methods and reports their recommendation, compliance and value."""

    command = "otr"

    def run(self, writer: ReportWriter) -> dict:
        ds = self.load_data()
        methods = self.run_config.otr.get("methods") or [self.run_config.otr.get("method", "weighting")]

        stats, values, rules = {}, [], {}
        for method in methods:
            estimator = self.create_otr_estimator(method)
            rule = estimator.fit(ds)
            propensity = fit_propensity(ds, stratify_by_group=estimator.settings.get("stratify", True))

            stats[method] = compliance_stats(ds, rule)
            rules[method] = {"estimator": estimator.describe(), "rule": rule.to_dict()}

            for scope, mask in (("comparison", ds.r == 1), ("reference", ds.r == 0), ("total", None)):
                value = estimate_value(ds, rule, propensity, mask=mask)
                values.append({"method": method, "group": scope, "value": value.value, "compliant": value.compliant_count, "estimator": value.method})

            self.log(f"Fitted the {method} rule: {stats[method]['recommended_total']:.1f}% recommended overall.")

        writer.write_table("1", table_1(stats))
        writer.write_table("otr_values", pd.DataFrame(values))

        return {"rules": rules, "compliance": stats, "values": values}


class DecomposeAnalysis(Analysis):
    """Estimates the optimal rule and decomposes the disparity into ICDE and IIE components."""

    command = "decompose"

    def run(self, writer: ReportWriter) -> dict:
        ds = self.load_data()
        settings = self.run_config.settings
        otr_estimator = self.create_otr_estimator()
        iie = create_iie_estimator(settings)

        rule = otr_estimator.fit(ds)
        self.log(f"Decomposing with the {iie.name} IIE estimator and {settings.bootstrap} bootstrap replicates.")
        report = decompose(ds, rule, settings, iie, self.run_config.seed, workers=self.run_config.workers, otr_estimator=otr_estimator)

        stats = compliance_stats(ds, rule)
        writer.write_table("1", table_1({otr_estimator.name: stats}))
        writer.write_table("2", table_2(report))
        writer.write_table("estimates", estimates_frame(report))

        return {
            "otr": {"estimator": otr_estimator.describe(), "rule": rule.to_dict(), "compliance": stats},
            "iie_estimator": iie.describe(),
            "decomposition": report.to_dict(),
        }


class SensitivityAnalysis(Analysis):
    """Repeats the decomposition adjusted for an assumed omitted confounder over a grid of sensitivity parameters."""

    command = "sensitivity"

    def run(self, writer: ReportWriter) -> dict:
        origin = "pipeline.SensitivityAnalysis"
        options = dict(self.run_config.sensitivity)
        pairs = _pairs(options, "pairs", "beta_u_y", "beta_u_m", origin)
        draws = int(options.get("draws", 20))

        spec_options = {key: options[key] for key in ("u_kind", "pi", "sigma_u", "heterogeneous_u") if key in options}
        base_spec = _build(SensitivitySpec, spec_options, origin)

        ds = self.load_data()
        settings = self.run_config.settings
        self.log(f"Running the {base_spec.u_kind} U sensitivity analysis over {len(pairs)} parameter pairs with {draws} draws each.")

        grid, contours = sensitivity_grid(
            ds, pairs, base_spec, self.create_otr_estimator(), create_iie_estimator(settings), settings,
            draws, self.run_config.seed, workers=self.run_config.workers, verbose=self.verbose,
        )

        writer.write_table("sensitivity", grid)
        for name, contour in contours.items():
            writer.write_plot_data(f"contour_{name}", contour, index=True)

        return {"spec": dataclasses.asdict(base_spec), "draws": draws, "grid": grid.to_dict(orient="records")}


class BenchmarkAnalysis(Analysis):
    """Calibrates the sensitivity parameters against an observed covariate and reports the adjusted decomposition per cell."""

    command = "benchmark"

    def run(self, writer: ReportWriter) -> dict:
        origin = "pipeline.BenchmarkAnalysis"
        options = dict(self.run_config.benchmark)
        if "covariate" not in options:
            raise ConfigError(origin, "The benchmark profile needs the name of a 'covariate' in X.")

        grid = _pairs(options, "grid", "k_m", "k_y", origin)
        draws = int(options.get("draws", 20))

        ds = self.load_data()
        settings = self.run_config.settings
        self.log(f"Benchmarking against {options['covariate']} over {len(grid)} cells.")

        report = benchmark_table(
            ds, options["covariate"], grid, self.create_otr_estimator(), create_iie_estimator(settings), settings,
            draws, self.run_config.seed,
            u_kind=options.get("u_kind", "continuous"),
            population_size=int(options.get("population_size", MIN_POPULATION_SIZE)),
            tolerance=float(options.get("tolerance", 0.01)),
            workers=self.run_config.workers,
            verbose=self.verbose,
        )

        writer.write_table("3", report.table)

        cells = []
        for cell in report.cells:
            summary = {key: value for key, value in cell.items() if key not in ("report", "calibration")}
            if "calibration" in cell:
                summary["calibration"] = dataclasses.asdict(cell["calibration"])
            if "report" in cell:
                summary["decomposition"] = cell["report"].to_dict()
            cells.append(summary)

        return {"covariate": options["covariate"], "draws": draws, "cells": cells}


class SimstudyAnalysis(Analysis):
    """Runs the simulation study over data generating modes and sensitivity parameters."""

    command = "simstudy"

    def run(self, writer: ReportWriter) -> dict:
        origin = "pipeline.SimstudyAnalysis"
        options = dict(self.run_config.simstudy)
        modes = options.get("modes", ["constant"])
        parameters = [(float(a), float(b)) for a, b in options.get("sensitivity_parameters", SENSITIVITY_PARAMETERS)]
        if "n_grid" not in options:
            raise ConfigError(origin, "The simstudy profile needs an 'n_grid' of sample sizes.")

        metrics, records, truths = [], [], []
        for k, (mode, (beta_u_y, beta_u_m)) in enumerate(itertools.product(modes, parameters)):
            cfg = _build(DgpConfig, {
                "mode": mode,
                "beta_u_y": beta_u_y,
                "beta_u_m": beta_u_m,
                "population_size": int(options.get("population_size", 10**6)),
                "seed": runtime.derive_seed(self.run_config.seed, runtime.POPULATION_STREAM, k),
                "redraw_noise": bool(options.get("redraw_noise", False)),
            }, origin)
            self.log(f"Simulating the {mode} mode with sensitivity parameters ({beta_u_y:g}, {beta_u_m:g}).")

            result = run_experiment(
                cfg,
                n_grid=[int(n) for n in options["n_grid"]],
                iterations=int(options.get("iterations", 100)),
                adjust=[bool(flag) for flag in options.get("adjust", [False, True])],
                otr_method=self.create_otr_estimator(),
                settings=self.run_config.settings,
                draws=int(options.get("draws", 10)),
                seed=runtime.derive_seed(self.run_config.seed, runtime.SIMULATION_STREAM, k),
                workers=self.run_config.workers,
                accuracy_on=options.get("accuracy_on", "sample"),
                evaluation_size=int(options.get("evaluation_size", 10**4)),
                verbose=self.verbose,
            )

            metrics.append(result.metrics)
            records.append(result.records.assign(mode=mode, beta_u_y=beta_u_y, beta_u_m=beta_u_m))
            truths.append({"mode": mode, "beta_u_y": beta_u_y, "beta_u_m": beta_u_m, **dataclasses.asdict(result.truths)})

        metrics = pd.concat(metrics, ignore_index=True)
        writer.write_table("metrics", metrics)
        writer.write_plot_data("records", pd.concat(records, ignore_index=True))

        return {"truths": truths, "metrics": metrics.to_dict(orient="records")}


ANALYSES = {analysis.command: analysis for analysis in (OTRAnalysis, DecomposeAnalysis, SensitivityAnalysis, BenchmarkAnalysis, SimstudyAnalysis)}


class AnalysisFactory:
    """A factory for creating Analysis instances based on a YAML configuration file.

    The config holds a top-level `seed` (required), optional `workers` and `output` keys, and one section per
    concern (`data`, `otr`, `decompose`, `sensitivity`, `benchmark`, `simstudy`) of named profiles. The same
    profile name is looked up in every section the command needs, falling back to the `default` profile.
    Options for the configuration file are thus parsed here.

    Attributes:
        command: The CLI command, one of "otr", "decompose", "sensitivity", "benchmark" or "simstudy".
        config: The loaded YAML configuration.
        profile: The selected profile name.
        seed: A seed overriding the config, if any.
        workers: A worker count overriding the config, if any.
        out_dir: An output directory overriding the config, if any.

        run_config: The parsed `RunConfig`.
    """

    def __init__(self, command: str, config: dict, profile: str = DEFAULT_PROFILE, seed: int | None = None, workers: int | None = None, out_dir: str | Path | None = None) -> None:
        self.command = command
        self.config = config
        self.profile = profile
        self.seed = seed
        self.workers = workers
        self.out_dir = out_dir

        self.run_config: RunConfig = None

    def create_analysis(self, verbose: bool = True) -> Analysis:
        """Instantiates the Analysis of the configured command.

        Raises:
            ConfigError: When the command is unknown or the configuration is invalid.

        Returns:
            Analysis: The fully configured Analysis instance.
        """

        self.parse_configs()

        return ANALYSES[self.command](self.run_config, verbose=verbose)

    def section(self, name: str) -> dict:
        """Returns the selected profile of a config section, falling back to the default profile."""

        profiles = self.config.get(name) or {}
        if not isinstance(profiles, dict):
            raise ConfigError("pipeline.parse_configs", f"Section '{name}' should map profile names to options.")

        options = profiles.get(self.profile, profiles.get(DEFAULT_PROFILE))
        if options is None:
            raise ConfigError("pipeline.parse_configs", f"Section '{name}' has neither a '{self.profile}' nor a '{DEFAULT_PROFILE}' profile.")

        return dict(options)

    def parse_configs(self) -> RunConfig:
        """Parses the YAML config into the `RunConfig` of the command.

        NOTE: Changes and additions to the configuration options should be defined here!

        Raises:
            ConfigError: For an unknown command, a missing seed, or invalid section options.

        Returns:
            RunConfig: The parsed configuration.
        """

        origin = "pipeline.parse_configs"

        if self.command not in COMMANDS:
            raise ConfigError(origin, f"Command should be one of {list(COMMANDS)}, but found {self.command!r}.")

        if not isinstance(self.config, dict):
            raise ConfigError(origin, "The config file should hold a mapping of top-level keys.")

        seed = self.seed if self.seed is not None else self.config.get("seed")
        if isinstance(seed, bool) or not isinstance(seed, int) or seed < 0:
            raise ConfigError(origin, f"A non-negative integer 'seed' is required in the config or on the command line, found {seed!r}.")

        workers = self.workers if self.workers is not None else self.config.get("workers")
        out_dir = self.out_dir or Path(self.config.get("output") or "results", self.command)

        sections = {name: self.section(name) for name in SECTIONS[self.command]}
        settings = _build(DecompositionSettings, sections.pop("decompose", {}), origin)

        self.run_config = RunConfig(
            command=self.command,
            profile=self.profile,
            seed=seed,
            workers=runtime.get_worker_count(workers),
            out_dir=Path(out_dir),
            settings=settings,
            **sections,
        )

        return self.run_config
