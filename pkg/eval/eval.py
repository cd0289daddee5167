"""Runs the acceptance-scale simulation experiments, or writes a simulated example dataset.

Usage:
    python eval/eval.py accuracy_constant
    python eval/eval.py example_data
"""

import os
import sys
from pathlib import Path

import numpy as np
import pandas as pd
import yaml

PROJECT_ROOT = Path(__file__).parents[1]

# The src imports need the project root on the path when this file is run as a script.
sys.path.insert(0, os.path.abspath(os.path.join(os.path.dirname(__file__), '..')))
import src.runtime
from src.dataset import save_dataset
from src.decompose import DecompositionSettings
from src.models.otr import OTR_ESTIMATORS
from src.simstudy import DgpConfig, generate_population, run_experiment

SEED = 3131
EVAL_CONFIG_PATH = Path(PROJECT_ROOT, "configs", "eval_configs.yaml")
EVAL_RESULTS_PATH = Path(PROJECT_ROOT, "eval", "results")


def simulation_evaluation(eval_config: dict, seed: int, workers: int) -> tuple[pd.DataFrame, pd.DataFrame]:
    """Runs one simulation experiment per sensitivity parameter pair of `eval_config`.

    Every pair gets its own population and its own seed substream, so the experiments can be rerun in isolation.

    Args:
        eval_config (dict): One experiment of `/configs/eval_configs.yaml`: the data generating mode, the sensitivity
            parameter pairs, population size, sample sizes, iterations and the analysis options.
        seed (int): The master seed.
        workers (int): The maximum number of iterations run concurrently.

    Returns:
        tuple[pd.DataFrame, pd.DataFrame]: The per-iteration records and the summarized metrics of all pairs.
    """

    records = []
    metrics = []
    settings = DecompositionSettings(estimator=eval_config.get("estimator", "regression"), bootstrap=eval_config.get("bootstrap", 50))
    otr_estimator = OTR_ESTIMATORS[eval_config["otr_method"]](**eval_config.get("otr_options", {}))

    for k, (beta_u_y, beta_u_m) in enumerate(eval_config["sensitivity_parameters"]):
        print(f"{eval_config['mode']} mode, sensitivity parameters ({beta_u_y}, {beta_u_m})")

        cfg = DgpConfig(
            mode=eval_config["mode"],
            beta_u_y=beta_u_y,
            beta_u_m=beta_u_m,
            population_size=eval_config["population_size"],
            seed=src.runtime.derive_seed(seed, src.runtime.POPULATION_STREAM, k),
        )
        result = run_experiment(
            cfg,
            n_grid=eval_config["n_grid"],
            iterations=eval_config["iterations"],
            adjust=eval_config["adjust"],
            otr_method=otr_estimator,
            settings=settings,
            draws=eval_config["draws"],
            seed=src.runtime.derive_seed(seed, src.runtime.SIMULATION_STREAM, k),
            workers=workers,
        )

        for name in ("tau", "zeta_icde", "delta_iie", "zeta_iie"):
            print(f"  true {name}: {result.truths.get(name):.3f}")

        records.append(result.records.assign(mode=cfg.mode, beta_u_y=beta_u_y, beta_u_m=beta_u_m))
        metrics.append(result.metrics)

    return pd.concat(records, ignore_index=True), pd.concat(metrics, ignore_index=True)


def cell_summary(metrics: pd.DataFrame, metric: str, n: int, adjusted: bool, sensitivity: tuple[float, float], statistic: str = "median") -> float:
    """Returns one statistic of a metric for the cell (sensitivity parameters, n, adjusted) of `metrics`.

    Raises:
        KeyError: When `metrics` has no such cell.
    """

    beta_u_y, beta_u_m = sensitivity
    rows = metrics[
        (metrics["metric"] == metric)
        & (metrics["n"] == n)
        & (metrics["adjusted"] == adjusted)
        & np.isclose(metrics["beta_u_y"], beta_u_y)
        & np.isclose(metrics["beta_u_m"], beta_u_m)
    ]
    if len(rows) != 1:
        raise KeyError(f"Expected one {metric} row for n={n}, adjusted={adjusted}, sensitivity {sensitivity}, found {len(rows)}.")

    return float(rows[statistic].iloc[0])


def write_example_data(eval_config: dict, seed: int) -> Path:
    """Draws a sample from a simulated population and writes it as a CSV for the `data` profile of the CLI."""

    cfg = DgpConfig(
        mode=eval_config["mode"],
        beta_u_y=eval_config["beta_u_y"],
        beta_u_m=eval_config["beta_u_m"],
        population_size=eval_config["population_size"],
        seed=seed,
    )
    population = generate_population(cfg)
    rng = src.runtime.generator(seed, src.runtime.SIMULATION_STREAM)
    sample = population.subset(np.sort(rng.choice(population.n, size=eval_config["sample_size"], replace=False)))

    path = Path(PROJECT_ROOT, eval_config["path"])
    path.parent.mkdir(parents=True, exist_ok=True)
    save_dataset(sample, path)

    return path


if __name__ == "__main__":
    experiment = sys.argv[1] if len(sys.argv) > 1 else "accuracy_constant"

    src.runtime.set_universal_seed(SEED)
    workers = src.runtime.get_worker_count()

    with open(EVAL_CONFIG_PATH) as eval_config_stream:
        eval_config = yaml.safe_load(eval_config_stream)

    if experiment == "example_data":
        print(f"Wrote {write_example_data(eval_config[experiment], SEED)}")
    else:
        eval_records, eval_metrics = simulation_evaluation(eval_config[experiment], SEED, workers)

        EVAL_RESULTS_PATH.mkdir(parents=True, exist_ok=True)
        eval_records.to_parquet(Path(EVAL_RESULTS_PATH, f"{experiment}.parquet"))
        eval_metrics.to_parquet(Path(EVAL_RESULTS_PATH, f"{experiment}_metrics.parquet"))

        # Coverage is a rate, so it is summarized by its mean.
        for statistic, names in (("median", ["accuracy", "bias_zeta_icde"]), ("mean", ["coverage_zeta_icde", "coverage_delta_iie"])):
            cells = eval_metrics[eval_metrics["metric"].isin(names)]
            print(cells.pivot_table(index=["beta_u_y", "n", "adjusted"], columns="metric", values=statistic).round(3))
