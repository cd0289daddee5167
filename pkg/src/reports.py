"""Formats analysis results as tables and writes the report artifacts of a run."""

from __future__ import annotations

import hashlib
import json
import os
import platform
import tempfile
from datetime import datetime, timezone
from importlib import metadata
from pathlib import Path

import numpy as np
import pandas as pd

from src.decompose import DecompositionReport, Estimate

REPORTED_PACKAGES = ("numpy", "pandas", "scipy", "PyYAML", "tqdm", "joblib", "pyarrow")

ASSUMPTIONS = {
    "A1": "Conditional independence: given R, X and C there is no unmeasured confounding of the risk factor M and the outcome Y.",
    "A2": "Positivity: every unit has a nonzero probability of each value of M given R, X and C.",
    "A3": "Consistency: the observed outcome equals the potential outcome under the observed value of M.",
}

BENCHMARK_ASSUMPTIONS = {
    "B1": "The omitted confounder U is independent of the remaining covariates R, X and C.",
    "B2": "The benchmark covariate X_j is independent of the remaining covariates given R, X_-j and C, with the same residual variance as U.",
}

TABLE_2_ROWS = ("Initial disparity", "Disparity remaining", "Disparity reduction", "% reduction")


def stars(p_value: float) -> str:
    """Returns the significance stars at the 0.05, 0.01 and 0.001 levels."""

    if not np.isfinite(p_value):
        return ""

    return "***" if p_value < 0.001 else "**" if p_value < 0.01 else "*" if p_value < 0.05 else ""


def format_estimate(estimate: Estimate | None, digits: int = 3) -> str:
    """Formats an estimate as ``-0.413*** (0.010)``."""

    if estimate is None or not np.isfinite(estimate.value):
        return ""

    text = f"{estimate.value:.{digits}f}{stars(estimate.p_value)}"
    if np.isfinite(estimate.se):
        text += f" ({estimate.se:.{digits}f})"

    return text


def format_percent(value: float) -> str:
    return f"{value:.1f}%" if np.isfinite(value) else ""


def table_1(stats: dict[str, dict[str, float]]) -> pd.DataFrame:
    """Returns the recommendation and compliance rates (in %) of one or more OTR methods, one row per method.

    Args:
        stats (dict[str, dict[str, float]]): Per method, the output of `otr.compliance_stats`.
    """

    frame = pd.DataFrame.from_dict(stats, orient="index")
    frame.index.name = "method"

    return frame.round(1).reset_index()


def table_2(report: DecompositionReport) -> pd.DataFrame:
    """Returns the decomposition in the layout of rows (initial disparity, remaining, reduction, % reduction) by ICDE and IIE."""

    icde = [report.tau, report.zeta_icde, report.delta_icde]
    iie = [report.tau, report.zeta_iie, report.delta_iie]

    return pd.DataFrame({
        "estimand": TABLE_2_ROWS,
        "ICDE": [format_estimate(estimate) for estimate in icde] + [format_percent(report.pct_reduction_icde)],
        "IIE": [format_estimate(estimate) for estimate in iie] + [format_percent(report.pct_reduction_iie)],
    })


def estimates_frame(report: DecompositionReport) -> pd.DataFrame:
    """Returns the numeric estimates of a decomposition, one row per estimand."""

    return pd.DataFrame([
        {"estimand": name, "estimate": estimate.value, "se": estimate.se, "p_value": estimate.p_value, "stars": stars(estimate.p_value)}
        for name, estimate in report.estimates().items()
    ])


def table_3(cells: list[dict]) -> pd.DataFrame:
    """Returns benchmark results in the layout of one label column plus one column per (k_m, k_y) cell.

    Args:
        cells (list[dict]): Per cell, ``k_m``, ``k_y``, and either ``beta_u_m``, ``beta_u_y``, ``recommended`` and a
            pooled ``report``, or an ``error`` message.
    """

    labels = [
        "beta_u_m", "beta_u_y", "% recommended",
        "Disparity remaining (ICDE)", "Disparity remaining (IIE)", "Disparity reduction (IIE)",
        "% reduction (ICDE)", "% reduction (IIE)",
    ]
    columns = {"label": labels}

    for cell in cells:
        name = f"k_m={cell['k_m']:g}, k_y={cell['k_y']:g}"

        if cell.get("error"):
            columns[name] = ["failed"] + [""] * (len(labels) - 1)
            continue

        report = cell["report"]
        columns[name] = [
            f"{cell['beta_u_m']:.3f}",
            f"{cell['beta_u_y']:.3f}",
            format_percent(cell["recommended"]),
            format_estimate(report.zeta_icde),
            format_estimate(report.zeta_iie),
            format_estimate(report.delta_iie),
            format_percent(report.pct_reduction_icde),
            format_percent(report.pct_reduction_iie),
        ]

    return pd.DataFrame(columns)


def _to_builtin(value):
    if isinstance(value, dict):
        return {str(key): _to_builtin(item) for key, item in value.items()}
    if isinstance(value, (list, tuple)):
        return [_to_builtin(item) for item in value]
    if isinstance(value, np.ndarray):
        return [_to_builtin(item) for item in value.tolist()]
    if isinstance(value, np.generic):
        value = value.item()
    if isinstance(value, float) and not np.isfinite(value):
        return None

    return value


def _atomic_write(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    handle, temporary = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")

    try:
        with os.fdopen(handle, "w", encoding="utf-8", newline="") as stream:
            stream.write(text)
        os.replace(temporary, path)
    except BaseException:
        Path(temporary).unlink(missing_ok=True)
        raise


class ReportWriter:
    """Writes the artifacts of one run into an output directory, each file atomically.

    Attributes:
        out_dir: The output directory.
        written: The names of the files written so far.
    """

    def __init__(self, out_dir: str | Path) -> None:
        self.out_dir = Path(out_dir)
        self.written = []

    def _write(self, name: str, text: str) -> Path:
        path = self.out_dir / name
        _atomic_write(path, text)
        self.written.append(name)

        return path

    def write_json(self, name: str, payload: dict) -> Path:
        return self._write(name, json.dumps(_to_builtin(payload), indent=2, sort_keys=True) + "\n")

    def write_table(self, name: str, frame: pd.DataFrame) -> Path:
        """Writes `frame` as ``table_<name>.csv``."""

        return self._write(f"table_{name}.csv", frame.to_csv(index=False, float_format="%.10g", lineterminator="\n"))

    def write_plot_data(self, name: str, frame: pd.DataFrame, index: bool = False) -> Path:
        """Writes `frame` as the tab-separated ``plot_<name>.tsv`` for external plotting tools."""

        return self._write(f"plot_{name}.tsv", frame.to_csv(sep="\t", index=index, float_format="%.10g", lineterminator="\n"))

    def write_summary(self, command: str, results: dict, benchmark: bool = False) -> Path:
        """Writes ``summary.json`` with the results and the identifying assumptions they rest on."""

        assumptions = {**ASSUMPTIONS, **(BENCHMARK_ASSUMPTIONS if benchmark else {})}
        return self.write_json("summary.json", {"command": command, "assumptions": assumptions, "results": results})

    def write_manifest(self, command: str, profile: str, config_path: str | Path, seed: int, workers: int) -> Path:
        """Writes ``manifest.json`` with the config hash, seed, package versions and the files written."""

        return self.write_json("manifest.json", {
            "command": command,
            "profile": profile,
            "config": str(config_path),
            "config_sha256": hashlib.sha256(Path(config_path).read_bytes()).hexdigest(),
            "seed": seed,
            "workers": workers,
            "python": platform.python_version(),
            "packages": package_versions(),
            "files": sorted(self.written),
            "created": datetime.now(timezone.utc).isoformat(timespec="seconds"),
        })


def package_versions() -> dict[str, str]:
    versions = {}
    for package in REPORTED_PACKAGES:
        try:
            versions[package] = metadata.version(package)
        except metadata.PackageNotFoundError:
            versions[package] = "not installed"

    return versions
