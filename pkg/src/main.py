"""Runs the causal decomposition toolkit from the command line.

Usage:
    python -m src.main <command> [--config PATH] [--profile NAME] [--out DIR] [--seed N] [--workers K] [--relabel-groups]

Exit codes: 0 on success, 1 on a configuration or validation error, 2 on a data or estimation error.
"""

import argparse
import sys
from pathlib import Path

import yaml

from src import runtime
from src.errors import ConfigError, DataError, EstimationError
from src.pipeline import COMMANDS, DEFAULT_PROFILE, AnalysisFactory
from src.reports import ReportWriter

CONFIG_PATH = Path("configs", "analysis_configs.yaml")

EXIT_OK = 0
EXIT_CONFIG = 1
EXIT_ESTIMATION = 2


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="causal-decomp", description="Causal decomposition analysis with individualized interventions.")
    parser.add_argument("command", choices=COMMANDS, help="The analysis to run.")
    parser.add_argument("--config", type=Path, default=CONFIG_PATH, help="Path to the YAML config file.")
    parser.add_argument("--profile", default=DEFAULT_PROFILE, help="The profile looked up in every config section.")
    parser.add_argument("--out", type=Path, default=None, help="Output directory, overrides the config.")
    parser.add_argument("--seed", type=int, default=None, help="Master seed, overrides the config.")
    parser.add_argument("--workers", type=int, default=None, help="Maximum number of concurrent tasks, defaults to the available parallelism.")
    parser.add_argument("--relabel-groups", action="store_true", help="Swap the comparison and reference groups.")
    parser.add_argument("--quiet", action="store_true", help="Hide status lines and progress bars.")

    return parser


def load_config(path: Path) -> dict:
    """Loads the YAML config file.

    Raises:
        ConfigError: When the file is missing or is not valid YAML.
    """

    try:
        with open(path, encoding="utf-8") as config_stream:
            return yaml.safe_load(config_stream)
    except FileNotFoundError as error:
        raise ConfigError("main.load_config", f"Config file {path} does not exist.") from error
    except yaml.YAMLError as error:
        raise ConfigError("main.load_config", f"Config file {path} is not valid YAML: {error}") from error


def run(argv: list[str] | None = None) -> int:
    """Parses the arguments, runs the requested analysis and writes its reports.

    Args:
        argv (list[str] | None, optional): The command-line arguments, defaults to `sys.argv[1:]`.

    Returns:
        int: The exit code.
    """

    args = build_parser().parse_args(argv)
    verbose = not args.quiet

    try:
        config = load_config(args.config)
        factory = AnalysisFactory(args.command, config, profile=args.profile, seed=args.seed, workers=args.workers, out_dir=args.out)
        analysis = factory.create_analysis(verbose=verbose)
        run_config = factory.run_config

        if args.relabel_groups:
            run_config.data["relabel_groups"] = True

        if verbose:
            print(f"Starting analysis in {args.command} mode using {args.profile} profile.")

        runtime.set_universal_seed(run_config.seed)
        writer = ReportWriter(run_config.out_dir)
        results = analysis.run(writer)
        writer.write_summary(args.command, results, benchmark=args.command == "benchmark")
        writer.write_manifest(args.command, args.profile, args.config, run_config.seed, run_config.workers)
    except ConfigError as error:
        print(f"Configuration error: {error}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataError, EstimationError) as error:
        print(f"Analysis failed: {error}", file=sys.stderr)
        return EXIT_ESTIMATION

    if verbose:
        print(f"Wrote {len(writer.written)} files to {run_config.out_dir}.")

    return EXIT_OK


if __name__ == "__main__":
    sys.exit(run())
