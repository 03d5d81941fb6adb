"""Command-line entry point: ``fraclinf <command> --config run.json``."""

import argparse
import logging
import os
import sys
from pathlib import Path
from typing import Optional, Sequence

from app.config import apply_overrides, describe_error, parse_config
from app.errors import ConfigError, FraclinfError
from app.experiment_service import CommandOutcome, experiment_service
from app.startup import startup

logger = logging.getLogger(__name__)

LOG_FORMAT = "%(asctime)s - %(name)s - %(levelname)s - %(message)s"

EXIT_OK = 0
EXIT_CHECK_FAILED = 1
EXIT_CONFIG = 2

CONFIG_COMMANDS = {
    "solve": experiment_service.solve,
    "verify": experiment_service.verify,
    "sweep-p": experiment_service.sweep_p,
    "uniqueness": experiment_service.uniqueness,
    "operator-check": experiment_service.operator_check,
}


def _add_run_options(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", type=Path, required=True, help="JSON run configuration")
    parser.add_argument("--output-dir", type=str, default=None, help="override output_dir")
    parser.add_argument("--seed", type=int, default=None)
    parser.add_argument("--spacing", type=float, default=None, help="override grid.spacing")
    parser.add_argument("--tol", type=float, default=None, help="override solver.tol_grad")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="fraclinf",
        description="Fractional-Laplacian L-infinity minimisation by p-continuation.",
    )
    parser.add_argument(
        "--log-level",
        default=os.environ.get("FRACLINF_LOG_LEVEL", "INFO"),
        choices=["DEBUG", "INFO", "WARNING", "ERROR", "CRITICAL"],
    )
    commands = parser.add_subparsers(dest="command", required=True)

    for name, help_text in (
        ("solve", "run the p-continuation and write fields and trajectory"),
        ("verify", "solve, extract the limit measure and write report.json"),
        ("sweep-p", "trajectory of E_p with per-stage diagnostics"),
        ("uniqueness", "solve from random starts and compare the minimisers"),
        ("operator-check", "compare the lattice operator with the quadrature oracle"),
    ):
        _add_run_options(commands.add_parser(name, help=help_text))

    export = commands.add_parser("export", help="rewrite the CSV artifacts of a finished run")
    export.add_argument("--run-dir", type=Path, required=True)

    runs = commands.add_parser("runs", help="list recent runs from the registry")
    runs.add_argument("--limit", type=int, default=20)
    return parser


def _log_outcome(outcome: CommandOutcome) -> None:
    logger.info(f"{outcome.command}: exit {outcome.exit_code}, {len(outcome.files)} file(s) in {outcome.run_dir}")
    for key, value in sorted(outcome.summary.items()):
        logger.info(f"  {key}: {value}")


def _list_runs(limit: int) -> int:
    for record in experiment_service.list_runs(limit):
        estimate = "-" if record.e_inf_estimate is None else format(record.e_inf_estimate, ".6g")
        row = [str(record.id), record.command, record.status.value, record.config_hash[:12], estimate]
        sys.stdout.write("\t".join([*row, record.output_dir]) + "\n")
    return EXIT_OK


def run(args: argparse.Namespace) -> int:
    if args.command == "runs":
        return _list_runs(args.limit)
    if args.command == "export":
        outcome = experiment_service.export(args.run_dir)
    else:
        config = parse_config(args.config)
        config = apply_overrides(config, args.output_dir, args.seed, args.spacing, args.tol)
        outcome = CONFIG_COMMANDS[args.command](config)
    _log_outcome(outcome)
    return outcome.exit_code


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=args.log_level, format=LOG_FORMAT)
    logging.getLogger().setLevel(args.log_level)
    startup()
    try:
        return run(args)
    except ConfigError as e:
        for violation in describe_error(e):
            logger.error(f"config error: {violation}")
        return EXIT_CONFIG
    except FraclinfError as e:
        logger.error(f"{args.command} aborted: {e}")
        return EXIT_CHECK_FAILED
