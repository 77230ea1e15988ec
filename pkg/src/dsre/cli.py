import argparse

from rich.table import Table

from . import pipeline
from .logging_utils import configure_logging, console, get_logger, level_from_flags

logger = get_logger(__name__)

COMMAND_HELP = {
    "gen-env": "Synthesize the environment and write its field dump",
    "solve-corrector": "Solve the harmonic-coordinate corrector",
    "heat-kernel": "Evolve the annealed heat kernel by uniformization",
    "simulate": "Sample raw and corrected walk displacements",
    "verify-clt": "Test the quenched CLT and the corrector sublinearity",
    "nash-diag": "Compute the moment, entropy and Fisher diagnostics",
    "full": "Run every stage in order",
}


def _positive_int(value: str) -> int:
    number = int(value)
    if number < 1:
        raise argparse.ArgumentTypeError(f"expected a positive integer, got {value}")
    return number


def _seed(value: str) -> int:
    number = int(value)
    if number < 0:
        raise argparse.ArgumentTypeError(f"seeds must be non-negative, got {value}")
    return number


def create_parser():
    """Create and return the argument parser."""
    parser = argparse.ArgumentParser(
        description=(
            "dsre - random walks in doubly stochastic periodic environments: "
            "correctors, heat kernels and CLT diagnostics"
        ),
        prog="dsre",
    )

    subparsers = parser.add_subparsers(dest="command", help="Available commands")

    for command in pipeline.COMMANDS:
        sub = subparsers.add_parser(command, help=COMMAND_HELP[command])
        sub.add_argument("config", help="Path to the experiment config (JSON or YAML)")
        sub.add_argument(
            "--seed",
            type=_seed,
            help="Override environment.seed (recorded in the manifest)",
        )
        sub.add_argument(
            "--threads",
            type=_positive_int,
            help="Cap the number of worker threads",
        )
        sub.add_argument(
            "-v", "--verbose", action="store_true", help="Log at DEBUG level"
        )
        sub.add_argument(
            "-q", "--quiet", action="store_true", help="Only log warnings and errors"
        )
        sub.set_defaults(func=run_command)

    return parser


def print_verdicts(manifest: pipeline.RunManifest) -> None:
    """Print the verdict table of a run."""
    if not manifest.verdicts:
        return
    table = Table(title=f"dsre {manifest.command}")
    table.add_column("Check")
    table.add_column("Result")
    table.add_column("Statistic", justify="right")
    table.add_column("Threshold", justify="right")
    for verdict in manifest.verdicts:
        result = "[green]pass[/green]" if verdict["pass"] else "[red]FAIL[/red]"
        table.add_row(
            verdict["check"],
            result,
            _cell(verdict["statistic"]),
            _cell(verdict["threshold"]),
        )
    console.print(table)


def _cell(value: float | None) -> str:
    return "-" if value is None else f"{value:.4g}"


def run_command(args: argparse.Namespace) -> int:
    """Run one pipeline command; returns the 0/1/2 exit code."""
    configure_logging(level_from_flags(args.verbose, args.quiet))
    code, manifest = pipeline.run(
        args.config, args.command, seed=args.seed, threads=args.threads
    )
    if not args.quiet:
        print_verdicts(manifest)
    return code


def main(args=None):
    """Main CLI entry point."""
    parser = create_parser()
    parsed_args = parser.parse_args(args)

    if not hasattr(parsed_args, "func"):
        parser.print_help()
        return 2

    try:
        return parsed_args.func(parsed_args)
    except Exception as e:
        logger.error(f"Error: {e}")
        return 2
