"""Logging utilities for dsre."""

import logging

from rich.console import Console
from rich.logging import RichHandler

# Shared console for log records and the verdict table
console = Console(stderr=False, force_terminal=True)


def configure_logging(level: int = logging.INFO, verbose: bool = True) -> None:
    """Configure the root logger with a Rich handler.

    Warnings raised by numpy and scipy (overflow, solver breakdown) are routed
    through the same handler under the ``py.warnings`` logger.

    Args:
        level: Logging level (default: INFO)
        verbose: If True, show timestamps, source paths and locals in tracebacks
    """
    rich_handler = RichHandler(
        console=console,
        show_time=verbose,
        show_path=verbose,
        show_level=True,
        rich_tracebacks=True,
        tracebacks_show_locals=verbose,
        markup=False,
        log_time_format="[%X]",
    )

    rich_handler.setFormatter(logging.Formatter("%(message)s"))

    logging.basicConfig(level=level, handlers=[rich_handler], force=True)
    logging.captureWarnings(True)


def level_from_flags(verbose: bool = False, quiet: bool = False) -> int:
    """Map the CLI verbosity flags to a logging level.

    ``--quiet`` wins over ``--verbose`` when both are given.
    """
    if quiet:
        return logging.WARNING
    if verbose:
        return logging.DEBUG
    return logging.INFO


def get_logger(name: str, level: int | None = None) -> logging.Logger:
    """Return the logger for a dsre module.

    Stage progress logs at INFO, solver restarts and truncation orders at DEBUG.
    ``level`` overrides the level of this logger only.
    """
    logger = logging.getLogger(name)

    if level is not None:
        logger.setLevel(level)

    return logger


# Library use gets the same handler as the CLI
configure_logging()
