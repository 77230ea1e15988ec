"""Render the human-readable run report."""

import math
from collections.abc import Sequence
from pathlib import Path
from typing import TYPE_CHECKING

from jinja2 import Environment, FileSystemLoader, StrictUndefined

from .diagnostics import Verdict
from .logging_utils import get_logger
from .utils import format_number, get_templates_dir

if TYPE_CHECKING:
    from .pipeline import RunManifest

logger = get_logger(__name__)

TEMPLATE = "report.md.j2"


def _fmt(value: float | None) -> str:
    if value is None:
        return "-"
    if not math.isfinite(value):
        return str(value)
    return format_number(float(value))


def render_report(manifest: "RunManifest", verdicts: Sequence[Verdict]) -> str:
    """Render the markdown report for a run.

    Args:
        manifest: Manifest of the run (inventory not required)
        verdicts: Verdicts produced by the run's stages

    Returns:
        Markdown text
    """
    env = Environment(
        loader=FileSystemLoader(str(get_templates_dir())),
        undefined=StrictUndefined,
        keep_trailing_newline=True,
        trim_blocks=False,
    )
    env.filters["fmt"] = _fmt
    template = env.get_template(TEMPLATE)
    failed = [v for v in verdicts if not v.passed]
    return template.render(
        manifest=manifest,
        verdicts=verdicts,
        failed=failed,
        passed=not failed,
    )


def write_report(
    path: Path, manifest: "RunManifest", verdicts: Sequence[Verdict]
) -> Path:
    path.write_text(render_report(manifest, verdicts))
    logger.debug(f"Wrote report {path}")
    return path
