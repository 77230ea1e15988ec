"""Common utility functions for dsre."""

from pathlib import Path


def get_templates_dir() -> Path:
    """Get the path to the templates directory."""
    package_dir = Path(__file__).parent
    return package_dir / "templates"


def format_number(value: float | None, digits: int = 4) -> str:
    """Compact rendering for report tables; ``None`` renders as a dash."""
    if value is None:
        return "-"
    if value == 0 or 1e-3 <= abs(value) < 1e4:
        return f"{value:.{digits}g}"
    return f"{value:.{digits - 1}e}"
