"""Tests for report.py module."""

from pathlib import Path

import pytest

from dsre.diagnostics import Verdict
from dsre.pipeline import RunManifest
from dsre.report import render_report, write_report
from dsre.utils import format_number


@pytest.fixture
def manifest() -> RunManifest:
    return RunManifest(
        command="solve-corrector",
        config_hash="abc123",
        env_hash="def456",
        overrides={"seed": 4},
        stages=["gen-env", "solve-corrector"],
        timings={"gen-env": 0.01, "solve-corrector": 0.25},
        sigma2=[[2.0, 0.0], [0.0, 2.0]],
    )


class TestRenderReport:
    """Tests for render_report."""

    def test_all_checks_passed(self, manifest: RunManifest):
        """Should announce a clean run and list every check."""
        verdicts = [
            Verdict("bistochastic", True, 0.0, 1e-12),
            Verdict("corrector_residual", True, 3e-14, 1e-10),
        ]
        text = render_report(manifest, verdicts)
        assert text.startswith("# dsre run: `solve-corrector`")
        assert "All 2 checks passed." in text
        assert "| bistochastic | pass | 0 | 1.000e-12 | - |" in text
        assert "| solve-corrector | 0.250 |" in text
        assert "| Override `seed` | `4` |" in text
        assert "`abc123`" in text

    def test_failed_checks(self, manifest: RunManifest):
        """Should count failed checks and mark them."""
        verdicts = [
            Verdict("clt@t=4:ks", True, 0.01, 0.05),
            Verdict("clt@t=4:covariance", False, 0.3, 0.07),
        ]
        text = render_report(manifest, verdicts)
        assert "1 of 2 checks failed." in text
        assert "| clt@t=4:covariance | FAIL | 0.3 | 0.07 | - |" in text

    def test_run_error(self, manifest: RunManifest):
        """Should lead with the error of a failed run."""
        manifest.exit_code = 2
        manifest.error = "StaleArtifactError: rerun gen-env"
        text = render_report(manifest, [])
        assert "**Run failed** (exit code 2): StaleArtifactError" in text
        assert "## Checks" not in text

    def test_no_checks(self):
        """Should render a bare manifest without sigma2 or checks."""
        text = render_report(RunManifest(command="gen-env"), [])
        assert "No checks were run." in text
        assert "## Effective covariance" not in text
        assert "| Config hash | `-` |" in text

    def test_effective_covariance(self, manifest: RunManifest):
        """Should print sigma2 row by row."""
        text = render_report(manifest, [])
        assert "## Effective covariance" in text
        assert "```text\n2  0\n0  2\n```" in text

    def test_non_finite_statistic(self, manifest: RunManifest):
        """Should print non-finite statistics verbatim."""
        verdicts = [Verdict("entropy_ratio", False, float("nan"), 0.0, 8.0)]
        text = render_report(manifest, verdicts)
        assert "| entropy_ratio | FAIL | nan | 0 | 8 |" in text


class TestWriteReport:
    """Tests for write_report."""

    def test_writes_file(self, tmp_path: Path, manifest: RunManifest):
        """Should write the rendered report and return its path."""
        path = write_report(tmp_path / "report.md", manifest, [])
        assert path.read_text() == render_report(manifest, [])


class TestFormatNumber:
    """Tests for format_number."""

    @pytest.mark.parametrize(
        "value,expected",
        [
            (None, "-"),
            (0.0, "0"),
            (2.0, "2"),
            (0.123456, "0.1235"),
            (1e-12, "1.000e-12"),
            (123456.0, "1.235e+05"),
        ],
    )
    def test_formats(self, value: float | None, expected: str):
        """Should use fixed notation in [1e-3, 1e4) and exponents elsewhere."""
        assert format_number(value) == expected
