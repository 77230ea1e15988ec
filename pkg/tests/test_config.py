"""Tests for config.py module."""

from pathlib import Path
from unittest.mock import patch

import pytest

from dsre.config import (
    CHECKS,
    ConfigError,
    ExperimentConfig,
    load_config,
    parse_config,
)


class TestParseConfig:
    """Tests for parse_config."""

    def test_minimal_config_uses_defaults(self):
        """Should fill every section with defaults."""
        config = parse_config({"format_version": 1})
        assert config.environment.d == 2
        assert config.environment.N == 32
        assert config.environment.s == {"kind": "constant", "value": 1.0}
        assert config.environment.h is None
        assert config.solver.tol == 1e-10
        assert config.simulation.n_walks == 10_000
        assert config.diagnostics.select == CHECKS
        assert config.diagnostics.cov_tol == 0.07
        assert config.output_dir == Path("dsre-output")

    def test_control_config(self, control_config: dict):
        """Should parse the control experiment."""
        config = parse_config(control_config)
        assert config.environment.N == 16
        assert config.simulation.t_list == (4.0,)
        assert config.diagnostics.radii == (2, 4, 8)

    def test_requires_format_version(self):
        """Should refuse a document without format_version."""
        with pytest.raises(ConfigError, match=r"\$.format_version: missing"):
            parse_config({})

    def test_rejects_other_format_version(self):
        """Should refuse format versions other than 1."""
        with pytest.raises(ConfigError, match="expected 1"):
            parse_config({"format_version": 2})

    def test_rejects_non_object(self):
        """Should refuse a top level that is not an object."""
        with pytest.raises(ConfigError, match="top level"):
            parse_config([1, 2])

    @pytest.mark.parametrize(
        "section,data,path",
        [
            ("environment", {"N": 1}, "$.environment.N"),
            ("environment", {"d": 5}, "$.environment.d"),
            ("environment", {"seed": -1}, "$.environment.seed"),
            ("environment", {"colour": "red"}, "$.environment.colour"),
            ("environment", {"s": {"kind": "lognormal"}}, "$.environment.s.kind"),
            (
                "environment",
                {"s": {"kind": "iid_uniform", "lo": 1}},
                "$.environment.s.hi",
            ),
            ("environment", {"rescale": "clip"}, "$.environment.rescale.kind"),
            ("solver", {"tol": 0}, "$.solver.tol"),
            ("solver", {"preconditioner": "ilu"}, "$.solver.preconditioner"),
            ("simulation", {"t_grid": [0, 2, 1]}, "$.simulation.t_grid"),
            ("simulation", {"t_list": [0]}, "$.simulation.t_list[0]"),
            ("simulation", {"tail_tol": 1e-3}, "$.simulation.tail_tol"),
            ("simulation", {"x0": [0]}, "$.simulation.x0"),
            ("diagnostics", {"select": ["clt", "bogus"]}, "$.diagnostics.select[1]"),
            ("diagnostics", {"radii": [4, 0]}, "$.diagnostics.radii[1]"),
            ("diagnostics", {"min_samples": 10}, "$.diagnostics.min_samples"),
        ],
    )
    def test_errors_name_the_path(self, section: str, data: dict, path: str):
        """Should report the JSON path of the offending field."""
        with pytest.raises(ConfigError) as excinfo:
            parse_config({"format_version": 1, section: data})
        assert excinfo.value.path == path
        assert str(excinfo.value).startswith(f"{path}: ")

    def test_stream_tensor_needs_two_dimensions(self):
        """Should refuse a stream tensor for d = 1."""
        data = {
            "format_version": 1,
            "environment": {"d": 1, "h": {"kind": "constant", "value": 0.1}},
        }
        with pytest.raises(ConfigError, match="d >= 2"):
            parse_config(data)

    def test_rescale_forms(self):
        """Should accept the string and object forms of the rescale policy."""
        data = {"format_version": 1, "environment": {"rescale": "reject"}}
        short = parse_config(data)
        assert short.environment.rescale == {"kind": "reject"}
        shrink = parse_config(
            {
                "format_version": 1,
                "environment": {"rescale": {"kind": "shrink_h", "margin": 0.2}},
            }
        )
        assert shrink.environment.rescale == {"kind": "shrink_h", "margin": 0.2}

    @pytest.mark.parametrize("margin", [0, 1, 1.5])
    def test_rejects_bad_margin(self, margin: float):
        """Should require a shrink margin in (0, 1)."""
        data = {
            "format_version": 1,
            "environment": {"rescale": {"kind": "shrink_h", "margin": margin}},
        }
        with pytest.raises(ConfigError, match="margin"):
            parse_config(data)

    def test_relative_output_dir(self, tmp_path: Path):
        """Should resolve a relative output_dir against the config directory."""
        config = parse_config({"format_version": 1, "output_dir": "out"}, tmp_path)
        assert config.output_dir == tmp_path / "out"

    def test_numeric_strings(self):
        """Should accept exponent floats that YAML 1.1 leaves as strings."""
        config = parse_config({"format_version": 1, "solver": {"tol": "1e-8"}})
        assert config.solver.tol == 1e-8

    def test_solver_options(self):
        """Should build solver options with the thread cap."""
        config = parse_config({"format_version": 1, "solver": {"max_iter": 50}})
        opts = config.solver.options(threads=3)
        assert opts.max_iter == 50
        assert opts.threads == 3


class TestLoadConfig:
    """Tests for load_config."""

    def test_loads_yaml(self, tmp_path: Path):
        """Should read YAML configs."""
        path = tmp_path / "exp.yaml"
        path.write_text(
            "format_version: 1\n"
            "environment:\n"
            "  N: 8\n"
            "  h: {kind: iid_gaussian, sigma: 0.5}\n"
            "  rescale: {kind: shrink_h, margin: 0.1}\n"
            "solver:\n"
            "  tol: 1e-9\n"
        )
        config = load_config(path)
        assert config.environment.N == 8
        assert config.environment.h == {"kind": "iid_gaussian", "sigma": 0.5}
        assert config.solver.tol == 1e-9
        assert config.output_dir == tmp_path / "dsre-output"

    def test_loads_json(self, write_config, control_config: dict):
        """Should read JSON configs."""
        config = load_config(write_config(control_config))
        assert config.simulation.walk_seed == 5

    def test_missing_file(self, tmp_path: Path):
        """Should raise FileNotFoundError for a missing file."""
        with pytest.raises(FileNotFoundError):
            load_config(tmp_path / "nope.yaml")

    def test_unparsable_file(self, tmp_path: Path):
        """Should raise ConfigError on malformed content."""
        path = tmp_path / "bad.yaml"
        path.write_text("format_version: [1\n")
        with pytest.raises(ConfigError, match="cannot parse"):
            load_config(path)


class TestExperimentConfig:
    """Tests for ExperimentConfig helpers."""

    def test_hashes_are_stable(self, control_config: dict):
        """Should hash equal configs equally and track environment changes."""
        a = parse_config(control_config)
        b = parse_config(control_config)
        assert a.config_hash == b.config_hash
        assert a.environment_hash == b.environment_hash
        control_config["environment"]["seed"] = 2
        c = parse_config(control_config)
        assert c.environment_hash != a.environment_hash

    def test_solver_change_keeps_environment_hash(self, control_config: dict):
        """Should leave the environment hash alone when only the solver changes."""
        a = parse_config(control_config)
        control_config["solver"]["tol"] = 1e-8
        b = parse_config(control_config)
        assert a.environment_hash == b.environment_hash
        assert a.config_hash != b.config_hash

    def test_seed_override(self, control_config: dict):
        """Should replace the environment seed and record the override."""
        with patch.dict("os.environ", {}, clear=True):
            config = parse_config(control_config).with_overrides(seed=9, threads=2)
        assert config.environment.seed == 9
        assert config.overrides == {"seed": 9, "threads": 2}
        assert config.threads == 2

    def test_output_dir_environment_variable(self, control_config: dict):
        """Should let DSRE_OUTPUT_DIR win over the configured directory."""
        with patch.dict("os.environ", {"DSRE_OUTPUT_DIR": "/tmp/elsewhere"}):
            config = parse_config(control_config).with_overrides(output_dir="ignored")
        assert config.output_dir == Path("/tmp/elsewhere")
        assert config.overrides["DSRE_OUTPUT_DIR"] == "/tmp/elsewhere"

    def test_rejects_negative_seed_override(self, control_config: dict):
        """Should refuse negative seeds."""
        with pytest.raises(ConfigError, match="--seed"):
            parse_config(control_config).with_overrides(seed=-1)

    def test_require_clt_samples(self, control_config: dict):
        """Should require n_walks >= min_samples for the CLT check."""
        parse_config(control_config).require_clt_samples()
        control_config["simulation"]["n_walks"] = 10
        with pytest.raises(ConfigError, match="n_walks"):
            parse_config(control_config).require_clt_samples()

    def test_defaults(self):
        """Should construct with defaults directly."""
        assert ExperimentConfig().format_version == 1
