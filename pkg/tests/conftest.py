"""Shared pytest fixtures for dsre tests."""

import json
from pathlib import Path

import pytest

from dsre.environment import (
    TorusEnvironment,
    assemble_environment,
    generate_stream_tensor,
)
from dsre.lattice import TorusGeometry


@pytest.fixture
def torus_2d() -> TorusGeometry:
    """Small two-dimensional torus."""
    return TorusGeometry(d=2, N=8)


@pytest.fixture
def control_env(torus_2d: TorusGeometry) -> TorusEnvironment:
    """Simple random walk: s = 1, h = 0."""
    return assemble_environment(
        {"kind": "constant", "value": 1.0}, None, geometry=torus_2d
    )


@pytest.fixture
def conductance_env(torus_2d: TorusGeometry) -> TorusEnvironment:
    """Reversible random conductances in [1, 2]."""
    return assemble_environment(
        {"kind": "iid_uniform", "lo": 1.0, "hi": 2.0},
        None,
        geometry=torus_2d,
        seed=3,
    )


@pytest.fixture
def skew_env(torus_2d: TorusGeometry) -> TorusEnvironment:
    """Non-reversible environment with constant s = 1 and a uniform stream tensor."""
    h = generate_stream_tensor(
        torus_2d, {"kind": "iid_uniform", "lo": -0.1, "hi": 0.1}, seed=7
    )
    return assemble_environment({"kind": "constant", "value": 1.0}, h, "reject")


@pytest.fixture
def random_env(torus_2d: TorusGeometry) -> TorusEnvironment:
    """Random conductances and a shrunk Gaussian stream tensor."""
    h = generate_stream_tensor(torus_2d, {"kind": "iid_gaussian", "sigma": 1.0}, seed=7)
    return assemble_environment(
        {"kind": "iid_uniform", "lo": 1.0, "hi": 2.0},
        h,
        {"kind": "shrink_h", "margin": 0.1},
        seed=7,
    )


@pytest.fixture
def control_config() -> dict:
    """Config for the s = 1, h = 0 control experiment on a small torus."""
    return {
        "format_version": 1,
        "environment": {
            "d": 2,
            "N": 16,
            "seed": 1,
            "s": {"kind": "constant", "value": 1},
        },
        "solver": {"tol": 1e-10},
        "simulation": {
            "t_grid": [0, 1, 2, 4],
            "t_list": [4.0],
            "n_walks": 2000,
            "walk_seed": 5,
        },
        "diagnostics": {
            "select": ["clt", "sublinearity", "nash", "entropy"],
            "radii": [2, 4, 8],
            "entropy_times": [1.0, 2.0],
            "cov_tol": 0.15,
        },
        "output_dir": "out",
    }


@pytest.fixture
def write_config(tmp_path: Path):
    """Write a config dict as JSON and return its path."""

    def _write(data: dict, name: str = "experiment.json") -> Path:
        path = tmp_path / name
        path.write_text(json.dumps(data))
        return path

    return _write
