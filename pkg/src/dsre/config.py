"""Experiment configuration loading and validation."""

import contextlib
import hashlib
import json
import os
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Any

import yaml

from .corrector import SolverOptions
from .environment import CONDUCTANCE_KINDS, DEFAULT_EPS, STREAM_TENSOR_KINDS
from .lattice import MAX_DIMENSION, MIN_SIDE
from .logging_utils import get_logger

logger = get_logger(__name__)

FORMAT_VERSION = 1
OUTPUT_DIR_VAR = "DSRE_OUTPUT_DIR"
DEFAULT_OUTPUT_DIR = "dsre-output"
CHECKS = ("clt", "nash", "entropy", "moment", "sublinearity")
MIN_CLT_SAMPLES = 1000

_GENERATOR_PARAMS = {
    "constant": ("value",),
    "iid_uniform": ("lo", "hi"),
    "iid_gaussian": ("sigma",),
    "iid_pareto_truncated": ("alpha", "cap"),
}


class ConfigError(ValueError):
    """Schema violation, naming the offending path (e.g. ``$.environment.N``)."""

    def __init__(self, path: str, message: str):
        super().__init__(f"{path}: {message}")
        self.path = path


# Field readers


def _is_number(value: Any) -> bool:
    return isinstance(value, int | float) and not isinstance(value, bool)


def _number(value: Any, path: str, *, positive: bool = False) -> float:
    # YAML 1.1 resolves exponent floats without a dot (1e-10) to strings
    if isinstance(value, str):
        with contextlib.suppress(ValueError):
            value = float(value)
    if not _is_number(value):
        raise ConfigError(path, f"expected a number, got {value!r}")
    if positive and value <= 0:
        raise ConfigError(path, f"must be positive, got {value}")
    return float(value)


def _integer(value: Any, path: str, minimum: int | None = None) -> int:
    if not isinstance(value, int) or isinstance(value, bool):
        raise ConfigError(path, f"expected an integer, got {value!r}")
    if minimum is not None and value < minimum:
        raise ConfigError(path, f"must be >= {minimum}, got {value}")
    return value


def _numbers(value: Any, path: str, *, positive: bool = False) -> tuple[float, ...]:
    if not isinstance(value, list | tuple) or not value:
        raise ConfigError(path, f"expected a non-empty list, got {value!r}")
    return tuple(
        _number(item, f"{path}[{i}]", positive=positive) for i, item in enumerate(value)
    )


def _section(data: dict, key: str, path: str) -> dict:
    value = data.get(key, {})
    if value is None:
        return {}
    if not isinstance(value, dict):
        raise ConfigError(f"{path}.{key}", "expected an object")
    return value


def _reject_unknown(data: dict, allowed: set[str], path: str) -> None:
    for key in data:
        if key not in allowed:
            raise ConfigError(f"{path}.{key}", "unknown key")


def _generator(spec: Any, path: str, kinds: tuple[str, ...]) -> dict:
    if not isinstance(spec, dict):
        raise ConfigError(path, "expected a generator object with a 'kind'")
    kind = spec.get("kind")
    if kind not in kinds:
        raise ConfigError(
            f"{path}.kind", f"expected one of {list(kinds)}, got {kind!r}"
        )
    params = _GENERATOR_PARAMS[kind]
    _reject_unknown(spec, {"kind", *params}, path)
    out: dict[str, Any] = {"kind": kind}
    for name in params:
        if name not in spec:
            raise ConfigError(f"{path}.{name}", "missing")
        out[name] = _number(spec[name], f"{path}.{name}")
    if kind == "iid_uniform" and out["hi"] < out["lo"]:
        raise ConfigError(f"{path}.hi", f"must be >= lo = {out['lo']}")
    return out


# Sections


@dataclass(frozen=True)
class EnvironmentConfig:
    d: int = 2
    N: int = 32
    seed: int = 0
    s: dict = field(default_factory=lambda: {"kind": "constant", "value": 1.0})
    h: dict | None = None
    rescale: dict = field(default_factory=lambda: {"kind": "reject"})
    eps: float = DEFAULT_EPS

    @classmethod
    def parse(cls, data: dict, path: str) -> "EnvironmentConfig":
        _reject_unknown(data, {"d", "N", "seed", "s", "h", "rescale", "eps"}, path)
        base = cls()
        d = _integer(data.get("d", base.d), f"{path}.d", minimum=1)
        if d > MAX_DIMENSION:
            raise ConfigError(f"{path}.d", f"must be <= {MAX_DIMENSION}, got {d}")
        N = _integer(data.get("N", base.N), f"{path}.N", minimum=MIN_SIDE)
        seed = _integer(data.get("seed", base.seed), f"{path}.seed", minimum=0)
        s = _generator(data.get("s", base.s), f"{path}.s", CONDUCTANCE_KINDS)
        h = data.get("h")
        if h is not None:
            if d < 2:
                raise ConfigError(f"{path}.h", "a stream tensor needs d >= 2")
            h = _generator(h, f"{path}.h", STREAM_TENSOR_KINDS)

        raw = data.get("rescale", base.rescale)
        if isinstance(raw, str):
            raw = {"kind": raw}
        if not isinstance(raw, dict):
            raise ConfigError(f"{path}.rescale", "expected a string or an object")
        kind = raw.get("kind")
        if kind not in ("reject", "shrink_h"):
            raise ConfigError(f"{path}.rescale.kind", f"unknown policy {kind!r}")
        rescale = {"kind": kind}
        if kind == "shrink_h":
            margin = _number(raw.get("margin", 0.1), f"{path}.rescale.margin")
            if not 0 < margin < 1:
                raise ConfigError(f"{path}.rescale.margin", "must lie in (0, 1)")
            rescale["margin"] = margin

        eps = _number(data.get("eps", base.eps), f"{path}.eps", positive=True)
        return cls(d=d, N=N, seed=seed, s=s, h=h, rescale=rescale, eps=eps)


@dataclass(frozen=True)
class SolverConfig:
    tol: float = 1e-10
    max_iter: int | None = None
    preconditioner: str = "fft"

    @classmethod
    def parse(cls, data: dict, path: str) -> "SolverConfig":
        _reject_unknown(data, {"tol", "max_iter", "preconditioner"}, path)
        base = cls()
        tol = _number(data.get("tol", base.tol), f"{path}.tol", positive=True)
        max_iter = data.get("max_iter")
        if max_iter is not None:
            max_iter = _integer(max_iter, f"{path}.max_iter", minimum=1)
        preconditioner = data.get("preconditioner", base.preconditioner)
        if preconditioner not in ("fft", "none"):
            raise ConfigError(f"{path}.preconditioner", "expected 'fft' or 'none'")
        return cls(tol=tol, max_iter=max_iter, preconditioner=preconditioner)

    def options(self, threads: int | None = None) -> SolverOptions:
        return SolverOptions(
            tol=self.tol,
            max_iter=self.max_iter,
            preconditioner=self.preconditioner,
            threads=threads,
        )


@dataclass(frozen=True)
class SimulationConfig:
    t_grid: tuple[float, ...] = (0.0, 1.0, 2.0, 5.0, 10.0, 20.0, 50.0)
    t_list: tuple[float, ...] = (10.0, 50.0)
    n_walks: int = 10_000
    walk_seed: int = 0
    tail_tol: float = 1e-12
    x0: tuple[int, ...] | None = None

    @classmethod
    def parse(cls, data: dict, path: str, d: int) -> "SimulationConfig":
        allowed = {"t_grid", "t_list", "n_walks", "walk_seed", "tail_tol", "x0"}
        _reject_unknown(data, allowed, path)
        base = cls()
        t_grid = _numbers(data.get("t_grid", list(base.t_grid)), f"{path}.t_grid")
        if any(t < 0 for t in t_grid) or any(
            b <= a for a, b in zip(t_grid, t_grid[1:], strict=False)
        ):
            raise ConfigError(f"{path}.t_grid", "must be non-negative and increasing")
        t_list = _numbers(
            data.get("t_list", list(base.t_list)), f"{path}.t_list", positive=True
        )
        n_walks = _integer(data.get("n_walks", base.n_walks), f"{path}.n_walks", 0)
        walk_seed = _integer(
            data.get("walk_seed", base.walk_seed), f"{path}.walk_seed", minimum=0
        )
        tail_tol = _number(
            data.get("tail_tol", base.tail_tol), f"{path}.tail_tol", positive=True
        )
        if tail_tol > 1e-6:
            raise ConfigError(f"{path}.tail_tol", "must lie in (0, 1e-6]")
        x0 = data.get("x0")
        if x0 is not None:
            if not isinstance(x0, list | tuple) or len(x0) != d:
                raise ConfigError(f"{path}.x0", f"expected {d} integer coordinates")
            x0 = tuple(_integer(c, f"{path}.x0[{i}]") for i, c in enumerate(x0))
        return cls(
            t_grid=t_grid,
            t_list=t_list,
            n_walks=n_walks,
            walk_seed=walk_seed,
            tail_tol=tail_tol,
            x0=x0,
        )


@dataclass(frozen=True)
class DiagnosticsConfig:
    select: tuple[str, ...] = CHECKS
    radii: tuple[int, ...] = (4, 8, 12, 16)
    eps_list: tuple[float, ...] = (0.1,)
    ks_threshold: float | None = None
    cov_tol: float = 0.07
    slope_threshold: float = -0.5
    min_samples: int = MIN_CLT_SAMPLES
    entropy_times: tuple[float, ...] = (1.0, 2.0, 5.0, 10.0)

    @classmethod
    def parse(cls, data: dict, path: str) -> "DiagnosticsConfig":
        allowed = {
            "select",
            "radii",
            "eps_list",
            "ks_threshold",
            "cov_tol",
            "slope_threshold",
            "min_samples",
            "entropy_times",
        }
        _reject_unknown(data, allowed, path)
        base = cls()
        select = data.get("select", list(base.select))
        if not isinstance(select, list | tuple):
            raise ConfigError(f"{path}.select", "expected a list of check names")
        for i, name in enumerate(select):
            if name not in CHECKS:
                raise ConfigError(f"{path}.select[{i}]", f"unknown check {name!r}")
        radii = data.get("radii", list(base.radii))
        if not isinstance(radii, list | tuple) or not radii:
            raise ConfigError(f"{path}.radii", "expected a non-empty list")
        radii = tuple(
            _integer(r, f"{path}.radii[{i}]", minimum=1) for i, r in enumerate(radii)
        )
        ks_threshold = data.get("ks_threshold")
        if ks_threshold is not None:
            ks_threshold = _number(ks_threshold, f"{path}.ks_threshold", positive=True)
        min_samples = _integer(
            data.get("min_samples", base.min_samples), f"{path}.min_samples", 1
        )
        if min_samples < MIN_CLT_SAMPLES:
            raise ConfigError(
                f"{path}.min_samples",
                f"must be >= {MIN_CLT_SAMPLES}, got {min_samples}",
            )
        return cls(
            select=tuple(select),
            radii=radii,
            eps_list=_numbers(
                data.get("eps_list", list(base.eps_list)),
                f"{path}.eps_list",
                positive=True,
            ),
            ks_threshold=ks_threshold,
            cov_tol=_number(
                data.get("cov_tol", base.cov_tol), f"{path}.cov_tol", positive=True
            ),
            slope_threshold=_number(
                data.get("slope_threshold", base.slope_threshold),
                f"{path}.slope_threshold",
            ),
            min_samples=min_samples,
            entropy_times=_numbers(
                data.get("entropy_times", list(base.entropy_times)),
                f"{path}.entropy_times",
                positive=True,
            ),
        )


@dataclass(frozen=True)
class ExperimentConfig:
    """A validated experiment: environment, solver, simulation and checks."""

    environment: EnvironmentConfig = field(default_factory=EnvironmentConfig)
    solver: SolverConfig = field(default_factory=SolverConfig)
    simulation: SimulationConfig = field(default_factory=SimulationConfig)
    diagnostics: DiagnosticsConfig = field(default_factory=DiagnosticsConfig)
    output_dir: Path = Path(DEFAULT_OUTPUT_DIR)
    format_version: int = FORMAT_VERSION
    overrides: dict[str, Any] = field(default_factory=dict)

    def as_dict(self) -> dict[str, Any]:
        data = asdict(self)
        data["output_dir"] = str(self.output_dir)
        return data

    @property
    def config_hash(self) -> str:
        """sha256 of the canonical JSON form, overrides included."""
        payload = json.dumps(self.as_dict(), sort_keys=True, default=str)
        return hashlib.sha256(payload.encode()).hexdigest()

    @property
    def environment_hash(self) -> str:
        payload = json.dumps(asdict(self.environment), sort_keys=True, default=str)
        return hashlib.sha256(payload.encode()).hexdigest()

    def require_clt_samples(self) -> None:
        """Raises ConfigError when too few walks are configured for a CLT test."""
        needed = self.diagnostics.min_samples
        if self.simulation.n_walks < needed:
            raise ConfigError(
                "$.simulation.n_walks",
                f"verify-clt needs at least {needed} walks, "
                f"got {self.simulation.n_walks}",
            )

    def with_overrides(
        self,
        seed: int | None = None,
        output_dir: str | Path | None = None,
        threads: int | None = None,
    ) -> "ExperimentConfig":
        """Apply CLI overrides; ``DSRE_OUTPUT_DIR`` beats the configured directory."""
        config = self
        overrides = dict(self.overrides)
        if seed is not None:
            _integer(seed, "--seed", minimum=0)
            config = replace(config, environment=replace(config.environment, seed=seed))
            overrides["seed"] = seed
        env_dir = os.environ.get(OUTPUT_DIR_VAR)
        if env_dir:
            config = replace(config, output_dir=Path(env_dir))
            overrides[OUTPUT_DIR_VAR] = env_dir
        elif output_dir is not None:
            config = replace(config, output_dir=Path(output_dir))
            overrides["output_dir"] = str(output_dir)
        if threads is not None:
            _integer(threads, "--threads", minimum=1)
            overrides["threads"] = threads
        return replace(config, overrides=overrides)

    @property
    def threads(self) -> int | None:
        return self.overrides.get("threads")


def parse_config(data: Any, base_dir: Path | None = None) -> ExperimentConfig:
    """Validate a decoded config document.

    A relative ``output_dir`` is resolved against ``base_dir`` when given.
    """
    if not isinstance(data, dict):
        raise ConfigError("$", "expected an object at the top level")
    allowed = {
        "format_version",
        "environment",
        "solver",
        "simulation",
        "diagnostics",
        "output_dir",
    }
    _reject_unknown(data, allowed, "$")
    if "format_version" not in data:
        raise ConfigError("$.format_version", "missing")
    version = data["format_version"]
    if version != FORMAT_VERSION:
        raise ConfigError(
            "$.format_version", f"expected {FORMAT_VERSION}, got {version!r}"
        )

    environment = EnvironmentConfig.parse(
        _section(data, "environment", "$"), "$.environment"
    )
    output_dir = data.get("output_dir", DEFAULT_OUTPUT_DIR)
    if not isinstance(output_dir, str) or not output_dir:
        raise ConfigError("$.output_dir", "expected a non-empty path string")
    output_path = Path(output_dir)
    if base_dir is not None and not output_path.is_absolute():
        output_path = base_dir / output_path

    return ExperimentConfig(
        environment=environment,
        solver=SolverConfig.parse(_section(data, "solver", "$"), "$.solver"),
        simulation=SimulationConfig.parse(
            _section(data, "simulation", "$"), "$.simulation", environment.d
        ),
        diagnostics=DiagnosticsConfig.parse(
            _section(data, "diagnostics", "$"), "$.diagnostics"
        ),
        output_dir=output_path,
    )


def load_config(path: str | Path) -> ExperimentConfig:
    """Read a JSON or YAML experiment config.

    Raises:
        FileNotFoundError: If the file does not exist
        ConfigError: On unparsable content or a schema violation
    """
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"Config file not found: {path}")
    try:
        data = yaml.safe_load(path.read_text())
    except yaml.YAMLError as e:
        raise ConfigError("$", f"cannot parse {path.name}: {e}") from e
    config = parse_config(data, base_dir=path.parent)
    logger.debug(f"Loaded config {path} (hash {config.config_hash[:12]})")
    return config
