"""Experiment stages, dependency resolution and the run manifest.

Each stage writes its artifacts under the output directory. A stage that needs
an upstream result takes it from memory, then from disk (after checking the
environment hash), and otherwise runs the upstream stage first.
"""

import json
import time
from collections.abc import Callable
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import diagnostics
from .config import ExperimentConfig, load_config
from .corrector import (
    DRIFT,
    CorrectorSolution,
    solve_corrector,
    write_corrector,
)
from .diagnostics import Verdict
from .dynamics import (
    EXPM_SITE_LIMIT,
    DisplacementSamples,
    HeatKernel,
    heat_kernel,
    heat_kernel_expm,
    sample_displacements,
)
from .environment import (
    TorusEnvironment,
    assemble_environment,
    drift_fields,
    generate_stream_tensor,
    h_minus_one_report,
    read_environment,
    write_environment,
)
from .fields import FieldDump, file_hash, read_field_dump, write_field_dump
from .lattice import TorusGeometry
from .logging_utils import get_logger
from .operator_algebra import verify_identities
from .report import write_report

logger = get_logger(__name__)

STAGES = (
    "gen-env",
    "solve-corrector",
    "heat-kernel",
    "simulate",
    "verify-clt",
    "nash-diag",
)
COMMANDS = (*STAGES, "full")

ENVIRONMENT = "environment"
CORRECTOR = "corrector"
HEAT_KERNEL = "heat_kernel"
MANIFEST = "manifest.json"
VERDICTS = "verdicts.json"
REPORT = "report.md"

BISTOCHASTIC_TOL = 1e-12
MASS_TOL = 1e-10
EXPM_TOL = 1e-8
MOMENT_GRID_POINTS = 16
ENTROPY_DROP_TOL = 1e-12
IDENTITY_TRIALS = 5
IDENTITY_TOL = 1e-9
IDENTITY_DENSE_SITES = 1024
SPECTRUM_TOL = 1e-10


class StaleArtifactError(RuntimeError):
    """An artifact on disk was produced from a different environment."""


@dataclass
class RunManifest:
    """Provenance of one run: hashes, timings, file inventory and verdicts."""

    command: str
    config_hash: str | None = None
    env_hash: str | None = None
    overrides: dict = field(default_factory=dict)
    stages: list[str] = field(default_factory=list)
    timings: dict[str, float] = field(default_factory=dict)
    files: dict[str, str] = field(default_factory=dict)
    verdicts: list[dict] = field(default_factory=list)
    sigma2: list | None = None
    exit_code: int = 0
    error: str | None = None

    @property
    def passed(self) -> bool:
        return all(v["pass"] for v in self.verdicts)

    def as_dict(self) -> dict:
        return asdict(self)

    def write(self, path: Path) -> Path:
        path.write_text(json.dumps(self.as_dict(), indent=2, sort_keys=True) + "\n")
        return path


@dataclass
class RunContext:
    """In-memory results shared between the stages of one run."""

    config: ExperimentConfig
    manifest: RunManifest
    env: TorusEnvironment | None = None
    solution: CorrectorSolution | None = None
    heat: HeatKernel | None = None
    samples: DisplacementSamples | None = None
    verdicts: list[Verdict] = field(default_factory=list)

    @property
    def out(self) -> Path:
        return self.config.output_dir

    def artifact(self, name: str) -> Path:
        return self.out / name


# Environment


def build_environment(config: ExperimentConfig) -> TorusEnvironment:
    """Synthesize the environment described by ``config.environment``."""
    spec = config.environment
    geometry = TorusGeometry(d=spec.d, N=spec.N)
    h = None
    if spec.h is not None:
        h = generate_stream_tensor(geometry, spec.h, spec.seed, spec.eps)
    return assemble_environment(
        spec.s,
        h,
        spec.rescale,
        geometry=geometry,
        seed=spec.seed,
        provenance={
            "h": spec.h,
            "eps": spec.eps,
            "config_hash": config.environment_hash,
        },
    )


def _structure_verdicts(env: TorusEnvironment, rescale: dict) -> list[Verdict]:
    """Double stochasticity, drift structure and the rate floor."""
    report = env.report
    floor = 0.0
    if rescale.get("kind") == "shrink_h":
        floor = float(rescale.get("margin", 0.1)) * env.s_star
    rate_defect = drift_fields(env).rate_identity_defect
    defects = (
        ("bistochastic", report.bistochastic_defect),
        ("divergence_free", report.divergence_defect),
        ("skew_symmetric", report.skew_defect),
        ("zero_mean_drift", report.mean_drift_defect),
        ("drift_identity", rate_defect),
    )
    verdicts = [
        Verdict(name, value < BISTOCHASTIC_TOL, value, BISTOCHASTIC_TOL)
        for name, value in defects
    ]
    verdicts.append(
        Verdict(
            "ellipticity",
            report.min_rate >= floor - BISTOCHASTIC_TOL,
            report.min_rate,
            floor,
        )
    )
    return verdicts


def _operator_verdicts(env: TorusEnvironment) -> list[Verdict]:
    """Operator identities and the infrared correlation spectrum."""
    g = env.geometry
    identities = verify_identities(
        env,
        trials=IDENTITY_TRIALS,
        tol=IDENTITY_TOL,
        dense=g.n_sites <= IDENTITY_DENSE_SITES,
    )
    if not identities.passed:
        logger.warning(f"Operator identities failed: {identities.failures}")
    h1 = h_minus_one_report(env)
    logger.info(f"H_-1 correlation sum = {h1.value:.6g}")
    return [
        Verdict(
            "operator_identities",
            identities.passed,
            max(identities.defects.values()),
            identities.tol,
        ),
        Verdict(
            "h_minus_one_spectrum",
            h1.min_spectrum >= -SPECTRUM_TOL,
            h1.min_spectrum,
            -SPECTRUM_TOL,
        ),
    ]


def stage_gen_env(ctx: RunContext) -> None:
    env = build_environment(ctx.config)
    write_environment(env, ctx.artifact(ENVIRONMENT))
    report = env.report
    logger.info(
        f"Generated {env.describe()} (gamma = {report.gamma:.4g}, "
        f"min p = {report.min_rate:.4g})"
    )
    ctx.env = env
    ctx.solution = ctx.heat = ctx.samples = None
    ctx.verdicts.extend(_structure_verdicts(env, ctx.config.environment.rescale))
    ctx.verdicts.extend(_operator_verdicts(env))


def ensure_environment(ctx: RunContext) -> TorusEnvironment:
    if ctx.env is not None:
        return ctx.env
    path = ctx.artifact(ENVIRONMENT)
    if path.with_suffix(".json").exists():
        env = read_environment(path)
        if env.provenance.get("config_hash") != ctx.config.environment_hash:
            raise StaleArtifactError(
                f"{path.with_suffix('.json')} was generated from a different "
                "environment config; rerun gen-env"
            )
        logger.info(f"Loaded {env.describe()} from {path.name}")
        ctx.env = env
        return env
    run_stage(ctx, "gen-env")
    assert ctx.env is not None
    return ctx.env


# Corrector


def _stored_corrector(ctx: RunContext, env: TorusEnvironment) -> np.ndarray | None:
    """Stored ``chi`` fields for warm starts; None when absent."""
    path = ctx.artifact(CORRECTOR)
    if not path.with_suffix(".json").exists():
        return None
    dump = read_field_dump(path)
    if dump.metadata.get("env_hash") != env.env_hash:
        raise StaleArtifactError(
            f"{path.with_suffix('.json')} belongs to environment "
            f"{str(dump.metadata.get('env_hash'))[:12]}, not {env.env_hash[:12]}"
        )
    chi = [dump.components[f"chi_{i + 1}"] for i in range(env.geometry.d)]
    return np.stack(chi)


def stage_solve_corrector(ctx: RunContext) -> None:
    env = ensure_environment(ctx)
    try:
        guess = _stored_corrector(ctx, env)
    except StaleArtifactError as e:
        logger.warning(f"Ignoring stale corrector: {e}")
        guess = None
    opts = ctx.config.solver.options(threads=ctx.config.threads)
    solution = solve_corrector(env, DRIFT, opts, initial_guess=guess)
    write_corrector(solution, ctx.artifact(CORRECTOR), seed=ctx.config.environment.seed)
    ctx.solution = solution
    ctx.manifest.sigma2 = np.asarray(solution.sigma2).tolist()
    threshold = opts.tol * max(float(np.max(np.abs(solution.phi))), 1.0)
    ctx.verdicts.append(
        Verdict(
            "corrector_residual",
            solution.residual <= threshold,
            solution.residual,
            threshold,
        )
    )


def ensure_corrector(ctx: RunContext) -> CorrectorSolution:
    """Return the drift corrector, warm-starting from a stored one."""
    if ctx.solution is not None:
        return ctx.solution
    env = ensure_environment(ctx)
    guess = _stored_corrector(ctx, env)
    if guess is None:
        run_stage(ctx, "solve-corrector")
    else:
        opts = ctx.config.solver.options(threads=ctx.config.threads)
        ctx.solution = solve_corrector(env, DRIFT, opts, initial_guess=guess)
        ctx.manifest.sigma2 = np.asarray(ctx.solution.sigma2).tolist()
    assert ctx.solution is not None
    return ctx.solution


# Heat kernel


def heat_kernel_grid(config: ExperimentConfig, env: TorusEnvironment) -> np.ndarray:
    """Configured grid plus the Richardson stencils and the moment window."""
    grid = [np.asarray(config.simulation.t_grid, dtype=float), np.zeros(1)]
    select = config.diagnostics.select
    if "entropy" in select:
        grid.append(diagnostics.richardson_grid(config.diagnostics.entropy_times))
    t_wrap = diagnostics.wrap_time(env)
    if "moment" in select and t_wrap > 1.0:
        grid.append(np.geomspace(1.0, t_wrap, MOMENT_GRID_POINTS))
    return np.unique(np.concatenate(grid))


def _write_heat_kernel(hk: HeatKernel, path: Path) -> None:
    components = {f"q_{i:04d}": snapshot for i, snapshot in enumerate(hk.q)}
    metadata = {
        "env_hash": hk.env_hash,
        "times": hk.times.tolist(),
        "start": None if hk.start is None else np.asarray(hk.start).tolist(),
        "lam": hk.lam,
        "truncation": list(hk.truncation),
        "tail_bound": hk.tail_bound,
        "method": hk.method,
    }
    g = hk.geometry
    write_field_dump(
        FieldDump(d=g.d, N=g.N, components=components, metadata=metadata), path
    )


def _read_heat_kernel(path: Path) -> HeatKernel:
    dump = read_field_dump(path)
    meta = dump.metadata
    start = meta.get("start")
    return HeatKernel(
        env_hash=meta["env_hash"],
        geometry=TorusGeometry(d=dump.d, N=dump.N),
        times=np.asarray(meta["times"], dtype=float),
        q=np.stack(list(dump.components.values())),
        start=None if start is None else np.asarray(start, dtype=np.int64),
        lam=float(meta.get("lam", 0.0)),
        truncation=tuple(meta.get("truncation", ())),
        tail_bound=float(meta.get("tail_bound", 0.0)),
        method=meta.get("method", "uniformization"),
    )


def stage_heat_kernel(ctx: RunContext) -> None:
    env = ensure_environment(ctx)
    sim = ctx.config.simulation
    grid = heat_kernel_grid(ctx.config, env)
    hk = heat_kernel(env, sim.x0, grid, tail_tol=sim.tail_tol)
    _write_heat_kernel(hk, ctx.artifact(HEAT_KERNEL))
    axes = tuple(range(1, hk.q.ndim))
    diagnostics.write_series_csv(
        ctx.artifact("heat_kernel.csv"),
        {
            "t": hk.times,
            "mass": hk.q.sum(axis=axes),
            "max_q": hk.q.max(axis=axes),
            "min_q": hk.q.min(axis=axes),
        },
    )
    ctx.heat = hk
    defect = hk.mass_defect()
    ctx.verdicts.append(
        Verdict("heat_kernel_mass", defect < MASS_TOL, defect, MASS_TOL)
    )
    ctx.verdicts.append(
        Verdict("heat_kernel_positivity", hk.min_value() >= 0.0, hk.min_value(), 0.0)
    )
    if env.geometry.n_sites <= EXPM_SITE_LIMIT:
        oracle = heat_kernel_expm(env, sim.x0, grid)
        gap = hk.max_difference(oracle)
        ctx.verdicts.append(
            Verdict("heat_kernel_vs_expm", gap < EXPM_TOL, gap, EXPM_TOL)
        )


def ensure_heat_kernel(ctx: RunContext) -> HeatKernel:
    if ctx.heat is not None:
        return ctx.heat
    env = ensure_environment(ctx)
    path = ctx.artifact(HEAT_KERNEL)
    if path.with_suffix(".json").exists():
        hk = _read_heat_kernel(path)
        if hk.env_hash != env.env_hash:
            raise StaleArtifactError(
                f"{path.with_suffix('.json')} belongs to a different environment"
            )
        grid = heat_kernel_grid(ctx.config, env)
        if len(hk.times) == len(grid) and np.allclose(hk.times, grid):
            ctx.heat = hk
            return hk
        logger.info("Stored heat kernel uses another time grid; recomputing")
    run_stage(ctx, "heat-kernel")
    assert ctx.heat is not None
    return ctx.heat


# Simulation and CLT


def stage_simulate(ctx: RunContext) -> None:
    env = ensure_environment(ctx)
    solution = ensure_corrector(ctx)
    sim = ctx.config.simulation
    samples = sample_displacements(
        env, True, solution, sim.t_list, sim.n_walks, sim.walk_seed, x0=sim.x0
    )
    n, d = samples.n_walks, env.geometry.d
    columns = {
        "t": np.repeat(samples.t_list, n),
        "sample": np.tile(np.arange(n), len(samples.t_list)),
    }
    for i in range(d):
        columns[f"x_{i + 1}"] = samples.raw[..., i]
    for i in range(d):
        columns[f"y_{i + 1}"] = samples.corrected[..., i]
    diagnostics.write_series_csv(ctx.artifact("samples.csv"), columns)
    ctx.samples = samples

    if n >= 2:
        mean = samples.corrected.mean(axis=1)
        stderr = samples.corrected.std(axis=1, ddof=1) / np.sqrt(n)
        score = float(np.max(np.abs(mean) / np.maximum(stderr, 1e-300)))
        ctx.verdicts.append(Verdict("martingale_mean", score <= 3.0, score, 3.0))


def stage_verify_clt(ctx: RunContext) -> None:
    config = ctx.config
    select = config.diagnostics.select
    solution = ensure_corrector(ctx)
    if "clt" in select:
        config.require_clt_samples()
        if ctx.samples is None:
            run_stage(ctx, "simulate")
        samples = ctx.samples
        assert samples is not None
        rows = []
        for i, t in enumerate(samples.t_list):
            report = diagnostics.clt_test(
                samples.corrected[i],
                solution.sigma2,
                ks_threshold=config.diagnostics.ks_threshold,
                cov_tol=config.diagnostics.cov_tol,
                min_samples=config.diagnostics.min_samples,
                t=float(t),
            )
            ctx.verdicts.extend(report.verdicts())
            rows.append((t, *report.ks, report.critical, report.cov_error))
        table = np.array(rows)
        columns = {"t": table[:, 0]}
        for i in range(solution.env.geometry.d):
            columns[f"ks_{i + 1}"] = table[:, 1 + i]
        columns["ks_critical"] = table[:, -2]
        columns["cov_error"] = table[:, -1]
        diagnostics.write_series_csv(ctx.artifact("clt.csv"), columns)

    if "sublinearity" in select:
        cfg = config.diagnostics
        columns = {}
        for i, cocycle in enumerate(solution.cocycle):
            profile = diagnostics.sublinearity_profile(cocycle, cfg.radii, cfg.eps_list)
            verdict = profile.verdict(cfg.slope_threshold)
            ctx.verdicts.append(
                Verdict(
                    f"sublinearity:{i + 1}",
                    verdict.passed,
                    verdict.statistic,
                    verdict.threshold,
                )
            )
            columns.setdefault("R", profile.radii)
            columns[f"S_{i + 1}"] = profile.S
            for j, eps in enumerate(profile.eps_list):
                columns[f"W_{i + 1}_eps={eps:g}"] = profile.W[:, j]
        diagnostics.write_series_csv(ctx.artifact("sublinearity.csv"), columns)


# Nash diagnostics


def stage_nash_diag(ctx: RunContext) -> None:
    env = ensure_environment(ctx)
    hk = ensure_heat_kernel(ctx)
    select = ctx.config.diagnostics.select
    t_wrap = diagnostics.wrap_time(env)

    if "nash" in select or "moment" in select:
        report = diagnostics.nash_functionals(hk, env.s_star, t_wrap=t_wrap)
        diagnostics.write_series_csv(ctx.artifact("nash.csv"), report.series())
        drops = np.diff(report.H)
        worst_drop = float(max(0.0, -np.min(drops, initial=0.0)))
        if "nash" in select:
            ctx.verdicts.append(
                Verdict(
                    "entropy_monotone",
                    worst_drop <= ENTROPY_DROP_TOL,
                    worst_drop,
                    ENTROPY_DROP_TOL,
                    t_wrap,
                )
            )
            ctx.verdicts.append(
                Verdict("entropy_ratio", report.c1hat > 0, report.c1hat, 0.0, t_wrap)
            )
        if "moment" in select:
            hstar = env.h.hstar if env.h is not None else 0.0
            bound = diagnostics.moment_bound_check(report, env.eps, hstar)
            diagnostics.write_series_csv(
                ctx.artifact("moment.csv"),
                {"t": bound.times, "scaled_M": bound.scaled_M, "rho": bound.rho},
            )
            ctx.verdicts.append(bound.verdict)

    if "entropy" in select:
        production = diagnostics.entropy_production_check(
            env, hk, ctx.config.diagnostics.entropy_times
        )
        diagnostics.write_series_csv(
            ctx.artifact("entropy_production.csv"), production.series()
        )
        ctx.verdicts.append(production.verdict)


# Driver


STAGE_FUNCTIONS: dict[str, Callable[[RunContext], None]] = {
    "gen-env": stage_gen_env,
    "solve-corrector": stage_solve_corrector,
    "heat-kernel": stage_heat_kernel,
    "simulate": stage_simulate,
    "verify-clt": stage_verify_clt,
    "nash-diag": stage_nash_diag,
}


def run_stage(ctx: RunContext, name: str) -> None:
    logger.info(f"Stage {name}")
    start = time.perf_counter()
    STAGE_FUNCTIONS[name](ctx)
    ctx.manifest.stages.append(name)
    ctx.manifest.timings[name] = round(time.perf_counter() - start, 6)


def _inventory(out: Path) -> dict[str, str]:
    """sha256 of every file under ``out`` except the manifest itself."""
    return {
        str(path.relative_to(out)): file_hash(path)
        for path in sorted(out.rglob("*"))
        if path.is_file() and path.name != MANIFEST
    }


def _finish(ctx: RunContext) -> None:
    manifest = ctx.manifest
    manifest.verdicts = [v.as_dict() for v in ctx.verdicts]
    if ctx.env is not None:
        manifest.env_hash = ctx.env.env_hash
    diagnostics.write_verdicts_json(ctx.artifact(VERDICTS), ctx.verdicts)
    write_report(ctx.artifact(REPORT), manifest, ctx.verdicts)
    manifest.files = _inventory(ctx.out)
    manifest.write(ctx.artifact(MANIFEST))


def execute(config: ExperimentConfig, command: str) -> RunManifest:
    """Run ``command`` for a loaded config and write the manifest.

    Stage errors are logged and recorded with exit code 2.
    """
    if command not in COMMANDS:
        raise ValueError(f"Unknown command '{command}'; expected one of {COMMANDS}")
    manifest = RunManifest(
        command=command,
        config_hash=config.config_hash,
        overrides=dict(config.overrides),
    )
    ctx = RunContext(config=config, manifest=manifest)
    config.output_dir.mkdir(parents=True, exist_ok=True)
    stages = STAGES if command == "full" else (command,)
    try:
        for name in stages:
            run_stage(ctx, name)
    except Exception as e:
        logger.error(f"Error: {e}")
        manifest.exit_code = 2
        manifest.error = f"{type(e).__name__}: {e}"
    else:
        manifest.exit_code = 0 if all(v.passed for v in ctx.verdicts) else 1
    _finish(ctx)
    return manifest


def run(
    config_path: str | Path,
    command: str,
    *,
    seed: int | None = None,
    threads: int | None = None,
) -> tuple[int, RunManifest]:
    """Load a config, run ``command`` and return the exit code with the manifest.

    Exit codes: 0 when every verdict passes, 1 when one fails, 2 on errors.
    """
    try:
        config = load_config(config_path).with_overrides(seed=seed, threads=threads)
    except Exception as e:
        logger.error(f"Error: {e}")
        manifest = RunManifest(command=command, exit_code=2)
        manifest.error = f"{type(e).__name__}: {e}"
        return 2, manifest
    manifest = execute(config, command)
    logger.info(
        f"{command}: {sum(v['pass'] for v in manifest.verdicts)}/"
        f"{len(manifest.verdicts)} checks passed"
    )
    return manifest.exit_code, manifest
