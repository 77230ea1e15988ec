"""Harmonic coordinates: solve ``sum_k p_k (chi(x+k) - chi(x)) = phi(x)``.

The generator ``L = sum_k p_k grad_k`` is singular with the constants as its
kernel and maps every field to a zero-mean field, so for a zero-mean target
the equation has exactly one zero-mean solution.
"""

import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
import scipy.fft
import scipy.linalg
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .environment import TorusEnvironment, drift_fields
from .fields import FieldDump, write_field_dump
from .lattice import TorusGeometry, dual_momenta, shift, stencil_matrix, torus_mean
from .logging_utils import get_logger

logger = get_logger(__name__)

DRIFT = "drift"
SCALAR = "scalar"
RESTART = 60
COVARIANCE_TOL = 1e-8


class ConvergenceError(RuntimeError):
    """The Krylov solve did not reach the requested residual."""

    def __init__(self, message: str, residual: float):
        super().__init__(f"{message} (residual {residual:.3e})")
        self.residual = residual


@dataclass(frozen=True)
class SolverOptions:
    """Options for :func:`solve_corrector`.

    ``max_iter`` defaults to ``10 * N^{d/2}`` inner iterations; ``threads``
    caps the workers solving the d right-hand sides of the drift target.
    """

    tol: float = 1e-10
    max_iter: int | None = None
    preconditioner: str = "fft"
    threads: int | None = None

    def __post_init__(self) -> None:
        if self.tol <= 0:
            raise ValueError(f"Solver tol must be positive, got {self.tol}")
        if self.preconditioner not in ("fft", "none"):
            raise ValueError(f"Unknown preconditioner '{self.preconditioner}'")

    def iteration_cap(self, geometry: TorusGeometry) -> int:
        if self.max_iter is not None:
            return self.max_iter
        return int(np.ceil(10 * geometry.N ** (geometry.d / 2)))


@dataclass(frozen=True)
class CorrectorSolution:
    """Zero-mean correctors ``chi`` for each target coordinate.

    Arrays carry a leading target axis of length d (drift target) or 1
    (scalar target); ``theta`` has shape (m, 2d, *shape).
    """

    env: TorusEnvironment = field(repr=False)
    target: str
    phi: np.ndarray
    chi: np.ndarray
    theta: np.ndarray
    residual: float
    iterations: tuple[int, ...]
    tol: float
    method: str
    removed_mean: np.ndarray
    sigma2: np.ndarray | None = None

    @property
    def cocycle(self) -> np.ndarray:
        """``Theta(x) = chi(x) - chi(0)`` on the torus."""
        origin = (slice(None),) + (0,) * self.env.geometry.d
        return self.chi - self.chi[origin][(...,) + (None,) * self.env.geometry.d]

    def summary(self) -> dict:
        sigma2 = None if self.sigma2 is None else np.asarray(self.sigma2).tolist()
        return {
            "target": self.target,
            "residual": self.residual,
            "sigma2": sigma2,
            "iterations": list(self.iterations),
            "tol": self.tol,
            "method": self.method,
            "env_hash": self.env.env_hash,
        }


def generator_matrix(env: TorusEnvironment) -> sp.csr_matrix:
    """Sparse ``sum_k p_k (U_k - I)`` on flat fields."""
    return stencil_matrix(env.geometry, env.p)


def _fft_preconditioner(env: TorusEnvironment) -> spla.LinearOperator:
    """Inverse of ``mean(s) * Lap / 2`` through the FFT, zero mode dropped."""
    g = env.geometry
    s_bar = float(np.mean(env.s_axes))
    symbol = -0.5 * s_bar * 4.0 * sum(1.0 - np.cos(p) for p in dual_momenta(g))
    inverse = np.zeros_like(symbol)
    nonzero = symbol != 0
    inverse[nonzero] = 1.0 / symbol[nonzero]

    def solve(flat: np.ndarray) -> np.ndarray:
        values = np.asarray(flat).reshape(g.shape)
        return scipy.fft.ifftn(inverse * scipy.fft.fftn(values)).real.ravel()

    return spla.LinearOperator((g.n_sites, g.n_sites), matvec=solve, dtype=float)


def _targets(
    env: TorusEnvironment, target: str | np.ndarray, allow_mean: bool
) -> tuple[str, np.ndarray, np.ndarray]:
    g = env.geometry
    if isinstance(target, str):
        if target != DRIFT:
            raise ValueError(f"Unknown corrector target '{target}'")
        phi = drift_fields(env).phi_star
        means = phi.mean(axis=tuple(range(1, g.d + 1)), keepdims=True)
        return DRIFT, phi - means, means.ravel()

    phi = np.asarray(target, dtype=np.float64)
    if phi.shape != g.shape:
        raise ValueError(f"Scalar target has shape {phi.shape}, expected {g.shape}")
    mean = torus_mean(phi)
    if abs(mean) > 1e-12 * max(1.0, float(np.max(np.abs(phi)))):
        if not allow_mean:
            raise ValueError(
                f"Target has torus mean {mean:.3e}; pass allow_mean=True to subtract it"
            )
        logger.warning(f"Subtracting torus mean {mean:.3e} from the target")
    return SCALAR, (phi - mean)[None], np.array([mean])


def _max_residual(matrix, chi: np.ndarray, phi: np.ndarray) -> float:
    return float(np.max(np.abs(matrix @ chi - phi), initial=0.0))


def _gmres(
    matrix,
    phi: np.ndarray,
    opts: SolverOptions,
    preconditioner: spla.LinearOperator | None,
    x0: np.ndarray | None,
    cap: int,
) -> tuple[np.ndarray, int, float]:
    """GMRES with a post-check of the true max-norm residual."""
    target = opts.tol * max(float(np.max(np.abs(phi))), np.finfo(float).tiny)
    if not np.any(phi):
        return np.zeros_like(phi), 0, 0.0
    rtol = target / float(np.linalg.norm(phi))
    iterations = 0

    def count(_: float) -> None:
        nonlocal iterations
        iterations += 1

    chi = x0
    residual = np.inf
    restart = min(RESTART, phi.size)
    for _attempt in range(3):
        cycles = max(1, int(np.ceil((cap - iterations) / restart)))
        chi, _info = spla.gmres(
            matrix,
            phi,
            x0=chi,
            rtol=rtol,
            atol=0.0,
            restart=restart,
            maxiter=cycles,
            M=preconditioner,
            callback=count,
            callback_type="pr_norm",
        )
        residual = _max_residual(matrix, chi, phi)
        if residual <= target or iterations >= cap:
            break
        logger.debug(f"GMRES restart: true residual {residual:.3e} > {target:.3e}")
    return chi, iterations, residual


def _dense_solve(matrix: sp.csr_matrix, phi: np.ndarray) -> list[np.ndarray]:
    """LU solve of ``(L + 11^T/n) chi = phi`` for every row of ``phi``."""
    n = matrix.shape[0]
    lu = scipy.linalg.lu_factor(matrix.toarray() + np.ones((n, n)) / n)
    return [scipy.linalg.lu_solve(lu, f.ravel()) for f in phi]


def _assemble(
    env: TorusEnvironment,
    kind: str,
    phi: np.ndarray,
    chi_flat: list[np.ndarray],
    iterations: tuple[int, ...],
    tol: float,
    method: str,
    removed_mean: np.ndarray,
) -> CorrectorSolution:
    g = env.geometry
    matrix = generator_matrix(env)
    chi = np.stack([c.reshape(g.shape) - np.mean(c) for c in chi_flat])
    residual = max(
        _max_residual(matrix, c.ravel(), f.ravel())
        for c, f in zip(chi, phi, strict=True)
    )
    theta = np.stack(
        [np.stack([shift(c, k) - c for k in g.directions]) for c in chi]
    )
    solution = CorrectorSolution(
        env=env,
        target=kind,
        phi=phi,
        chi=chi,
        theta=theta,
        residual=residual,
        iterations=iterations,
        tol=tol,
        method=method,
        removed_mean=removed_mean,
    )
    return replace(solution, sigma2=effective_covariance(env, solution).sigma2)


def solve_corrector(
    env: TorusEnvironment,
    target: str | np.ndarray = DRIFT,
    opts: SolverOptions | None = None,
    *,
    allow_mean: bool = False,
    initial_guess: np.ndarray | None = None,
) -> CorrectorSolution:
    """Solve the harmonic-coordinate equation with preconditioned GMRES.

    Args:
        env: Environment supplying the rates
        target: "drift" for the local drift vector phi*, or a scalar field
        opts: Solver options
        allow_mean: Subtract (and record) a nonzero torus mean of a scalar target
        initial_guess: Optional starting fields, shape (m, *shape)

    Raises:
        ValueError: On a malformed target or one with nonzero mean
        ConvergenceError: If GMRES stalls and the torus is too large for the
            dense fallback
    """
    opts = opts or SolverOptions()
    g = env.geometry
    kind, phi, removed_mean = _targets(env, target, allow_mean)
    matrix = generator_matrix(env)
    preconditioner = _fft_preconditioner(env) if opts.preconditioner == "fft" else None
    cap = opts.iteration_cap(g)

    def solve_one(index: int) -> tuple[np.ndarray, int, float]:
        x0 = None if initial_guess is None else initial_guess[index].ravel()
        return _gmres(matrix, phi[index].ravel(), opts, preconditioner, x0, cap)

    with ThreadPoolExecutor(max_workers=opts.threads) as pool:
        results = list(pool.map(solve_one, range(phi.shape[0])))

    chi_flat = [chi for chi, _, _ in results]
    iterations = tuple(its for _, its, _ in results)
    worst = max(res for _, _, res in results)
    target_res = opts.tol * max(float(np.max(np.abs(phi))), np.finfo(float).tiny)
    method = "gmres"
    if worst > target_res:
        if not g.dense_feasible:
            raise ConvergenceError(
                f"GMRES did not converge on {g.describe()} within {cap} iterations",
                worst,
            )
        logger.warning(
            f"GMRES stalled at residual {worst:.3e}; falling back to dense LU"
        )
        chi_flat = _dense_solve(matrix, phi)
        method = "dense"

    solution = _assemble(
        env, kind, phi, chi_flat, iterations, opts.tol, method, removed_mean
    )
    logger.info(
        f"Corrector ({kind}) on {g.describe()}: residual {solution.residual:.2e}, "
        f"iterations {list(iterations)}, method {method}"
    )
    return solution


def solve_corrector_dense(
    env: TorusEnvironment,
    target: str | np.ndarray = DRIFT,
    *,
    allow_mean: bool = False,
) -> CorrectorSolution:
    """Dense LU oracle on the gauge-augmented system ``(L + 11^T/n) chi = phi``."""
    g = env.geometry
    if not g.dense_feasible:
        raise ValueError(f"Geometry too large for dense mode: {g.describe()}")
    kind, phi, removed_mean = _targets(env, target, allow_mean)
    chi_flat = _dense_solve(generator_matrix(env), phi)
    return _assemble(
        env, kind, phi, chi_flat, (0,) * len(phi), 0.0, "dense", removed_mean
    )


# Cocycle


def build_cocycle(solution: CorrectorSolution, box_radius: int) -> np.ndarray:
    """``Theta`` on the centred box ``{-R..R}^d``, shape (m, 2R+1, ..., 2R+1).

    The torus cocycle is periodic, so boxes wider than the torus repeat values.
    """
    g = solution.env.geometry
    if box_radius < 0:
        raise ValueError(f"Box radius must be >= 0, got {box_radius}")
    if box_radius > g.N // 2:
        logger.warning(
            f"Box radius {box_radius} exceeds N/2 = {g.N // 2}; values repeat"
        )
    offsets = np.arange(-box_radius, box_radius + 1)
    index = np.ix_(*[np.mod(offsets, g.N)] * g.d)
    return np.stack([theta_field[index] for theta_field in solution.cocycle])


def path_sum(
    solution: CorrectorSolution,
    end: np.ndarray,
    axis_order: tuple[int, ...],
    component: int = 0,
) -> float:
    """Sum ``theta_k`` along the lattice path from 0 to ``end``.

    The path walks the axes in ``axis_order`` (0-based), one unit step at a time.
    """
    g = solution.env.geometry
    theta = solution.theta[component]
    position = np.zeros(g.d, dtype=np.int64)
    total = 0.0
    for axis in axis_order:
        steps = int(end[axis])
        sign = 1 if steps >= 0 else -1
        j = axis if sign > 0 else axis + g.d
        for _ in range(abs(steps)):
            total += float(theta[j][tuple(np.mod(position, g.N))])
            position[axis] += sign
    return total


# Covariances


@dataclass(frozen=True)
class EffectiveCovariance:
    """``sigma2`` (s-weighted) and its p-weighted counterpart."""

    sigma2: np.ndarray
    p_weighted: np.ndarray

    @property
    def weighting_defect(self) -> float:
        return float(np.max(np.abs(self.sigma2 - self.p_weighted)))


def _increments(solution: CorrectorSolution) -> np.ndarray:
    """``theta_k - k`` per coordinate (drift) or ``theta_k`` (scalar)."""
    if solution.target == SCALAR:
        return solution.theta
    steps = solution.env.geometry.step_matrix.astype(float)
    shape = steps.T.shape + (1,) * solution.env.geometry.d
    return solution.theta - steps.T.reshape(shape)


def effective_covariance(
    env: TorusEnvironment, solution: CorrectorSolution, tol: float = COVARIANCE_TOL
) -> EffectiveCovariance:
    """Torus average of ``sum_k s_k (theta_k - k)(theta_k - k)^T``.

    The skew part of the rates cancels bond by bond, so the p-weighted average
    must agree with the s-weighted one.

    Raises:
        ValueError: If the solution belongs to another environment, the two
            weightings disagree by more than ``tol`` relative to ``sigma2``, or
            ``sigma2`` is not positive (semi-definite for scalar targets)
    """
    if solution.env.env_hash != env.env_hash:
        raise ValueError("Corrector solution belongs to a different environment")
    inc = _increments(solution)

    def weighted(weights: np.ndarray) -> np.ndarray:
        cov = np.einsum("k...,ik...,jk...->ij", weights, inc, inc)
        cov /= env.geometry.n_sites
        cov = 0.5 * (cov + cov.T)
        return cov[0, 0] if solution.target == SCALAR else cov

    cov = EffectiveCovariance(
        sigma2=np.asarray(weighted(env.s)),
        p_weighted=np.asarray(weighted(np.asarray(env.p))),
    )
    scale = max(1.0, float(np.max(np.abs(cov.sigma2))))
    if cov.weighting_defect > tol * scale:
        raise ValueError(
            f"s- and p-weighted covariances differ by {cov.weighting_defect:.3e}"
        )
    eigenvalues = np.linalg.eigvalsh(np.atleast_2d(cov.sigma2))
    floor = -tol * scale if solution.target == SCALAR else 0.0
    if np.min(eigenvalues) <= floor:
        raise ValueError(
            f"Effective covariance is not positive: min eigenvalue "
            f"{np.min(eigenvalues):.3e}"
        )
    return cov


def scalar_variance_by_parts(solution: CorrectorSolution) -> float:
    """``-2 <chi, phi>``, equal to the scalar covariance after summation by parts."""
    if solution.target != SCALAR:
        raise ValueError("Summation by parts applies to scalar targets")
    return float(-2.0 * np.mean(solution.chi[0] * solution.phi[0]))


def local_variance(env: TorusEnvironment, solution: CorrectorSolution) -> np.ndarray:
    """``sum_k p_k(x) |theta_k(x) - k|^2`` (drift) or ``sum_k p_k theta_k^2``."""
    inc = _increments(solution)
    return np.einsum("k...,ik...->...", np.asarray(env.p), inc**2)


def write_corrector(
    solution: CorrectorSolution, path: str | Path, seed: int | None = None
) -> list[Path]:
    """Dump ``chi`` and ``theta`` fields plus a JSON summary next to them."""
    g = solution.env.geometry
    components = {}
    for i, chi in enumerate(solution.chi):
        components[f"chi_{i + 1}"] = chi
        for k, values in zip(g.directions, solution.theta[i], strict=True):
            components[f"theta_{i + 1}_{k}"] = values
    summary = {**solution.summary(), "seed": seed}
    dump = FieldDump(d=g.d, N=g.N, components=components, metadata=summary)
    raw, side = write_field_dump(dump, path)
    summary_path = Path(path).with_name(Path(path).name + "_summary.json")
    summary_path.write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    return [raw, side, summary_path]
