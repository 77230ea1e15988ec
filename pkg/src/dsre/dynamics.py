"""Quenched walks and heat kernels.

Walks are continuous-time jump chains with rates ``p_k(x)``. Single paths use
exact exponential holding times; batches are drawn by uniformization with the
uniform rate ``Lambda = max_x sum_k p_k(x)``, which lets many walks advance in
lock step. Every walk draws from its own counter-based stream, so a walk's
trajectory does not depend on the batch it was simulated in.
"""

from dataclasses import dataclass

import numpy as np
import scipy.linalg
import scipy.sparse as sp
from scipy.integrate import solve_ivp
from scipy.stats import poisson

from .corrector import DRIFT, CorrectorSolution, generator_matrix
from .environment import TorusEnvironment
from .lattice import TorusGeometry, torus_mean
from .logging_utils import get_logger
from .streams import Purpose, stream

logger = get_logger(__name__)

WRAP_WARNING = 0.25
CHUNK = 1000
SLAB = 256
MAX_POISSON_MEAN = 200.0
EXPM_SITE_LIMIT = 256


def _origin(geometry: TorusGeometry, x0: tuple[int, ...] | None) -> np.ndarray:
    start = np.zeros(geometry.d, dtype=np.int64) if x0 is None else np.asarray(x0)
    if start.shape != (geometry.d,):
        raise ValueError(f"Start site {x0} does not match d={geometry.d}")
    return np.mod(start.astype(np.int64), geometry.N)


# Single paths


@dataclass(frozen=True)
class WalkPath:
    """Jump times and unwrapped positions of one walk up to ``t_max``."""

    env_hash: str
    start: np.ndarray
    times: np.ndarray
    positions: np.ndarray
    t_max: float

    @property
    def n_jumps(self) -> int:
        return len(self.times)

    def position_at(self, t: float | np.ndarray) -> np.ndarray:
        """Unwrapped position(s) ``X(t)`` on Z^d."""
        if np.any(np.asarray(t) > self.t_max):
            raise ValueError(f"Time beyond the simulated horizon {self.t_max}")
        return self.positions[np.searchsorted(self.times, t, side="right")]


def simulate_walk(
    env: TorusEnvironment,
    x0: tuple[int, ...] | None,
    t_max: float,
    seed: int,
    walk_id: int = 0,
) -> WalkPath:
    """Exact simulation: Exponential(R(x)) holding times, jumps ``p_k/R``."""
    if t_max < 0:
        raise ValueError(f"t_max must be >= 0, got {t_max}")
    g = env.geometry
    rate = env.total_rate.reshape(-1)
    cumulative = np.cumsum(np.asarray(env.p).reshape(g.n_directions, -1), axis=0)
    steps = g.step_matrix
    rng = stream(seed, Purpose.WALK, walk_id)

    start = _origin(g, x0)
    position = start.copy()
    site = int(g.wrap(position))
    times, positions = [], [position.copy()]
    t = 0.0
    while True:
        if rate[site] <= 0:
            raise RuntimeError(f"Zero total rate at site {g.coordinates(site)}")
        t += rng.exponential(1.0 / rate[site])
        if t > t_max:
            break
        u = rng.random() * rate[site]
        j = int(np.searchsorted(cumulative[:, site], u, "right"))
        j = min(j, g.n_directions - 1)
        position = position + steps[j]
        site = int(g.neighbours[j, site])
        times.append(t)
        positions.append(position.copy())

    return WalkPath(
        env_hash=env.env_hash,
        start=start,
        times=np.asarray(times),
        positions=np.asarray(positions),
        t_max=float(t_max),
    )


@dataclass(frozen=True)
class CorrectedPath:
    """``Y*(t) = X(t) - x0 - (chi(X(t)) - chi(x0))`` sampled at ``times``."""

    path: WalkPath
    times: np.ndarray
    displacement: np.ndarray
    corrected: np.ndarray


def _corrector_at(
    solution: CorrectorSolution, geometry: TorusGeometry, sites: np.ndarray
) -> np.ndarray:
    """``chi_i`` at flat sites, with the coordinate axis last."""
    chi = solution.chi.reshape(solution.chi.shape[0], -1)
    return np.moveaxis(chi[:, sites], 0, -1)


def _check_drift_solution(env: TorusEnvironment, solution: CorrectorSolution) -> None:
    if solution.target != DRIFT:
        raise ValueError("Corrected positions need the drift-target corrector")
    if solution.env.env_hash != env.env_hash:
        raise ValueError("Corrector solution belongs to a different environment")


def corrected_path(
    path: WalkPath, solution: CorrectorSolution, times: np.ndarray
) -> CorrectedPath:
    g = solution.env.geometry
    if path.env_hash != solution.env.env_hash:
        raise ValueError("Path and corrector come from different environments")
    _check_drift_solution(solution.env, solution)
    times = np.asarray(times, dtype=float)
    positions = path.position_at(times)
    displacement = positions - path.start
    sites = g.wrap(positions)
    origin = _corrector_at(solution, g, np.atleast_1d(g.wrap(path.start)))[0]
    correction = _corrector_at(solution, g, sites) - origin
    return CorrectedPath(
        path=path,
        times=times,
        displacement=displacement,
        corrected=displacement - correction,
    )


# Batches by uniformization


@dataclass(frozen=True)
class _BatchRecord:
    positions: np.ndarray
    integrals: np.ndarray | None


def _run_chunk(
    env: TorusEnvironment,
    start: np.ndarray,
    t_list: np.ndarray,
    walk_ids: range,
    seed: int,
    observable: np.ndarray | None,
) -> _BatchRecord:
    """Advance a chunk of walks in lock step through uniformized events.

    Each walk draws its exponential gaps and jump uniforms from its own stream
    in slabs of ``SLAB`` events, so memory stays at ``width * SLAB`` whatever
    ``Lambda * t_max`` is.
    """
    g = env.geometry
    lam = float(np.max(env.total_rate))
    cumulative = np.cumsum(np.asarray(env.p).reshape(g.n_directions, -1), axis=0) / lam
    steps = g.step_matrix
    obs = None if observable is None else observable.reshape(-1)
    generators = [stream(seed, Purpose.WALK, i) for i in walk_ids]
    width, n_times = len(generators), len(t_list)

    position = np.tile(start, (width, 1))
    site = np.full(width, int(g.wrap(start)))
    integral = np.zeros(width)
    last = np.zeros(width)
    next_record = np.zeros(width, dtype=np.int64)
    rec_pos = np.zeros((n_times, width, g.d), dtype=np.int64)
    rec_int = None if obs is None else np.zeros((n_times, width))

    gaps = np.full((width, SLAB), np.inf)
    uniforms = np.full((width, SLAB), 2.0)
    while np.any(next_record < n_times):
        running = np.flatnonzero(next_record < n_times)
        gaps.fill(np.inf)
        for row in running:
            rng = generators[row]
            gaps[row] = rng.exponential(1.0 / lam, SLAB)
            uniforms[row] = rng.random(SLAB)
        times = last[:, None] + np.cumsum(gaps, axis=1)

        for e in range(SLAB):
            tau = times[:, e]
            while True:
                pending = next_record < n_times
                due = pending & (t_list[np.minimum(next_record, n_times - 1)] < tau)
                if not due.any():
                    break
                rows = np.flatnonzero(due)
                cols = next_record[rows]
                rec_pos[cols, rows] = position[rows]
                if rec_int is not None:
                    elapsed = t_list[cols] - last[rows]
                    rec_int[cols, rows] = integral[rows] + obs[site[rows]] * elapsed
                next_record[rows] += 1
            active = np.flatnonzero(next_record < n_times)
            if len(active) == 0:
                break
            if obs is not None:
                integral[active] += obs[site[active]] * (tau[active] - last[active])
            last[active] = tau[active]
            u = uniforms[active, e]
            j = (u[:, None] >= cumulative[:, site[active]].T).sum(axis=1)
            move = j < g.n_directions
            rows = active[move]
            position[rows] += steps[j[move]]
            site[rows] = g.neighbours[j[move], site[rows]]

    return _BatchRecord(positions=rec_pos, integrals=rec_int)


def _run_batch(
    env: TorusEnvironment,
    start: np.ndarray,
    t_list: np.ndarray,
    n_walks: int,
    seed: int,
    observable: np.ndarray | None = None,
) -> _BatchRecord:
    chunks = [
        _run_chunk(
            env,
            start,
            t_list,
            range(lo, min(lo + CHUNK, n_walks)),
            seed,
            observable,
        )
        for lo in range(0, n_walks, CHUNK)
    ]
    if not chunks:
        empty_int = None if observable is None else np.zeros((len(t_list), 0))
        return _BatchRecord(
            positions=np.zeros((len(t_list), 0, env.geometry.d), dtype=np.int64),
            integrals=empty_int,
        )
    positions = np.concatenate([c.positions for c in chunks], axis=1)
    integrals = None
    if observable is not None:
        integrals = np.concatenate([c.integrals for c in chunks], axis=1)
    return _BatchRecord(positions=positions, integrals=integrals)


def _time_list(t_list) -> np.ndarray:
    times = np.asarray(t_list, dtype=float)
    if times.ndim != 1 or len(times) == 0:
        raise ValueError("t_list must be a non-empty 1-d sequence")
    if np.any(times <= 0) or np.any(np.diff(times) <= 0):
        raise ValueError("t_list must be positive and strictly increasing")
    return times


@dataclass(frozen=True)
class DisplacementSamples:
    """Scaled samples ``t^{-1/2} X(t)`` (and ``t^{-1/2} Y*(t)``), shape (T, n, d)."""

    t_list: np.ndarray
    raw: np.ndarray
    corrected: np.ndarray | None
    sites: np.ndarray
    wrap_ratio: float

    @property
    def n_walks(self) -> int:
        return self.raw.shape[1]


def sample_displacements(
    env: TorusEnvironment,
    correct: bool,
    solution: CorrectorSolution | None,
    t_list,
    n_walks: int,
    seed: int,
    x0: tuple[int, ...] | None = None,
) -> DisplacementSamples:
    """Sample the scaled displacement of ``n_walks`` independent quenched walks.

    Positions are unwrapped on Z^d; the corrector is read at the wrapped site.

    Raises:
        ValueError: If ``correct`` is set without a matching drift corrector
    """
    if correct:
        if solution is None:
            raise ValueError("correct=True needs a corrector solution")
        _check_drift_solution(env, solution)
    if n_walks < 0:
        raise ValueError(f"n_walks must be >= 0, got {n_walks}")
    g = env.geometry
    times = _time_list(t_list)
    start = _origin(g, x0)
    record = _run_batch(env, start, times, n_walks, seed)

    displacement = record.positions - start
    sites = g.wrap(record.positions) if n_walks else np.zeros((len(times), 0), int)
    scale = 1.0 / np.sqrt(times)[:, None, None]
    corrected = None
    if correct and solution is not None:
        origin = _corrector_at(solution, g, np.atleast_1d(g.wrap(start)))[0]
        correction = _corrector_at(solution, g, sites) - origin
        corrected = (displacement - correction) * scale

    wrap_ratio = float(np.max(np.abs(displacement), initial=0)) / g.N
    if wrap_ratio > WRAP_WARNING:
        logger.warning(
            f"Walks travelled up to {wrap_ratio:.2f} N; the unwrapped comparison "
            "with the infinite lattice is unreliable"
        )
    return DisplacementSamples(
        t_list=times,
        raw=displacement * scale,
        corrected=corrected,
        sites=sites,
        wrap_ratio=wrap_ratio,
    )


@dataclass(frozen=True)
class AdditiveSamples:
    """Scaled additive functional ``t^{-1/2} int_0^t phi`` and its martingale part."""

    t_list: np.ndarray
    functional: np.ndarray
    martingale: np.ndarray | None


def sample_additive_functional(
    env: TorusEnvironment,
    phi: np.ndarray,
    t_list,
    n_walks: int,
    seed: int,
    solution: CorrectorSolution | None = None,
    x0: tuple[int, ...] | None = None,
) -> AdditiveSamples:
    """Samples of ``t^{-1/2} int_0^t phi(eta(s)) ds``, shape (T, n).

    With a scalar corrector for ``phi`` the martingale
    ``t^{-1/2} (int_0^t phi - chi(X(t)) + chi(x0))`` is returned as well.
    """
    g = env.geometry
    phi = np.asarray(phi, dtype=float)
    if phi.shape != g.shape:
        raise ValueError(f"Observable has shape {phi.shape}, expected {g.shape}")
    times = _time_list(t_list)
    start = _origin(g, x0)
    record = _run_batch(env, start, times, n_walks, seed, observable=phi)
    scale = 1.0 / np.sqrt(times)[:, None]
    martingale = None
    if solution is not None:
        if solution.target == DRIFT or solution.env.env_hash != env.env_hash:
            raise ValueError("Martingale part needs the scalar corrector of phi")
        chi = solution.chi[0].reshape(-1)
        sites = g.wrap(record.positions)
        increment = chi[sites] - chi[g.wrap(start)]
        martingale = (record.integrals - increment) * scale
    return AdditiveSamples(
        t_list=times, functional=record.integrals * scale, martingale=martingale
    )


@dataclass(frozen=True)
class EnvironmentAverage:
    """Walk time averages of an observable against its torus mean."""

    t: float
    per_walk: np.ndarray
    torus_mean: float

    @property
    def estimate(self) -> float:
        return float(np.mean(self.per_walk))

    @property
    def stderr(self) -> float:
        n = len(self.per_walk)
        return float(np.std(self.per_walk, ddof=1) / np.sqrt(n)) if n > 1 else 0.0

    @property
    def relative_error(self) -> float:
        return abs(self.estimate - self.torus_mean) / max(abs(self.torus_mean), 1e-300)


def environment_average(
    env: TorusEnvironment,
    observable: np.ndarray,
    t: float,
    seed: int,
    n: int,
    x0: tuple[int, ...] | None = None,
) -> EnvironmentAverage:
    """``(1/t) int_0^t observable(eta(s)) ds`` over ``n`` independent walks."""
    if n < 1:
        raise ValueError(f"Need at least one walk, got {n}")
    g = env.geometry
    observable = np.asarray(observable, dtype=float)
    times = _time_list([t])
    record = _run_batch(env, _origin(g, x0), times, n, seed, observable=observable)
    return EnvironmentAverage(
        t=float(t),
        per_walk=record.integrals[0] / t,
        torus_mean=torus_mean(observable),
    )


# Heat kernels


@dataclass(frozen=True)
class HeatKernel:
    """``q(t, x) = P(X(t) = x)`` on a time grid, shape (T, *shape)."""

    env_hash: str
    geometry: TorusGeometry
    times: np.ndarray
    q: np.ndarray
    start: np.ndarray | None = None
    lam: float = 0.0
    truncation: tuple[int, ...] = ()
    tail_bound: float = 0.0
    method: str = "uniformization"

    def mass_defect(self) -> float:
        axes = tuple(range(1, self.q.ndim))
        return float(np.max(np.abs(self.q.sum(axis=axes) - 1.0)))

    def min_value(self) -> float:
        return float(np.min(self.q))

    def index_of(self, t: float) -> int:
        hits = np.flatnonzero(np.isclose(self.times, t, rtol=1e-12, atol=1e-15))
        if len(hits) == 0:
            raise KeyError(f"Time {t} is not on the heat-kernel grid")
        return int(hits[0])

    def at(self, t: float) -> np.ndarray:
        return self.q[self.index_of(t)]

    def max_difference(self, other: "HeatKernel") -> float:
        if not np.allclose(self.times, other.times):
            raise ValueError("Heat kernels live on different time grids")
        return float(np.max(np.abs(self.q - other.q)))


def _initial(
    geometry: TorusGeometry, x0: tuple[int, ...] | None, initial: np.ndarray | None
) -> np.ndarray:
    if initial is not None:
        q0 = np.asarray(initial, dtype=float).reshape(-1)
        if q0.size != geometry.n_sites or np.any(q0 < 0):
            raise ValueError("Initial distribution must be nonnegative on every site")
        return q0 / q0.sum()
    q0 = np.zeros(geometry.n_sites)
    q0[int(geometry.wrap(_origin(geometry, x0)))] = 1.0
    return q0


def _grid(t_grid) -> np.ndarray:
    times = np.asarray(t_grid, dtype=float)
    if times.ndim != 1 or len(times) == 0:
        raise ValueError("t_grid must be a non-empty 1-d sequence")
    if np.any(times < 0) or np.any(np.diff(times) <= 0):
        raise ValueError("t_grid must be nonnegative and strictly increasing")
    return times


def master_matrix(env: TorusEnvironment) -> sp.csr_matrix:
    """Forward generator: ``(Q q)(x) = sum_k q(x+k) p_{-k}(x+k) - q(x) R(x)``."""
    return generator_matrix(env).T.tocsr()


def poisson_truncation(mu: float, tail_tol: float) -> int:
    """Smallest n > mu whose Chernoff bound on ``P(Poisson(mu) > n)`` is below tol."""
    if mu <= 0:
        return 0
    log_tol = np.log(tail_tol)
    n = int(np.floor(mu)) + 1
    while -mu + n * (1.0 + np.log(mu) - np.log(n)) >= log_tol:
        n += 1
    return n


def heat_kernel(
    env: TorusEnvironment,
    x0: tuple[int, ...] | None,
    t_grid,
    tail_tol: float = 1e-12,
    initial: np.ndarray | None = None,
) -> HeatKernel:
    """Evolve ``q`` by uniformization, ``q(t) = sum_n Pois(n; Lambda t) P^n q(0)``.

    ``P = I + Q / Lambda`` with the master generator ``Q`` assembled from the
    rates; long steps are split so each Poisson mean stays below 200. The
    truncated series is renormalized, leaving an error below twice the tail.
    """
    if not 0 < tail_tol <= 1e-6:
        raise ValueError(f"tail_tol must lie in (0, 1e-6], got {tail_tol}")
    g = env.geometry
    times = _grid(t_grid)
    lam = float(np.max(env.total_rate))
    transition = sp.identity(g.n_sites, format="csr") + master_matrix(env) / lam

    q = _initial(g, x0, initial)
    snapshots, truncation = [], []
    tail_bound = 0.0
    current = 0.0
    for t in times:
        dt = t - current
        if dt > 0:
            n_sub = max(1, int(np.ceil(lam * dt / MAX_POISSON_MEAN)))
            mu = lam * dt / n_sub
            order = poisson_truncation(mu, tail_tol)
            weights = poisson.pmf(np.arange(order + 1), mu)
            for _ in range(n_sub):
                term = q
                acc = weights[0] * term
                for w in weights[1:]:
                    term = transition @ term
                    acc = acc + w * term
                q = acc / weights.sum()
            truncation.append(order)
            tail_bound += 2.0 * n_sub * tail_tol
        snapshots.append(q.reshape(g.shape).copy())
        current = t

    logger.debug(
        f"Heat kernel on {g.describe()}: Lambda = {lam:.4g}, "
        f"truncation orders up to {max(truncation, default=0)}"
    )
    return HeatKernel(
        env_hash=env.env_hash,
        geometry=g,
        times=times,
        q=np.stack(snapshots),
        start=None if initial is not None else _origin(g, x0),
        lam=lam,
        truncation=tuple(truncation),
        tail_bound=tail_bound,
    )


def heat_kernel_expm(
    env: TorusEnvironment,
    x0: tuple[int, ...] | None,
    t_grid,
    initial: np.ndarray | None = None,
) -> HeatKernel:
    """Dense matrix-exponential oracle, limited to small tori."""
    g = env.geometry
    if g.n_sites > EXPM_SITE_LIMIT:
        raise ValueError(f"expm oracle is limited to {EXPM_SITE_LIMIT} sites")
    times = _grid(t_grid)
    Q = master_matrix(env).toarray()
    q0 = _initial(g, x0, initial)
    q = np.stack([(scipy.linalg.expm(Q * t) @ q0).reshape(g.shape) for t in times])
    start = None if initial is not None else _origin(g, x0)
    return HeatKernel(
        env_hash=env.env_hash, geometry=g, times=times, q=q, start=start, method="expm"
    )


def heat_kernel_ode(
    env: TorusEnvironment,
    x0: tuple[int, ...] | None,
    t_grid,
    rtol: float = 1e-10,
    atol: float = 1e-13,
    initial: np.ndarray | None = None,
) -> HeatKernel:
    """Adaptive Runge-Kutta oracle for the master equation."""
    g = env.geometry
    times = _grid(t_grid)
    Q = master_matrix(env)
    q0 = _initial(g, x0, initial)
    result = solve_ivp(
        lambda _t, q: Q @ q,
        (0.0, float(times[-1])),
        q0,
        method="DOP853",
        t_eval=times,
        rtol=rtol,
        atol=atol,
    )
    if not result.success:
        raise RuntimeError(f"ODE integration failed: {result.message}")
    q = result.y.T.reshape((len(times), *g.shape))
    start = None if initial is not None else _origin(g, x0)
    return HeatKernel(
        env_hash=env.env_hash, geometry=g, times=times, q=q, start=start, method="ode"
    )
