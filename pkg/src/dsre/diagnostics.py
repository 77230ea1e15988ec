"""Entropy, moment, CLT and sublinearity diagnostics.

Every check produces a :class:`Verdict`. Constants that theory only proves to
exist are reported as empirical suprema or infima of the computed series and
never compared against fixed values.
"""

import csv
import json
from collections.abc import Callable, Sequence
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import scipy.special
import scipy.stats
from scipy.optimize import minimize_scalar

from .dynamics import DisplacementSamples, HeatKernel
from .environment import TorusEnvironment
from .lattice import TorusGeometry, shift
from .logging_utils import get_logger

logger = get_logger(__name__)

KS_CRITICAL_1PCT = 1.63
RICHARDSON_STEP = 0.01
MIN_MOMENT_POINTS = 8


def _finite_or_none(value: float | None) -> float | None:
    if value is None or not np.isfinite(value):
        return None
    return float(value)


@dataclass(frozen=True)
class Verdict:
    check: str
    passed: bool
    statistic: float
    threshold: float
    t_wrap: float | None = None

    def as_dict(self) -> dict:
        return {
            "check": self.check,
            "pass": self.passed,
            "statistic": _finite_or_none(self.statistic),
            "threshold": _finite_or_none(self.threshold),
            "t_wrap": _finite_or_none(self.t_wrap),
        }


def wrap_time(env: TorusEnvironment) -> float:
    """``(N/4)^2 / (4 d s^*)``: horizon of the infinite-lattice comparison."""
    g = env.geometry
    return (g.N / 4.0) ** 2 / (4.0 * g.d * env.s_upper)


# Nash functionals


def nash_constant_b() -> tuple[float, float]:
    """Minimize ``(b+1)(b-1)^{-2}(b - 1 - log b)`` over ``b > 1``.

    Returns:
        The infimum and its minimizer
    """

    def objective(beta: float) -> float:
        return (beta + 1.0) * (beta - 1.0 - np.log(beta)) / (beta - 1.0) ** 2

    result = minimize_scalar(
        objective, bracket=(2.0, 4.5, 20.0), method="golden", tol=1e-10
    )
    return float(result.fun), float(result.x)


@dataclass(frozen=True)
class NashReport:
    """Moment, entropy, Fisher and diagonal series on a heat-kernel grid."""

    times: np.ndarray
    M: np.ndarray
    H: np.ndarray
    G: np.ndarray
    F: np.ndarray
    D: np.ndarray
    entropy_ratio: np.ndarray
    C2hat: float
    c1hat: float
    bhat: float
    c5: float
    t_wrap: float | None

    def series(self) -> dict[str, np.ndarray]:
        return {
            "t": self.times,
            "M": self.M,
            "H": self.H,
            "G": self.G,
            "F": self.F,
            "D": self.D,
            "M_exp_minus_H_over_d": self.entropy_ratio,
        }


def _distances(geometry: TorusGeometry, start: np.ndarray | None) -> np.ndarray:
    origin = None if start is None else tuple(int(c) for c in start)
    return np.linalg.norm(geometry.minimum_image(origin), axis=-1)


def fisher_form(geometry: TorusGeometry, q: np.ndarray) -> float:
    """``sum_{x,k} ((q(x+k) - q(x)) / (q(x+k) + q(x)))^2 q(x)``, with 0/0 = 0."""
    total = 0.0
    for k in geometry.directions:
        ahead = shift(q, k)
        denom = ahead + q
        ratio = np.divide(ahead - q, denom, out=np.zeros_like(q), where=denom > 0)
        total += float(np.sum(ratio**2 * q))
    return total


def nash_functionals(
    hk: HeatKernel, s_star: float, t_wrap: float | None = None
) -> NashReport:
    """Compute M, H, G, F, D and the empirical constants on ``t <= t_wrap``."""
    g = hk.geometry
    keep = np.ones(len(hk.times), dtype=bool)
    if t_wrap is not None:
        keep = hk.times <= t_wrap
        if not np.any(keep[hk.times > 0]):
            raise ValueError(f"No positive grid time below t_wrap = {t_wrap:.4g}")
        if not np.all(keep):
            logger.warning(
                f"Truncating {int(np.sum(~keep))} grid times beyond "
                f"t_wrap = {t_wrap:.4g}"
            )
    times, q = hk.times[keep], hk.q[keep]
    axes = tuple(range(1, q.ndim))

    distance = _distances(g, hk.start)
    M = np.sum(q * distance, axis=axes)
    H = np.sum(scipy.special.entr(q), axis=axes)
    F = np.array([fisher_form(g, snapshot) for snapshot in q])
    D = times ** (g.d / 2.0) * np.max(q, axis=axes)

    positive = times > 0
    C2hat = float(np.log(np.max(D[positive])) / g.d)
    G = np.full_like(times, np.nan)
    G[positive] = H[positive] / g.d - 0.5 * np.log(times[positive]) + C2hat

    ratio = M * np.exp(-H / g.d)
    beyond_unit = M > 1.0
    c1hat = float(np.min(ratio[beyond_unit])) if np.any(beyond_unit) else float("nan")
    bhat, _ = nash_constant_b()
    return NashReport(
        times=times,
        M=M,
        H=H,
        G=G,
        F=F,
        D=D,
        entropy_ratio=ratio,
        C2hat=C2hat,
        c1hat=c1hat,
        bhat=bhat,
        c5=bhat * s_star,
        t_wrap=t_wrap,
    )


def richardson_grid(base_times: Sequence[float], rel_step: float = RICHARDSON_STEP):
    """Base times ``t`` together with ``t +- h`` and ``t +- 2h``, h = rel_step t."""
    base = np.asarray(base_times, dtype=float)
    if np.any(base <= 0):
        raise ValueError("Entropy-production base times must be positive")
    if not 0 < rel_step < 0.5:
        raise ValueError(f"rel_step must lie in (0, 0.5), got {rel_step}")
    offsets = np.array([-2, -1, 0, 1, 2]) * rel_step
    return np.unique((base[:, None] * (1.0 + offsets)).ravel())


@dataclass(frozen=True)
class EntropyProduction:
    times: np.ndarray
    Hdot: np.ndarray
    F: np.ndarray
    slack: np.ndarray
    ratio: np.ndarray
    verdict: Verdict

    def series(self) -> dict[str, np.ndarray]:
        return {
            "t": self.times,
            "Hdot": self.Hdot,
            "F": self.F,
            "slack": self.slack,
            "Hdot_over_sF": self.ratio,
        }


def entropy_production_check(
    env: TorusEnvironment,
    hk: HeatKernel,
    base_times: Sequence[float],
    rel_step: float = RICHARDSON_STEP,
) -> EntropyProduction:
    """Check ``dH/dt >= b s_* F - slack`` at every base time.

    ``dH/dt`` comes from centred differences with steps h and 2h combined by
    Richardson extrapolation; the slack is twice their disagreement.

    Raises:
        ValueError: If a base time lacks its stencil on the heat-kernel grid, or
            the differencing error exceeds 10% of ``b s_* F``
    """
    if hk.env_hash != env.env_hash:
        raise ValueError("Heat kernel belongs to a different environment")
    g = hk.geometry
    bhat, _ = nash_constant_b()
    c5 = bhat * env.s_star
    axes = tuple(range(1, hk.q.ndim))
    entropy = np.sum(scipy.special.entr(hk.q), axis=axes)

    def H_at(t: float) -> float:
        return float(entropy[hk.index_of(t)])

    times = np.asarray(base_times, dtype=float)
    Hdot, F, slack = [], [], []
    for t in times:
        h = rel_step * t
        try:
            d_h = (H_at(t + h) - H_at(t - h)) / (2.0 * h)
            d_2h = (H_at(t + 2 * h) - H_at(t - 2 * h)) / (4.0 * h)
        except KeyError as err:
            raise ValueError(f"Grid lacks the differencing stencil at t = {t}") from err
        fisher = fisher_form(g, hk.at(t))
        err_est = abs(d_h - d_2h)
        if err_est > 0.1 * c5 * fisher:
            raise ValueError(
                f"Grid too coarse at t = {t}: differencing error {err_est:.3e}"
            )
        Hdot.append((4.0 * d_h - d_2h) / 3.0)
        F.append(fisher)
        slack.append(2.0 * err_est)

    Hdot, F, slack = np.array(Hdot), np.array(F), np.array(slack)
    margin = Hdot - (c5 * F - slack)
    ratio = np.divide(Hdot, env.s_star * F, out=np.full_like(F, np.inf), where=F > 0)
    verdict = Verdict(
        check="entropy_production",
        passed=bool(np.all(margin >= 0)),
        statistic=float(np.min(ratio)),
        threshold=bhat,
        t_wrap=wrap_time(env),
    )
    return EntropyProduction(
        times=times, Hdot=Hdot, F=F, slack=slack, ratio=ratio, verdict=verdict
    )


@dataclass(frozen=True)
class MomentBound:
    times: np.ndarray
    scaled_M: np.ndarray
    rho: np.ndarray
    C4hat: float
    eps: float
    hstar: float | None
    verdict: Verdict


def moment_bound_check(
    report: NashReport, eps: float, hstar: float | None = None
) -> MomentBound:
    """Boundedness of ``t^{-1/2} M(t)`` on ``[1, t_wrap]``.

    Passes when the last-quarter mean of ``t^{-1/2} M`` stays within 1.1 times
    the mean over the middle quarters.

    Raises:
        ValueError: With fewer than 8 grid points in range
    """
    if eps <= 0:
        raise ValueError(f"eps must be positive, got {eps}")
    upper = report.t_wrap if report.t_wrap is not None else np.inf
    window = (report.times >= 1.0) & (report.times <= upper)
    if np.sum(window) < MIN_MOMENT_POINTS:
        raise ValueError(
            f"Moment bound needs at least {MIN_MOMENT_POINTS} grid points "
            "in [1, t_wrap]"
        )
    times = report.times[window]
    scaled = report.M[window] / np.sqrt(times)
    exponent = (1.0 + eps) / (2.0 + eps)
    rho = scaled * (report.G[window] + 1.0 / eps) ** (-exponent)

    quarters = np.array_split(scaled, 4)
    middle = float(np.mean(np.concatenate(quarters[1:3])))
    trend = float(np.mean(quarters[3])) / middle
    verdict = Verdict(
        check="moment_bound",
        passed=bool(trend <= 1.1 and np.all(np.isfinite(rho))),
        statistic=trend,
        threshold=1.1,
        t_wrap=report.t_wrap,
    )
    return MomentBound(
        times=times,
        scaled_M=scaled,
        rho=rho,
        C4hat=float(np.max(rho)),
        eps=eps,
        hstar=hstar,
        verdict=verdict,
    )


# Central limit theorem


@dataclass(frozen=True)
class CltReport:
    """Kolmogorov-Smirnov and covariance comparison against N(0, sigma2)."""

    n_samples: int
    ks: np.ndarray
    critical: float
    ks_threshold: float
    covariance: np.ndarray
    sigma2: np.ndarray
    cov_error: float
    cov_tol: float
    t: float | None = None

    @property
    def ks_passed(self) -> bool:
        return bool(np.all(self.ks <= self.ks_threshold))

    @property
    def cov_passed(self) -> bool:
        return self.cov_error < self.cov_tol

    @property
    def passed(self) -> bool:
        return self.ks_passed and self.cov_passed

    def verdicts(self, prefix: str = "clt") -> list[Verdict]:
        label = prefix if self.t is None else f"{prefix}@t={self.t:g}"
        return [
            Verdict(
                f"{label}:ks",
                self.ks_passed,
                float(np.max(self.ks)),
                self.ks_threshold,
            ),
            Verdict(
                f"{label}:covariance", self.cov_passed, self.cov_error, self.cov_tol
            ),
        ]


def clt_test(
    samples: np.ndarray,
    sigma2: np.ndarray | float,
    ks_threshold: float | None = None,
    cov_tol: float = 0.07,
    min_samples: int = 1000,
    t: float | None = None,
) -> CltReport:
    """Per-coordinate KS against ``N(0, sigma2_ii)`` and the covariance error.

    Raises:
        ValueError: With fewer than ``min_samples`` samples, or a degenerate
            ``sigma2`` against nonzero samples
    """
    samples = np.asarray(samples, dtype=float)
    if samples.ndim == 1:
        samples = samples[:, None]
    sigma2 = np.atleast_2d(np.asarray(sigma2, dtype=float))
    n, d = samples.shape
    if n < min_samples:
        raise ValueError(f"CLT test needs at least {min_samples} samples, got {n}")
    if sigma2.shape != (d, d):
        raise ValueError(f"sigma2 has shape {sigma2.shape}, expected {(d, d)}")
    variances = np.diag(sigma2)
    if np.any(variances <= 0) and np.any(samples):
        raise ValueError("Degenerate sigma2 against nonzero samples")

    ks = np.array(
        [
            scipy.stats.kstest(samples[:, i], "norm", args=(0.0, np.sqrt(variances[i])))
            .statistic
            for i in range(d)
        ]
    )
    critical = KS_CRITICAL_1PCT / np.sqrt(n)
    covariance = np.atleast_2d(np.cov(samples, rowvar=False))
    spread = np.linalg.norm(covariance - sigma2, 2)
    cov_error = float(spread / np.linalg.norm(sigma2, 2))
    return CltReport(
        n_samples=n,
        ks=ks,
        critical=float(critical),
        ks_threshold=float(ks_threshold if ks_threshold is not None else critical),
        covariance=covariance,
        sigma2=sigma2,
        cov_error=cov_error,
        cov_tol=cov_tol,
        t=t,
    )


def tv_band(n_samples: int, n_sites: int, alpha: float = 0.01) -> float:
    """Total-variation radius holding with probability ``1 - alpha``.

    From ``P(sum |p_hat - p| >= lam) <= 2^m exp(-n lam^2 / 2)``.
    """
    if n_samples < 1:
        raise ValueError("tv_band needs at least one sample")
    lam = np.sqrt(2.0 * (n_sites * np.log(2.0) + np.log(1.0 / alpha)) / n_samples)
    return float(lam / 2.0)


def total_variation(q: np.ndarray, sites: np.ndarray) -> float:
    """``1/2 sum_x |empirical(x) - q(x)|`` for flat site samples."""
    q = np.asarray(q, dtype=float).ravel()
    counts = np.bincount(np.asarray(sites).ravel(), minlength=q.size)
    return float(0.5 * np.sum(np.abs(counts / counts.sum() - q)))


def key_error_fraction(samples: DisplacementSamples, delta: float) -> np.ndarray:
    """Fraction of walks with ``|Theta(X(t))| > delta sqrt(t)``, per time."""
    if samples.corrected is None:
        raise ValueError("key_error_fraction needs corrected samples")
    correction = np.linalg.norm(samples.raw - samples.corrected, axis=-1)
    return np.mean(correction > delta, axis=1)


def tightness_series(samples: DisplacementSamples) -> np.ndarray:
    """Monte Carlo ``t^{-1/2} E|X(t)|`` per time."""
    return np.mean(np.linalg.norm(samples.raw, axis=-1), axis=1)


# Sublinearity


@dataclass(frozen=True)
class SublinearityProfile:
    """``S(R) = R^{-(d+1)} sum |Psi|`` and ``W(R, eps)`` over boxes of radius R."""

    radii: np.ndarray
    S: np.ndarray
    W: np.ndarray
    eps_list: np.ndarray
    boxes: str
    slope: float

    def verdict(self, slope_threshold: float = -0.5) -> Verdict:
        if np.all(self.S == 0):
            return Verdict("sublinearity", True, float("-inf"), slope_threshold)
        decreasing = bool(np.all(np.diff(self.S) < 0))
        passed = decreasing and self.slope < slope_threshold
        return Verdict("sublinearity", passed, self.slope, slope_threshold)


def _box(d: int, radius: int, boxes: str) -> np.ndarray:
    if boxes == "centered":
        axis = np.arange(-radius, radius + 1)
    elif boxes == "corner":
        axis = np.arange(radius)
    else:
        raise ValueError(f"Unknown box kind '{boxes}'")
    grids = np.meshgrid(*[axis] * d, indexing="ij")
    return np.stack(grids, axis=-1)


def sublinearity_profile(
    psi: np.ndarray | Callable[[np.ndarray], np.ndarray],
    radii: Sequence[int],
    eps_list: Sequence[float] = (0.1,),
    boxes: str = "centered",
    d: int | None = None,
) -> SublinearityProfile:
    """Box averages of a cocycle.

    ``psi`` is either a torus field, read periodically and restricted to radii
    up to N/2, or a function of integer coordinates (last axis) on Z^d.
    """
    radii_arr = np.asarray(sorted(set(int(r) for r in radii)))
    if len(radii_arr) == 0 or radii_arr[0] < 1:
        raise ValueError("Radii must be positive integers")
    if callable(psi):
        if d is None:
            raise ValueError("Dimension d is required for a functional cocycle")

        def values(coords: np.ndarray) -> np.ndarray:
            return np.asarray(psi(coords), dtype=float)

    else:
        field = np.asarray(psi, dtype=float)
        d, N = field.ndim, field.shape[0]
        if radii_arr[-1] > N // 2:
            logger.warning(f"Clipping radii above N/2 = {N // 2}")
            radii_arr = np.unique(np.minimum(radii_arr, N // 2))

        def values(coords: np.ndarray) -> np.ndarray:
            return field[tuple(np.moveaxis(np.mod(coords, N), -1, 0))]

    eps_arr = np.asarray(eps_list, dtype=float)
    S = np.zeros(len(radii_arr))
    W = np.zeros((len(radii_arr), len(eps_arr)))
    for i, radius in enumerate(radii_arr):
        magnitude = np.abs(values(_box(d, int(radius), boxes)))
        S[i] = magnitude.sum() / radius ** (d + 1)
        W[i] = [(magnitude > eps * radius).sum() / radius**d for eps in eps_arr]

    slope = float("nan")
    if len(radii_arr) >= 2 and np.all(S > 0):
        slope = float(np.polyfit(np.log(radii_arr), np.log(S), 1)[0])
    return SublinearityProfile(
        radii=radii_arr, S=S, W=W, eps_list=eps_arr, boxes=boxes, slope=slope
    )


# Output


def _cell(value) -> str:
    if isinstance(value, np.integer):
        return str(int(value))
    return repr(float(value))


def write_series_csv(path: str | Path, columns: dict[str, np.ndarray]) -> Path:
    """Write equally long columns as CSV with a header row."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    names = list(columns)
    arrays = [np.asarray(columns[name]).ravel() for name in names]
    lengths = {len(a) for a in arrays}
    if len(lengths) > 1:
        raise ValueError(f"CSV columns have different lengths: {sorted(lengths)}")
    with path.open("w", newline="") as handle:
        writer = csv.writer(handle)
        writer.writerow(names)
        for row in zip(*arrays, strict=True):
            writer.writerow([_cell(value) for value in row])
    return path


def write_verdicts_json(path: str | Path, verdicts: Sequence[Verdict]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    payload = [verdict.as_dict() for verdict in verdicts]
    path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")
    return path
