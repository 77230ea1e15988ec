"""Gradient, Laplacian and Riesz operators on torus fields.

Conventions: ``grad_k = U_k - I`` with ``U_k f(x) = f(x+k)``, the Laplacian
carries a factor two, ``Lap = 2 sum_k grad_k``, and ``Gamma_k =
|Lap|^{-1/2} grad_k``. On an environment the generator splits as
``L = Lap/2 - T + A`` with

    T = -sum_k N_k grad_k,  N_k = s_k - s_*   (symmetric, T >= 0)
    A =  sum_k M_k grad_k,  M_k = v_k          (skew)
    S = -Lap/2 + T                             (symmetric part of -L)

Negative and fractional powers of ``|Lap|`` act on zero-mean fields; the zero
Fourier mode is annihilated.
"""

from dataclasses import dataclass, field
from enum import StrEnum
from functools import lru_cache

import numpy as np
import scipy.fft
import scipy.linalg

from .environment import TorusEnvironment
from .lattice import (
    DENSE_SITE_LIMIT,
    Direction,
    TorusGeometry,
    apply_stencil,
    dual_momenta,
    shift,
    stencil_matrix,
    torus_mean,
)
from .logging_utils import get_logger
from .streams import Purpose, stream

logger = get_logger(__name__)


class OperatorTag(StrEnum):
    SHIFT = "shift"
    GRAD = "grad"
    LAP = "lap"
    ABS_LAP_POW = "abs_lap_pow"
    GAMMA = "gamma"
    NMUL = "nmul"
    MMUL = "mmul"
    T = "T"
    A = "A"
    S = "S"
    L = "L"
    GRAD_FULL = "grad_full"
    GAMMA_FULL = "gamma_full"
    GRAD_ADJ = "grad_adj"
    GAMMA_ADJ = "gamma_adj"


DIRECTED = {OperatorTag.SHIFT, OperatorTag.GRAD, OperatorTag.GAMMA}
ENV_BOUND = {
    OperatorTag.NMUL,
    OperatorTag.MMUL,
    OperatorTag.T,
    OperatorTag.A,
    OperatorTag.S,
    OperatorTag.L,
}
FOURIER = {
    OperatorTag.LAP,
    OperatorTag.ABS_LAP_POW,
    OperatorTag.GRAD,
    OperatorTag.GAMMA,
}


@dataclass(frozen=True)
class ScalarField:
    """One real value per site; ``zero_mean`` marks membership in H."""

    geometry: TorusGeometry
    values: np.ndarray
    zero_mean: bool = False

    def __post_init__(self) -> None:
        if self.values.shape != self.geometry.shape:
            raise ValueError(
                f"Field has shape {self.values.shape}, expected {self.geometry.shape}"
            )
        if self.zero_mean and abs(torus_mean(self.values)) > _mean_tol(self.values):
            raise ValueError("Field flagged zero-mean has nonzero torus mean")

    @classmethod
    def centered(cls, geometry: TorusGeometry, values: np.ndarray) -> "ScalarField":
        values = np.asarray(values, dtype=np.float64)
        return cls(geometry, values - torus_mean(values), zero_mean=True)


@dataclass(frozen=True)
class GradientField:
    """Values ``g_k(x)`` for every k in E, shape (2d, *shape)."""

    geometry: TorusGeometry
    values: np.ndarray

    def antisymmetry_defect(self) -> float:
        g = self.geometry
        return max(
            float(np.max(np.abs(self.values[j] + shift(self.values[g.opposite(j)], k))))
            for j, k in enumerate(g.directions)
        )

    def curl_defect(self) -> float:
        """``max |g_k(x) + g_q(x+k) - g_q(x) - g_k(x+q)|`` over k, q, x."""
        g, vals = self.geometry, self.values
        defect = 0.0
        for j, k in enumerate(g.directions):
            for i, q in enumerate(g.directions):
                gap = vals[j] + shift(vals[i], k) - vals[i] - shift(vals[j], q)
                defect = max(defect, float(np.max(np.abs(gap))))
        return defect


@dataclass(frozen=True)
class OperatorHandle:
    """A named linear operator, bound to an environment where needed."""

    tag: OperatorTag
    direction: Direction | None = None
    alpha: float | None = None
    env: TorusEnvironment | None = field(default=None, repr=False, compare=False)

    def __post_init__(self) -> None:
        if self.tag in DIRECTED | {OperatorTag.NMUL, OperatorTag.MMUL}:
            if self.direction is None:
                raise ValueError(f"Operator {self.tag} needs a direction")
        if self.tag == OperatorTag.ABS_LAP_POW and self.alpha is None:
            raise ValueError("Operator abs_lap_pow needs an exponent alpha")

    def bind(self, env: TorusEnvironment) -> "OperatorHandle":
        return OperatorHandle(self.tag, self.direction, self.alpha, env)

    def __str__(self) -> str:
        if self.direction is not None:
            return f"{self.tag}({self.direction})"
        if self.alpha is not None:
            return f"{self.tag}({self.alpha:g})"
        return str(self.tag)


def _mean_tol(values: np.ndarray) -> float:
    return 1e-10 * max(1.0, float(np.max(np.abs(values), initial=0.0)))


def _require_zero_mean(values: np.ndarray, op: OperatorHandle) -> None:
    if abs(torus_mean(values)) > _mean_tol(values):
        raise ValueError(f"Operator {op} acts on zero-mean fields only")


# Fourier symbols


@lru_cache(maxsize=64)
def _symbol(
    tag: OperatorTag, d: int, N: int, axis: int, sign: int, alpha: float
) -> np.ndarray:
    geometry = TorusGeometry(d=d, N=N)
    momenta = dual_momenta(geometry)
    abs_lap = 4.0 * sum(1.0 - np.cos(p) for p in momenta)
    zero = abs_lap == 0
    match tag:
        case OperatorTag.LAP:
            out = -abs_lap.astype(complex)
        case OperatorTag.ABS_LAP_POW:
            out = np.zeros_like(abs_lap)
            out[~zero] = abs_lap[~zero] ** alpha
            out = out.astype(complex)
        case OperatorTag.GRAD:
            out = np.exp(1j * sign * momenta[axis - 1]) - 1.0
        case OperatorTag.GAMMA:
            grad = np.exp(1j * sign * momenta[axis - 1]) - 1.0
            out = np.zeros_like(grad)
            out[~zero] = grad[~zero] / np.sqrt(abs_lap[~zero])
        case _:
            raise ValueError(f"Operator {tag} has no Fourier symbol")
    out.flags.writeable = False
    return out


def fourier_symbol(op: OperatorHandle, geometry: TorusGeometry) -> np.ndarray:
    """Symbol of an FFT-diagonal operator on the dual torus, cached per geometry.

    Under ``fftn`` a shift ``f(x+k)`` multiplies the transform by ``exp(i p.k)``,
    so ``Lap`` has the real nonpositive symbol ``-4 sum_i (1 - cos p_i)``.
    """
    if op.tag not in FOURIER:
        raise ValueError(f"Operator {op} is not Fourier-diagonal")
    k = op.direction
    return _symbol(
        op.tag,
        geometry.d,
        geometry.N,
        k.axis if k else 0,
        k.sign if k else 0,
        float(op.alpha) if op.alpha is not None else 0.0,
    )


def _fourier_apply(symbol: np.ndarray, values: np.ndarray) -> np.ndarray:
    return scipy.fft.ifftn(symbol * scipy.fft.fftn(values)).real


# Application


def _bound_env(op: OperatorHandle) -> TorusEnvironment:
    if op.env is None:
        raise ValueError(f"Operator {op} must be bound to an environment")
    return op.env


def _stencil_coeffs(op: OperatorHandle) -> np.ndarray:
    env = _bound_env(op)
    match op.tag:
        case OperatorTag.T:
            return -(env.s - env.s_star)
        case OperatorTag.A:
            return np.asarray(env.v)
        case OperatorTag.S:
            return -env.s
        case OperatorTag.L:
            return np.asarray(env.p)
    raise ValueError(f"Operator {op} is not a stencil")


def apply(
    op: OperatorHandle, f: ScalarField | GradientField | np.ndarray
) -> ScalarField | GradientField:
    """Apply ``op`` to a scalar or gradient field.

    Raises:
        ValueError: On an unbound environment operator, a field of the wrong
            kind, or a non-zero-mean input to Gamma or a negative power
    """
    if op.tag in ENV_BOUND:
        _bound_env(op)
    if isinstance(f, np.ndarray):
        geometry = TorusGeometry(d=f.ndim, N=f.shape[0])
        f = ScalarField(geometry, np.asarray(f, dtype=np.float64))
    g = f.geometry
    tag = op.tag

    if tag in (OperatorTag.GRAD_ADJ, OperatorTag.GAMMA_ADJ):
        if not isinstance(f, GradientField):
            raise ValueError(f"Operator {op} acts on gradient fields")
        inner = OperatorTag.GRAD if tag == OperatorTag.GRAD_ADJ else OperatorTag.GAMMA
        if inner == OperatorTag.GAMMA:
            for comp in f.values:
                _require_zero_mean(comp, op)
        total = np.zeros(g.shape)
        for j, k in enumerate(g.directions):
            adj = OperatorHandle(inner, direction=-k)
            total += _apply_scalar(adj, f.values[j])
        return ScalarField(g, total, zero_mean=True)

    if not isinstance(f, ScalarField):
        raise ValueError(f"Operator {op} acts on scalar fields")

    if tag in (OperatorTag.GRAD_FULL, OperatorTag.GAMMA_FULL):
        inner = OperatorTag.GRAD if tag == OperatorTag.GRAD_FULL else OperatorTag.GAMMA
        comps = [
            _apply_scalar(OperatorHandle(inner, direction=k), f.values)
            for k in g.directions
        ]
        return GradientField(g, np.stack(comps))

    out = _apply_scalar(op, f.values)
    return ScalarField(g, out, zero_mean=_is_centered(out))


def _is_centered(values: np.ndarray) -> bool:
    return abs(torus_mean(values)) <= _mean_tol(values)


def _apply_scalar(op: OperatorHandle, values: np.ndarray) -> np.ndarray:
    geometry = TorusGeometry(d=values.ndim, N=values.shape[0])
    match op.tag:
        case OperatorTag.SHIFT:
            return shift(values, op.direction)
        case OperatorTag.GRAD:
            return shift(values, op.direction) - values
        case OperatorTag.LAP:
            return 2.0 * sum(shift(values, k) - values for k in geometry.directions)
        case OperatorTag.ABS_LAP_POW:
            if op.alpha < 0:
                _require_zero_mean(values, op)
            return _fourier_apply(fourier_symbol(op, geometry), values)
        case OperatorTag.GAMMA:
            _require_zero_mean(values, op)
            return _fourier_apply(fourier_symbol(op, geometry), values)
        case OperatorTag.NMUL:
            env = _bound_env(op)
            return (env.s[geometry.index(op.direction)] - env.s_star) * values
        case OperatorTag.MMUL:
            env = _bound_env(op)
            return env.v[geometry.index(op.direction)] * values
        case OperatorTag.T | OperatorTag.A | OperatorTag.S | OperatorTag.L:
            return apply_stencil(geometry, _stencil_coeffs(op), values)
    raise ValueError(f"Operator {op} cannot act on a scalar field")


# Dense realizations


def _circulant(geometry: TorusGeometry, kernel: np.ndarray) -> np.ndarray:
    """Dense matrix ``M[x, y] = kernel(x - y)`` of a convolution on the torus."""
    n, N = geometry.n_sites, geometry.N
    coords = geometry.coordinates(np.arange(n))
    flat = np.zeros((n, n), dtype=np.int64)
    for axis in range(geometry.d):
        flat = flat * N + np.mod(coords[:, None, axis] - coords[None, :, axis], N)
    return kernel.ravel()[flat]


def dense_matrix(
    op: OperatorHandle, geometry: TorusGeometry | None = None
) -> np.ndarray:
    """Dense matrix of a scalar-to-scalar operator on flat (C-order) fields."""
    if geometry is None:
        geometry = _bound_env(op).geometry
    if not geometry.dense_feasible:
        raise ValueError(
            f"Dense mode is limited to {DENSE_SITE_LIMIT} sites, "
            f"got {geometry.describe()}"
        )
    g = geometry
    ones = np.ones((g.n_directions, *g.shape))
    match op.tag:
        case OperatorTag.T | OperatorTag.A | OperatorTag.S | OperatorTag.L:
            return stencil_matrix(g, _stencil_coeffs(op)).toarray()
        case OperatorTag.LAP:
            return stencil_matrix(g, 2.0 * ones).toarray()
        case OperatorTag.GRAD | OperatorTag.SHIFT:
            coeffs = np.zeros_like(ones)
            coeffs[g.index(op.direction)] = 1.0
            grad = stencil_matrix(g, coeffs).toarray()
            return grad + np.eye(g.n_sites) if op.tag == OperatorTag.SHIFT else grad
        case OperatorTag.NMUL | OperatorTag.MMUL:
            return np.diag(_apply_scalar(op, np.ones(g.shape)).ravel())
        case OperatorTag.ABS_LAP_POW | OperatorTag.GAMMA:
            kernel = scipy.fft.ifftn(fourier_symbol(op, g)).real
            return _circulant(g, kernel)
    raise ValueError(f"Operator {op} has no square dense matrix")


def _abs_lap_gap(geometry: TorusGeometry) -> float:
    """Smallest nonzero eigenvalue of ``|Lap|``."""
    return 4.0 * (1.0 - np.cos(2.0 * np.pi / geometry.N))


def _zero_mean_power(matrix: np.ndarray, power: float, floor: float) -> np.ndarray:
    """``matrix ** power`` on the zero-mean subspace of a symmetric PSD matrix.

    The single null direction (the constants) is dropped; the remaining
    spectrum must sit above ``floor``.
    """
    w, V = scipy.linalg.eigh(matrix)
    if abs(w[0]) > 1e-8 * abs(w[-1]):
        raise RuntimeError(f"Expected one null eigenvalue, smallest is {w[0]:.3e}")
    w, V = w[1:], V[:, 1:]
    if w[0] < floor * (1.0 - 1e-8):
        raise RuntimeError(
            f"Eigenvalue {w[0]:.6g} below the ellipticity floor {floor:.6g}"
        )
    return (V * w**power) @ V.T


def skew_part_matrix(env: TorusEnvironment) -> np.ndarray:
    """``C = S^{-1/2} A S^{-1/2}`` on the zero-mean subspace."""
    floor = env.s_star * _abs_lap_gap(env.geometry) / 2.0
    s_inv_half = _zero_mean_power(
        dense_matrix(OperatorHandle(OperatorTag.S, env=env)), -0.5, floor
    )
    a = dense_matrix(OperatorHandle(OperatorTag.A, env=env))
    return s_inv_half @ a @ s_inv_half


# Identity checks


@dataclass
class IdentityReport:
    """Largest defect of every operator identity over the random trials."""

    defects: dict[str, float]
    tol: float
    trials: int

    @property
    def failures(self) -> list[str]:
        return [name for name, value in self.defects.items() if value > self.tol]

    @property
    def passed(self) -> bool:
        return not self.failures


def _inner(f: np.ndarray, g: np.ndarray) -> float:
    """``<f, g>`` against the uniform measure on the torus."""
    return float(np.mean(f * g))


def _test_field(geometry: TorusGeometry, rng: np.random.Generator) -> np.ndarray:
    f = rng.standard_normal(geometry.shape)
    f -= f.mean()
    return f / np.sqrt(np.mean(f**2))


def verify_identities(
    env: TorusEnvironment,
    trials: int = 10,
    tol: float = 1e-10,
    seed: int = 0,
    dense: bool | None = None,
) -> IdentityReport:
    """Check the gradient/Riesz/generator identities on random zero-mean fields.

    Raises:
        ValueError: If ``dense`` is requested on a geometry above the dense limit
    """
    g = env.geometry
    dense = g.dense_feasible if dense is None else dense
    if dense and not g.dense_feasible:
        raise ValueError(f"Geometry too large for dense mode: {g.describe()}")

    def handle(tag: OperatorTag, **kwargs) -> OperatorHandle:
        return OperatorHandle(tag, env=env, **kwargs)

    lap, abs_lap = handle(OperatorTag.LAP), handle(OperatorTag.ABS_LAP_POW, alpha=1.0)
    grad_full, grad_adj = handle(OperatorTag.GRAD_FULL), handle(OperatorTag.GRAD_ADJ)
    gamma_full = handle(OperatorTag.GAMMA_FULL)
    gamma_adj = handle(OperatorTag.GAMMA_ADJ)
    T, A = handle(OperatorTag.T), handle(OperatorTag.A)
    S, L = handle(OperatorTag.S), handle(OperatorTag.L)

    names = (
        "grad_laplacian",
        "grad_adjoint",
        "gamma_isometry",
        "gamma_coisometry",
        "gradient_in_G",
        "T_nonnegative",
        "A_skew",
        "sandwich_lower",
        "sandwich_upper",
        "generator_form",
        "generator_split",
    )
    defects = dict.fromkeys(names, 0.0)

    def record(name: str, value: float) -> None:
        defects[name] = max(defects[name], float(value))

    rng = stream(seed, Purpose.TEST_FIELD)
    for _ in range(trials):
        f, h = _test_field(g, rng), _test_field(g, rng)
        field_f = ScalarField(g, f, zero_mean=True)

        grad = apply(grad_full, field_f)
        lap_f = apply(lap, f).values
        adj_grad_f = apply(grad_adj, grad).values
        record("grad_laplacian", abs(_inner(adj_grad_f, f) + _inner(lap_f, f)))
        for j, k in enumerate(g.directions):
            lhs = _inner(grad.values[j], h)
            rhs = _inner(f, shift(h, -k) - h)
            record("grad_adjoint", abs(lhs - rhs))
        record("gradient_in_G", max(grad.antisymmetry_defect(), grad.curl_defect()))

        back = apply(gamma_adj, apply(gamma_full, field_f)).values
        record("gamma_isometry", np.max(np.abs(back - f)))
        coiso = apply(gamma_full, apply(gamma_adj, grad)).values
        record("gamma_coisometry", np.max(np.abs(coiso - grad.values)))

        Tf, Af = apply(T, f).values, apply(A, f).values
        Sf, Lf = apply(S, f).values, apply(L, f).values
        record("T_nonnegative", max(0.0, -_inner(Tf, f)))
        record("A_skew", abs(_inner(Af, f)))

        dirichlet = _inner(apply(abs_lap, f).values, f)
        energy = 2.0 * _inner(Sf, f)
        record("sandwich_lower", max(0.0, env.s_star * dirichlet - energy))
        record("sandwich_upper", max(0.0, energy - env.s_upper * dirichlet))
        record("generator_form", abs(_inner(Lf, f) + _inner(Sf, f)))
        split = 0.5 * lap_f - Tf + Af
        record("generator_split", np.max(np.abs(Lf - split)))

    if dense:
        C = skew_part_matrix(env)
        defects["C_skew"] = float(np.max(np.abs(C + C.T)))

    report = IdentityReport(defects=defects, tol=tol, trials=trials)
    logger.debug(f"Operator identities on {g.describe()}: {report.defects}")
    return report


# Operator-calculus corrector


@dataclass(frozen=True)
class CalculusCorrector:
    """Corrector obtained by explicit dense operator calculus."""

    chi: ScalarField
    residual: float
    mode: str

    @property
    def theta(self) -> GradientField:
        """``theta_k = Gamma_k chi``."""
        return apply(OperatorHandle(OperatorTag.GAMMA_FULL), self.chi)


def harmonic_residual(env: TorusEnvironment, chi: np.ndarray, phi: np.ndarray) -> float:
    """``max |sum_k p_k Gamma_k chi - phi|``."""
    g = env.geometry
    total = np.zeros(g.shape)
    for j, k in enumerate(g.directions):
        total += env.p[j] * _apply_scalar(OperatorHandle(OperatorTag.GAMMA, k), chi)
    return float(np.max(np.abs(total - phi)))


def operator_calculus_corrector(
    env: TorusEnvironment,
    phi: ScalarField | np.ndarray,
    mode: str = "general",
) -> CalculusCorrector:
    """Solve ``sum_k p_k Gamma_k chi = phi`` by dense operator calculus.

    ``general`` uses ``chi = -|Lap|^{1/2} S^{-1/2} (I - C)^{-1} S^{-1/2} phi``;
    ``simplified`` (constant conductance c) solves
    ``(I + B) chi = -(2/c) |Lap|^{-1/2} phi`` with
    ``B = -(2/c) |Lap|^{-1/2} A |Lap|^{-1/2}``.

    Raises:
        ValueError: On a non-zero-mean phi, a geometry above the dense limit,
            an unknown mode, or simplified mode with non-constant conductances
    """
    g = env.geometry
    values = phi.values if isinstance(phi, ScalarField) else np.asarray(phi, float)
    if abs(torus_mean(values)) > _mean_tol(values):
        raise ValueError("The operator-calculus corrector needs a zero-mean phi")
    if not g.dense_feasible:
        raise ValueError(f"Geometry too large for dense mode: {g.describe()}")

    n = g.n_sites
    flat = values.ravel()
    identity = np.eye(n)
    a = dense_matrix(OperatorHandle(OperatorTag.A, env=env))

    match mode:
        case "general":
            floor = env.s_star * _abs_lap_gap(g) / 2.0
            s_inv_half = _zero_mean_power(
                dense_matrix(OperatorHandle(OperatorTag.S, env=env)), -0.5, floor
            )
            C = s_inv_half @ a @ s_inv_half
            half = dense_matrix(OperatorHandle(OperatorTag.ABS_LAP_POW, alpha=0.5), g)
            inner = scipy.linalg.solve(identity - C, s_inv_half @ flat)
            chi = -half @ (s_inv_half @ inner)
        case "simplified":
            if not env.has_constant_s:
                raise ValueError("Simplified mode needs constant conductances")
            c = float(env.s_axes.flat[0])
            inv_half = dense_matrix(
                OperatorHandle(OperatorTag.ABS_LAP_POW, alpha=-0.5), g
            )
            B = -(2.0 / c) * (inv_half @ a @ inv_half)
            chi = scipy.linalg.solve(identity + B, -(2.0 / c) * (inv_half @ flat))
        case _:
            raise ValueError(f"Unknown operator-calculus mode '{mode}'")

    chi = chi.reshape(g.shape)
    chi -= torus_mean(chi)
    residual = harmonic_residual(env, chi, values)
    logger.debug(f"Operator-calculus corrector ({mode}): residual {residual:.3e}")
    return CalculusCorrector(
        chi=ScalarField(g, chi, zero_mean=True), residual=residual, mode=mode
    )
