"""Doubly stochastic periodic environments built from stream tensors.

A stream tensor h lives on oriented plaquettes. Only the components
``h_{e_i,e_j}`` with ``i < j`` are stored; every other entry follows from

    h_{k,l}(x) = -h_{-k,l}(x+k) = -h_{k,-l}(x+l) = -h_{l,k}(x).

The drift is the lattice curl ``v_k = sum_q h_{k,q}`` and the jump rates are
``p_k = s_k + v_k`` with symmetric conductances ``s_k(x) = s_{-k}(x+k)``.
"""

from dataclasses import dataclass, field, replace
from itertools import combinations
from pathlib import Path
from typing import Any

import numpy as np
import scipy.fft

from .fields import FieldDump, content_hash, read_field_dump, write_field_dump
from .lattice import Direction, TorusGeometry, dual_momenta, shift, torus_mean
from .logging_utils import get_logger
from .streams import Purpose, stream

logger = get_logger(__name__)

DEFAULT_EPS = 1.0
S_STAR = 1.0
# Rescaled environments whose minimum rate is within this of the floor count as
# already admissible, which keeps shrink_h idempotent under rounding.
_FLOOR_SLACK = 1e-12

STREAM_TENSOR_KINDS = (
    "constant",
    "iid_uniform",
    "iid_gaussian",
    "iid_pareto_truncated",
)
CONDUCTANCE_KINDS = ("constant", "iid_uniform")


def _require(spec: dict, key: str, kind: str) -> float:
    if key not in spec:
        raise ValueError(f"Generator '{kind}' requires '{key}'")
    return float(spec[key])


def _draw(spec: dict, size: tuple[int, ...], rng: np.random.Generator) -> np.ndarray:
    """Draw an i.i.d. array from a generator spec."""
    kind = spec.get("kind")
    match kind:
        case "constant":
            return np.full(size, _require(spec, "value", kind))
        case "iid_uniform":
            lo, hi = _require(spec, "lo", kind), _require(spec, "hi", kind)
            if hi < lo:
                raise ValueError(f"iid_uniform needs lo <= hi, got lo={lo}, hi={hi}")
            return rng.uniform(lo, hi, size)
        case "iid_gaussian":
            sigma = _require(spec, "sigma", kind)
            if sigma < 0:
                raise ValueError(f"iid_gaussian needs sigma >= 0, got {sigma}")
            return rng.normal(0.0, sigma, size)
        case "iid_pareto_truncated":
            alpha, cap = _require(spec, "alpha", kind), _require(spec, "cap", kind)
            if alpha <= 0 or cap <= 0:
                raise ValueError("iid_pareto_truncated needs alpha > 0 and cap > 0")
            # Symmetric Lomax magnitudes, truncated at the cap
            magnitude = np.minimum(rng.pareto(alpha, size), cap)
            sign = np.where(rng.random(size) < 0.5, -1.0, 1.0)
            return sign * magnitude
        case _:
            raise ValueError(f"Unknown generator kind '{kind}'")


# Stream tensors


@dataclass(frozen=True)
class StreamTensor:
    """Plaquette field ``h_{e_i,e_j}(x)`` for ``i < j``, shape (P, *shape)."""

    geometry: TorusGeometry
    hplq: np.ndarray
    eps: float = DEFAULT_EPS

    def __post_init__(self) -> None:
        expected = (len(self.pairs), *self.geometry.shape)
        if self.hplq.shape != expected:
            raise ValueError(f"hplq has shape {self.hplq.shape}, expected {expected}")
        if self.eps <= 0:
            raise ValueError(f"eps must be positive, got {self.eps}")

    @property
    def pairs(self) -> list[tuple[int, int]]:
        """Stored plaquette axis pairs (1-based, i < j)."""
        return list(combinations(range(1, self.geometry.d + 1), 2))

    def _stored(self, i: int, j: int) -> np.ndarray:
        return self.hplq[self.pairs.index((i, j))]

    def entry(self, k: Direction, q: Direction, order: str = "k_first") -> np.ndarray:
        """Expand ``h_{k,q}`` from the stored components.

        ``order`` selects which sign is reduced first ("k_first", "q_first") or
        whether antisymmetry is applied before the shift rules ("swap_first").
        Every order yields the same values on a consistent tensor.
        """
        if k.axis == q.axis:
            return np.zeros(self.geometry.shape)
        if order == "swap_first" and k.axis > q.axis:
            return -self.entry(q, k, "k_first")
        if order != "q_first" and k.sign < 0:
            return -shift(self.entry(-k, q, order), k)
        if q.sign < 0:
            return -shift(self.entry(k, -q, order), q)
        if k.sign < 0:
            return -shift(self.entry(-k, q, order), k)
        if k.axis < q.axis:
            return self._stored(k.axis, q.axis)
        return -self.entry(q, k, order)

    def full(self) -> np.ndarray:
        """All entries ``h_{k,q}(x)``, shape (2d, 2d, *shape), E-ordered."""
        dirs = self.geometry.directions
        return np.stack([np.stack([self.entry(k, q) for q in dirs]) for k in dirs])

    def closure_defect(self) -> float:
        """Largest disagreement between expansion orders (and zero diagonals)."""
        dirs = self.geometry.directions
        gaps = []
        for k in dirs:
            for q in dirs:
                base = self.entry(k, q, "k_first")
                gaps.append(base - self.entry(k, q, "q_first"))
                gaps.append(base - self.entry(k, q, "swap_first"))
                gaps.append(base + self.entry(q, k))
            gaps.append(self.entry(k, k))
            gaps.append(self.entry(k, -k))
        return max(float(np.max(np.abs(gap))) for gap in gaps)

    @property
    def hstar(self) -> float:
        """``sum_{k,l} (mean |h_{k,l}|^{2+eps})^{1/(2+eps)}`` over the torus."""
        power = 2.0 + self.eps
        full = self.full()
        norms = np.mean(np.abs(full) ** power, axis=tuple(range(2, full.ndim)))
        return float(np.sum(norms ** (1.0 / power)))

    def scaled(self, gamma: float) -> "StreamTensor":
        return replace(self, hplq=self.hplq * gamma)


def generate_stream_tensor(
    geometry: TorusGeometry,
    generator_spec: dict,
    seed: int,
    eps: float = DEFAULT_EPS,
) -> StreamTensor:
    """Fill the stored plaquette components i.i.d. from ``generator_spec``."""
    if geometry.d < 2:
        raise ValueError("A stream tensor needs d >= 2 (no plaquettes in d = 1)")
    kind = generator_spec.get("kind")
    if kind not in STREAM_TENSOR_KINDS:
        raise ValueError(f"Unknown stream tensor generator '{kind}'")

    n_pairs = geometry.d * (geometry.d - 1) // 2
    rng = stream(seed, Purpose.STREAM_TENSOR)
    hplq = _draw(generator_spec, (n_pairs, *geometry.shape), rng)
    h = StreamTensor(geometry=geometry, hplq=hplq, eps=eps)
    logger.debug(f"Stream tensor '{kind}' on {geometry.describe()}: h* = {h.hstar:.6g}")
    return h


# Flows


@dataclass(frozen=True)
class SkewFlow:
    """Values ``v_k(x)`` for every k in E, shape (2d, *shape)."""

    geometry: TorusGeometry
    v: np.ndarray

    def skew_defect(self) -> float:
        g = self.geometry
        return max(
            float(np.max(np.abs(self.v[j] + shift(self.v[g.opposite(j)], k))))
            for j, k in enumerate(g.directions)
        )

    def divergence_defect(self) -> float:
        return float(np.max(np.abs(self.v.sum(axis=0))))

    def mean_defect(self) -> float:
        return max(abs(torus_mean(vk)) for vk in self.v)


def curl_to_drift(h: StreamTensor) -> SkewFlow:
    """``v_k(x) = sum_q h_{k,q}(x)``."""
    full = h.full()
    return SkewFlow(geometry=h.geometry, v=full.sum(axis=1))


def zero_flow(geometry: TorusGeometry) -> SkewFlow:
    v = np.zeros((geometry.n_directions, *geometry.shape))
    return SkewFlow(geometry=geometry, v=v)


# Environments


@dataclass(frozen=True)
class ValidationReport:
    """Structural defects of an assembled environment."""

    bistochastic_defect: float
    divergence_defect: float
    skew_defect: float
    mean_drift_defect: float
    min_rate: float
    max_rate: float
    min_s: float
    max_s: float
    gamma: float

    def as_dict(self) -> dict[str, float]:
        return dict(vars(self))


@dataclass(frozen=True)
class TorusEnvironment:
    """Immutable environment: conductances, stream tensor and derived rates."""

    geometry: TorusGeometry
    s_axes: np.ndarray
    h: StreamTensor | None
    flow: SkewFlow
    p: np.ndarray
    s_star: float
    s_upper: float
    report: ValidationReport
    provenance: dict[str, Any] = field(default_factory=dict)

    @property
    def s(self) -> np.ndarray:
        """``s_k(x)`` for all k in E, shape (2d, *shape)."""
        return full_conductances(self.geometry, self.s_axes)

    @property
    def v(self) -> np.ndarray:
        return self.flow.v

    @property
    def total_rate(self) -> np.ndarray:
        return self.p.sum(axis=0)

    @property
    def eps(self) -> float:
        return self.h.eps if self.h is not None else DEFAULT_EPS

    @property
    def is_reversible(self) -> bool:
        return not np.any(self.v)

    @property
    def has_constant_s(self) -> bool:
        return bool(np.all(self.s_axes == self.s_axes.flat[0]))

    @property
    def env_hash(self) -> str:
        hplq = self.h.hplq if self.h is not None else np.zeros(0)
        tag = f"d={self.geometry.d};N={self.geometry.N};s_star={self.s_star!r}"
        return content_hash(self.s_axes, hplq, extra=tag)

    def describe(self) -> str:
        kind = "reversible" if self.is_reversible else "non-reversible"
        return f"{kind} environment on {self.geometry.describe()}"


def full_conductances(geometry: TorusGeometry, s_axes: np.ndarray) -> np.ndarray:
    """Extend ``s_{e_i}`` to all of E through ``s_{-k}(x) = s_k(x-k)``."""
    plus = [s_axes[i] for i in range(geometry.d)]
    steps = geometry.directions[: geometry.d]
    minus = [shift(s_axes[i], -k) for i, k in enumerate(steps)]
    return np.stack(plus + minus)


def _conductances(
    geometry: TorusGeometry, s_spec: dict | np.ndarray, seed: int
) -> np.ndarray:
    if isinstance(s_spec, np.ndarray):
        s_axes = np.array(s_spec, dtype=np.float64)
        if s_axes.shape != (geometry.d, *geometry.shape):
            raise ValueError(f"Conductance array has shape {s_axes.shape}")
    else:
        kind = s_spec.get("kind")
        if kind not in CONDUCTANCE_KINDS:
            raise ValueError(f"Unknown conductance generator '{kind}'")
        floor = float(s_spec["value"] if kind == "constant" else s_spec.get("lo", 0.0))
        if floor < S_STAR:
            raise ValueError(
                f"Conductance floor {floor} is below s_* = {S_STAR}; rescale time first"
            )
        rng = stream(seed, Purpose.CONDUCTANCE)
        s_axes = _draw(s_spec, (geometry.d, *geometry.shape), rng)
    if np.min(s_axes) < S_STAR:
        raise ValueError(f"Conductances violate ellipticity: min s = {np.min(s_axes)}")
    return s_axes


def _shrink_factor(s: np.ndarray, v: np.ndarray, floor: float) -> float:
    """Largest gamma <= 1 with ``min(s + gamma * v) >= floor``."""
    if np.min(s + v) >= floor - _FLOOR_SLACK:
        return 1.0
    negative = v < 0
    gamma = float(np.min((s[negative] - floor) / -v[negative]))
    return min(1.0, gamma)


def _inflow(geometry: TorusGeometry, p: np.ndarray) -> np.ndarray:
    """``sum_k p_{-k}(x+k)``."""
    return sum(
        shift(p[geometry.opposite(j)], k) for j, k in enumerate(geometry.directions)
    )


def _validate(
    geometry: TorusGeometry,
    s_axes: np.ndarray,
    flow: SkewFlow,
    p: np.ndarray,
    gamma: float,
) -> ValidationReport:
    return ValidationReport(
        bistochastic_defect=float(np.max(np.abs(p.sum(axis=0) - _inflow(geometry, p)))),
        divergence_defect=flow.divergence_defect(),
        skew_defect=flow.skew_defect(),
        mean_drift_defect=flow.mean_defect(),
        min_rate=float(np.min(p)),
        max_rate=float(np.max(p)),
        min_s=float(np.min(s_axes)),
        max_s=float(np.max(s_axes)),
        gamma=gamma,
    )


def _freeze(*arrays: np.ndarray) -> None:
    for array in arrays:
        array.flags.writeable = False


def assemble_environment(
    s_spec: dict | np.ndarray,
    h: StreamTensor | None,
    rescale_policy: dict | str = "reject",
    *,
    geometry: TorusGeometry | None = None,
    seed: int = 0,
    provenance: dict[str, Any] | None = None,
) -> TorusEnvironment:
    """Combine conductances and a stream tensor into rates ``p_k = s_k + v_k``.

    Args:
        s_spec: Conductance generator spec, or an explicit (d, *shape) array
        h: Stream tensor, or None for the reversible conductance model
        rescale_policy: "reject", {"kind": "reject"} or
            {"kind": "shrink_h", "margin": m} with m in (0, 1)
        geometry: Required when ``h`` is None
        seed: Seed for the conductance stream
        provenance: Extra provenance recorded on the environment

    Raises:
        ValueError: On negative rates under "reject", an ellipticity violation
            or a malformed spec
    """
    if h is not None:
        geometry = h.geometry
    if geometry is None:
        raise ValueError("geometry is required when no stream tensor is given")

    policy = rescale_policy
    if isinstance(policy, str):
        policy = {"kind": policy}
    kind = policy.get("kind")
    if kind not in ("reject", "shrink_h"):
        raise ValueError(f"Unknown rescale policy '{kind}'")

    s_axes = _conductances(geometry, s_spec, seed)
    s_full = full_conductances(geometry, s_axes)
    flow = curl_to_drift(h) if h is not None else zero_flow(geometry)
    gamma = 1.0

    if kind == "reject":
        if np.min(s_full + flow.v) < 0:
            raise ValueError(
                f"Negative jump rate {np.min(s_full + flow.v):.6g} "
                "under policy 'reject'"
            )
    else:
        margin = float(policy.get("margin", 0.1))
        if not 0 < margin < 1:
            raise ValueError(f"shrink_h margin must be in (0, 1), got {margin}")
        gamma = _shrink_factor(s_full, flow.v, margin * S_STAR)
        if gamma < 1.0 and h is not None:
            logger.info(f"Shrinking stream tensor by gamma = {gamma:.6g}")
            h = h.scaled(gamma)
            flow = curl_to_drift(h)

    p = s_full + flow.v
    report = _validate(geometry, s_axes, flow, p, gamma)
    _freeze(s_axes, flow.v, p)
    if h is not None:
        _freeze(h.hplq)

    record = {"s": s_spec if isinstance(s_spec, dict) else "explicit", "seed": seed}
    record.update(rescale=policy, gamma=gamma, **(provenance or {}))
    env = TorusEnvironment(
        geometry=geometry,
        s_axes=s_axes,
        h=h,
        flow=flow,
        p=p,
        s_star=S_STAR,
        s_upper=float(np.max(p)),
        report=report,
        provenance=record,
    )
    logger.debug(
        f"Assembled {env.describe()}: min p = {report.min_rate:.4g}, "
        f"bistochastic defect = {report.bistochastic_defect:.2e}"
    )
    return env


def reversed_environment(env: TorusEnvironment) -> TorusEnvironment:
    """Environment of the time-reversed walk, ``p*_k(x) = p_{-k}(x+k)``."""
    h = env.h.scaled(-1.0) if env.h is not None else None
    return assemble_environment(
        env.s_axes,
        h,
        "reject",
        geometry=env.geometry,
        seed=env.provenance.get("seed", 0),
        provenance={"reversed_from": env.env_hash},
    )


# Drift and correlation diagnostics


@dataclass(frozen=True)
class DriftFields:
    """Symmetric, skew and total local drift, each of shape (d, *shape)."""

    psi: np.ndarray
    phi: np.ndarray
    phi_star: np.ndarray
    rate_identity_defect: float


def drift_fields(env: TorusEnvironment) -> DriftFields:
    """Local drifts of the symmetric and skew parts.

    ``psi_i = s_{e_i}(x) - s_{e_i}(x-e_i)`` and
    ``phi_i = v_{e_i}(x) + v_{e_i}(x-e_i)``; their sum is ``sum_k p_k k``.
    """
    g = env.geometry
    plus = g.directions[: g.d]
    s_ax = env.s_axes
    psi = np.stack([s_ax[i] - shift(s_ax[i], -k) for i, k in enumerate(plus)])
    phi = np.stack([env.v[i] + shift(env.v[i], -k) for i, k in enumerate(plus)])
    phi_star = psi + phi
    local = np.einsum("ki,k...->i...", g.step_matrix.astype(float), env.p)
    return DriftFields(
        psi=psi,
        phi=phi,
        phi_star=phi_star,
        rate_identity_defect=float(np.max(np.abs(local - phi_star))),
    )


@dataclass(frozen=True)
class H1Report:
    """Discrete infrared-weighted correlation sum of the skew drift."""

    spectrum: np.ndarray
    value: float
    zero_mode_excluded: bool = True

    @property
    def min_spectrum(self) -> float:
        return float(np.min(self.spectrum))


def h_minus_one_report(env: TorusEnvironment) -> H1Report:
    """Correlation spectrum ``C_ii(p)`` of ``phi`` and its ``H_{-1}`` sum."""
    g = env.geometry
    phi = drift_fields(env).phi
    axes = tuple(range(1, g.d + 1))
    spectrum = np.abs(scipy.fft.fftn(phi, axes=axes)) ** 2 / g.n_sites
    weight = sum(1.0 - np.cos(p) for p in dual_momenta(g))
    total = spectrum.sum(axis=0)
    nonzero = weight > 0
    value = float(np.sum(total[nonzero] / weight[nonzero]) / g.n_sites)
    return H1Report(spectrum=spectrum, value=value)


def nash_observable(env: TorusEnvironment, eps: float | None = None) -> np.ndarray:
    """Pointwise weight ``sum_k (s^* + sum_q |h_{k,q}(x)|)^{2+eps}``.

    Its torus mean is the moment constant entering the Nash inequality.
    """
    eps = env.eps if eps is None else eps
    if env.h is None:
        plaquettes = np.zeros((env.geometry.n_directions, *env.geometry.shape))
    else:
        plaquettes = np.abs(env.h.full()).sum(axis=1)
    return np.sum((env.s_upper + plaquettes) ** (2.0 + eps), axis=0)


# Serialization


def write_environment(env: TorusEnvironment, path: str | Path) -> tuple[Path, Path]:
    """Dump ``s_1..s_d`` and the stored plaquettes ``h_ij`` with provenance."""
    components = {f"s_{i + 1}": env.s_axes[i] for i in range(env.geometry.d)}
    if env.h is not None:
        for (i, j), values in zip(env.h.pairs, env.h.hplq, strict=True):
            components[f"h_{i}{j}"] = values
    metadata = {
        "seed": env.provenance.get("seed"),
        "generator_spec": env.provenance,
        "eps": env.eps,
        "s_star": env.s_star,
        "env_hash": env.env_hash,
    }
    dump = FieldDump(
        d=env.geometry.d, N=env.geometry.N, components=components, metadata=metadata
    )
    return write_field_dump(dump, path)


def read_environment(path: str | Path) -> TorusEnvironment:
    """Rebuild an environment from a dump; rates are recomputed bit-for-bit."""
    dump = read_field_dump(path)
    geometry = TorusGeometry(d=dump.d, N=dump.N)
    s_axes = np.stack([dump.components[f"s_{i + 1}"] for i in range(geometry.d)])
    h_names = [name for name in dump.components if name.startswith("h_")]
    h = None
    if h_names:
        h = StreamTensor(
            geometry=geometry,
            hplq=np.stack([dump.components[name] for name in h_names]),
            eps=float(dump.metadata.get("eps", DEFAULT_EPS)),
        )
    provenance = dict(dump.metadata.get("generator_spec") or {})
    env = assemble_environment(s_axes, h, "reject", geometry=geometry)
    env = replace(env, provenance=provenance)
    stored = dump.metadata.get("env_hash")
    if stored is not None and stored != env.env_hash:
        raise ValueError(f"Environment hash mismatch reading {path}")
    return env
