"""Periodic lattice plumbing: torus geometry, unit steps and stencils.

Fields on the torus are numpy arrays of shape ``(N,) * d`` in C order, so the
flat site index is lexicographic with the last coordinate fastest. A field
indexed by the step set E carries a leading axis of length ``2 * d``.
"""

from dataclasses import dataclass
from functools import cached_property, lru_cache

import numpy as np
import scipy.sparse as sp

MIN_SIDE = 2
MAX_DIMENSION = 4

# Largest site count for which dense eigendecompositions are allowed
DENSE_SITE_LIMIT = 4096


@dataclass(frozen=True)
class Direction:
    """A signed unit step ``sign * e_axis`` (axis is 1-based)."""

    axis: int
    sign: int

    def __post_init__(self) -> None:
        if self.axis < 1:
            raise ValueError(f"Direction axis must be >= 1, got {self.axis}")
        if self.sign not in (1, -1):
            raise ValueError(f"Direction sign must be +1 or -1, got {self.sign}")

    def __neg__(self) -> "Direction":
        return Direction(self.axis, -self.sign)

    def vector(self, d: int) -> np.ndarray:
        """Return the step as an integer vector in Z^d."""
        if self.axis > d:
            raise ValueError(f"Axis {self.axis} out of range for d={d}")
        out = np.zeros(d, dtype=np.int64)
        out[self.axis - 1] = self.sign
        return out

    def __str__(self) -> str:
        return f"{'+' if self.sign > 0 else '-'}e{self.axis}"


@dataclass(frozen=True)
class TorusGeometry:
    """The periodic box (Z/NZ)^d."""

    d: int
    N: int

    def __post_init__(self) -> None:
        if not 1 <= self.d <= MAX_DIMENSION:
            raise ValueError(
                f"Dimension d must be in [1, {MAX_DIMENSION}], got {self.d}"
            )
        if self.N < MIN_SIDE:
            raise ValueError(f"Side length N must be >= {MIN_SIDE}, got {self.N}")

    @property
    def shape(self) -> tuple[int, ...]:
        return (self.N,) * self.d

    @property
    def n_sites(self) -> int:
        return self.N**self.d

    @property
    def n_directions(self) -> int:
        return 2 * self.d

    @property
    def dense_feasible(self) -> bool:
        return self.n_sites <= DENSE_SITE_LIMIT

    @cached_property
    def directions(self) -> tuple[Direction, ...]:
        """The step set E ordered as +e_1..+e_d, -e_1..-e_d."""
        plus = [Direction(axis, 1) for axis in range(1, self.d + 1)]
        return tuple(plus + [-k for k in plus])

    def index(self, k: Direction) -> int:
        """Position of ``k`` in :attr:`directions`."""
        return (k.axis - 1) + (0 if k.sign > 0 else self.d)

    def opposite(self, j: int) -> int:
        """Index of ``-k`` given the index of ``k``."""
        return (j + self.d) % (2 * self.d)

    @cached_property
    def step_matrix(self) -> np.ndarray:
        """Array of shape (2d, d) whose rows are the steps k in E."""
        return np.stack([k.vector(self.d) for k in self.directions])

    @cached_property
    def neighbours(self) -> np.ndarray:
        """Flat index of x + k for every direction index and flat site x."""
        idx = np.arange(self.n_sites).reshape(self.shape)
        return np.stack([shift(idx, k).ravel() for k in self.directions])

    def wrap(self, coords: np.ndarray) -> np.ndarray:
        """Flat site index of integer coordinates (last axis = coordinate)."""
        coords = np.mod(np.asarray(coords, dtype=np.int64), self.N)
        return np.ravel_multi_index(tuple(np.moveaxis(coords, -1, 0)), self.shape)

    def coordinates(self, flat: np.ndarray | int) -> np.ndarray:
        """Integer coordinates of flat site indices (last axis = coordinate)."""
        return np.stack(np.unravel_index(flat, self.shape), axis=-1)

    def minimum_image(self, origin: tuple[int, ...] | None = None) -> np.ndarray:
        """Displacements from ``origin`` in (-N/2, N/2], shape (*shape, d)."""
        grids = np.meshgrid(*[np.arange(self.N)] * self.d, indexing="ij")
        origin = origin or (0,) * self.d
        out = []
        for axis, grid in enumerate(grids):
            delta = np.mod(grid - origin[axis], self.N)
            out.append(np.where(delta > self.N // 2, delta - self.N, delta))
        return np.stack(out, axis=-1)

    def describe(self) -> str:
        return f"d={self.d}, N={self.N} ({self.n_sites} sites)"


def shift(field: np.ndarray, k: Direction) -> np.ndarray:
    """Return ``g(x) = f(x + k)`` for a field on the torus."""
    return np.roll(field, -k.sign, axis=k.axis - 1)


def shift_by(field: np.ndarray, offset: np.ndarray) -> np.ndarray:
    """Return ``g(x) = f(x + offset)`` for an integer offset vector."""
    offset = np.asarray(offset, dtype=np.int64)
    axes = tuple(range(len(offset)))
    return np.roll(field, tuple(int(-o) for o in offset), axis=axes)


def torus_mean(field: np.ndarray) -> float:
    return float(np.mean(field))


def apply_stencil(
    geometry: TorusGeometry, coeffs: np.ndarray, f: np.ndarray
) -> np.ndarray:
    """Apply ``sum_k c_k(x) (f(x+k) - f(x))``, ``coeffs`` of shape (2d, *shape)."""
    out = np.zeros(geometry.shape)
    for j, k in enumerate(geometry.directions):
        out += coeffs[j] * (shift(f, k) - f)
    return out


def stencil_matrix(geometry: TorusGeometry, coeffs: np.ndarray) -> sp.csr_matrix:
    """Sparse matrix of the stencil ``sum_k c_k (U_k - I)`` on flat fields.

    Duplicate entries (N = 2, where x + k = x - k) are summed.
    """
    n = geometry.n_sites
    rows = np.tile(np.arange(n), geometry.n_directions)
    cols = geometry.neighbours.ravel()
    data = coeffs.reshape(geometry.n_directions, n).ravel()
    off = sp.coo_matrix((data, (rows, cols)), shape=(n, n))
    diag = sp.diags(-coeffs.reshape(geometry.n_directions, n).sum(axis=0))
    return (off + diag).tocsr()


@lru_cache(maxsize=32)
def _frequencies(d: int, N: int) -> tuple[np.ndarray, ...]:
    p = 2.0 * np.pi * np.arange(N) / N
    return tuple(np.meshgrid(*[p] * d, indexing="ij"))


def dual_momenta(geometry: TorusGeometry) -> tuple[np.ndarray, ...]:
    """Dual torus points p = (2 pi / N) * {0..N-1}^d, one array per axis."""
    return _frequencies(geometry.d, geometry.N)
