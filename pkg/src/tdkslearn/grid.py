"""Space/time grids and the discrete operators shared by the 1D and 2D solvers.

Everything here is in atomic units.  Objects are immutable once built.
"""
from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property

import numpy as np

#: femtoseconds per atomic unit of time
FS_PER_AU = 0.02418884254

#: nucleus position of the soft-Coulomb hydrogen atom
NUCLEUS_X = -10.0

_STENCIL_D2 = np.array([-1.0, 16.0, -30.0, 16.0, -1.0]) / 12.0
_STENCIL_D1 = np.array([1.0, -8.0, 0.0, 8.0, -1.0]) / 12.0


def fs_to_au(t_fs: float) -> float:
    return t_fs / FS_PER_AU


def au_to_fs(t_au: float) -> float:
    return t_au * FS_PER_AU


@dataclass(frozen=True)
class GridSpec:
    """Uniform grid ``x_j = L_min + j*dx`` (j=0..J) and ``t_k = k*dt`` (k=0..K)."""

    L_min: float
    L_max: float
    J: int
    T: float
    K: int

    @property
    def dx(self) -> float:
        return (self.L_max - self.L_min) / self.J

    @property
    def dt(self) -> float:
        return self.T / self.K

    @property
    def n_points(self) -> int:
        return self.J + 1

    @cached_property
    def x(self) -> np.ndarray:
        x = self.L_min + np.arange(self.J + 1) * self.dx
        x.setflags(write=False)
        return x

    @cached_property
    def t(self) -> np.ndarray:
        t = np.arange(self.K + 1) * self.dt
        t.setflags(write=False)
        return t

    def with_time(self, T: float, K: int) -> "GridSpec":
        return build_grid(self.L_min, self.L_max, self.J, T, K)

    def subsample(self, space_stride: int = 1, time_stride: int = 1) -> "GridSpec":
        """Coarser grid on the same extents (every ``stride``-th point)."""
        if self.J % space_stride or self.K % time_stride:
            raise ValueError(
                f"strides ({space_stride}, {time_stride}) do not divide (J={self.J}, K={self.K})"
            )
        return build_grid(self.L_min, self.L_max, self.J // space_stride,
                          self.T, self.K // time_stride)

    def to_dict(self) -> dict:
        return {"L_min": self.L_min, "L_max": self.L_max, "J": self.J,
                "T": self.T, "K": self.K}

    @classmethod
    def from_dict(cls, d: dict) -> "GridSpec":
        return build_grid(float(d["L_min"]), float(d["L_max"]), int(d["J"]),
                          float(d["T"]), int(d["K"]))

    def same_space(self, other: "GridSpec") -> bool:
        return (self.L_min, self.L_max, self.J) == (other.L_min, other.L_max, other.J)


def build_grid(L_min: float, L_max: float, J: int, T: float, K: int) -> GridSpec:
    """Validate extents and return a :class:`GridSpec`.

    ``J`` must be even because the spatial quadrature is composite Simpson.
    """
    if not L_max > L_min:
        raise ValueError(f"need L_max > L_min, got [{L_min}, {L_max}]")
    if not T > 0:
        raise ValueError(f"need T > 0, got {T}")
    if int(K) != K or K < 1:
        raise ValueError(f"need integer K >= 1, got {K}")
    if int(J) != J or J < 4:
        raise ValueError(f"need integer J >= 4, got {J}")
    if J % 2:
        raise ValueError(f"J={J} is odd; composite Simpson quadrature requires an even "
                         "number of intervals")
    return GridSpec(float(L_min), float(L_max), int(J), float(T), int(K))


def external_potential(grid: GridSpec) -> np.ndarray:
    """Soft-Coulomb attraction to a unit charge at ``NUCLEUS_X``."""
    return -1.0 / np.sqrt((grid.x - NUCLEUS_X) ** 2 + 1.0)


def soft_coulomb(r: np.ndarray) -> np.ndarray:
    return 1.0 / np.sqrt(r * r + 1.0)


@dataclass(frozen=True)
class BandedLaplacian:
    """Fourth-order second-derivative matrix with the stencil truncated at the edges.

    ``bands[d]`` holds the d-th super-diagonal coefficient (d = 0, 1, 2), already
    divided by ``dx**2``.  The matrix is symmetric Toeplitz.
    """

    n: int
    dx: float

    @property
    def coeffs(self) -> tuple[float, float, float]:
        s = 1.0 / (12.0 * self.dx * self.dx)
        return (-30.0 * s, 16.0 * s, -1.0 * s)

    def upper_bands(self) -> np.ndarray:
        """Bands in LAPACK upper storage, as consumed by :func:`scipy.linalg.eig_banded`."""
        c0, c1, c2 = self.coeffs
        ab = np.zeros((3, self.n))
        ab[0, 2:] = c2
        ab[1, 1:] = c1
        ab[2, :] = c0
        return ab

    def toarray(self) -> np.ndarray:
        c0, c1, c2 = self.coeffs
        n = self.n
        A = np.zeros((n, n))
        idx = np.arange(n)
        A[idx, idx] = c0
        A[idx[:-1], idx[:-1] + 1] = c1
        A[idx[1:], idx[1:] - 1] = c1
        A[idx[:-2], idx[:-2] + 2] = c2
        A[idx[2:], idx[2:] - 2] = c2
        return A

    def matvec(self, f: np.ndarray, axis: int = 0) -> np.ndarray:
        return apply_stencil(f, self.coeffs, axis=axis)


def apply_stencil(f: np.ndarray, coeffs, axis: int = 0) -> np.ndarray:
    """Apply a symmetric 5-point stencil (c0, c1, c2) along ``axis`` with zero continuation."""
    c0, c1, c2 = coeffs
    f = np.moveaxis(np.asarray(f), axis, 0)
    out = c0 * f
    out[1:] += c1 * f[:-1]
    out[:-1] += c1 * f[1:]
    out[2:] += c2 * f[:-2]
    out[:-2] += c2 * f[2:]
    return np.moveaxis(out, 0, axis)


def first_derivative(f: np.ndarray, dx: float, axis: int = 0) -> np.ndarray:
    """Fourth-order central first derivative, stencil truncated at the edges."""
    f = np.moveaxis(np.asarray(f), axis, 0)
    s = 1.0 / (12.0 * dx)
    out = np.zeros_like(f)
    out[:-1] += 8.0 * s * f[1:]
    out[1:] -= 8.0 * s * f[:-1]
    out[:-2] -= s * f[2:]
    out[2:] += s * f[:-2]
    return np.moveaxis(out, 0, axis)


def laplacian4(grid: GridSpec) -> BandedLaplacian:
    if grid.J < 4:
        raise ValueError("the 5-point stencil needs J >= 4")
    return BandedLaplacian(grid.J + 1, grid.dx)


def simpson_pattern(J: int) -> np.ndarray:
    """Dimensionless composite-Simpson pattern ``(1, 4, 2, ..., 4, 1) / 3``."""
    if J % 2:
        raise ValueError(f"J={J} is odd; composite Simpson quadrature requires even J")
    p = np.ones(J + 1)
    p[1:-1:2] = 4.0
    p[2:-1:2] = 2.0
    return p / 3.0


def simpson_weights(grid: GridSpec) -> np.ndarray:
    """Composite Simpson weights including the ``dx`` factor: ``sum(f*w)`` integrates f."""
    return simpson_pattern(grid.J) * grid.dx


def interaction_matrix(grid: GridSpec) -> np.ndarray:
    """``W[j, j'] = dx / sqrt((x_j' - x_j)^2 + 1)``.

    Pair with :func:`simpson_pattern` (not :func:`simpson_weights`), so that
    ``W @ (f * pattern)`` is a Simpson integral with ``dx`` counted once.
    """
    # |j - j'| * dx keeps the matrix exactly symmetric
    d = np.abs(np.subtract.outer(np.arange(grid.J + 1), np.arange(grid.J + 1))) * grid.dx
    return soft_coulomb(d) * grid.dx
