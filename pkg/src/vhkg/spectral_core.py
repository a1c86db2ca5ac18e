"""Frequency grids, spectral fields, quadrature norms and the convolution engine.

All fields live on a symmetric uniform grid ``k_j = -K + j*dk`` with an odd
number of nodes, so that ``k = 0`` is always a node and differences of nodes
are again lattice points. Convolutions are taken on the real line with zero
extension outside ``[-K, K]``; nothing is ever periodized.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np
from scipy.signal import fftconvolve

__all__ = [
    "FrequencyGrid",
    "SpectralField",
    "NormTriple",
    "make_grid",
    "gaussian_profile",
    "norms",
    "convolve",
    "convolve_fft",
    "trapezoid_weights",
]


class GridMismatchError(ValueError):
    """Raised when two fields that must share a grid do not."""


class NonFiniteFieldError(FloatingPointError):
    """Raised when a field contains NaN or Inf entries."""


@dataclass(frozen=True)
class FrequencyGrid:
    K: float
    N: int

    def __post_init__(self):
        if not (isinstance(self.N, (int, np.integer)) and self.N >= 3 and self.N % 2 == 1):
            raise ValueError(f"grid size N must be an odd integer >= 3, got {self.N!r}")
        if not (np.isfinite(self.K) and self.K > 0):
            raise ValueError(f"grid cutoff K must be positive, got {self.K!r}")

    @property
    def dk(self) -> float:
        return 2.0 * self.K / (self.N - 1)

    @property
    def M(self) -> int:
        """Index of the node ``k = 0``; nodes are ``(j - M) * dk``."""
        return (self.N - 1) // 2

    @property
    def k(self) -> np.ndarray:
        k = (np.arange(self.N) - self.M) * self.dk
        k.setflags(write=False)
        return k

    def lattice(self, span: int = 1) -> np.ndarray:
        """Lattice points ``i*dk`` for ``|i| <= span*M``."""
        return np.arange(-span * self.M, span * self.M + 1) * self.dk


def make_grid(K: float, N: int) -> FrequencyGrid:
    if isinstance(N, float) and N.is_integer():
        N = int(N)
    return FrequencyGrid(float(K), N)


@dataclass(frozen=True, eq=False)
class SpectralField:
    """Samples of a Fourier transform on a :class:`FrequencyGrid`."""

    grid: FrequencyGrid
    values: np.ndarray = field(repr=False)

    def __post_init__(self):
        values = np.array(self.values, dtype=complex)
        if values.shape != (self.grid.N,):
            raise ValueError(f"expected {self.grid.N} samples, got shape {values.shape}")
        values.setflags(write=False)
        object.__setattr__(self, "values", values)

    @classmethod
    def zeros(cls, grid: FrequencyGrid) -> "SpectralField":
        return cls(grid, np.zeros(grid.N, dtype=complex))

    def with_values(self, values) -> "SpectralField":
        return SpectralField(self.grid, values)

    def is_finite(self) -> bool:
        return bool(np.all(np.isfinite(self.values)))

    def __add__(self, other: "SpectralField") -> "SpectralField":
        _check_same_grid(self, other)
        return SpectralField(self.grid, self.values + other.values)

    def __sub__(self, other: "SpectralField") -> "SpectralField":
        _check_same_grid(self, other)
        return SpectralField(self.grid, self.values - other.values)

    def __mul__(self, c) -> "SpectralField":
        return SpectralField(self.grid, c * self.values)

    __rmul__ = __mul__

    def __neg__(self) -> "SpectralField":
        return SpectralField(self.grid, -self.values)


class NormTriple(NamedTuple):
    l1: float
    l2: float
    linf: float


def _check_same_grid(*fields: SpectralField) -> None:
    g = fields[0].grid
    for f in fields[1:]:
        if f.grid != g:
            raise GridMismatchError(f"fields live on different grids: {g} vs {f.grid}")


def trapezoid_weights(grid: FrequencyGrid) -> np.ndarray:
    w = np.full(grid.N, grid.dk)
    w[0] = w[-1] = 0.5 * grid.dk
    return w


def gaussian_profile(eta: float, grid: FrequencyGrid) -> SpectralField:
    """Fourier transform of ``eta * exp(-x**2)``, i.e. ``eta*sqrt(pi)*exp(-k**2/4)``."""
    return SpectralField(grid, eta * np.sqrt(np.pi) * np.exp(-grid.k ** 2 / 4.0))


def norms(f: SpectralField) -> NormTriple:
    """Trapezoid L1 and L2 norms and the nodal maximum of ``|f|``."""
    if not f.is_finite():
        raise NonFiniteFieldError("field has non-finite entries (blow-up or corrupted state)")
    return _norms_unchecked(f.values, trapezoid_weights(f.grid))


def _norms_unchecked(values: np.ndarray, weights: np.ndarray) -> NormTriple:
    a = np.abs(values)
    return NormTriple(float(weights @ a), float(np.sqrt(weights @ (a * a))), float(a.max()))


def convolve(f: SpectralField, g: SpectralField) -> SpectralField:
    """``dk * sum_m f(k_j - k_m) g(k_m)`` with ``f`` zero outside the grid.

    Direct O(N^2) summation; this is the reference path.
    """
    _check_same_grid(f, g)
    M = f.grid.M
    full = np.convolve(f.values, g.values)
    return SpectralField(f.grid, f.grid.dk * full[M:M + f.grid.N])


def convolve_fft(f: SpectralField, g: SpectralField) -> SpectralField:
    """FFT-accelerated version of :func:`convolve` (linear, zero padded)."""
    _check_same_grid(f, g)
    M = f.grid.M
    full = fftconvolve(f.values, g.values, mode="full")
    return SpectralField(f.grid, f.grid.dk * full[M:M + f.grid.N])
