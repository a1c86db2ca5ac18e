"""Quadratic, cubic and quartic multilinear operators on spectral fields.

Bilinear forms are evaluated as kernel-weighted discrete convolutions,

    F(A(u1, u2))(k_j) = dk * sum_m A_hat(k_j, k_m) u1(k_j - k_m) u2(k_m),

and trilinear forms as

    F(A(u1, u2, u3))(k_j) = dk^2 * sum_{l, m} A_hat(k_j, l, m) u1(k_j - l) u2(l - m) u3(m),

with every factor extended by zero off the grid and the inner variables
``l, m`` running over the whole lattice ``dk * Z`` (only the output ``k_j`` is
restricted to the grid). Because the grid is a lattice, all frequency
differences are lattice points, so the phases needed by the trilinear kernels
are read from one table of ``lambda_hat`` values.

The quartic operator is always composed from the trilinear one,
``Q(u) = A3(B(u,u), u, u) + A3(u, B(u,u), u) + A3(u, u, B(u,u))``; the
direct triple sum over ``Q_hat`` is kept as a coarse-grid oracle.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass
from functools import cached_property, lru_cache

import numpy as np
from scipy.ndimage import gaussian_filter1d

from . import symbols
from .spectral_core import (
    FrequencyGrid,
    NonFiniteFieldError,
    SpectralField,
    _check_same_grid,
    convolve,
    norms,
)
from .symbols import KernelSpec, SymbolConfig

__all__ = [
    "MultilinearEstimateReport",
    "apply_B",
    "apply_B_bilinear",
    "apply_B_extended",
    "LatticeField",
    "apply_A2",
    "apply_A3",
    "apply_A3_symmetrized",
    "apply_T",
    "apply_T_direct",
    "apply_Q",
    "apply_Q_direct",
    "bilinear",
    "trilinear",
    "lattice_lambda",
    "random_band_limited",
    "estimate_multilinear_constant",
]

DIRECT_T_MAX_N = 257
DIRECT_MAX_N = 129


def _require_finite(*fields: SpectralField) -> None:
    for f in fields:
        if not f.is_finite():
            raise NonFiniteFieldError("operator input has non-finite entries")


class LatticeField:
    """Values on the contiguous lattice indices ``lo, lo+1, ...`` (zero elsewhere).

    Intermediate products such as ``B(u, u)`` are supported on ``[-2K, 2K]``
    and are carried in this form instead of being cut back to the grid.
    """

    __slots__ = ("values", "lo")

    def __init__(self, values: np.ndarray, lo: int):
        self.values = np.asarray(values, dtype=complex)
        self.lo = int(lo)

    @classmethod
    def of(cls, f) -> "LatticeField":
        if isinstance(f, LatticeField):
            return f
        return cls(f.values, -f.grid.M)

    @property
    def hi(self) -> int:
        return self.lo + self.values.size - 1

    def at(self, idx) -> np.ndarray:
        idx = np.asarray(idx)
        pos = idx - self.lo
        ok = (pos >= 0) & (pos < self.values.size)
        return np.where(ok, self.values[np.clip(pos, 0, self.values.size - 1)], 0.0)

    def support(self, tol: float):
        a = np.abs(self.values)
        top = a.max(initial=0.0)
        if top == 0.0:
            return None
        idx = np.flatnonzero(a > tol * top)
        return self.lo + idx[0], self.lo + idx[-1]

    def is_finite(self) -> bool:
        return bool(np.all(np.isfinite(self.values)))


def _grid_of(*args) -> FrequencyGrid:
    grids = [a.grid for a in args if isinstance(a, SpectralField)]
    if not grids:
        raise ValueError("at least one argument must be a SpectralField")
    _check_same_grid(*[a for a in args if isinstance(a, SpectralField)])
    return grids[0]


# ---------------------------------------------------------------------------
# Bilinear engine
# ---------------------------------------------------------------------------

@lru_cache(maxsize=8)
def _toeplitz_index(grid: FrequencyGrid) -> np.ndarray:
    """Index of ``k_j - k_m`` in a field padded by ``N`` zeros on each side."""
    j = np.arange(grid.N)
    return grid.N + grid.M + j[:, None] - j[None, :]


def _padded(values: np.ndarray) -> np.ndarray:
    z = np.zeros(values.size, dtype=complex)
    return np.concatenate([z, values, z])


def bilinear(kernel_fn, u1, u2, grid: FrequencyGrid | None = None) -> SpectralField:
    """``dk * sum_m A_hat(k_j, m) u1(k_j - m) u2(m)`` for ``k_j`` on the grid.

    ``kernel_fn(k, m)`` evaluates the kernel on broadcast frequency arrays, or
    is an ``(N, N)`` array of samples when both inputs live on the grid.
    """
    grid = grid or _grid_of(u1, u2)
    if isinstance(kernel_fn, np.ndarray):
        if not (isinstance(u1, SpectralField) and isinstance(u2, SpectralField)):
            raise ValueError("sampled kernels need grid fields")
        shifted = _padded(u1.values)[_toeplitz_index(grid)]
        return SpectralField(grid, grid.dk * np.einsum("jm,jm,m->j", kernel_fn, shifted, u2.values))
    a, b = LatticeField.of(u1), LatticeField.of(u2)
    s = np.arange(-grid.M, grid.M + 1)
    m = np.arange(b.lo, b.hi + 1)
    ker = kernel_fn((s * grid.dk)[:, None], (m * grid.dk)[None, :])
    vals = np.einsum("jm,jm,m->j", ker, a.at(s[:, None] - m[None, :]), b.values)
    return SpectralField(grid, grid.dk * vals)


@lru_cache(maxsize=8)
def _kernel_matrix(kernel: KernelSpec, grid: FrequencyGrid) -> np.ndarray:
    k = grid.k
    return kernel(k[:, None], k[None, :])


@lru_cache(maxsize=8)
def _a2_matrix(cfg: SymbolConfig, kernel: KernelSpec, grid: FrequencyGrid) -> np.ndarray:
    k = grid.k
    return symbols.A2_hat(cfg, kernel, k[:, None], k[None, :])


def apply_B_bilinear(kernel: KernelSpec, u1: SpectralField, u2: SpectralField) -> SpectralField:
    """``F(B(u1, u2))(k) = int B_hat(k, l) u1(k - l) u2(l) dl`` on the grid."""
    _require_finite(u1, u2)
    if kernel.is_constant:
        return kernel.value * convolve(u1, u2)
    return bilinear(_kernel_matrix(kernel, u1.grid), u1, u2)


def apply_B(kernel: KernelSpec, u: SpectralField) -> SpectralField:
    return apply_B_bilinear(kernel, u, u)


def apply_B_extended(kernel: KernelSpec, u: SpectralField) -> LatticeField:
    """``F(B(u, u))`` on its full support ``[-2K, 2K]`` (no cut back to the grid)."""
    _require_finite(u)
    grid = u.grid
    if kernel.is_constant:
        return LatticeField(kernel.value * grid.dk * np.convolve(u.values, u.values), -2 * grid.M)
    xi = np.arange(-2 * grid.M, 2 * grid.M + 1)
    l = np.arange(-grid.M, grid.M + 1)
    ker = kernel((xi * grid.dk)[:, None], (l * grid.dk)[None, :])
    src = LatticeField.of(u)
    vals = grid.dk * np.einsum("xl,xl,l->x", ker, src.at(xi[:, None] - l[None, :]), u.values)
    return LatticeField(vals, -2 * grid.M)


def apply_A2(cfg: SymbolConfig, kernel: KernelSpec, u1, u2) -> SpectralField:
    """Bilinear form with kernel ``A2_hat = B_hat / phi``.

    Inputs are grid fields or :class:`LatticeField` intermediates.
    """
    for f in (u1, u2):
        if not f.is_finite():
            raise NonFiniteFieldError("operator input has non-finite entries")
    if isinstance(u1, SpectralField) and isinstance(u2, SpectralField):
        return bilinear(_a2_matrix(cfg, kernel, u1.grid), u1, u2)
    return bilinear(lambda k, m: symbols.A2_hat(cfg, kernel, k, m), u1, u2, _grid_of(u1, u2))


def apply_T(cfg: SymbolConfig, kernel: KernelSpec, u: SpectralField) -> SpectralField:
    """``A2(B(u,u), u) + A2(u, B(u,u))`` by composition."""
    b = apply_B_extended(kernel, u)
    return apply_A2(cfg, kernel, b, u) + apply_A2(cfg, kernel, u, b)


def apply_T_direct(cfg: SymbolConfig, kernel: KernelSpec, u: SpectralField) -> SpectralField:
    """Double quadrature with the merged kernel
    ``A2_hat(k,m) B_hat(k-m,l-m) + A2_hat(k,l) B_hat(l,m)``.

    Summed over the factor arguments ``a = k - l``, ``b = l - m`` (both on the
    grid) with ``m = k - a - b``; kernels are evaluated pointwise from
    :mod:`symbols`, independent of the lattice tables.
    """
    _require_finite(u)
    grid = u.grid
    if grid.N > DIRECT_T_MAX_N:
        raise ValueError(f"direct double quadrature limited to N <= {DIRECT_T_MAX_N}")
    k = grid.k
    src = LatticeField.of(u)
    s = np.arange(-grid.M, grid.M + 1)
    a, b = s[:, None], s[None, :]
    uab = u.values[:, None] * u.values[None, :]
    out = np.empty(grid.N, dtype=complex)
    for j, kj in enumerate(k):
        l = kj - a * grid.dk
        m = l - b * grid.dk
        ker = (symbols.A2_hat(cfg, kernel, kj, m) * kernel(kj - m, l - m)
               + symbols.A2_hat(cfg, kernel, kj, l) * kernel(l, m))
        out[j] = np.sum(ker * uab * src.at(s[j] - a - b))
    return SpectralField(grid, grid.dk ** 2 * out)


# ---------------------------------------------------------------------------
# Trilinear engine
# ---------------------------------------------------------------------------

LAMBDA_SPAN = 5


@lru_cache(maxsize=8)
def lattice_lambda(cfg: SymbolConfig, grid: FrequencyGrid, span: int = LAMBDA_SPAN) -> np.ndarray:
    """``lambda_hat(s*dk)`` for ``|s| <= span*M``, stored at index ``s + span*M``."""
    table = symbols.lambda_hat(cfg, grid.lattice(span))
    table.setflags(write=False)
    return table


class LatticePhases:
    """Phase values on one trilinear block, computed on first access.

    Shapes broadcast to (c, n2, n3) for output index ``kk``, ``l = L``,
    ``l - m = q`` and ``m``.
    """

    def __init__(self, lam: np.ndarray, off: int, kk, L, q, m):
        self.lam, self.off = lam, off
        self.kk, self.L, self.q, self.m = kk, L, q, m
        self.lk = lam[kk + off][:, None, None]

    def _lam(self, idx):
        return self.lam[idx + self.off]

    @cached_property
    def lkl(self):
        return self._lam(self.kk[:, None, None] - self.L[None])

    @cached_property
    def phi_kl(self):
        return -self.lk + self.lkl + self._lam(self.L)[None]

    @cached_property
    def phi_km(self):
        m = self.m
        return -self.lk + self._lam(self.kk[:, None] - m[None, :])[:, None, :] + self._lam(m)[None, None, :]

    @cached_property
    def phi_kq(self):
        q = self.q
        return -self.lk + self._lam(self.kk[:, None] - q[None, :])[:, :, None] + self._lam(q)[None, :, None]

    @cached_property
    def psi(self):
        """``phi(k, l) + phi(l, m) = -lam(k) + lam(k-l) + lam(l-m) + lam(m)``."""
        return -self.lk + self.lkl + self._lam(self.q)[None, :, None] + self._lam(self.m)[None, None, :]


class TrilinearBlock:
    """Kernel of a trilinear form evaluated on lattice blocks.

    ``__call__(kk, L, q, m)`` receives signed lattice indices: ``kk`` (c,) for
    the output frequency, ``L`` (n2, n3) for ``l``, ``q`` (n2,) for ``l - m``
    and ``m`` (n3,), and returns kernel values of shape (c, n2, n3).
    """

    def __init__(self, cfg: SymbolConfig, kernel: KernelSpec, grid: FrequencyGrid):
        self.cfg, self.kernel, self.grid = cfg, kernel, grid
        self.lam = lattice_lambda(cfg, grid)
        self.off = LAMBDA_SPAN * grid.M

    @staticmethod
    def _inv(den):
        if np.abs(den).min() < symbols.DIVISION_GUARD:
            raise symbols.ResonanceError("phase denominator below 1e-15 in trilinear kernel")
        return 1.0 / den

    def _freqs(self, ph: LatticePhases):
        dk = self.grid.dk
        return (ph.kk * dk)[:, None, None], (ph.L * dk)[None], (ph.m * dk)[None, None, :]

    def __call__(self, kk, L, q, m):
        return self.values(LatticePhases(self.lam, self.off, kk, L, q, m))

    def values(self, ph: LatticePhases):  # pragma: no cover - abstract
        raise NotImplementedError


class A3Block(TrilinearBlock):
    """``A3_hat(k, l, m)``."""

    def values(self, ph):
        if self.kernel.is_constant:
            br = self.kernel.value ** 2 * (self._inv(ph.phi_km) + self._inv(ph.phi_kl))
        else:
            B = self.kernel
            k, l, m = self._freqs(ph)
            br = (B(k, m) * B(k - m, l - m) * self._inv(ph.phi_km)
                  + B(k, l) * B(l, m) * self._inv(ph.phi_kl))
        return br * self._inv(ph.psi)


class A3SymmetricBlock(TrilinearBlock):
    """``2 B_hat(k,l) B_hat(l,m) / (phi(k,l) (phi(k,l) + phi(l,m)))``.

    Equal to ``A3_hat`` after summation against ``u(k-l) u(l-m) u(m)`` when
    ``B_hat(k, l) = B_hat(k, k - l)``.
    """

    def values(self, ph):
        if self.kernel.is_constant:
            num = 2.0 * self.kernel.value ** 2
        else:
            k, l, m = self._freqs(ph)
            num = 2.0 * self.kernel(k, l) * self.kernel(l, m)
        return num * self._inv(ph.phi_kl) * self._inv(ph.psi)


def trilinear(
    block: TrilinearBlock,
    u1,
    u2,
    u3,
    support_tol: float = 1e-16,
    chunk_elems: int = 1 << 19,
) -> SpectralField:
    """``dk^2 * sum_{l, m} K(k_j, l, m) u1(k_j - l) u2(l - m) u3(m)`` for grid ``k_j``.

    ``l`` and ``m`` run over the whole lattice; the factors vanish off their
    own index ranges (grid fields, or wider :class:`LatticeField`
    intermediates up to ``[-2K, 2K]``). Entries of ``u2`` and ``u3`` below
    ``support_tol`` times their maximum are skipped, which only trims
    Gaussian tails.
    """
    grid = block.grid
    args = [LatticeField.of(u) for u in (u1, u2, u3)]
    for a in args:
        if not a.is_finite():
            raise NonFiniteFieldError("operator input has non-finite entries")
        if a.lo < -2 * grid.M or a.hi > 2 * grid.M:
            raise ValueError("trilinear inputs must be supported in [-2K, 2K]")
    M = grid.M
    out = np.zeros(grid.N, dtype=complex)
    supports = [a.support(support_tol) for a in args]
    if any(s is None for s in supports):
        return SpectralField(grid, out)
    (a1, b1), (a2, b2), (a3, b3) = supports
    k_lo, k_hi = max(a1 + a2 + a3, -M), min(b1 + b2 + b3, M)
    if k_lo > k_hi:
        return SpectralField(grid, out)

    f1, f2, f3 = args
    q = np.arange(a2, b2 + 1)
    m = np.arange(a3, b3 + 1)
    L = q[:, None] + m[None, :]
    w23 = f2.at(q)[:, None] * f3.at(m)[None, :]
    chunk = max(1, chunk_elems // L.size)
    for start in range(k_lo, k_hi + 1, chunk):
        kk = np.arange(start, min(start + chunk, k_hi + 1))
        v1 = f1.at(kk[:, None, None] - L[None])
        out[kk + M] = np.einsum("cqm,cqm,qm->c", block(kk, L, q, m), v1, w23)
    return SpectralField(grid, grid.dk ** 2 * out)


def apply_A3(cfg: SymbolConfig, kernel: KernelSpec, u1, u2, u3,
             support_tol: float = 1e-16) -> SpectralField:
    """``F(A3(u1, u2, u3))`` with the kernel ``A3_hat``."""
    grid = _grid_of(u1, u2, u3)
    return trilinear(A3Block(cfg, kernel, grid), u1, u2, u3, support_tol)


def apply_A3_symmetrized(cfg: SymbolConfig, kernel: KernelSpec, u: SpectralField,
                         support_tol: float = 1e-16) -> SpectralField:
    """``F(A3(u, u, u))`` from the second bracket term alone, doubled.

    Valid for kernels with ``B_hat(k, l) = B_hat(k, k - l)`` (e.g. constants).
    """
    return trilinear(A3SymmetricBlock(cfg, kernel, u.grid), u, u, u, support_tol)


def apply_Q(cfg: SymbolConfig, kernel: KernelSpec, u: SpectralField,
            support_tol: float = 1e-16) -> SpectralField:
    """Quartic term ``A3(B,u,u) + A3(u,B,u) + A3(u,u,B)`` with ``B = B(u,u)``.

    ``B(u, u)`` is kept on its full support ``[-2K, 2K]``.
    """
    _require_finite(u)
    b = apply_B_extended(kernel, u)
    return (apply_A3(cfg, kernel, b, u, u, support_tol)
            + apply_A3(cfg, kernel, u, b, u, support_tol)
            + apply_A3(cfg, kernel, u, u, b, support_tol))


def apply_Q_direct(cfg: SymbolConfig, kernel: KernelSpec, u: SpectralField) -> SpectralField:
    """Brute-force triple quadrature of ``Q_hat(k,l,m,n) u(k-l) u(l-m) u(m-n) u(n)``.

    Summed over the factor arguments ``a = k-l``, ``b = l-m``, ``c = m-n`` on
    the grid with ``n = k - a - b - c``. Oracle only; O(N^4) work, rejected
    for ``N > 129``.
    """
    _require_finite(u)
    grid = u.grid
    if grid.N > DIRECT_MAX_N:
        raise ValueError(f"direct triple quadrature is limited to N <= {DIRECT_MAX_N}")
    dk = grid.dk
    src = LatticeField.of(u)
    s = np.arange(-grid.M, grid.M + 1)
    a, b, c = s[:, None, None], s[None, :, None], s[None, None, :]
    uabc = u.values[:, None, None] * u.values[None, :, None] * u.values[None, None, :]
    out = np.empty(grid.N, dtype=complex)
    for j, kj in enumerate(grid.k):
        l = kj - a * dk
        m = l - b * dk
        n = m - c * dk
        qh = symbols.Q_hat(cfg, kernel, kj, l, m, n)
        out[j] = np.sum(qh * uabc * src.at(s[j] - a - b - c))
    return SpectralField(grid, dk ** 3 * out)


# ---------------------------------------------------------------------------
# Empirical multilinear constants
# ---------------------------------------------------------------------------

_DEGREE = {"B": 2, "A2": 2, "T": 3, "A3": 3, "Q": 4}


@dataclass
class MultilinearEstimateReport:
    operator: str
    p: float
    empirical_constant: float
    ensemble_size: int
    seed: int
    skipped: int = 0

    def to_dict(self) -> dict:
        out = asdict(self)
        out["p"] = "inf" if np.isinf(self.p) else self.p
        return out


def _parse_p(p) -> float:
    if isinstance(p, str):
        p = p.strip().lower()
        if p in ("inf", "infinity", "∞"):
            return np.inf
        p = float(p)
    p = float(p)
    if p not in (1.0, 2.0, np.inf):
        raise ValueError(f"p must be one of 1, 2, inf; got {p}")
    return p


def random_band_limited(grid: FrequencyGrid, rng: np.random.Generator,
                        half_support: float | None = None, correlation: float = 0.5) -> SpectralField:
    """Smoothed complex Gaussian noise under a C-infinity bump on ``|k| < half_support``.

    Normalized to unit trapezoid L1 norm.
    """
    a = grid.K / 2 if half_support is None else half_support
    k = grid.k
    noise = rng.standard_normal(grid.N) + 1j * rng.standard_normal(grid.N)
    sigma = max(correlation / grid.dk, 0.5)
    smooth = gaussian_filter1d(noise.real, sigma) + 1j * gaussian_filter1d(noise.imag, sigma)
    x = k / a
    bump = np.zeros(grid.N)
    inside = np.abs(x) < 1
    bump[inside] = np.exp(1.0 - 1.0 / (1.0 - x[inside] ** 2))
    f = SpectralField(grid, smooth * bump)
    l1 = norms(f).l1
    return f if l1 == 0 else f * (1.0 / l1)


def _apply_operator(name: str, cfg, kernel, u: SpectralField) -> SpectralField:
    if name == "B":
        return apply_B(kernel, u)
    if name == "A2":
        return apply_A2(cfg, kernel, u, u)
    if name == "T":
        return apply_T(cfg, kernel, u)
    if name == "A3":
        return apply_A3(cfg, kernel, u, u, u)
    if name == "Q":
        return apply_Q(cfg, kernel, u)
    raise ValueError(f"unknown operator {name!r}")


def _p_norm(nt, p: float) -> float:
    return nt.linf if np.isinf(p) else (nt.l1 if p == 1 else nt.l2)


def estimate_multilinear_constant(
    operator: str,
    p,
    ensemble_size: int,
    seed: int,
    cfg: SymbolConfig | None = None,
    kernel: KernelSpec | None = None,
    grid: FrequencyGrid | None = None,
) -> MultilinearEstimateReport:
    """Max over a random ensemble of ``||F(op(u))||_p / (||u||_1^(deg-1) ||u||_p)``.

    Member ``i`` draws from ``SeedSequence(seed, spawn_key=(i,))`` so a larger
    ensemble always contains the smaller one.
    """
    if operator not in _DEGREE:
        raise ValueError(f"operator must be one of {sorted(_DEGREE)}")
    if ensemble_size < 100:
        raise ValueError("ensemble_size must be at least 100")
    p = _parse_p(p)
    cfg = cfg or SymbolConfig(1.0)
    kernel = kernel or symbols.ConstantKernel()
    grid = grid or FrequencyGrid(8.0, 65)
    deg = _DEGREE[operator]

    best, skipped = 0.0, 0
    for i in range(ensemble_size):
        rng = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(i,)))
        u = random_band_limited(grid, rng)
        nu = norms(u)
        den = nu.l1 ** (deg - 1) * _p_norm(nu, p)
        if den == 0.0:
            skipped += 1
            continue
        ratio = _p_norm(norms(_apply_operator(operator, cfg, kernel, u)), p) / den
        best = max(best, ratio)
    return MultilinearEstimateReport(operator, p, best, ensemble_size, seed, skipped)
