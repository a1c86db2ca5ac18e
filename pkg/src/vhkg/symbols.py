"""Fourier symbol, phase functions, normal-form kernels and phase certification.

Conventions: ``lambda_hat(k) = -d k^2 - i <k>`` with ``<k> = sqrt(1 + k^2)``,
and the quadratic phase is

    phi(k, l) = -lambda_hat(k) + lambda_hat(k - l) + lambda_hat(l).

Its real part is ``2 d l (k - l)`` and its imaginary part
``<k> - <k-l> - <l>`` is strictly negative, so ``phi`` never vanishes.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Union

import numpy as np
from scipy.interpolate import RegularGridInterpolator
from scipy.optimize import minimize_scalar

__all__ = [
    "SymbolConfig",
    "ConstantKernel",
    "TabulatedKernel",
    "KernelSpec",
    "kernel_from_dict",
    "PhaseCertificate",
    "CertificateViolation",
    "ResonanceError",
    "bracket",
    "lambda_hat",
    "vkg_eigenvalues",
    "phi",
    "phi_re",
    "phi_im",
    "psi2",
    "psi3",
    "A2_hat",
    "A3_hat",
    "Q_hat",
    "f1",
    "g1",
    "convexity_margin",
    "kernel_bounds",
    "certify_phase_bounds",
]

DIVISION_GUARD = 1e-15


class ResonanceError(ArithmeticError):
    """A phase denominator came out (numerically) zero."""


class CertificateViolation(RuntimeError):
    """A scanned phase value fell below its certified lower bound."""


@dataclass(frozen=True)
class SymbolConfig:
    d: float

    def __post_init__(self):
        if not (np.isfinite(self.d) and self.d > 0):
            raise ValueError(f"viscosity d must be positive, got {self.d!r}")


# ---------------------------------------------------------------------------
# Kernels
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ConstantKernel:
    """``B_hat(k, l) = value`` everywhere. ``1/(2 pi)`` gives ``B(u, u) = u**2``."""

    value: complex = 1.0 / (2.0 * np.pi)

    is_constant = True

    @property
    def sup(self) -> float:
        return abs(self.value)

    def __call__(self, k, l):
        k, l = np.broadcast_arrays(np.asarray(k, dtype=float), np.asarray(l, dtype=float))
        return np.full(k.shape, complex(self.value))

    def to_dict(self) -> dict:
        return {"type": "constant", "value": [float(np.real(self.value)), float(np.imag(self.value))]}


@dataclass(frozen=True, eq=False)
class TabulatedKernel:
    """Bounded kernel sampled on a rectilinear ``(k, l)`` table.

    Evaluation is bilinear, with coordinates clamped to the table and the
    modulus clamped to ``sup``.
    """

    k_nodes: np.ndarray = field(repr=False)
    l_nodes: np.ndarray = field(repr=False)
    samples: np.ndarray = field(repr=False)
    sup: float
    _interp: RegularGridInterpolator = field(init=False, repr=False, compare=False)

    is_constant = False

    def __post_init__(self):
        k_nodes = np.asarray(self.k_nodes, dtype=float)
        l_nodes = np.asarray(self.l_nodes, dtype=float)
        samples = np.asarray(self.samples, dtype=complex)
        if samples.shape != (k_nodes.size, l_nodes.size):
            raise ValueError("samples must have shape (len(k_nodes), len(l_nodes))")
        if not np.isfinite(self.sup) or self.sup < 0:
            raise ValueError("declared sup bound must be finite and nonnegative")
        if not np.all(np.isfinite(samples)):
            raise ValueError("kernel samples must be finite")
        if np.abs(samples).max(initial=0.0) > self.sup * (1 + 1e-12):
            raise ValueError("tabulated samples exceed the declared sup bound")
        object.__setattr__(self, "k_nodes", k_nodes)
        object.__setattr__(self, "l_nodes", l_nodes)
        object.__setattr__(self, "samples", samples)
        object.__setattr__(
            self, "_interp", RegularGridInterpolator((k_nodes, l_nodes), samples, method="linear")
        )

    def __call__(self, k, l):
        k, l = np.broadcast_arrays(np.asarray(k, dtype=float), np.asarray(l, dtype=float))
        kc = np.clip(k, self.k_nodes[0], self.k_nodes[-1])
        lc = np.clip(l, self.l_nodes[0], self.l_nodes[-1])
        out = self._interp(np.stack([kc.ravel(), lc.ravel()], axis=-1)).reshape(k.shape)
        mod = np.abs(out)
        too_big = mod > self.sup
        if np.any(too_big):
            out = np.where(too_big, out * (self.sup / np.where(too_big, mod, 1.0)), out)
        return out

    @classmethod
    def from_function(cls, func, k_nodes, l_nodes, sup=None) -> "TabulatedKernel":
        kk, ll = np.meshgrid(k_nodes, l_nodes, indexing="ij")
        samples = np.asarray(func(kk, ll), dtype=complex)
        if sup is None:
            sup = float(np.abs(samples).max())
        return cls(k_nodes, l_nodes, samples, sup)

    def to_dict(self) -> dict:
        return {
            "type": "tabulated",
            "k": self.k_nodes.tolist(),
            "l": self.l_nodes.tolist(),
            "re": self.samples.real.tolist(),
            "im": self.samples.imag.tolist(),
            "sup": float(self.sup),
        }


KernelSpec = Union[ConstantKernel, TabulatedKernel]


def kernel_from_dict(data: dict) -> KernelSpec:
    """Inverse of the kernels' ``to_dict``. A bare number is a constant kernel."""
    if isinstance(data, (int, float)):
        return ConstantKernel(float(data))
    kind = data.get("type")
    if kind == "constant":
        v = data.get("value", 1.0 / (2.0 * np.pi))
        if isinstance(v, (list, tuple)):
            v = complex(v[0], v[1]) if v[1] else float(v[0])
        return ConstantKernel(v)
    if kind == "tabulated":
        samples = np.asarray(data["re"], dtype=float) + 1j * np.asarray(data.get("im", 0.0), dtype=float)
        return TabulatedKernel(np.asarray(data["k"]), np.asarray(data["l"]), samples, float(data["sup"]))
    raise ValueError(f"unknown kernel type {kind!r}")


# ---------------------------------------------------------------------------
# Symbol and phases
# ---------------------------------------------------------------------------

def bracket(k):
    """Japanese bracket ``sqrt(1 + k**2)``."""
    return np.hypot(1.0, k)


def lambda_hat(cfg: SymbolConfig, k):
    k = np.asarray(k, dtype=float)
    return -cfg.d * k * k - 1j * bracket(k)


def vkg_eigenvalues(alpha, beta, gamma, k):
    """Both branches ``-alpha k^2/2 +- sqrt(alpha^2 k^4/4 - beta^2 (gamma + k^2))``.

    Eigenvalues of the first-order form of the viscoelastic Klein-Gordon
    equation ``u_tt + beta^2 (gamma - dxx) u - alpha dxx u_t = 0``.
    """
    if gamma <= 0 or alpha < 0 or beta < 0:
        raise ValueError("need gamma > 0 and alpha, beta >= 0")
    k = np.asarray(k, dtype=float)
    disc = 0.25 * alpha ** 2 * k ** 4 - beta ** 2 * (gamma + k ** 2)
    root = np.sqrt(np.asarray(disc, dtype=complex))
    mean = -0.5 * alpha * k ** 2
    return mean + root, mean - root


def phi_re(cfg: SymbolConfig, k, l):
    k, l = np.asarray(k, dtype=float), np.asarray(l, dtype=float)
    return 2.0 * cfg.d * l * (k - l)


def phi_im(k, l):
    k, l = np.asarray(k, dtype=float), np.asarray(l, dtype=float)
    return bracket(k) - bracket(k - l) - bracket(l)


def phi(cfg: SymbolConfig, k, l):
    return phi_re(cfg, k, l) + 1j * phi_im(k, l)


def psi2(cfg: SymbolConfig, k, y, z):
    """``d k^2 + i (phi_im(k, y) + phi_im(y, z))``."""
    k = np.asarray(k, dtype=float)
    return cfg.d * k * k + 1j * (phi_im(k, y) + phi_im(y, z))


def psi3(cfg: SymbolConfig, k, y, z):
    """``phi(k, y) + phi(y, z)``; bounded away from zero uniformly."""
    return phi(cfg, k, y) + phi(cfg, y, z)


def _guarded_inverse(den):
    den = np.asarray(den)
    if np.any(np.abs(den) < DIVISION_GUARD):
        raise ResonanceError("phase denominator below 1e-15; the phase certificate is violated")
    return 1.0 / den


def A2_hat(cfg: SymbolConfig, kernel: KernelSpec, k, l):
    """``B_hat(k, l) / phi(k, l)``."""
    return kernel(k, l) * _guarded_inverse(phi(cfg, k, l))


def A3_hat(cfg: SymbolConfig, kernel: KernelSpec, k, l, m):
    k, l, m = np.broadcast_arrays(*(np.asarray(a, dtype=float) for a in (k, l, m)))
    bracket_term = (
        kernel(k, m) * kernel(k - m, l - m) * _guarded_inverse(phi(cfg, k, m))
        + kernel(k, l) * kernel(l, m) * _guarded_inverse(phi(cfg, k, l))
    )
    return bracket_term * _guarded_inverse(phi(cfg, k, l) + phi(cfg, l, m))


def Q_hat(cfg: SymbolConfig, kernel: KernelSpec, k, l, m, n):
    k, l, m, n = np.broadcast_arrays(*(np.asarray(a, dtype=float) for a in (k, l, m, n)))
    return (
        A3_hat(cfg, kernel, k, m, n) * kernel(k - m, l - m)
        + A3_hat(cfg, kernel, k, l, n) * kernel(l - n, m - n)
        + A3_hat(cfg, kernel, k, l, m) * kernel(m, n)
    )


def f1(cfg: SymbolConfig, k, y):
    """``(d k^2 + i phi_im(k, y)) / phi(k, y)``."""
    k = np.asarray(k, dtype=float)
    return (cfg.d * k * k + 1j * phi_im(k, y)) * _guarded_inverse(phi(cfg, k, y))


def g1(cfg: SymbolConfig, k, y, z):
    """``psi2 / psi3``."""
    return psi2(cfg, k, y, z) * _guarded_inverse(psi3(cfg, k, y, z))


# ---------------------------------------------------------------------------
# Certification of the lower bounds
# ---------------------------------------------------------------------------

def _convexity_gap(l):
    return np.sqrt(0.25 + l * l) - np.sqrt(1.0 + l * l)


def convexity_margin() -> float:
    """``-max_{|l| <= 1/2} (sqrt(1/4 + l^2) - sqrt(1 + l^2))``.

    The gap is even and increasing in ``|l|``; the bounded search is
    cross-checked against the endpoints so the maximum is not under-resolved.
    """
    res = minimize_scalar(lambda l: -_convexity_gap(l), bounds=(-0.5, 0.5), method="bounded",
                          options={"xatol": 1e-12})
    best = max(_convexity_gap(res.x), _convexity_gap(-0.5), _convexity_gap(0.5))
    return float(-best)


def kernel_bounds(cfg: SymbolConfig, sup_b: float, delta: float | None = None) -> dict:
    """Analytic sup bounds of ``A2_hat``, ``A3_hat`` and ``Q_hat`` given ``sup|B_hat|``."""
    delta = convexity_margin() if delta is None else delta
    phi0 = min(cfg.d / 2.0, delta)
    psi0 = min(cfg.d, 1.0, delta)
    a3 = 2.0 * sup_b ** 2 / (phi0 * psi0)
    return {"phi0": phi0, "psi0": psi0, "A2": sup_b / phi0, "A3": a3, "Q": 3.0 * sup_b * a3}


@dataclass
class PhaseCertificate:
    d: float
    delta: float
    phi0_analytic: float
    psi0_analytic: float
    phi_grid_min: float
    psi_grid_min: float
    box: dict
    resolution: dict
    scan_slack: dict
    phi_im_max: float

    def to_dict(self) -> dict:
        return asdict(self)


def _lambda_table(cfg: SymbolConfig, n: int, h: float) -> np.ndarray:
    """``lambda_hat(i*h)`` for ``i = -n..n`` (index ``i + n``)."""
    return lambda_hat(cfg, np.arange(-n, n + 1) * h)


def _scan_phi(cfg: SymbolConfig, half_width: float, h: float, rows: int = 128):
    n = int(round(half_width / h))
    lam = _lambda_table(cfg, 2 * n, h)
    idx = np.arange(-n, n + 1)
    lam_axis = lam[idx + 2 * n]
    best, im_max = np.inf, -np.inf
    for start in range(0, idx.size, rows):
        ki = idx[start:start + rows]
        val = -lam_axis[start:start + rows, None] + lam[(ki[:, None] - idx[None, :]) + 2 * n] + lam_axis[None, :]
        best = min(best, float(np.abs(val).min()))
        im_max = max(im_max, float(val.imag.max()))
    return best, im_max, n * h


def _scan_psi(cfg: SymbolConfig, half_width: float, h: float) -> tuple[float, float]:
    # psi = -lam(k) + lam(k-l) + lam(l-m) + lam(m)
    n = int(round(half_width / h))
    lam = _lambda_table(cfg, 2 * n, h)
    idx = np.arange(-n, n + 1)
    lam_axis = lam[idx + 2 * n]
    lm = lam[(idx[:, None] - idx[None, :]) + 2 * n] + lam_axis[None, :]
    best = np.inf
    for ki in idx:
        val = (-lam[ki + 2 * n] + lam[ki - idx + 2 * n])[:, None] + lm
        best = min(best, float(np.abs(val).min()))
    return best, n * h


def certify_phase_bounds(
    cfg: SymbolConfig,
    box_half_width: float,
    resolution: float,
    psi_box_half_width: float | None = None,
    psi_resolution: float | None = None,
) -> PhaseCertificate:
    """Certified lower bounds for ``|phi|`` and ``|phi(k,l) + phi(l,m)|``.

    The analytic constants come from the case split on ``|l|``, ``|k-l|``
    against ``1/2``. Both phases are then scanned on uniform boxes and the
    minima compared with the analytic values. The 3-D scan defaults to the
    box ``min(box_half_width, 6)`` at spacing ``max(resolution, 0.05)``.

    Raises :class:`CertificateViolation` if a scanned modulus lies below the
    analytic bound minus the Lipschitz slack, or below the analytic bound
    itself (which holds pointwise), or if ``phi_im`` is not negative.
    """
    if box_half_width < 4:
        raise ValueError("box_half_width must be >= 4")
    if not (0 < resolution <= 0.05):
        raise ValueError("resolution must lie in (0, 0.05]")
    psi_box = min(box_half_width, 6.0) if psi_box_half_width is None else psi_box_half_width
    psi_res = max(resolution, 0.05) if psi_resolution is None else psi_resolution
    if psi_box < 4 or not (0 < psi_res <= 0.05):
        raise ValueError("psi scan needs half width >= 4 and resolution in (0, 0.05]")

    d = cfg.d
    delta = convexity_margin()
    phi0 = min(d / 2.0, delta)
    psi0 = min(d, 1.0, delta)

    phi_min, im_max, B = _scan_phi(cfg, box_half_width, resolution)
    psi_min, Bp = _scan_psi(cfg, psi_box, psi_res)

    # |grad phi| <= 2d(|k| + 3|l|) + 3; |grad psi| <= sum of the two phi bounds.
    phi_slack = (8.0 * d * B + 3.0) * resolution
    psi_slack = (16.0 * d * Bp + 6.0) * psi_res

    cert = PhaseCertificate(
        d=d,
        delta=delta,
        phi0_analytic=phi0,
        psi0_analytic=psi0,
        phi_grid_min=phi_min,
        psi_grid_min=psi_min,
        box={"phi_half_width": B, "psi_half_width": Bp},
        resolution={"phi": resolution, "psi": psi_res},
        scan_slack={"phi": phi_slack, "psi": psi_slack},
        phi_im_max=im_max,
    )
    tol = 1e-12
    problems = []
    if phi_min < phi0 - phi_slack or phi_min < phi0 * (1 - tol):
        problems.append(f"|phi| grid minimum {phi_min:.6g} below bound {phi0:.6g}")
    if psi_min < psi0 - psi_slack or psi_min < psi0 * (1 - tol):
        problems.append(f"|psi| grid minimum {psi_min:.6g} below bound {psi0:.6g}")
    if im_max > -1e-12:
        problems.append(f"phi_im reaches {im_max:.3g} >= -1e-12")
    if problems:
        err = CertificateViolation("; ".join(problems))
        err.certificate = cert
        raise err
    return cert
