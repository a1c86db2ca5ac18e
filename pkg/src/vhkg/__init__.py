"""Pseudo-spectral lab for the viscous half Klein-Gordon equation

    u_t - lambda(d_x) u = B(u, u),   lambda_hat(k) = -d k^2 - i sqrt(1 + k^2).
"""

__version__ = "0.1.0"

from .spectral_core import FrequencyGrid, NormTriple, SpectralField, make_grid  # noqa: E402
from .symbols import ConstantKernel, SymbolConfig, TabulatedKernel  # noqa: E402

__all__ = [
    "__version__",
    "FrequencyGrid",
    "NormTriple",
    "SpectralField",
    "make_grid",
    "ConstantKernel",
    "SymbolConfig",
    "TabulatedKernel",
]
