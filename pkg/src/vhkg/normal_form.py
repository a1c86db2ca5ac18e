"""Normal-form change of variables and its residual check.

With ``A2_hat = B_hat / phi`` the commutator ``[lambda, A2]`` equals ``-B``
(the Fourier multiplier of ``[lambda, A]`` is ``-phi * A_hat``), so the
transform that removes the quadratic term is

    w = u - A2(u, u) + A3(u, u, u),

and ``w`` then satisfies ``w_t - lambda w = Q(u)`` with the quartic ``Q``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import nonlinear_ops
from .evolution import BlownUpError, Trajectory, linear_symbol
from .spectral_core import SpectralField, trapezoid_weights
from .symbols import KernelSpec, SymbolConfig

__all__ = [
    "NormalFormResidualReport",
    "to_normal_form",
    "lambda_commutator",
    "normal_form_residual",
    "residual_convergence",
]

RESIDUAL_METHODS = ("integrating_factor", "centered")


@dataclass
class NormalFormResidualReport:
    times: list
    residual_l2: list
    dt_used: float
    convergence_order: float | None = None
    method: str = "integrating_factor"

    @property
    def worst(self) -> tuple[float, float]:
        i = int(np.argmax(self.residual_l2))
        return self.times[i], self.residual_l2[i]

    @property
    def median(self) -> float:
        return float(np.median(self.residual_l2))

    def to_dict(self) -> dict:
        return {
            "times": list(self.times),
            "residual_l2": list(self.residual_l2),
            "dt_used": self.dt_used,
            "convergence_order": self.convergence_order,
            "method": self.method,
        }


def to_normal_form(cfg: SymbolConfig, kernel: KernelSpec, u: SpectralField,
                   support_tol: float = 1e-16) -> SpectralField:
    """``w_hat = u_hat - F(A2(u, u)) + F(A3(u, u, u))``."""
    a2 = nonlinear_ops.apply_A2(cfg, kernel, u, u)
    a3 = nonlinear_ops.apply_A3(cfg, kernel, u, u, u, support_tol)
    return u - a2 + a3


def lambda_commutator(cfg: SymbolConfig, op, *fields: SpectralField) -> SpectralField:
    """``lambda op(u1, ..) - sum_i op(.., lambda u_i, ..)`` for a multilinear ``op``."""
    lam = linear_symbol(cfg, fields[0].grid)
    out = lam * op(*fields).values
    for i, f in enumerate(fields):
        args = list(fields)
        args[i] = f.with_values(lam * f.values)
        out = out - op(*args).values
    return fields[0].with_values(out)


def _triples(traj: Trajectory, checkpoints):
    """Frame index triples ``(i-1, i, i+1)`` on equal spacing."""
    run = traj.config
    steps = traj.steps
    if checkpoints is None and run.checkpoints:
        checkpoints = run.checkpoints
    if checkpoints is not None:
        centers = []
        for t in checkpoints:
            n = int(round(t / run.dt))
            i = np.searchsorted(steps, n)
            if i == 0 or i >= len(steps) - 1 or steps[i] != n:
                raise ValueError(f"checkpoint {t} has no stored neighbours")
            centers.append(i)
    else:
        centers = range(1, len(steps) - 1)
    out = []
    for i in centers:
        a, b = steps[i] - steps[i - 1], steps[i + 1] - steps[i]
        if a == b:
            out.append((i, int(a)))
        elif checkpoints is not None:
            raise ValueError(f"frames around t = {traj.times[i]} are not equally spaced")
    return out


def normal_form_residual(traj: Trajectory, cfg: SymbolConfig | None = None,
                         kernel: KernelSpec | None = None, *, checkpoints=None,
                         method: str = "integrating_factor",
                         support_tol: float = 1e-16) -> NormalFormResidualReport:
    """Relative residual of ``w_t - lambda w = Q(u)`` on stored frame triples.

    ``method="integrating_factor"`` differences ``exp(-t lambda) w`` centrally,

        r = (e^{-h lambda} w(t+h) - e^{h lambda} w(t-h)) / (2h) - Q(u(t)),

    which removes the stiff linear part from the truncation error;
    ``method="centered"`` is the plain ``(w(t+h) - w(t-h)) / (2h) - lambda w(t)``.
    Residuals are scaled by ``max(||w(t)||_2, 1e-16 ||w(0)||_2)``.
    """
    if method not in RESIDUAL_METHODS:
        raise ValueError(f"method must be one of {RESIDUAL_METHODS}")
    if traj.blown_up:
        raise BlownUpError(f"trajectory blew up at t = {traj.blowup_time}")
    run = traj.config
    if not run.dispersion_on:
        raise ValueError("the normal form is built for the dispersive symbol")
    cfg = cfg or run.cfg
    kernel = kernel or run.kernel
    if len(traj.frames) < 3:
        raise ValueError("need at least three stored frames")
    grid = run.grid
    lam = linear_symbol(cfg, grid)
    wts = trapezoid_weights(grid)

    def nf(f):
        return to_normal_form(cfg, kernel, f, support_tol).values

    def l2(v):
        return float(np.sqrt(wts @ np.abs(v) ** 2))

    floor = max(1e-16 * l2(nf(traj.frames[0])), 1e-300)
    times, res = [], []
    triples = _triples(traj, checkpoints)
    if not triples:
        raise ValueError("no equally spaced frame triples in the trajectory")
    for i, gap in triples:
        h = gap * run.dt
        wm, w0, wp = nf(traj.frames[i - 1]), nf(traj.frames[i]), nf(traj.frames[i + 1])
        q = nonlinear_ops.apply_Q(cfg, kernel, traj.frames[i], support_tol).values
        if method == "integrating_factor":
            r = (np.exp(-h * lam) * wp - np.exp(h * lam) * wm) / (2 * h) - q
        else:
            r = (wp - wm) / (2 * h) - lam * w0 - q
        times.append(float(traj.times[i]))
        res.append(l2(r) / max(l2(w0), floor))
    hs = {gap for _, gap in triples}
    dt_used = run.dt * (hs.pop() if len(hs) == 1 else min(hs))
    return NormalFormResidualReport(times, res, dt_used, None, method)


def residual_convergence(coarse: NormalFormResidualReport,
                         fine: NormalFormResidualReport) -> NormalFormResidualReport:
    """Attach ``log2`` of the median-residual ratio between a ``dt`` and a ``dt/2`` run."""
    if not np.isclose(coarse.dt_used, 2 * fine.dt_used, rtol=1e-9):
        raise ValueError("fine report must use half the step of the coarse one")
    mc, mf = coarse.median, fine.median
    order = float("inf") if mf == 0 and mc > 0 else (0.0 if mf == 0 else float(np.log2(mc / mf)))
    return NormalFormResidualReport(coarse.times, coarse.residual_l2, coarse.dt_used, order, coarse.method)
