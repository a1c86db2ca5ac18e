"""Time integration, trajectories, decay fits and Duhamel reconstructions.

The state is the Fourier transform ``u_hat`` on a :class:`FrequencyGrid`. The
linear part is diagonal, so the integrator is an exponential Runge-Kutta
scheme of order two (ETD2 in the Cox-Matthews form) with the exact semigroup;
only the quadratic term is treated explicitly.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import nonlinear_ops, symbols
from .spectral_core import (
    FrequencyGrid,
    NormTriple,
    SpectralField,
    _norms_unchecked,
    convolve_fft,
    gaussian_profile,
    norms,
    trapezoid_weights,
)
from .symbols import ConstantKernel, KernelSpec, SymbolConfig

__all__ = [
    "RunConfig",
    "Trajectory",
    "DecayReport",
    "DuhamelReport",
    "NORM_IDS",
    "linear_symbol",
    "linear_propagate",
    "phi1",
    "phi2",
    "step_etd",
    "simulate",
    "theta_template",
    "fit_decay",
    "check_linear_bound",
    "intersection_norm",
    "v_transform",
    "duhamel_residual",
    "write_norms_csv",
    "write_frames_csv",
]

SERIES_RADIUS = 1e-2
FFT_MIN_N = 257
MAX_DUHAMEL_SPACING = 0.1
DUHAMEL_MAX_N = 129
NORM_IDS = ("l1_hat", "l2_hat", "linf_hat", "l2_x", "linf_x")


class BlownUpError(RuntimeError):
    """The operation needs a trajectory that completed without blow-up."""


@dataclass(frozen=True)
class RunConfig:
    """Everything that determines a run.

    ``checkpoints`` lists times around which three consecutive steps are
    stored regardless of ``store_every``; the normal-form residual is
    evaluated there without keeping every frame of a long run.
    """

    cfg: SymbolConfig
    kernel: KernelSpec
    grid: FrequencyGrid
    dt: float
    t_end: float
    store_every: int = 1
    dispersion_on: bool = True
    blowup_factor: float = 1e3
    eta: float = 0.05
    checkpoints: tuple = ()

    def __post_init__(self):
        if not (np.isfinite(self.dt) and self.dt > 0):
            raise ValueError(f"dt must be positive, got {self.dt!r}")
        if not (np.isfinite(self.t_end) and self.t_end >= self.dt):
            raise ValueError(f"t_end must be finite and >= dt, got {self.t_end!r}")
        if isinstance(self.store_every, bool) or int(self.store_every) != self.store_every or self.store_every < 1:
            raise ValueError(f"store_every must be an integer >= 1, got {self.store_every!r}")
        if not (np.isfinite(self.blowup_factor) and self.blowup_factor > 1):
            raise ValueError(f"blowup_factor must exceed 1, got {self.blowup_factor!r}")
        if not np.isfinite(self.eta):
            raise ValueError(f"eta must be finite, got {self.eta!r}")
        cps = tuple(float(t) for t in self.checkpoints)
        for t in cps:
            if not (self.dt <= t <= self.t_end - self.dt):
                raise ValueError(f"checkpoint {t} must lie in [dt, t_end - dt]")
        object.__setattr__(self, "store_every", int(self.store_every))
        object.__setattr__(self, "checkpoints", cps)

    @property
    def n_steps(self) -> int:
        """Number of steps; the run ends at ``n_steps * dt`` (t_end up to rounding)."""
        return max(1, int(round(self.t_end / self.dt)))

    def checkpoint_steps(self) -> list[int]:
        return sorted({int(round(t / self.dt)) for t in self.checkpoints})

    def to_dict(self) -> dict:
        return {
            "d": float(self.cfg.d),
            "kernel": self.kernel.to_dict(),
            "K": float(self.grid.K),
            "N": int(self.grid.N),
            "dt": float(self.dt),
            "t_end": float(self.t_end),
            "store_every": self.store_every,
            "dispersion_on": bool(self.dispersion_on),
            "blowup_factor": float(self.blowup_factor),
            "eta": float(self.eta),
            "checkpoints": list(self.checkpoints),
        }

    @classmethod
    def from_dict(cls, data: dict) -> "RunConfig":
        known = {"d", "kernel", "K", "N", "dt", "t_end", "store_every", "dispersion_on",
                 "blowup_factor", "eta", "checkpoints"}
        extra = set(data) - known
        if extra:
            raise ValueError(f"unknown config field(s): {', '.join(sorted(extra))}")
        for key in ("d", "K", "N", "dt", "t_end"):
            if key not in data:
                raise ValueError(f"missing config field: {key}")
        kw = {k: data[k] for k in ("dt", "t_end", "store_every", "dispersion_on",
                                   "blowup_factor", "eta") if k in data}
        if "checkpoints" in data:
            kw["checkpoints"] = tuple(data["checkpoints"])
        kernel = symbols.kernel_from_dict(data["kernel"]) if "kernel" in data else ConstantKernel()
        N = data["N"]
        if isinstance(N, float) and N.is_integer():
            N = int(N)
        return cls(cfg=SymbolConfig(float(data["d"])), kernel=kernel,
                   grid=FrequencyGrid(float(data["K"]), N), **kw)


@dataclass(eq=False)
class Trajectory:
    """Stored frames plus the per-step norm history of one run.

    ``norm_array[n]`` holds ``(l1, l2, linf)`` of the state after ``n`` steps;
    ``steps[i]`` is the step index of ``frames[i]``.
    """

    config: RunConfig
    times: np.ndarray
    frames: list
    norm_array: np.ndarray
    steps: np.ndarray
    blown_up: bool = False
    blowup_time: float | None = None

    @property
    def norm_history(self) -> list[NormTriple]:
        return [NormTriple(*map(float, row)) for row in self.norm_array]

    @property
    def step_times(self) -> np.ndarray:
        return np.arange(len(self.norm_array)) * self.config.dt

    @property
    def completed_steps(self) -> int:
        return len(self.norm_array) - 1

    def frame_at_step(self, n: int) -> SpectralField:
        i = np.searchsorted(self.steps, n)
        if i == len(self.steps) or self.steps[i] != n:
            raise KeyError(f"step {n} was not stored")
        return self.frames[i]

    def regular_indices(self) -> np.ndarray:
        """Indices of frames on the ``store_every`` lattice (uniform spacing)."""
        return np.flatnonzero(self.steps % self.config.store_every == 0)


@dataclass
class DecayReport:
    norm_id: str
    fitted_exponent: float
    fit_window: tuple
    r_squared: float
    theta_sup: float
    e0: float
    n_samples: int = 0

    def to_dict(self) -> dict:
        return {
            "norm_id": self.norm_id,
            "fitted_exponent": self.fitted_exponent,
            "fit_window": list(self.fit_window),
            "r_squared": self.r_squared,
            "theta_sup": self.theta_sup,
            "e0": self.e0,
            "n_samples": self.n_samples,
        }


@dataclass
class DuhamelReport:
    form: str
    times: list
    residual: list
    store_spacing: float

    @property
    def worst(self) -> tuple[float, float]:
        i = int(np.argmax(self.residual))
        return self.times[i], self.residual[i]

    def to_dict(self) -> dict:
        return {"form": self.form, "times": list(self.times), "residual": list(self.residual),
                "store_spacing": self.store_spacing}


# ---------------------------------------------------------------------------
# Linear part and the one-step scheme
# ---------------------------------------------------------------------------

def linear_symbol(cfg: SymbolConfig, grid: FrequencyGrid, dispersion_on: bool = True) -> np.ndarray:
    k = grid.k
    if dispersion_on:
        return symbols.lambda_hat(cfg, k)
    return (-cfg.d * k * k).astype(complex)


def linear_propagate(cfg: SymbolConfig, u: SpectralField, t: float,
                     dispersion_on: bool = True) -> SpectralField:
    """Exact semigroup: multiply by ``exp(t * lambda_hat(k))``."""
    if not t >= 0:
        raise ValueError(f"propagation time must be nonnegative, got {t!r}")
    return u.with_values(np.exp(t * linear_symbol(cfg, u.grid, dispersion_on)) * u.values)


# Taylor coefficients 1/(n+1)! and 1/(n+2)! for the small-|z| branch.
_PHI1_SERIES = [1.0 / math.factorial(n + 1) for n in range(8)]
_PHI2_SERIES = [1.0 / math.factorial(n + 2) for n in range(8)]


def _series(coeffs, z):
    out = np.zeros_like(z)
    for c in reversed(coeffs):
        out = out * z + c
    return out


def phi1(z):
    """``(e^z - 1) / z`` with a Taylor branch for ``|z| < 1e-2``."""
    z = np.asarray(z, dtype=complex)
    small = np.abs(z) < SERIES_RADIUS
    zs = np.where(small, 1.0, z)
    return np.where(small, _series(_PHI1_SERIES, z), np.expm1(zs) / zs)


def phi2(z):
    """``(e^z - 1 - z) / z^2`` with a Taylor branch for ``|z| < 1e-2``."""
    z = np.asarray(z, dtype=complex)
    small = np.abs(z) < SERIES_RADIUS
    zs = np.where(small, 1.0, z)
    return np.where(small, _series(_PHI2_SERIES, z), (np.expm1(zs) - zs) / (zs * zs))


class _ETD2:
    """Cached coefficients of the exponential RK2 step for one ``(grid, dt)``."""

    def __init__(self, cfg: SymbolConfig, kernel: KernelSpec, grid: FrequencyGrid,
                 dt: float, dispersion_on: bool):
        z = dt * linear_symbol(cfg, grid, dispersion_on)
        self.kernel, self.dt = kernel, dt
        self.E = np.exp(z)
        p1, p2 = phi1(z), phi2(z)
        self.c_stage = dt * p1
        self.c_first = dt * (p1 - p2)
        self.c_second = dt * p2

    def nonlinear(self, u: SpectralField) -> np.ndarray:
        # Decayed tails are subnormal and make the direct sum crawl on
        # fine grids; the padded FFT product agrees with it to ~1e-15.
        if self.kernel.is_constant and u.grid.N >= FFT_MIN_N:
            return self.kernel.value * convolve_fft(u, u).values
        return nonlinear_ops.apply_B(self.kernel, u).values

    def __call__(self, u: SpectralField) -> SpectralField:
        n0 = self.nonlinear(u)
        eu = self.E * u.values
        stage = u.with_values(eu + self.c_stage * n0)
        if not stage.is_finite():
            return stage
        return u.with_values(eu + self.c_first * n0 + self.c_second * self.nonlinear(stage))


def step_etd(cfg: SymbolConfig, kernel: KernelSpec, u: SpectralField, dt: float,
             dispersion_on: bool = True) -> SpectralField:
    """One exponential RK2 step of ``u_t = lambda_hat u + B(u, u)``.

    A non-finite result is returned as is; callers treat it as blow-up.
    """
    if not (np.isfinite(dt) and dt > 0):
        raise ValueError(f"dt must be positive, got {dt!r}")
    if not u.is_finite():
        raise nonlinear_ops.NonFiniteFieldError("step input has non-finite entries")
    return _ETD2(cfg, kernel, u.grid, dt, dispersion_on)(u)


# ---------------------------------------------------------------------------
# Runs
# ---------------------------------------------------------------------------

def simulate(run: RunConfig, u0: SpectralField | None = None) -> Trajectory:
    """March from Gaussian data of amplitude ``eta`` (or ``u0``) to ``t_end``.

    Stops early when ``||u_hat||_1`` reaches ``blowup_factor`` times its
    initial value or the state stops being finite.
    """
    grid = run.grid
    u = gaussian_profile(run.eta, grid) if u0 is None else u0
    if u.grid != grid:
        raise ValueError("initial data must live on the run grid")
    stepper = _ETD2(run.cfg, run.kernel, grid, run.dt, run.dispersion_on)
    weights = trapezoid_weights(grid)
    n_steps = run.n_steps

    keep = set()
    for n in run.checkpoint_steps():
        keep.update((n - 1, n, n + 1))

    history = np.empty((n_steps + 1, 3))
    history[0] = _norms_unchecked(u.values, weights)
    threshold = run.blowup_factor * history[0, 0]
    frames, steps = [u], [0]
    blown_up, blowup_time = False, None

    for n in range(1, n_steps + 1):
        u = stepper(u)
        history[n] = _norms_unchecked(u.values, weights)
        finite = u.is_finite()
        if not finite or (threshold > 0 and history[n, 0] >= threshold):
            blown_up, blowup_time = True, n * run.dt
            history = history[:n + 1]
            if finite:
                frames.append(u)
                steps.append(n)
            break
        if n % run.store_every == 0 or n in keep or n == n_steps:
            frames.append(u)
            steps.append(n)

    steps = np.asarray(steps, dtype=int)
    return Trajectory(run, steps * run.dt, frames, history, steps, blown_up, blowup_time)


def _require_complete(traj: Trajectory) -> None:
    if traj.blown_up:
        raise BlownUpError(f"trajectory blew up at t = {traj.blowup_time}")


def theta_template(traj: Trajectory) -> np.ndarray:
    """Running sup of ``||u_hat(s)||_inf + (1 + s)^(1/2) ||u_hat(s)||_1`` per step."""
    _require_complete(traj)
    t = traj.step_times
    inst = traj.norm_array[:, 2] + np.sqrt(1.0 + t) * traj.norm_array[:, 0]
    return np.maximum.accumulate(inst)


def _norm_series(traj: Trajectory, norm_id: str) -> np.ndarray:
    h = traj.norm_array
    series = {
        "l1_hat": lambda: h[:, 0],
        "l2_hat": lambda: h[:, 1],
        "linf_hat": lambda: h[:, 2],
        # Plancherel with the 1/sqrt(2 pi) transform convention
        "l2_x": lambda: h[:, 1] / np.sqrt(2.0 * np.pi),
        # sup_x |u| <= ||u_hat||_1 / (2 pi): an upper bound, not the sup itself
        "linf_x": lambda: h[:, 0] / (2.0 * np.pi),
    }
    if norm_id not in series:
        raise ValueError(f"norm_id must be one of {NORM_IDS}")
    return series[norm_id]()


def fit_decay(traj: Trajectory, norm_id: str, window: tuple | None = None,
              min_samples: int = 20) -> DecayReport:
    """Least-squares slope of ``log(norm)`` against ``log(1 + t)`` over ``window``.

    The default window is the last decade ``[t_end / 10, t_end]``.
    """
    _require_complete(traj)
    t = traj.step_times
    t_end = t[-1]
    lo, hi = (t_end / 10.0, t_end) if window is None else map(float, window)
    if not (0 <= lo < hi <= t_end * (1 + 1e-12)):
        raise ValueError(f"fit window ({lo}, {hi}) is not inside the run [0, {t_end}]")
    y = _norm_series(traj, norm_id)
    sel = (t >= lo - 1e-12) & (t <= hi + 1e-12)
    if sel.sum() < min_samples:
        raise ValueError(f"only {int(sel.sum())} samples in the fit window, need {min_samples}")
    if np.any(y[sel] <= 0):
        raise ValueError("norm vanishes inside the fit window; no decay rate to fit")
    x, ly = np.log1p(t[sel]), np.log(y[sel])
    slope, icept = np.polyfit(x, ly, 1)
    ss_res = float(np.sum((ly - (slope * x + icept)) ** 2))
    ss_tot = float(np.sum((ly - ly.mean()) ** 2))
    r2 = 1.0 if ss_tot == 0.0 else min(max(1.0 - ss_res / ss_tot, 0.0), 1.0)
    e0 = float(traj.norm_array[0, 0] + traj.norm_array[0, 2])
    return DecayReport(norm_id, float(slope), (lo, hi), r2, float(theta_template(traj)[-1]), e0,
                       int(sel.sum()))


def _parse_p(p) -> float:
    return nonlinear_ops._parse_p(p)


def intersection_norm(u: SpectralField, p) -> float:
    """``||u||_p + ||u||_inf`` for finite ``p``, ``||u||_inf`` for ``p = inf``."""
    p = _parse_p(p)
    nt = norms(u)
    if np.isinf(p):
        return nt.linf
    return (nt.l1 if p == 1 else nt.l2) + nt.linf


def check_linear_bound(cfg: SymbolConfig, u0: SpectralField, p, times) -> float:
    """``max_t (1 + t)^(1/(2p)) ||e^{t lambda_hat} u0||_p / ||u0||_{L^p cap L^inf}``."""
    p = _parse_p(p)
    times = np.asarray(list(times), dtype=float)
    if times.size == 0 or not np.all(np.isfinite(times)) or np.any(times < 0):
        raise ValueError("times must be a nonempty list of finite nonnegative values")
    den = intersection_norm(u0, p)
    if den == 0.0:
        return 0.0
    expo = 0.0 if np.isinf(p) else 1.0 / (2.0 * p)
    lam = linear_symbol(cfg, u0.grid)
    w = trapezoid_weights(u0.grid)
    best = 0.0
    for t in times:
        a = np.abs(np.exp(t * lam) * u0.values)
        if np.isinf(p):
            val = a.max()
        elif p == 1:
            val = w @ a
        else:
            val = np.sqrt(w @ (a * a))
        best = max(best, (1.0 + t) ** expo * val / den)
    return float(best)


def v_transform(traj: Trajectory) -> list[SpectralField]:
    """``v(t, k) = exp(i <k> t) u_hat(t, k)`` for every stored frame."""
    br = symbols.bracket(traj.config.grid.k)
    return [f.with_values(np.exp(1j * br * t) * f.values) for t, f in zip(traj.times, traj.frames)]


# ---------------------------------------------------------------------------
# Duhamel reconstructions
# ---------------------------------------------------------------------------

class QuarticDuhamelBlock(nonlinear_ops.TrilinearBlock):
    """``(2 / phi(k, l) + 1 / phi(k, m)) / psi(k, l, m)``.

    Kernel of the quartic time integral, tested against
    ``u(k-l) u(l-m) S(m)`` with ``S = u * u``: the time derivative lands once on
    each of the three cubic slots and is moved to the last one.
    """

    def values(self, ph):
        return (2.0 * self._inv(ph.phi_kl) + self._inv(ph.phi_km)) * self._inv(ph.psi)


def _l2(values: np.ndarray, w: np.ndarray) -> float:
    return float(np.sqrt(w @ np.abs(values) ** 2))


def duhamel_residual(traj: Trajectory, form: str = "original",
                     checkpoints=None) -> DuhamelReport:
    """Rebuild ``v(t)`` from a Duhamel identity and compare with the run.

    ``form="original"`` integrates the quadratic term directly;
    ``form="integrated_by_parts"`` uses the boundary terms at ``0`` and ``t``
    plus the quartic time integral. Time integrals use the composite
    trapezoid rule on the regularly stored frames. ``checkpoints`` default to
    the last regular frame.
    """
    if form not in ("original", "integrated_by_parts"):
        raise ValueError("form must be 'original' or 'integrated_by_parts'")
    _require_complete(traj)
    run = traj.config
    if not run.kernel.is_constant:
        raise ValueError("Duhamel reconstruction needs a constant kernel")
    if not run.dispersion_on:
        raise ValueError("Duhamel reconstruction is written for the dispersive symbol")
    grid, cfg, c = run.grid, run.cfg, complex(run.kernel.value)
    if form == "integrated_by_parts" and grid.N > DUHAMEL_MAX_N:
        raise ValueError(f"quartic time integral limited to N <= {DUHAMEL_MAX_N}")
    spacing = run.dt * run.store_every
    if spacing > MAX_DUHAMEL_SPACING + 1e-12:
        raise ValueError(f"store spacing {spacing} exceeds {MAX_DUHAMEL_SPACING}")

    idx = traj.regular_indices()
    s = traj.times[idx]
    frames = [traj.frames[i] for i in idx]
    if checkpoints is None:
        checkpoints = [s[-1]]
    cp_pos = []
    for t in checkpoints:
        j = int(np.argmin(np.abs(s - t)))
        if abs(s[j] - t) > 1e-9 * max(1.0, t) or j == 0:
            raise ValueError(f"checkpoint {t} is not a positive regular stored time")
        cp_pos.append(j)

    k = grid.k
    dk2 = cfg.d * k * k
    br = symbols.bracket(k)
    w = trapezoid_weights(grid)
    u0 = frames[0]
    last = max(cp_pos)

    if form == "original":
        integrand = [c * nonlinear_ops.convolve(f, f).values for f in frames[:last + 1]]
    else:
        block = QuarticDuhamelBlock(cfg, run.kernel, grid)
        integrand = [2.0 * c ** 3 * nonlinear_ops.trilinear(block, f, f, nonlinear_ops.convolve(f, f)).values
                     for f in frames[:last + 1]]
        unit = ConstantKernel(c)

        def boundary(f):
            return (nonlinear_ops.apply_A2(cfg, unit, f, f).values
                    - nonlinear_ops.apply_A3_symmetrized(cfg, unit, f).values)

        b0 = boundary(u0)

    times, res = [], []
    for j in cp_pos:
        t = s[j]
        damp = np.exp(-dk2 * t)
        # e^{-d k^2 (t - s)} e^{i <k> s}, i.e. e^{-d k^2 t} e^{-lambda_hat s}
        kern = np.exp(-dk2[None, :] * (t - s[:j + 1, None]) + 1j * br[None, :] * s[:j + 1, None])
        rec = damp * u0.values + np.trapezoid(kern * np.asarray(integrand[:j + 1]), s[:j + 1], axis=0)
        v_t = np.exp(1j * br * t) * frames[j].values
        if form == "integrated_by_parts":
            rec = rec + np.exp(1j * br * t) * boundary(frames[j]) - damp * b0
        den = _l2(v_t, w)
        times.append(float(t))
        res.append(_l2(rec - v_t, w) / den if den > 0 else _l2(rec - v_t, w))
    return DuhamelReport(form, times, res, spacing)


# ---------------------------------------------------------------------------
# CSV export
# ---------------------------------------------------------------------------

def _fmt(x: float) -> str:
    return "%.17g" % x


def write_norms_csv(traj: Trajectory, path) -> Path:
    """``t,l1_hat,l2_hat,linf_hat,theta`` for every completed step.

    ``theta`` is left empty on blown-up runs, where the template is undefined.
    """
    path = Path(path)
    theta = None if traj.blown_up else theta_template(traj)
    with path.open("w", newline="") as fh:
        wr = csv.writer(fh, lineterminator="\n")
        wr.writerow(["t", "l1_hat", "l2_hat", "linf_hat", "theta"])
        for n, (t, row) in enumerate(zip(traj.step_times, traj.norm_array)):
            wr.writerow([_fmt(t), *map(_fmt, row), "" if theta is None else _fmt(theta[n])])
    return path


def write_frames_csv(traj: Trajectory, directory) -> list[Path]:
    """One ``k,re,im`` file per stored frame, named by step index."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    k = traj.config.grid.k
    out = []
    for n, f in zip(traj.steps, traj.frames):
        p = directory / f"frame_{int(n):07d}.csv"
        with p.open("w", newline="") as fh:
            wr = csv.writer(fh, lineterminator="\n")
            wr.writerow(["k", "re", "im"])
            for kj, v in zip(k, f.values):
                wr.writerow([_fmt(kj), _fmt(v.real), _fmt(v.imag)])
        out.append(p)
    return out
