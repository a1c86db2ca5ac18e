"""Command-line drivers: ``vhkg simulate | phase-scan | decay | nf-check | duhamel-check``.

Exit codes: 0 success, 1 invalid input, 2 blow-up, 3 certificate violation,
4 tolerance breach.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import sys
import time
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import __version__, evolution, normal_form, symbols
from .evolution import RunConfig

EXIT_OK, EXIT_INVALID, EXIT_BLOWUP, EXIT_CERTIFICATE, EXIT_TOLERANCE = 0, 1, 2, 3, 4
SCHEMA_VERSION = "1"

DECAY_TOLERANCES = {"l1_hat": (-0.6, -0.4), "l2_x": (-0.35, -0.15), "linf_hat": (-0.6, 0.05)}
THETA_GROWTH_MAX = 4.0
NF_TOL = 1e-4
DUHAMEL_TOL = {"original": 1e-3, "integrated_by_parts": 5e-3}
# fractions of t_end used as normal-form checkpoints when the config names none
DEFAULT_CHECKPOINT_FRACTIONS = (0.0025, 0.0125, 0.05, 0.25, 0.975)


class InvalidInput(Exception):
    pass


def _canonical(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def _json_default(o):
    if isinstance(o, (np.floating, np.integer)):
        return o.item()
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, Path):
        return str(o)
    raise TypeError(f"cannot serialize {type(o).__name__}")


def _write_json(path: Path, payload: dict) -> Path:
    payload = {"schema_version": SCHEMA_VERSION, **payload}
    path.write_text(json.dumps(payload, indent=2, sort_keys=True, default=_json_default) + "\n")
    return path


def load_config(path) -> tuple[RunConfig, int, dict]:
    """Parse a JSON run config. Returns the config, its seed and the raw dict."""
    try:
        raw = json.loads(Path(path).read_text())
    except OSError as exc:
        raise InvalidInput(f"cannot read config {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise InvalidInput(f"config {path} is not valid JSON: {exc}") from exc
    if not isinstance(raw, dict):
        raise InvalidInput("config must be a JSON object")
    data = dict(raw)
    seed = data.pop("seed", 0)
    if isinstance(seed, bool) or not isinstance(seed, int):
        raise InvalidInput("config field seed must be an integer")
    try:
        run = RunConfig.from_dict(data)
    except (ValueError, TypeError, KeyError) as exc:
        raise InvalidInput(f"invalid config: {exc}") from exc
    return run, seed, raw


def config_hash(run: RunConfig, seed: int) -> str:
    payload = _canonical({"run": run.to_dict(), "seed": seed})
    return hashlib.sha256(payload.encode()).hexdigest()


class _Session:
    """Output directory bookkeeping shared by all commands."""

    def __init__(self, command: str, out_dir, run: RunConfig | None = None, seed: int = 0,
                 extra_hash: dict | None = None):
        self.command = command
        self.out = Path(out_dir)
        self.out.mkdir(parents=True, exist_ok=True)
        self.seed = seed
        if run is not None:
            self.hash = config_hash(run, seed)
        else:
            self.hash = hashlib.sha256(_canonical(extra_hash or {}).encode()).hexdigest()
        self.outputs: list[Path] = []
        self.t0 = time.perf_counter()
        self.extra: dict = {}

    def add(self, path: Path) -> Path:
        self.outputs.append(Path(path))
        return path

    def json(self, name: str, payload: dict) -> Path:
        return self.add(_write_json(self.out / name, payload))

    def finish(self, code: int) -> int:
        manifest = self.out / "manifest.json"
        rel = sorted({str(p.relative_to(self.out)) for p in self.outputs} | {"manifest.json"})
        _write_json(manifest, {
            "command": self.command,
            "config_hash": self.hash,
            "seed": self.seed,
            "tool_version": __version__,
            "outputs": rel,
            "wall_time": time.perf_counter() - self.t0,
            "exit_code": code,
            **self.extra,
        })
        return code


def _fail(msg: str) -> int:
    print(f"error: {msg}", file=sys.stderr)
    return EXIT_INVALID


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------

def cmd_simulate(config_path, out_dir) -> int:
    run, seed, _ = load_config(config_path)
    s = _Session("simulate", out_dir, run, seed)
    traj = evolution.simulate(run)
    s.add(evolution.write_norms_csv(traj, s.out / "norms.csv"))
    for p in evolution.write_frames_csv(traj, s.out / "frames"):
        s.add(p)
    s.extra.update(blown_up=traj.blown_up, blowup_time=traj.blowup_time,
                   completed_steps=traj.completed_steps)
    if traj.blown_up:
        print(f"blow-up at t = {traj.blowup_time}", file=sys.stderr)
        return s.finish(EXIT_BLOWUP)
    return s.finish(EXIT_OK)


def cmd_phase_scan(d: float, box: float, resolution: float, out,
                   psi_box: float | None = None, psi_resolution: float | None = None) -> int:
    params = {"d": d, "box": box, "resolution": resolution, "psi_box": psi_box,
              "psi_resolution": psi_resolution}
    try:
        cfg = symbols.SymbolConfig(float(d))
    except ValueError as exc:
        raise InvalidInput(str(exc)) from exc
    out = Path(out)
    out_dir, name = (out.parent, out.name) if out.suffix == ".json" else (out, "certificate.json")
    s = _Session("phase-scan", out_dir, extra_hash=params)
    try:
        cert = symbols.certify_phase_bounds(cfg, box, resolution, psi_box, psi_resolution)
        code = EXIT_OK
    except symbols.CertificateViolation as exc:
        cert, code = exc.certificate, EXIT_CERTIFICATE
        print(f"certificate violated: {exc}", file=sys.stderr)
    except ValueError as exc:
        raise InvalidInput(str(exc)) from exc
    s.json(name, {"certificate": cert.to_dict(), "valid": code == EXIT_OK})
    return s.finish(code)


def cmd_decay(config_path, out_dir) -> int:
    run, seed, _ = load_config(config_path)
    s = _Session("decay", out_dir, run, seed)
    traj = evolution.simulate(run)
    s.add(evolution.write_norms_csv(traj, s.out / "norms.csv"))
    if traj.blown_up:
        s.extra.update(blown_up=True, blowup_time=traj.blowup_time)
        s.json("decay.json", {"blown_up": True, "blowup_time": traj.blowup_time})
        print(f"blow-up at t = {traj.blowup_time}", file=sys.stderr)
        return s.finish(EXIT_BLOWUP)
    reports, ok = {}, True
    for nid, (lo, hi) in DECAY_TOLERANCES.items():
        try:
            rep = evolution.fit_decay(traj, nid)
        except ValueError as exc:
            raise InvalidInput(str(exc)) from exc
        passed = lo <= rep.fitted_exponent <= hi
        ok &= passed
        reports[nid] = {**rep.to_dict(), "tolerance": [lo, hi], "pass": passed}
    theta = evolution.theta_template(traj)
    theta_ok = bool(theta[-1] <= THETA_GROWTH_MAX * theta[0])
    s.json("decay.json", {
        "exponents": reports,
        "theta_sup": float(theta[-1]),
        "theta0": float(theta[0]),
        "theta_ratio_max": THETA_GROWTH_MAX,
        "theta_pass": theta_ok,
        "pass": bool(ok and theta_ok),
    })
    return s.finish(EXIT_OK if ok and theta_ok else EXIT_TOLERANCE)


def _default_checkpoints(run: RunConfig) -> tuple:
    steps = {min(max(int(round(f * run.t_end / run.dt)), 1), run.n_steps - 1)
             for f in DEFAULT_CHECKPOINT_FRACTIONS}
    return tuple(n * run.dt for n in sorted(steps))


def cmd_nf_check(config_path, out_dir, refine: bool = True, tol: float = NF_TOL) -> int:
    run, seed, _ = load_config(config_path)
    if not run.dispersion_on:
        raise InvalidInput("nf-check needs dispersion_on = true")
    if run.n_steps < 2:
        raise InvalidInput("nf-check needs at least two steps")
    if not run.checkpoints:
        run = replace(run, checkpoints=_default_checkpoints(run))
    s = _Session("nf-check", out_dir, run, seed)
    traj = evolution.simulate(run)
    if traj.blown_up:
        s.extra.update(blown_up=True, blowup_time=traj.blowup_time)
        print(f"blow-up at t = {traj.blowup_time}", file=sys.stderr)
        return s.finish(EXIT_BLOWUP)
    report = normal_form.normal_form_residual(traj)
    payload = {"coarse": report.to_dict(), "tolerance": tol}
    if refine:
        fine_run = replace(run, dt=run.dt / 2, store_every=2 * run.store_every)
        fine = normal_form.normal_form_residual(evolution.simulate(fine_run))
        report = normal_form.residual_convergence(report, fine)
        payload.update(fine=fine.to_dict(), convergence_order=report.convergence_order,
                       median_reduction=(report.median / fine.median if fine.median > 0 else None))
    t_worst, r_worst = report.worst
    ok = bool(r_worst <= tol)
    payload.update(worst_time=t_worst, worst_residual=r_worst, **{"pass": ok})
    s.json("nf_residual.json", payload)
    if not ok:
        print(f"normal-form residual {r_worst:.3e} exceeds {tol:.1e} at t = {t_worst}", file=sys.stderr)
    return s.finish(EXIT_OK if ok else EXIT_TOLERANCE)


def cmd_duhamel_check(config_path, out_dir, form: str = "both", refine: bool = True) -> int:
    run, seed, _ = load_config(config_path)
    forms = ["original", "integrated_by_parts"] if form == "both" else [form]
    s = _Session("duhamel-check", out_dir, run, seed)
    traj = evolution.simulate(run)
    if traj.blown_up:
        s.extra.update(blown_up=True, blowup_time=traj.blowup_time)
        print(f"blow-up at t = {traj.blowup_time}", file=sys.stderr)
        return s.finish(EXIT_BLOWUP)
    fine_traj = evolution.simulate(replace(run, dt=run.dt / 2)) if refine else None
    results, ok = {}, True
    for f in forms:
        try:
            rep = evolution.duhamel_residual(traj, f)
        except ValueError as exc:
            raise InvalidInput(str(exc)) from exc
        entry = rep.to_dict()
        t_worst, r_worst = rep.worst
        entry.update(tolerance=DUHAMEL_TOL[f], worst_time=t_worst, worst_residual=r_worst)
        if fine_traj is not None:
            fine = evolution.duhamel_residual(fine_traj, f)
            entry["refined"] = fine.to_dict()
            entry["improvement"] = (r_worst / fine.worst[1]) if fine.worst[1] > 0 else None
        passed = bool(r_worst <= DUHAMEL_TOL[f])
        entry["pass"] = passed
        if not passed:
            print(f"{f} Duhamel residual {r_worst:.3e} exceeds {DUHAMEL_TOL[f]:.1e} at t = {t_worst}",
                  file=sys.stderr)
        ok &= passed
        results[f] = entry
    s.json("duhamel_residual.json", {"forms": results, "pass": ok})
    return s.finish(EXIT_OK if ok else EXIT_TOLERANCE)


# ---------------------------------------------------------------------------
# Entry point
# ---------------------------------------------------------------------------

class _Parser(argparse.ArgumentParser):
    # argparse exits with 2 on bad usage, which would read as a blow-up
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_INVALID, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="vhkg", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    for name in ("simulate", "decay"):
        sp = sub.add_parser(name)
        sp.add_argument("--config", required=True)
        sp.add_argument("--out", required=True)

    sp = sub.add_parser("phase-scan")
    sp.add_argument("--config", help="JSON with d, box, resolution (overrides flags)")
    sp.add_argument("--d", type=float)
    sp.add_argument("--box", type=float, default=8.0)
    sp.add_argument("--resolution", type=float, default=0.01)
    sp.add_argument("--psi-box", type=float)
    sp.add_argument("--psi-resolution", type=float)
    sp.add_argument("--out", required=True)

    sp = sub.add_parser("nf-check")
    sp.add_argument("--config", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--tol", type=float, default=NF_TOL)
    sp.add_argument("--no-refine", action="store_true", help="skip the dt/2 convergence run")

    sp = sub.add_parser("duhamel-check")
    sp.add_argument("--config", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--form", choices=["original", "integrated_by_parts", "both"], default="both")
    sp.add_argument("--no-refine", action="store_true")
    return p


def _phase_scan_args(args) -> dict:
    params = {"d": args.d, "box": args.box, "resolution": args.resolution,
              "psi_box": args.psi_box, "psi_resolution": args.psi_resolution}
    if args.config:
        try:
            data = json.loads(Path(args.config).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise InvalidInput(f"cannot read config {args.config}: {exc}") from exc
        unknown = set(data) - set(params)
        if unknown:
            raise InvalidInput(f"unknown config field(s): {', '.join(sorted(unknown))}")
        params.update(data)
    if params["d"] is None:
        raise InvalidInput("phase-scan needs --d")
    return params


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.command == "simulate":
            return cmd_simulate(args.config, args.out)
        if args.command == "decay":
            return cmd_decay(args.config, args.out)
        if args.command == "phase-scan":
            return cmd_phase_scan(out=args.out, **_phase_scan_args(args))
        if args.command == "nf-check":
            return cmd_nf_check(args.config, args.out, refine=not args.no_refine, tol=args.tol)
        return cmd_duhamel_check(args.config, args.out, args.form, refine=not args.no_refine)
    except InvalidInput as exc:
        return _fail(str(exc))


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
