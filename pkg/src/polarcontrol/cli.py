"""Command-line harness.

Every subcommand reads a flat ``key = value`` config file, writes its
artifacts plus ``manifest.json`` into the output directory, and exits with
0 on success, 2 on invalid input, 3 on numerical failure and 4 when a
result fails its own verification.  Failures also leave ``error.json``.
"""
from __future__ import annotations

import argparse
import hashlib
import json
import logging
import platform
import sys
from dataclasses import dataclass, fields
from pathlib import Path

import numpy as np
import scipy

from . import __version__
from .conditions import check_conditions, check_shifted
from .dynamics import (
    ControlSignal,
    Regularity,
    SystemParams,
    default_dt,
    propagate,
    read_control_csv,
    steps_for,
    write_control_csv,
    write_trajectory_csv,
)
from .errors import ControlError, PreconditionError
from .lyapunov import LyapunovConfig, choose_gamma, steer_to_ground, write_convergence_log
from .moments import local_exact_control, write_newton_log
from .pipeline import TransferOptions, global_transfer_basic, global_transfer_shifted, replay_plan
from .spectral import (
    ModalState,
    PotentialFn,
    SpatialGrid,
    free_evolve,
    write_eigenfunctions_txt,
    write_spectrum_csv,
)

log = logging.getLogger("polarcontrol")

SUBCOMMANDS = ("spectrum", "propagate", "check-conditions", "lyapunov-steer",
               "local-control", "global-transfer", "replay")


@dataclass
class ExperimentConfig:
    """Flat experiment description; see the README for every key."""

    potential: str = "zero"
    dipole: str = "linear 1"
    polarizability: str = "zero"
    n_interior: int = 1999
    k_max: int = 12
    correct_spectrum: bool = True
    dt: float = 0.0  # 0 picks a stable step from the spectrum
    seed: int = 0
    initial: str = "1:1"
    target: str = "1:1"
    target_frame: str = "static"  # or "evolved": amplitudes of Phi_k(T)
    duration: float = 1.0
    control: str = "zero"  # zero, "pulse a,omega" or a CSV path
    save_every: int = 1
    eps: float = 5e-2
    gamma: float = 0.0  # 0 chooses gamma from the initial state
    pulse_amplitude: float = 5.0
    pulse_duration: float = 4.0
    max_iterations: int = 400
    method: str = "newton"
    local_tolerance: float = 1e-9
    local_radius: float = 0.5
    local_max_iter: int = 10
    steer_tolerance: float = 5e-2
    frame: str = "basic"  # or "shifted"
    ramp_duration: float = 1.0
    exclude_tautologies: bool = True

    _positive = ("n_interior", "k_max", "duration", "save_every", "eps", "pulse_amplitude",
                 "pulse_duration", "max_iterations", "local_tolerance", "local_radius",
                 "local_max_iter", "steer_tolerance", "ramp_duration")

    def validate(self, base_dir: Path) -> None:
        for name in self._positive:
            if not getattr(self, name) > 0:
                raise PreconditionError(f"config key {name} must be positive")
        for name in ("dt", "gamma", "seed"):
            if getattr(self, name) < 0:
                raise PreconditionError(f"config key {name} must be non-negative")
        if self.target_frame not in ("static", "evolved"):
            raise PreconditionError("target_frame must be static or evolved")
        if self.method not in ("newton", "frozen"):
            raise PreconditionError("method must be newton or frozen")
        if self.frame not in ("basic", "shifted"):
            raise PreconditionError("frame must be basic or shifted")
        words = self.control.split()
        if words and words[0] not in ("zero", "pulse") and not (base_dir / self.control.strip()).is_file():
            raise PreconditionError(f"control file {self.control} does not exist")

    def as_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}


def _coerce(name: str, raw: str, default):
    try:
        if isinstance(default, bool):
            low = raw.lower()
            if low not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(raw)
            return low in ("true", "1", "yes")
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
    except ValueError as exc:
        raise PreconditionError(f"config key {name}: cannot parse {raw!r}") from exc
    return raw


def load_config(path: str | None) -> tuple:
    """``(ExperimentConfig, base_dir, text)``; unknown keys are rejected."""
    cfg = ExperimentConfig()
    if path is None:
        return cfg, Path.cwd(), ""
    p = Path(path)
    try:
        text = p.read_text()
    except OSError as exc:
        raise PreconditionError(f"cannot read config {path}") from exc
    known = {f.name: f for f in fields(cfg)}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise PreconditionError(f"{path}:{lineno}: expected key = value")
        key, value = (s.strip() for s in line.split("=", 1))
        if key not in known:
            raise PreconditionError(f"{path}:{lineno}: unknown key {key!r}")
        setattr(cfg, key, _coerce(key, value, getattr(ExperimentConfig, key)))
    return cfg, p.parent.resolve(), text


def _config_from_manifest(directory: Path) -> tuple:
    """Config stored in the ``manifest.json`` of an earlier run."""
    path = directory / "manifest.json"
    if not path.is_file():
        raise PreconditionError(f"no --config given and no manifest in {directory}")
    manifest = json.loads(path.read_text())
    stored = manifest["config"]
    cfg = ExperimentConfig(**stored)
    base = Path(manifest.get("base_dir", directory.resolve()))
    return cfg, base, json.dumps(stored, sort_keys=True)


def parse_state(spec: str, spectrum) -> ModalState:
    """``"1:1, 2:0.5+0.1j"`` -> normalized state with those mode amplitudes."""
    amps = {}
    for item in spec.split(","):
        item = item.strip()
        if not item:
            continue
        try:
            k, a = item.split(":")
            amps[int(k)] = amps.get(int(k), 0) + complex(a.replace(" ", ""))
        except ValueError as exc:
            raise PreconditionError(f"bad state entry {item!r} (expected k:amplitude)") from exc
    if not amps:
        raise PreconditionError("empty state specification")
    return ModalState.from_amplitudes(amps, spectrum)


def build_params(cfg: ExperimentConfig, base_dir: Path) -> SystemParams:
    grid = SpatialGrid(cfg.n_interior)
    V = PotentialFn.parse(cfg.potential, grid, base_dir)
    mu1 = PotentialFn.parse(cfg.dipole, grid, base_dir)
    mu2 = PotentialFn.parse(cfg.polarizability, grid, base_dir)
    return SystemParams.build(V, mu1, mu2, cfg.k_max, cfg.correct_spectrum)


def _control(cfg: ExperimentConfig, p: SystemParams, base_dir: Path) -> ControlSignal:
    spec = cfg.control.strip()
    words = spec.split(None, 1)
    if spec == "zero" or words[0] == "pulse":
        a, omega = (0.0, 0.0)
        if words[0] == "pulse":
            try:
                a, omega = (float(v) for v in words[1].split(","))
            except (IndexError, ValueError) as exc:
                raise PreconditionError("control 'pulse a,omega' needs two numbers") from exc
        dt = cfg.dt or default_dt(p, abs(a))
        n = steps_for(cfg.duration, dt)
        T = cfg.duration
        return ControlSignal.from_function(
            lambda t: a * np.sin(np.pi * t / T) ** 2 * np.sin(omega * t), T, n, Regularity.C20)
    return read_control_csv(base_dir / spec, Regularity.NONE)


def _write_json(path: Path, data) -> None:
    with open(path, "w") as fh:
        json.dump(data, fh, indent=2, sort_keys=True, default=_plain)
        fh.write("\n")


def _plain(obj):
    if isinstance(obj, np.generic):
        return obj.item()
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, tuple):
        return list(obj)
    raise TypeError(f"not serializable: {type(obj)}")


def _target(cfg, p):
    psi_f = parse_state(cfg.target, p.spectrum)
    if cfg.target_frame == "evolved":
        psi_f = free_evolve(psi_f, cfg.duration)
    return psi_f


def cmd_spectrum(cfg, p, out, base_dir):
    write_spectrum_csv(p.spectrum, out / "spectrum.csv")
    write_eigenfunctions_txt(p.spectrum, out / "eigenfunctions.txt")
    return {"lambda_1": p.eigenvalues[0], "k_max": p.k_max}, ["spectrum.csv", "eigenfunctions.txt"]


def cmd_propagate(cfg, p, out, base_dir):
    psi0 = parse_state(cfg.initial, p.spectrum)
    u = _control(cfg, p, base_dir)
    traj = propagate(psi0, u, p, store=True)
    if cfg.save_every > 1:
        idx = np.unique(np.r_[np.arange(0, len(traj.times), cfg.save_every), len(traj.times) - 1])
        traj = type(traj)(traj.times[idx], traj.coeffs[idx], traj.spectrum)
    write_trajectory_csv(traj, out / "trajectory.csv")
    write_control_csv(u, out / "control.csv")
    summary = {"final_norm": traj.final.norm, "t_final": u.t_final, "n_steps": u.n_steps}
    return summary, ["trajectory.csv", "control.csv"]


def cmd_check_conditions(cfg, p, out, base_dir):
    report = check_conditions(p, cfg.exclude_tautologies)
    data = report.to_dict()
    data["shifted_report"] = check_shifted(p, cfg.exclude_tautologies).to_dict()
    _write_json(out / "conditions.json", data)
    summary = {"passed": report.passed_flags, "shifted_passed": data["shifted_report"]["passed_flags"]}
    return summary, ["conditions.json"]


def cmd_lyapunov_steer(cfg, p, out, base_dir):
    psi0 = parse_state(cfg.initial, p.spectrum)
    gamma = cfg.gamma or choose_gamma(psi0)
    lcfg = LyapunovConfig(gamma=gamma, pulse_amplitude=cfg.pulse_amplitude,
                          pulse_duration=cfg.pulse_duration, max_iterations=cfg.max_iterations,
                          dt=cfg.dt or None)
    res = steer_to_ground(psi0, p, cfg.eps, lcfg)
    write_convergence_log(res, out / "convergence.csv")
    files = ["convergence.csv", "result.json"]
    if res.control is not None:
        write_control_csv(res.control, out / "control.csv")
        files.append("control.csv")
    summary = {"iterations": res.iterations, "h5_distance": res.distance, "gamma": gamma,
               "total_T": res.log[-1][4]}
    _write_json(out / "result.json", summary)
    return summary, files


def cmd_local_control(cfg, p, out, base_dir):
    psi_f = _target(cfg, p)
    psi0 = parse_state(cfg.initial, p.spectrum)
    res = local_exact_control(psi_f, cfg.duration, p, tol=cfg.local_tolerance, psi0=psi0,
                              method=cfg.method, radius=cfg.local_radius,
                              max_iter=cfg.local_max_iter, dt=cfg.dt or None)
    write_control_csv(res.control, out / "control.csv")
    write_newton_log(res, out / "newton_log.csv")
    summary = {"iterations": res.iterations, "error": res.error, "defects": res.defects,
               "convergence_order": res.convergence_order()}
    _write_json(out / "result.json", summary)
    return summary, ["control.csv", "newton_log.csv", "result.json"]


def _transfer_options(cfg) -> TransferOptions:
    return TransferOptions(steer_tolerance=cfg.steer_tolerance, local_radius=cfg.local_radius,
                           local_tolerance=cfg.local_tolerance, local_min_time=cfg.duration,
                           local_max_iter=cfg.local_max_iter, ramp_duration=cfg.ramp_duration,
                           pulse_amplitude=cfg.pulse_amplitude, pulse_duration=cfg.pulse_duration,
                           max_steer_iterations=cfg.max_iterations, seed=cfg.seed,
                           dt=cfg.dt or None)


def cmd_global_transfer(cfg, p, out, base_dir):
    psi0 = parse_state(cfg.initial, p.spectrum)
    psi_f = _target(cfg, p)
    run = global_transfer_shifted if cfg.frame == "shifted" else global_transfer_basic
    try:
        plan = run(psi0, psi_f, p, cfg.eps, _transfer_options(cfg))
    except ControlError as exc:
        if getattr(exc, "plan", None) is not None:
            exc.plan.save(out / "plan.json", out / "control.csv")
        raise
    plan.save(out / "plan.json", out / "control.csv")
    summary = {"achieved_error": plan.achieved_error, "total_T": plan.total_T,
               "segments": plan.labels}
    return summary, ["plan.json"] + (["control.csv"] if plan.segments else [])


def cmd_replay(cfg, p, out, base_dir, plan_path):
    err = replay_plan(plan_path, p)
    summary = {"plan": str(plan_path), "achieved_error": err}
    _write_json(out / "replay.json", summary)
    return summary, ["replay.json"]


def _manifest(args, cfg, text, outputs, base_dir) -> dict:
    canonical = json.dumps(cfg.as_dict(), sort_keys=True)
    return {
        "subcommand": args.command,
        "config": cfg.as_dict(),
        "base_dir": str(base_dir),  # relative file references resolve here
        "config_file_sha256": hashlib.sha256(text.encode()).hexdigest(),
        "config_sha256": hashlib.sha256(canonical.encode()).hexdigest(),
        "seed": cfg.seed,
        "versions": {"polarcontrol": __version__, "numpy": np.__version__,
                     "scipy": scipy.__version__, "python": platform.python_version()},
        "outputs": sorted(outputs),
    }


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="polarcontrol",
                                     description="Bilinear control of a 1D Schroedinger equation "
                                                 "with dipole and polarizability terms.")
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)
    for name in SUBCOMMANDS:
        sp = sub.add_parser(name)
        sp.add_argument("--config", help="key = value experiment file")
        sp.add_argument("--out", default="out", help="output directory (default: out)")
        sp.add_argument("--seed", type=int, help="overrides the config seed")
        sp.add_argument("--quiet", action="store_true", help="print nothing on success")
        if name == "replay":
            sp.add_argument("--plan", required=True, help="plan.json written by global-transfer")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.WARNING if args.quiet else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    try:
        if args.command == "replay" and args.config is None:
            cfg, base_dir, text = _config_from_manifest(Path(args.plan).parent)
        else:
            cfg, base_dir, text = load_config(args.config)
        if args.seed is not None:
            cfg.seed = args.seed
        cfg.validate(base_dir)
        p = build_params(cfg, base_dir)
        if args.command == "replay":
            summary, outputs = cmd_replay(cfg, p, out, base_dir, Path(args.plan))
        else:
            handler = globals()["cmd_" + args.command.replace("-", "_")]
            summary, outputs = handler(cfg, p, out, base_dir)
        _write_json(out / "manifest.json", _manifest(args, cfg, text, outputs + ["manifest.json"], base_dir))
        if not args.quiet:
            print(json.dumps(summary, sort_keys=True, default=_plain))
        return 0
    except ControlError as exc:
        record = {"error": type(exc).__name__, "message": str(exc), "exit_code": exc.exit_code,
                  "subcommand": args.command}
        _write_json(out / "error.json", record)
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return exc.exit_code


if __name__ == "__main__":
    sys.exit(main())
