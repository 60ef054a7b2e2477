"""Global exact transfer between two states.

The basic transfer steers ``psi0`` and ``conj(psi_f)`` close to the ground
state with Lyapunov pulses, joins the first steered state to the conjugate
of the second with a local exact control, and plays the second steering
leg backwards.  Time reversibility of the equation (run conjugated states
under the reversed control) turns the backward leg into a forward one.

The shifted transfer first ramps the control from 0 to 2, works in the
frame ``u = u~ + 2`` where ``(V, mu1, mu2)`` become
``(V - 2 mu1 - 4 mu2, mu1 + 4 mu2, mu2)``, and ramps back down.  It gives
control even when ``mu1`` vanishes.
"""
from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field

import numpy as np

from .dynamics import (
    ControlSignal,
    Regularity,
    SystemParams,
    conjugate,
    default_dt,
    propagate,
    read_control_csv,
    reverse_control,
    shift_params,
    steps_for,
    write_control_csv,
)
from .errors import (
    NumericalFailure,
    PreconditionError,
    RadiusTooLarge,
    VerificationFailure,
)
from .lyapunov import (
    LyapunovConfig,
    choose_gamma,
    ensure_overlap,
    phase_min_h5_distance,
    steer_to_ground,
)
from .moments import DEFAULT_RADIUS, local_exact_control
from .spectral import ModalState, change_basis, sobolev_norm

log = logging.getLogger(__name__)

LABELS = ("ramp_up", "steer_fwd", "local_connect", "steer_bwd_reversed", "ramp_down")


@dataclass
class TransferOptions:
    """Knobs of the transfer; every field has a working default."""

    steer_tolerance: float = 5e-2  # phase-minimized H5 distance reached by each leg
    local_radius: float = DEFAULT_RADIUS
    local_tolerance: float = 1e-9
    local_min_time: float = 1.0
    local_max_iter: int = 12
    max_shrinks: int = 4
    ramp_duration: float = 1.0
    pulse_amplitude: float = 5.0
    pulse_duration: float = 4.0
    max_steer_iterations: int = 400
    seed: int = 0
    dt: float | None = None


@dataclass
class TransferPlan:
    segments: list  # (label, ControlSignal)
    total_T: float
    achieved_error: float
    psi0: ModalState
    psi_f: ModalState
    dt: float
    meta: dict = field(default_factory=dict)

    @property
    def control(self) -> ControlSignal | None:
        if not self.segments:
            return None
        return ControlSignal.concatenate([u for _, u in self.segments], Regularity.H10)

    @property
    def labels(self) -> list:
        return [label for label, _ in self.segments]

    def to_dict(self, control_file: str | None = None) -> dict:
        segs, t0 = [], 0.0
        for label, u in self.segments:
            segs.append({"label": label, "t_start": t0, "duration": u.t_final,
                         "n_steps": u.n_steps, "regularity": u.regularity.value,
                         "max_abs": u.max_abs})
            t0 += u.t_final
        return {
            "segments": segs,
            "total_T": self.total_T,
            "achieved_error": self.achieved_error,
            "dt": self.dt,
            "psi0": _state_lists(self.psi0),
            "psi_f": _state_lists(self.psi_f),
            "control_file": control_file,
            "meta": self.meta,
        }

    def save(self, json_path, csv_path=None) -> None:
        """Write the plan as JSON and, when it is nonempty, the full control as CSV."""
        name = None
        if csv_path is not None and self.segments:
            write_control_csv(self.control, csv_path)
            name = str(csv_path).replace("\\", "/").split("/")[-1]
        with open(json_path, "w") as fh:
            json.dump(self.to_dict(name), fh, indent=2, sort_keys=True, default=_jsonable)
            fh.write("\n")


def _jsonable(obj):
    if isinstance(obj, np.generic):
        return obj.item()
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    raise TypeError(f"not serializable: {type(obj)}")


def _state_lists(psi: ModalState) -> dict:
    return {"re": [float(x) for x in psi.coeffs.real], "im": [float(x) for x in psi.coeffs.imag]}


def _state_from_lists(d: dict, spec) -> ModalState:
    return ModalState(np.asarray(d["re"]) + 1j * np.asarray(d["im"]), spec)


def quintic_ramp(duration: float, n_steps: int, height: float = 2.0) -> ControlSignal:
    """``height * s^3 (10 - 15 s + 6 s^2)`` with ``s = t / duration``.

    Starts at 0 and ends at ``height`` with vanishing first and second
    derivatives at both ends.
    """
    s = np.linspace(0.0, 1.0, n_steps + 1)
    return ControlSignal(height * s**3 * (10.0 - 15.0 * s + 6.0 * s**2), duration, Regularity.NONE)


def _phase(psi: ModalState) -> float:
    return float(np.angle(psi.coeffs[0]))


def _connect_time(theta_from: float, theta_to: float, lam1: float, t_min: float) -> float:
    """Smallest ``T >= t_min`` with ``theta_from - lam1 T = theta_to (mod 2 pi)``."""
    base = (theta_from - theta_to) / lam1
    period = 2.0 * np.pi / abs(lam1)
    return base + period * np.ceil((t_min - base) / period - 1e-12)


def _local(psi_a, psi_b, p, opts, dt):
    """Local exact control from ``psi_a`` to ``psi_b``, both near the ground state up to phase."""
    T = _connect_time(_phase(psi_a), _phase(psi_b), p.eigenvalues[0], opts.local_min_time)
    n = steps_for(T, dt)
    T = n * dt
    res = local_exact_control(psi_b, T, p, tol=opts.local_tolerance, psi0=psi_a,
                              radius=opts.local_radius, max_iter=opts.local_max_iter, dt=dt)
    return res


class _Leg:
    """A steering leg that can be continued with a tighter tolerance."""

    def __init__(self, psi, p, opts, dt, seed):
        self.p, self.opts, self.dt = p, opts, dt
        self.pieces = []
        u, psi = ensure_overlap(psi, p, seed=seed, dt=dt)
        if u is not None:
            self.pieces.append(u)
        self.psi = psi
        self.cfg = LyapunovConfig(gamma=choose_gamma(psi), pulse_amplitude=opts.pulse_amplitude,
                                  pulse_duration=opts.pulse_duration,
                                  max_iterations=opts.max_steer_iterations, dt=dt)
        self.iterations = 0

    def steer(self, eps):
        if phase_min_h5_distance(self.psi) < eps:
            return
        res = steer_to_ground(self.psi, self.p, eps, self.cfg)
        if res.control is not None:
            self.pieces.append(res.control)
        self.psi = res.state
        self.iterations += res.iterations

    @property
    def control(self):
        return ControlSignal.concatenate(self.pieces, Regularity.H10) if self.pieces else None


def _check_inputs(psi0, psi_f, p):
    for name, psi in (("initial", psi0), ("target", psi_f)):
        if psi.spectrum is not p.spectrum:
            raise PreconditionError(f"{name} state is not expressed in the system eigenbasis")
        if not psi.is_unit(1e-8):
            raise PreconditionError(f"{name} state must have unit norm")


def _verify(plan: TransferPlan, p: SystemParams, eps: float) -> TransferPlan:
    if plan.segments:
        final = propagate(plan.psi0, plan.control, p)
        plan.achieved_error = float((final - plan.psi_f).norm)
    else:
        plan.achieved_error = float((plan.psi0 - plan.psi_f).norm)
    plan.total_T = float(sum(u.t_final for _, u in plan.segments))
    if plan.achieved_error >= eps:
        exc = VerificationFailure(f"re-simulated error {plan.achieved_error:.3e} exceeds {eps:g}")
        exc.plan = plan
        raise exc
    return plan


def _basic_segments(psi0, psi_f, p, opts, dt, meta):
    """Segments of the basic transfer (unverified)."""
    if (psi0 - psi_f).norm < opts.local_tolerance:
        return []
    d0, df = phase_min_h5_distance(psi0), phase_min_h5_distance(psi_f)
    meta["initial_h5_distance"], meta["target_h5_distance"] = d0, df
    if d0 + df < opts.local_radius:
        try:
            res = _local(psi0, psi_f, p, opts, dt)
            meta["local_iterations"] = res.iterations
            return [("local_connect", res.control)]
        except (NumericalFailure, RadiusTooLarge) as exc:
            log.info("direct local connection failed (%s); steering both ends", exc)
    leg_a = _Leg(psi0, p, opts, dt, opts.seed)
    leg_b = _Leg(conjugate(psi_f), p, opts, dt, opts.seed + 1)
    eps = opts.steer_tolerance
    last = None
    for shrink in range(opts.max_shrinks + 1):
        leg_a.steer(eps)
        leg_b.steer(eps)
        try:
            res = _local(leg_a.psi, conjugate(leg_b.psi), p, opts, dt)
            break
        except (NumericalFailure, RadiusTooLarge) as exc:
            last = exc
            log.info("local connection failed at steering tolerance %.3g (%s)", eps, exc)
            eps /= 2.0
    else:
        raise NumericalFailure(f"local connection failed after {opts.max_shrinks} shrinks: {last}")
    meta.update(steer_tolerance=eps, steer_iterations_fwd=leg_a.iterations,
                steer_iterations_bwd=leg_b.iterations, local_iterations=res.iterations,
                local_error=res.error)
    segments = []
    if leg_a.control is not None:
        segments.append(("steer_fwd", leg_a.control))
    segments.append(("local_connect", res.control))
    if leg_b.control is not None:
        segments.append(("steer_bwd_reversed", reverse_control(leg_b.control)))
    return segments


def global_transfer_basic(psi0: ModalState, psi_f: ModalState, p: SystemParams, eps: float,
                          opts: TransferOptions | None = None) -> TransferPlan:
    """Control in ``H^1_0`` moving ``psi0`` to ``psi_f`` with re-simulated ``L^2`` error below ``eps``."""
    opts = opts or TransferOptions()
    _check_inputs(psi0, psi_f, p)
    dt = opts.dt or default_dt(p, opts.pulse_amplitude)
    meta = {"frame": "original"}
    segments = _basic_segments(psi0, psi_f, p, opts, dt, meta)
    plan = TransferPlan(segments, 0.0, np.inf, psi0, psi_f, dt, meta)
    return _verify(plan, p, eps)


def global_transfer_shifted(psi0: ModalState, psi_f: ModalState, p: SystemParams, eps: float,
                            opts: TransferOptions | None = None) -> TransferPlan:
    """Transfer through the frame ``u = u~ + 2``.

    The control is a quintic ramp to 2, a basic transfer for the shifted
    parameters played on top of the plateau, and the reversed ramp.
    Verification re-simulates the whole control with the original parameters.
    """
    opts = opts or TransferOptions()
    _check_inputs(psi0, psi_f, p)
    ps = shift_params(p)
    dt = opts.dt or default_dt(p, 2.0 + opts.pulse_amplitude)
    n_ramp = steps_for(opts.ramp_duration, dt)
    ramp = quintic_ramp(n_ramp * dt, n_ramp)
    # the reversed ramp maps conj(psi_f) pushed through the ramp back to psi_f
    start = change_basis(propagate(psi0, ramp, p), ps.spectrum).normalized()
    goal = change_basis(conjugate(propagate(conjugate(psi_f), ramp, p)), ps.spectrum).normalized()
    inner_opts = TransferOptions(**{**opts.__dict__, "dt": dt})
    meta = {"frame": "shifted", "shifted_potential": ps.V.label, "shifted_dipole": ps.mu1.label}
    inner = _basic_segments(start, goal, ps, inner_opts, dt, meta)
    segments = [("ramp_up", ramp)]
    segments += [(label, u.shifted(2.0)) for label, u in inner]
    segments.append(("ramp_down", reverse_control(ramp)))
    plan = TransferPlan(segments, 0.0, np.inf, psi0, psi_f, dt, meta)
    return _verify(plan, p, eps)


def load_plan(json_path, p: SystemParams) -> tuple:
    """``(plan_dict, control, psi0, psi_f)`` from files written by :meth:`TransferPlan.save`."""
    with open(json_path) as fh:
        d = json.load(fh)
    psi0 = _state_from_lists(d["psi0"], p.spectrum)
    psi_f = _state_from_lists(d["psi_f"], p.spectrum)
    control = None
    if d.get("control_file"):
        base = str(json_path).replace("\\", "/").rsplit("/", 1)
        path = d["control_file"] if len(base) == 1 else f"{base[0]}/{d['control_file']}"
        control = read_control_csv(path, Regularity.H10)
    return d, control, psi0, psi_f


def replay_plan(json_path, p: SystemParams) -> float:
    """Re-simulate a stored plan and return its ``L^2`` endpoint error."""
    d, control, psi0, psi_f = load_plan(json_path, p)
    if control is None:
        return float((psi0 - psi_f).norm)
    return float((propagate(psi0, control, p) - psi_f).norm)
