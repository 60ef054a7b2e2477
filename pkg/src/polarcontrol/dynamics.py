"""Controlled dynamics ``i dpsi/dt = (A_V - u mu1 - u^2 mu2) psi`` in a truncated eigenbasis.

The modal ODE ``i c' = (Lambda - u B1 - u^2 B2) c`` is integrated with
Crank-Nicolson applied in the interaction frame of ``Lambda``: each step is

    c <- D Cay(dt * Hc(u_mid)) D c,   D = exp(-i Lambda dt / 2),

where ``Cay(dt H) = (I + i dt H / 2)^{-1} (I - i dt H / 2)`` and ``Hc`` is the
control part ``-u B1 - u^2 B2`` evaluated at the mean of the two control
samples bounding the step.  The map is unitary, second order, exact for
zero control, and satisfies ``conj(step(u)) = step(u)^{-1}`` so that time
reversal holds to round-off on the discrete level.
"""
from __future__ import annotations

import enum
from dataclasses import dataclass, field

import numpy as np

from .errors import GridMismatch, NonUnitState, NormDriftError, PreconditionError
from .spectral import (
    DEFAULT_K_MAX,
    ModalState,
    PotentialFn,
    Spectrum,
    compute_spectrum,
    coupling_matrix,
)

NORM_DRIFT_LIMIT = 1e-6
UNIT_TOL = 1e-8


class Regularity(str, enum.Enum):
    H10 = "H10"  # u(0) = u(T) = 0
    C20 = "C20"  # additionally u'(0) = u'(T) = 0
    NONE = "NONE"  # unconstrained samples (ramps, shifted plateaus)


@dataclass(frozen=True, eq=False)
class ControlSignal:
    """Real control sampled at ``t_j = j T / n_steps``, ``j = 0..n_steps``."""

    values: np.ndarray
    t_final: float
    regularity: Regularity = Regularity.H10

    def __post_init__(self):
        values = np.array(self.values, dtype=float)
        if values.ndim != 1 or len(values) < 2:
            raise PreconditionError("a control needs at least two samples")
        if not np.all(np.isfinite(values)):
            raise PreconditionError("control has non-finite samples")
        if not self.t_final > 0:
            raise PreconditionError("t_final must be positive")
        reg = Regularity(self.regularity)
        if reg is not Regularity.NONE:
            scale = max(1.0, float(np.max(np.abs(values))))
            for idx in (0, -1):
                if abs(values[idx]) > 1e-12 * scale:
                    raise PreconditionError(
                        f"{reg.value} control must vanish at both endpoints "
                        f"(got u={values[idx]:.3e})"
                    )
                values[idx] = 0.0
        if reg is Regularity.C20 and len(values) > 3:
            dt = float(self.t_final) / (len(values) - 1)
            curvature = np.max(np.abs(np.diff(values, 2))) / dt**2
            allowed = dt * curvature + 1e-12 * max(1.0, float(np.max(np.abs(values)))) / dt
            if (abs(values[1] - values[0]) / dt > allowed
                    or abs(values[-1] - values[-2]) / dt > allowed):
                raise PreconditionError("C20 control must have vanishing endpoint derivative")
        values.setflags(write=False)
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "t_final", float(self.t_final))
        object.__setattr__(self, "regularity", reg)

    @classmethod
    def zeros(cls, t_final: float, n_steps: int, regularity=Regularity.C20) -> "ControlSignal":
        return cls(np.zeros(n_steps + 1), t_final, regularity)

    @classmethod
    def from_function(cls, func, t_final: float, n_steps: int,
                      regularity=Regularity.NONE) -> "ControlSignal":
        t = np.linspace(0.0, t_final, n_steps + 1)
        return cls(np.broadcast_to(func(t), t.shape), t_final, regularity)

    @property
    def n_steps(self) -> int:
        return len(self.values) - 1

    @property
    def dt(self) -> float:
        return self.t_final / self.n_steps

    @property
    def times(self) -> np.ndarray:
        return np.linspace(0.0, self.t_final, self.n_steps + 1)

    @property
    def midpoint_values(self) -> np.ndarray:
        return 0.5 * (self.values[1:] + self.values[:-1])

    @property
    def max_abs(self) -> float:
        return float(np.max(np.abs(self.values)))

    def shifted(self, offset: float) -> "ControlSignal":
        """``u + offset`` as an unconstrained signal."""
        return ControlSignal(self.values + offset, self.t_final, Regularity.NONE)

    def with_regularity(self, regularity) -> "ControlSignal":
        return ControlSignal(self.values, self.t_final, regularity)

    def h1_norm(self) -> float:
        dt = self.dt
        du = np.diff(self.values) / dt
        l2 = np.sum(0.5 * (self.values[1:] ** 2 + self.values[:-1] ** 2)) * dt
        return float(np.sqrt(l2 + np.sum(du**2) * dt))

    @staticmethod
    def concatenate(signals, regularity=None) -> "ControlSignal":
        """Join signals end to end; they must share the time step and junction values."""
        signals = [s for s in signals if s is not None]
        if not signals:
            raise PreconditionError("nothing to concatenate")
        dt = signals[0].dt
        parts = [signals[0].values]
        for prev, nxt in zip(signals, signals[1:]):
            if abs(nxt.dt - dt) > 1e-9 * dt:
                raise PreconditionError("segments use different time steps")
            if abs(nxt.values[0] - prev.values[-1]) > 1e-12 * max(1.0, abs(prev.values[-1])):
                raise PreconditionError("segments are discontinuous at a junction")
            parts.append(nxt.values[1:])
        values = np.concatenate(parts)
        if regularity is None:
            classes = {s.regularity for s in signals}
            if Regularity.NONE in classes:
                regularity = Regularity.NONE
            elif Regularity.H10 in classes:
                regularity = Regularity.H10
            else:
                regularity = Regularity.C20
        return ControlSignal(values, dt * (len(values) - 1), regularity)


@dataclass(frozen=True, eq=False)
class SystemParams:
    """Potential, dipole and polarizability with the spectrum and couplings they induce."""

    V: PotentialFn
    mu1: PotentialFn
    mu2: PotentialFn
    spectrum: Spectrum = field(repr=False)
    coupling1: np.ndarray = field(repr=False)
    coupling2: np.ndarray = field(repr=False)
    corrected: bool = True

    @classmethod
    def build(cls, V: PotentialFn, mu1: PotentialFn, mu2: PotentialFn,
              k_max: int = DEFAULT_K_MAX, correct: bool = True) -> "SystemParams":
        if not (V.grid == mu1.grid == mu2.grid):
            raise GridMismatch("V, mu1 and mu2 must share a grid")
        spec = compute_spectrum(V, k_max, correct=correct)
        return cls(V, mu1, mu2, spec, coupling_matrix(mu1, spec),
                   coupling_matrix(mu2, spec), correct)

    @property
    def k_max(self) -> int:
        return self.spectrum.k_max

    @property
    def eigenvalues(self) -> np.ndarray:
        return self.spectrum.eigenvalues


@dataclass(frozen=True, eq=False)
class Trajectory:
    times: np.ndarray
    coeffs: np.ndarray  # shape (len(times), K)
    spectrum: Spectrum = field(repr=False)

    def __len__(self):
        return len(self.times)

    def state(self, i: int) -> ModalState:
        return ModalState(self.coeffs[i], self.spectrum)

    @property
    def final(self) -> ModalState:
        return self.state(-1)

    @property
    def states(self) -> list:
        return [self.state(i) for i in range(len(self))]


def default_dt(p: SystemParams, u_max: float, safety: float = 0.1) -> float:
    """Largest step with ``dt (lambda_K + |u| |B1| + |u|^2 |B2|) <= safety``."""
    rate = (abs(p.eigenvalues[-1])
            + abs(u_max) * np.linalg.norm(p.coupling1, 2)
            + u_max**2 * np.linalg.norm(p.coupling2, 2))
    return safety / rate


def steps_for(duration: float, dt: float) -> int:
    return max(1, int(np.ceil(duration / dt - 1e-9)))


def _check_unit(c: np.ndarray):
    if abs(np.linalg.norm(c) - 1.0) > UNIT_TOL:
        raise NonUnitState(f"initial state has norm {np.linalg.norm(c):.12f}, expected 1")


def _evolve(c0: np.ndarray, u_mid: np.ndarray, dt: float, p: SystemParams,
            store: bool = False):
    """Core stepping loop.

    ``c0`` has shape (..., K) and ``u_mid`` shape (..., n_steps) with matching
    leading dimensions (a batch of independent runs).
    """
    lam = p.eigenvalues
    B1, B2 = p.coupling1, p.coupling2
    has_b2 = bool(np.any(B2))
    half = np.exp(-0.5j * dt * lam)
    tau = 0.5 * dt
    eye = np.eye(len(lam))
    c = np.array(c0, dtype=complex)
    batched = c.ndim == 2
    n_steps = u_mid.shape[-1]
    out = np.empty((n_steps + 1,) + c.shape, dtype=complex) if store else None
    if store:
        out[0] = c
    for n in range(n_steps):
        um = u_mid[..., n]
        c = half * c
        if np.any(um):
            if batched:
                ub = um[:, None, None]
                Hc = -ub * B1 - (ub * ub) * B2 if has_b2 else -ub * B1
                A = eye + 1j * tau * Hc
                c = 2.0 * np.linalg.solve(A, c[..., None])[..., 0] - c
            else:
                Hc = -um * B1 - (um * um) * B2 if has_b2 else -um * B1
                c = 2.0 * np.linalg.solve(eye + 1j * tau * Hc, c) - c
        c = half * c
        if store:
            out[n + 1] = c
    return out if store else c


def _drift_check(norms):
    drift = np.max(np.abs(np.asarray(norms) - 1.0))
    if drift > NORM_DRIFT_LIMIT:
        raise NormDriftError(f"norm drift {drift:.3e} exceeds {NORM_DRIFT_LIMIT:g}")


def propagate(psi0: ModalState, u: ControlSignal, p: SystemParams, store: bool = False):
    """Solve the controlled equation from ``psi0`` under control ``u``.

    Returns the final :class:`ModalState`, or a :class:`Trajectory` holding
    every grid time when ``store`` is true.
    """
    if psi0.spectrum is not p.spectrum:
        raise GridMismatch("initial state is not expressed in the system eigenbasis")
    _check_unit(psi0.coeffs)
    result = _evolve(psi0.coeffs, u.midpoint_values, u.dt, p, store=store)
    if store:
        _drift_check(np.linalg.norm(result, axis=1))
        return Trajectory(u.times, result, p.spectrum)
    _drift_check([np.linalg.norm(result)])
    return ModalState(result, p.spectrum)


def propagate_batch(psi0: ModalState, controls: np.ndarray, dt: float, p: SystemParams) -> np.ndarray:
    """Final coefficient vectors for several sampled controls sharing one grid.

    ``controls`` has shape (m, n_steps + 1); returns shape (m, K).
    """
    _check_unit(psi0.coeffs)
    controls = np.atleast_2d(controls)
    u_mid = 0.5 * (controls[:, 1:] + controls[:, :-1])
    c0 = np.broadcast_to(psi0.coeffs, (len(controls), p.k_max))
    final = _evolve(c0, u_mid, dt, p)
    _drift_check(np.linalg.norm(final, axis=1))
    return final


def endpoint_jacobian(psi0: ModalState, u: ControlSignal, p: SystemParams, directions):
    """Endpoint state and its exact derivative along control directions.

    ``directions`` has shape (P, n_steps + 1), each row a perturbation of the
    control samples.  Returns ``(psi_T, J)`` with ``J[:, j]`` the derivative
    of the final coefficients along row ``j``.  The tangent recursion is the
    exact linearization of the discrete stepping map.
    """
    _check_unit(psi0.coeffs)
    directions = np.atleast_2d(np.asarray(directions, dtype=float))
    if directions.shape[1] != u.n_steps + 1:
        raise GridMismatch("directions must be sampled on the control grid")
    dt = u.dt
    lam = p.eigenvalues
    B1, B2 = p.coupling1, p.coupling2
    half = np.exp(-0.5j * dt * lam)
    tau = 0.5 * dt
    K = len(lam)
    eye = np.eye(K)
    g_mid = 0.5 * (directions[:, 1:] + directions[:, :-1])
    u_mid = u.midpoint_values
    c = np.array(psi0.coeffs, dtype=complex)
    S = np.zeros((K, directions.shape[0]), dtype=complex)
    for n in range(u.n_steps):
        um = u_mid[n]
        c = half * c
        S = half[:, None] * S
        Hc = -um * B1 - um * um * B2
        Ainv = np.linalg.inv(eye + 1j * tau * Hc)
        c_new = 2.0 * Ainv @ c - c
        dH = -B1 - 2.0 * um * B2
        src = Ainv @ (dH @ (c_new + c))
        S = 2.0 * Ainv @ S - S - 1j * tau * np.outer(src, g_mid[:, n])
        c = half * c_new
        S = half[:, None] * S
    _drift_check([np.linalg.norm(c)])
    return ModalState(c, p.spectrum), S


def duhamel_integrals(v: ControlSignal, frequencies) -> np.ndarray:
    """``int_0^T v(t) exp(i w t) dt`` for each ``w``, by the composite midpoint rule.

    Uses the step-mean of the samples at step midpoints, which is the rule
    implied by the propagator's own first-order expansion.
    """
    t_mid = v.times[:-1] + 0.5 * v.dt
    phases = np.exp(1j * np.outer(t_mid, np.asarray(frequencies, dtype=float)))
    return v.dt * (v.midpoint_values @ phases)


def linearized_propagate(v: ControlSignal, p: SystemParams, T: float | None = None) -> ModalState:
    """Solution at ``T`` of the equation linearized around ``(u = 0, Phi_1)``.

    ``Psi_k(T) = i <mu1 phi_1, phi_k> (int_0^T v e^{i(lam_k - lam_1)t} dt) e^{-i lam_k T}``.
    The result is not normalized.
    """
    if T is not None and abs(T - v.t_final) > 1e-9 * max(1.0, T):
        raise PreconditionError("T must match the control duration")
    lam = p.eigenvalues
    integrals = duhamel_integrals(v, lam - lam[0])
    coeffs = 1j * p.coupling1[0] * integrals * np.exp(-1j * lam * v.t_final)
    return ModalState(coeffs, p.spectrum)


def reverse_control(u: ControlSignal) -> ControlSignal:
    """``t -> u(T - t)``."""
    return ControlSignal(u.values[::-1], u.t_final, u.regularity)


def conjugate(psi: ModalState) -> ModalState:
    """Complex conjugation; eigenfunctions are real so this conjugates ``psi(x)``."""
    return ModalState(np.conj(psi.coeffs), psi.spectrum)


def shift_params(p: SystemParams) -> SystemParams:
    """Parameters of the frame ``u -> u + 2``: ``(V - 2 mu1 - 4 mu2, mu1 + 4 mu2, mu2)``."""
    if p.mu1.is_zero() and p.mu2.is_zero():
        return p
    V = PotentialFn(p.V.grid, p.V.samples - 2.0 * p.mu1.samples - 4.0 * p.mu2.samples,
                    f"{p.V.label} - 2*({p.mu1.label}) - 4*({p.mu2.label})")
    mu1 = PotentialFn(p.V.grid, p.mu1.samples + 4.0 * p.mu2.samples,
                      f"{p.mu1.label} + 4*({p.mu2.label})")
    return SystemParams.build(V, mu1, p.mu2, p.k_max, correct=p.corrected)


def write_control_csv(u: ControlSignal, path) -> None:
    np.savetxt(path, np.column_stack([u.times, u.values]), delimiter=",",
               header="t,u", comments="", fmt="%.17g")


def read_control_csv(path, regularity=Regularity.NONE) -> ControlSignal:
    """Load a two-column ``t,u`` table sampled on a uniform grid starting at 0."""
    try:
        table = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    except OSError as exc:
        raise PreconditionError(f"cannot read control file {path}") from exc
    if table.shape[1] != 2 or len(table) < 2:
        raise PreconditionError(f"{path}: expected columns t,u with at least two rows")
    t = table[:, 0]
    steps = np.diff(t)
    if abs(t[0]) > 1e-12 or np.ptp(steps) > 1e-6 * np.mean(steps):
        raise PreconditionError(f"{path}: time grid must be uniform and start at 0")
    return ControlSignal(table[:, 1], float(t[-1]), regularity)


def write_trajectory_csv(traj: Trajectory, path) -> None:
    K = traj.coeffs.shape[1]
    cols = [traj.times]
    header = ["t"]
    for k in range(K):
        cols += [traj.coeffs[:, k].real, traj.coeffs[:, k].imag]
        header += [f"re_c{k + 1}", f"im_c{k + 1}"]
    np.savetxt(path, np.column_stack(cols), delimiter=",", header=",".join(header),
               comments="", fmt="%.17g")
