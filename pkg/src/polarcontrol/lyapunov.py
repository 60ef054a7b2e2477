"""Lyapunov steering towards the ground state.

The functional

    L(psi) = gamma * sum_{k>=2} lambda_k^6 |c_k|^2 + 1 - |c_1|^2

vanishes exactly on the ground state up to phase.  Each descent step applies
a resonant pulse

    u(t) = a sin^2(pi t / T_p) sum_k R_k sin(omega_k t + theta_k),
    omega_k = lambda_k - lambda_1,

whose weights ``R_k, theta_k`` come from the first variation of ``L`` along
the free evolution, and whose amplitude ``a`` is chosen by backtracking.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .dynamics import (
    ControlSignal,
    Regularity,
    SystemParams,
    default_dt,
    propagate,
    propagate_batch,
    steps_for,
)
from .errors import (
    NoDescentFound,
    NonUnitState,
    OverlapNotCreated,
    PreconditionError,
    StagnationError,
)
from .spectral import ModalState

log = logging.getLogger(__name__)

OVERLAP_FLOOR = 1e-3
DEFAULT_GAMMA = 1e-12
MODE_THRESHOLD = 1e-6
MAX_MODES = 8


@dataclass
class LyapunovConfig:
    """Tuning of the descent pulses.

    Each pulse lasts ``max(pulse_duration, 4 pi / gap)`` with ``gap`` taken
    over the frequencies in use; ``pulse_amplitude`` caps ``a``.  Long, weak
    pulses are spectrally selective and avoid feeding modes whose coupling
    to the ground state is small.  An empty ``resonant_modes`` selects modes
    from the current state.
    """

    gamma: float = DEFAULT_GAMMA
    pulse_amplitude: float = 5.0
    pulse_duration: float = 4.0
    resonant_modes: list = field(default_factory=list)
    descent_tolerance: float = 1e-14
    max_iterations: int = 400
    mode_threshold: float = MODE_THRESHOLD
    max_modes: int = MAX_MODES
    min_amplitude_ratio: float = 1e-8
    stagnation_window: int = 25
    dt: float | None = None

    def __post_init__(self):
        if not self.gamma > 0:
            raise PreconditionError("gamma must be positive")
        if not self.pulse_amplitude > 0:
            raise PreconditionError("pulse amplitude must be positive")
        if not self.pulse_duration > 0:
            raise PreconditionError("pulse duration must be positive")
        if int(self.max_iterations) < 1:
            raise PreconditionError("max_iterations must be positive")
        if any(int(k) < 2 for k in self.resonant_modes):
            raise PreconditionError("resonant modes are indexed from 2")


def _weights(p_or_lam, gamma: float) -> np.ndarray:
    lam = np.asarray(p_or_lam, dtype=float)
    q = gamma * lam**6
    q[0] = -1.0
    return q


def _unit(psi: ModalState):
    if not psi.is_unit(1e-8):
        raise NonUnitState(f"state has norm {psi.norm:.12f}, expected 1")


def lyapunov_value(psi: ModalState, gamma: float) -> float:
    """``gamma sum_{k>=2} lambda_k^6 |c_k|^2 + 1 - |c_1|^2``."""
    _unit(psi)
    c2 = np.abs(psi.coeffs) ** 2
    lam = psi.spectrum.eigenvalues
    return float(gamma * np.sum(lam[1:] ** 6 * c2[1:]) + 1.0 - c2[0])


def _values(coeffs: np.ndarray, lam: np.ndarray, gamma: float) -> np.ndarray:
    c2 = np.abs(np.atleast_2d(coeffs)) ** 2
    return gamma * (c2[:, 1:] @ lam[1:] ** 6) + 1.0 - c2[:, 0]


def choose_gamma(psi0: ModalState, floor: float = OVERLAP_FLOOR) -> float:
    """``gamma`` with ``L(psi0) = 1 - |c_1|^2 / 2 < 1``."""
    _unit(psi0)
    c1 = abs(psi0.coeffs[0])
    if c1 <= floor:
        raise PreconditionError(f"ground-state overlap {c1:.3e} is below the floor {floor:g}")
    lam = psi0.spectrum.eigenvalues
    energy = float(np.sum(lam[1:] ** 6 * np.abs(psi0.coeffs[1:]) ** 2))
    if energy == 0.0:
        return DEFAULT_GAMMA
    return c1**2 / (2.0 * energy)


def phase_min_h5_distance(psi: ModalState) -> float:
    """``min_theta |psi - e^{i theta} phi_1|`` in the truncated ``H^5`` norm (``k^5`` weights)."""
    c = psi.coeffs
    k = np.arange(2, len(c) + 1, dtype=float)
    return float(np.sqrt((1.0 - abs(c[0])) ** 2 + np.sum(k**10 * np.abs(c[1:]) ** 2)))


def select_modes(psi: ModalState, gamma: float, threshold: float = MODE_THRESHOLD,
                 max_modes: int = MAX_MODES) -> list:
    """Modes ``k >= 2`` with ``|c_k| > threshold``, at most ``max_modes`` of them.

    The largest contributions to ``L`` are kept.  When no mode clears the
    threshold, every nonzero mode is eligible.
    """
    c = np.abs(psi.coeffs)
    lam = psi.spectrum.eigenvalues
    idx = [k for k in range(1, len(c)) if c[k] > threshold]
    if not idx:
        idx = [k for k in range(1, len(c)) if c[k] > 0]
    idx.sort(key=lambda k: -(1.0 + gamma * lam[k] ** 6) * c[k] ** 2)
    return sorted(k + 1 for k in idx[:max_modes])


def pulse_duration(modes, lam: np.ndarray) -> float:
    """``4 pi / gap`` with ``gap`` the smallest spacing among ``{0} U {omega_k}``."""
    omegas = np.sort(np.concatenate([[0.0], lam[np.asarray(modes) - 1] - lam[0]]))
    gaps = np.diff(omegas)
    gaps = gaps[gaps > 1e-12 * max(1.0, abs(lam[-1]))]
    if len(gaps) == 0:
        raise PreconditionError("resonant frequencies are degenerate")
    return 4.0 * np.pi / float(np.min(gaps))


def _first_variation(psi: ModalState, p: SystemParams, gamma: float, times: np.ndarray) -> np.ndarray:
    """``G(t)`` with ``dL/da = int f(t) G(t) dt`` for ``u = a f`` at ``a = 0``."""
    lam = p.eigenvalues
    q = _weights(lam, gamma)
    free = psi.coeffs[None, :] * np.exp(-1j * np.outer(times, lam))
    return -2.0 * np.imag(np.einsum("tj,jk,tk->t", np.conj(free) * q, p.coupling1, free))


def _pulse_basis(times, Tp, omegas) -> np.ndarray:
    """Rows ``sin^2(pi t/T_p) cos(omega_k t)`` then ``sin^2(pi t/T_p) sin(omega_k t)``."""
    env = np.sin(np.pi * times / Tp) ** 2
    arg = np.outer(omegas, times)
    return np.concatenate([env * np.cos(arg), env * np.sin(arg)])


def _linear_response(psi: ModalState, p: SystemParams, basis: np.ndarray, dt: float) -> np.ndarray:
    """Derivative of the interaction-frame endpoint along each basis pulse at ``u = 0``.

    Column ``b`` is ``i sum_j B1_kj (int f_b e^{i(lam_k - lam_j) t} dt) c_j``,
    integrated with the step-midpoint rule used by the propagator.
    """
    lam = p.eigenvalues
    n = basis.shape[1] - 1
    t_mid = (np.arange(n) + 0.5) * dt
    f_mid = 0.5 * (basis[:, 1:] + basis[:, :-1])
    diff = lam[:, None] - lam[None, :]
    K = len(lam)
    ph = np.exp(1j * np.outer(t_mid, diff.ravel()))
    M = (dt * f_mid @ ph).reshape(len(basis), K, K)
    return 1j * np.einsum("bkj,kj,j->kb", M, p.coupling1, psi.coeffs)


@dataclass
class DescentPulse:
    modes: list
    frequencies: np.ndarray
    amplitudes: np.ndarray  # R_k, summing to one
    phases: np.ndarray
    amplitude: float  # accepted a
    slope: float  # dL/da at a = 0
    ridge: float  # relative Levenberg-Marquardt parameter of the accepted direction


RIDGES = (1e-6, 1e-4, 1e-2, 1.0)


def _design(psi: ModalState, p: SystemParams, cfg: LyapunovConfig, dt: float):
    """Candidate pulse shapes along a Levenberg-Marquardt path.

    ``L = sum_{k>=2} w_k |c_k|^2`` with ``w_k = 1 + gamma lambda_k^6`` is a
    weighted sum of squares.  With ``r = sqrt(w) c`` linearized in the pulse
    coefficients ``z`` as ``r0 + J z``, the directions
    ``z(nu) = -(J^T J + nu I)^{-1} J^T r0`` run from Gauss-Newton (small
    ``nu``) to the steepest descent of the first variation (large ``nu``).
    Each is a descent direction: ``dL/da < 0`` at ``a = 0``.
    """
    lam = p.eigenvalues
    modes = list(cfg.resonant_modes) or select_modes(psi, cfg.gamma, cfg.mode_threshold, cfg.max_modes)
    if not modes:
        raise NoDescentFound("no populated excited mode to drive")
    Tp = max(cfg.pulse_duration, pulse_duration(modes, lam))
    n = steps_for(Tp, dt)
    Tp = n * dt
    times = np.linspace(0.0, Tp, n + 1)
    omegas = lam[np.asarray(modes) - 1] - lam[0]
    basis = _pulse_basis(times, Tp, omegas)
    sw = np.sqrt(1.0 + cfg.gamma * lam[1:] ** 6)
    Jc = sw[:, None] * _linear_response(psi, p, basis, dt)[1:]
    r0 = sw * psi.coeffs[1:]
    J = np.concatenate([Jc.real, Jc.imag])
    r = np.concatenate([r0.real, r0.imag])
    grad = J.T @ r  # half the gradient of L in z
    if not np.any(np.abs(grad) > 0):
        raise NoDescentFound("first variation vanishes on the resonant family")
    JtJ = J.T @ J
    scale = np.linalg.norm(JtJ, 2)
    shapes, info = [], []
    M = len(modes)
    for nu in RIDGES:
        z = -np.linalg.solve(JtJ + nu * scale * np.eye(2 * M), grad)
        alpha, beta = z[:M], z[M:]
        R = np.hypot(alpha, beta)
        a = float(np.sum(R))
        if a == 0.0:
            continue
        shape = (z @ basis) / a  # unit-amplitude shape, R normalized to sum one
        slope = 2.0 * float(grad @ z) / a
        info.append((R / a, np.arctan2(alpha, beta), a, slope, nu))
        shapes.append(shape)
    return modes, omegas, Tp, np.array(shapes), info


def descent_step(psi: ModalState, p: SystemParams, cfg: LyapunovConfig,
                 start_amplitude: float | None = None, flip: bool = False):
    """One resonant pulse that strictly decreases ``L``.

    For every direction of the Levenberg-Marquardt path the amplitudes
    ``a0, a0/2, a0/4`` are simulated in one batch, ``a0`` being the
    model-optimal amplitude capped at ``pulse_amplitude``; the best
    decreasing candidate is accepted, otherwise all amplitudes are divided
    by eight and the batch repeated.  ``flip`` negates the pulses (used to
    test the sign rule).  ``start_amplitude`` further caps ``a0``.

    Returns ``(u, psi_next, pulse)``.
    """
    _unit(psi)
    if psi.spectrum is not p.spectrum:
        raise PreconditionError("state is not expressed in the system eigenbasis")
    if abs(psi.coeffs[0]) <= OVERLAP_FLOOR:
        raise PreconditionError("ground-state overlap is below the floor")
    L0 = lyapunov_value(psi, cfg.gamma)
    if L0 <= 0.0:
        raise PreconditionError("L vanishes: the state is already the ground state")
    dt = cfg.dt or default_dt(p, cfg.pulse_amplitude)
    modes, omegas, Tp, shapes, info = _design(psi, p, cfg, dt)
    if flip:
        shapes = -shapes
    cap = min(cfg.pulse_amplitude, start_amplitude or np.inf)
    a0 = np.array([min(cap, i[2]) for i in info])
    a_min = cfg.min_amplitude_ratio * cfg.pulse_amplitude
    lam = p.eigenvalues
    factor = 1.0
    while np.max(a0) * factor >= a_min:
        scales = factor * 0.5 ** np.arange(3)
        amps = (a0[:, None] * scales[None, :]).ravel()
        which = np.repeat(np.arange(len(info)), len(scales))
        finals = propagate_batch(psi, amps[:, None] * shapes[which], dt, p)
        Ls = _values(finals, lam, cfg.gamma)
        ok = np.flatnonzero(Ls < L0 - cfg.descent_tolerance * L0)
        if len(ok):
            j = ok[np.argmin(Ls[ok])]
            R, phases, _, slope, nu = info[which[j]]
            u = ControlSignal(amps[j] * shapes[which[j]], Tp, Regularity.C20)
            psi_next = ModalState(finals[j] / np.linalg.norm(finals[j]), p.spectrum)
            sign = -1.0 if flip else 1.0
            return u, psi_next, DescentPulse(modes, omegas, R, phases, float(amps[j]), sign * slope, nu)
        factor /= 8.0
    raise NoDescentFound(f"line search exhausted at L = {L0:.6e}")


@dataclass
class SteeringResult:
    control: ControlSignal | None
    state: ModalState
    log: list  # rows (iteration, L, |c1|, h5_distance, cumulative_T)
    gamma: float

    @property
    def iterations(self) -> int:
        return len(self.log) - 1

    @property
    def distance(self) -> float:
        return self.log[-1][3]


def steer_to_ground(psi0: ModalState, p: SystemParams, eps: float,
                    cfg: LyapunovConfig | None = None) -> SteeringResult:
    """Concatenate descent pulses until the phase-minimized ``H^5`` distance to ``phi_1`` is below ``eps``.

    ``cfg.gamma`` is replaced by :func:`choose_gamma` when ``cfg`` is not given.
    """
    _unit(psi0)
    if cfg is None:
        cfg = LyapunovConfig(gamma=choose_gamma(psi0))
    if abs(psi0.coeffs[0]) <= OVERLAP_FLOOR:
        raise PreconditionError("ground-state overlap is below the floor; call ensure_overlap first")
    dt = cfg.dt or default_dt(p, cfg.pulse_amplitude)
    cfg = LyapunovConfig(**{**cfg.__dict__, "dt": dt})
    psi = psi0
    L = lyapunov_value(psi, cfg.gamma)
    dist = phase_min_h5_distance(psi)
    total = 0.0
    rows = [(0, L, float(abs(psi.coeffs[0])), dist, total)]
    pieces = []
    best = dist
    since_best = 0
    it = 0
    while dist >= eps:
        if it >= cfg.max_iterations:
            raise StagnationError(f"{it} iterations without reaching distance {eps:g} (at {dist:.3e})")
        it += 1
        u, psi, pulse = descent_step(psi, p, cfg)
        L_new = lyapunov_value(psi, cfg.gamma)
        assert L_new < L
        L = L_new
        dist = phase_min_h5_distance(psi)
        total += u.t_final
        pieces.append(u)
        rows.append((it, L, float(abs(psi.coeffs[0])), dist, total))
        log.debug("step %d: L=%.6e |c1|=%.8f d5=%.4e a=%.3g nu=%g", it, L, abs(psi.coeffs[0]),
                  dist, pulse.amplitude, pulse.ridge)
        if dist < best * (1.0 - 1e-6):
            best, since_best = dist, 0
        else:
            since_best += 1
            if since_best >= cfg.stagnation_window:
                raise StagnationError(f"no distance progress in {since_best} steps (at {dist:.3e})")
    control = ControlSignal.concatenate(pieces) if pieces else None
    return SteeringResult(control, psi, rows, cfg.gamma)


def ensure_overlap(psi0: ModalState, p: SystemParams, floor: float = OVERLAP_FLOOR,
                   seed: int = 0, attempts: int = 8, amplitude: float = 5.0,
                   dt: float | None = None):
    """Create ground-state overlap above ``floor`` with a short resonant pulse.

    Returns ``(u, psi1)``; ``u`` is ``None`` when the overlap already suffices.
    The pulse drives ``omega_m = lambda_m - lambda_1`` for the populated mode
    ``m`` coupled most strongly to ``phi_1``; retries draw random phases and
    amplitudes from ``seed``.
    """
    _unit(psi0)
    if abs(psi0.coeffs[0]) > floor:
        return None, psi0
    lam = p.eigenvalues
    b = np.abs(p.coupling1[0])
    if p.mu1.is_zero():
        b = np.abs(p.coupling2[0])
    score = b * np.abs(psi0.coeffs)
    score[0] = 0.0
    m = int(np.argmax(score))
    if score[m] == 0.0:
        raise OverlapNotCreated("no populated mode couples to the ground state")
    omega = lam[m] - lam[0]
    rng = np.random.default_rng(seed)
    dt = dt or default_dt(p, 2 * amplitude)
    for attempt in range(attempts):
        if attempt == 0:
            phase, amp = 0.0, amplitude
        else:
            phase, amp = rng.uniform(0, 2 * np.pi), amplitude * rng.uniform(0.5, 2.0)
        Tp = 8.0 * np.pi / omega
        n = steps_for(Tp, dt)
        Tp = n * dt
        if p.mu1.is_zero():
            # the u^2 term carries the coupling; drive at half the frequency
            f = lambda t: np.sin(np.pi * t / Tp) ** 2 * np.sin(0.5 * omega * t + phase)  # noqa: E731
        else:
            f = lambda t: np.sin(np.pi * t / Tp) ** 2 * np.sin(omega * t + phase)  # noqa: E731
        u = ControlSignal.from_function(lambda t: amp * f(t), Tp, n, Regularity.C20)
        psi1 = propagate(psi0, u, p)
        if abs(psi1.coeffs[0]) > floor:
            return u, psi1
    raise OverlapNotCreated(f"overlap stayed below {floor:g} after {attempts} pulses")


def write_convergence_log(result: SteeringResult, path) -> None:
    with open(path, "w") as fh:
        fh.write("iteration,L,abs_c1,h5_distance,cumulative_T\n")
        for it, L, c1, d, T in result.log:
            fh.write(f"{int(it)},{float(L)!r},{float(c1)!r},{float(d)!r},{float(T)!r}\n")
