"""Moment problem of the linearized system and the local exact control map.

The linearization around ``(u = 0, Phi_1)`` sends a control ``v = int_0^t w``
with ``v(0) = v(T) = 0`` to

    <Psi(T), Phi_k(T)> = -(<mu1 phi_1, phi_k> / w_k) int_0^T w e^{i w_k t} dt,  k >= 2,
    <Psi(T), Phi_1(T)> = i <mu1 phi_1, phi_1> int_0^T (T - t) w dt,

with ``w_k = lambda_k - lambda_1``.  Inverting these relations for a target
``Psi_f`` gives the moment problem solved here over the finite family
``{1, t, cos(w_k t), sin(w_k t)}``.  All integrals of that family are
evaluated in closed form.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.integrate import cumulative_trapezoid
from scipy.linalg import lstsq, null_space

from .dynamics import (
    ControlSignal,
    Regularity,
    SystemParams,
    default_dt,
    endpoint_jacobian,
    propagate,
    steps_for,
)
from .errors import (
    DivergenceError,
    EndpointNonzero,
    IllConditioned,
    NumericalFailure,
    PreconditionError,
    RadiusTooLarge,
    ResidualTooLarge,
    VanishingCoupling,
)
from .spectral import ModalState, eigenstate, free_evolve, sobolev_norm

RIDGE = 1e-12
RESIDUAL_TOL = 1e-8
ENDPOINT_TOL = 1e-7
MAX_CONDITION = 1e12
DEFAULT_RADIUS = 0.5


@dataclass(frozen=True)
class MomentProblem:
    T: float
    frequencies: np.ndarray  # w_k for k = 2..K
    rhs_dc: complex
    rhs_ramp: complex
    rhs_osc: np.ndarray

    def __post_init__(self):
        freqs = np.asarray(self.frequencies, dtype=float)
        if np.any(freqs <= 0) or np.any(np.diff(freqs) <= 0):
            raise PreconditionError("frequencies must be positive and strictly increasing")

    def scaled(self, alpha: float) -> "MomentProblem":
        return MomentProblem(self.T, self.frequencies, alpha * self.rhs_dc,
                             alpha * self.rhs_ramp, alpha * np.asarray(self.rhs_osc))


def _exp_moment(a: int, nu: float, T: float) -> complex:
    """``int_0^T t^a exp(i nu t) dt``."""
    if abs(nu) * T < 0.5:
        total, term_n = 0.0j, 1.0 + 0.0j
        for n in range(40):
            total += term_n * T ** (n + a + 1) / (n + a + 1)
            term_n *= 1j * nu / (n + 1)
        return total
    e = np.exp(1j * nu * T)
    value = (e - 1.0) / (1j * nu)
    for b in range(1, a + 1):
        value = (T**b * e - b * value) / (1j * nu)
    return value


class MomentBasis:
    """The real family ``{1, t, cos(w t), sin(w t)}`` for the given frequencies.

    Each member is stored as a list of ``(coef, power, nu)`` terms meaning
    ``sum coef t^power exp(i nu t)``.
    """

    def __init__(self, frequencies, T: float):
        self.frequencies = np.asarray(frequencies, dtype=float)
        self.T = float(T)
        terms = [[(1.0, 0, 0.0)], [(1.0, 1, 0.0)]]
        for w in self.frequencies:
            terms.append([(0.5, 0, w), (0.5, 0, -w)])
            terms.append([(-0.5j, 0, w), (0.5j, 0, -w)])
        self.terms = terms

    def __len__(self):
        return len(self.terms)

    def integral_against(self, power: int, nu: float) -> np.ndarray:
        """``int_0^T f_j(t) t^power e^{i nu t} dt`` for every member ``j``."""
        return np.array([
            sum(c * _exp_moment(a + power, s + nu, self.T) for c, a, s in member)
            for member in self.terms
        ])

    def evaluate(self, t) -> np.ndarray:
        """Members at times ``t``; shape (len(self), len(t))."""
        t = np.asarray(t, dtype=float)
        rows = [np.ones_like(t), t]
        for w in self.frequencies:
            rows += [np.cos(w * t), np.sin(w * t)]
        return np.array(rows)

    def antiderivative(self, t) -> np.ndarray:
        """``int_0^t f_j`` for every member."""
        t = np.asarray(t, dtype=float)
        rows = [t, 0.5 * t**2]
        for w in self.frequencies:
            rows += [np.sin(w * t) / w, (1.0 - np.cos(w * t)) / w]
        return np.array(rows)

    def moment_matrix(self) -> np.ndarray:
        """Real equations: ``int w``, ``int (T - t) w``, then Re/Im of ``int w e^{i w_k t}``."""
        T = self.T
        rows = [self.integral_against(0, 0.0).real,
                (T * self.integral_against(0, 0.0) - self.integral_against(1, 0.0)).real]
        for w in self.frequencies:
            z = self.integral_against(0, w)
            rows += [z.real, z.imag]
        return np.array(rows)


@dataclass(frozen=True)
class MomentSolution:
    T: float
    times: np.ndarray
    w: np.ndarray
    residuals: np.ndarray  # |dc|, |ramp|, then |osc_k| for k = 2..K
    coefficients: np.ndarray = field(repr=False)
    basis: MomentBasis = field(repr=False)
    condition: float = float("nan")

    def w_at(self, t) -> np.ndarray:
        return self.coefficients @ self.basis.evaluate(t)

    def v_at(self, t) -> np.ndarray:
        return self.coefficients @ self.basis.antiderivative(t)


def project_H(psi: ModalState) -> ModalState:
    """Drop the real part of the first coefficient."""
    c = np.array(psi.coeffs)
    c[0] = 1j * c[0].imag
    return ModalState(c, psi.spectrum)


def build_moment_problem(Psi_f: ModalState, T: float, p: SystemParams,
                         coupling_floor: float = 1e-12) -> MomentProblem:
    """Targets of the moment problem for a linearized endpoint ``Psi_f``.

    ``Psi_f`` must satisfy ``Re <Psi_f, Phi_1(T)> = 0``.  ``rhs_ramp`` is the
    complex number ``<Psi_f, Phi_1(T)> / <mu1 phi_1, phi_1>``; the real ramp
    moment it prescribes is ``-i`` times that, i.e. its imaginary part.
    """
    lam = p.eigenvalues
    b = p.coupling1[0]
    small = np.flatnonzero(np.abs(b) <= coupling_floor)
    if small.size:
        raise VanishingCoupling(
            f"<mu1 phi_1, phi_k> vanishes for k = {small[0] + 1} (C1 fails at truncation)"
        )
    pairing = Psi_f.coeffs * np.exp(1j * lam * T)  # <Psi_f, Phi_k(T)>
    scale = max(1.0, float(np.max(np.abs(pairing))))
    if abs(pairing[0].real) > 1e-10 * scale:
        raise PreconditionError("target is not in H: Re <Psi_f, Phi_1(T)> must vanish")
    return MomentProblem(
        T=float(T),
        frequencies=lam[1:] - lam[0],
        rhs_dc=0.0j,
        rhs_ramp=complex(pairing[0] / b[0]),
        rhs_osc=(lam[0] - lam[1:]) / b[1:] * pairing[1:],
    )


def _rhs_vector(mp: MomentProblem) -> np.ndarray:
    osc = np.asarray(mp.rhs_osc, dtype=complex)
    rhs = [mp.rhs_dc.real, mp.rhs_ramp.imag]
    for d in osc:
        rhs += [d.real, d.imag]
    return np.array(rhs)


def moment_residuals(mp: MomentProblem, basis: MomentBasis, x) -> np.ndarray:
    z = basis.moment_matrix() @ x - _rhs_vector(mp)
    return np.concatenate([np.abs(z[:2]), np.hypot(z[2::2], z[3::2])])


def solve_moment_problem(mp: MomentProblem, n_steps: int, ridge: float = RIDGE,
                         tol: float = RESIDUAL_TOL) -> MomentSolution:
    """Ridge-regularized least squares over ``{1, t, cos w_k t, sin w_k t}``.

    The system is square (``2K`` real equations and unknowns); ``ridge`` is
    relative to the squared spectral norm of the moment matrix.  One step of
    iterative refinement follows the regularized solve.
    """
    basis = MomentBasis(mp.frequencies, mp.T)
    A = basis.moment_matrix()
    if A.shape[0] > A.shape[1]:
        raise PreconditionError("moment basis is smaller than the number of equations")
    b = _rhs_vector(mp)
    svals = np.linalg.svd(A, compute_uv=False)
    cond = svals[0] / svals[-1] if svals[-1] > 0 else math.inf
    if cond > MAX_CONDITION:
        raise IllConditioned(f"moment matrix condition {cond:.2e}; use a larger T")
    weight = math.sqrt(ridge) * svals[0]
    A_aug = np.vstack([A, weight * np.eye(A.shape[1])])
    b_aug = np.concatenate([b, np.zeros(A.shape[1])])
    x = lstsq(A_aug, b_aug)[0]
    # one refinement pass removes the ridge bias to second order; the map
    # from targets to coefficients stays linear
    b_aug[: len(b)] = b - A @ x
    x = x + lstsq(A_aug, b_aug)[0]
    residuals = moment_residuals(mp, basis, x)
    if np.max(residuals) > tol:
        raise ResidualTooLarge(
            f"moment residual {np.max(residuals):.2e} > {tol:g} (condition {cond:.2e})"
        )
    times = np.linspace(0.0, mp.T, n_steps + 1)
    return MomentSolution(mp.T, times, x @ basis.evaluate(times), residuals, x, basis, cond)


def moment_control(solution, t_final: float | None = None,
                   tol: float = ENDPOINT_TOL) -> ControlSignal:
    """``v(t) = int_0^t w``.

    For a :class:`MomentSolution` the antiderivative is evaluated in closed
    form on the solution grid; for a sampled array (with ``t_final``) the
    cumulative trapezoid rule is used.
    """
    if isinstance(solution, MomentSolution):
        v = solution.v_at(solution.times)
        T = solution.T
    else:
        w = np.asarray(solution, dtype=float)
        if t_final is None:
            raise PreconditionError("t_final is required for sampled w")
        T = float(t_final)
        v = cumulative_trapezoid(w, dx=T / (len(w) - 1), initial=0.0)
    if abs(v[-1]) > tol:
        raise EndpointNonzero(f"|v(T)| = {abs(v[-1]):.2e} exceeds {tol:g}")
    v = np.array(v)
    v[0] = v[-1] = 0.0
    return ControlSignal(v, T, Regularity.H10)


@dataclass
class LocalControlResult:
    control: ControlSignal
    error: float
    iterations: int
    history: list  # rows: (iteration, defect_l2, residual_max, control_h1)
    defects: list
    tangent_defects: list  # defect with the component along psi(T) removed
    steps: list  # accepted step lengths

    def convergence_order(self, floor: float = 1e-15) -> float:
        """Least-squares slope of ``log d_{m+1}`` against ``log d_m``.

        Uses every tangent defect above ``floor``. A value near 2 indicates
        quadratic convergence.
        """
        d = np.array([x for x in self.tangent_defects if x > floor])
        if len(d) < 3:
            return float("nan")
        return float(np.polyfit(np.log(d[:-1]), np.log(d[1:]), 1)[0])


def _basis_directions(p: SystemParams, T: float, times: np.ndarray) -> np.ndarray:
    """Control perturbations ``int_0^t w`` for ``w`` in the moment family with ``int w = 0``."""
    lam = p.eigenvalues
    basis = MomentBasis(lam[1:] - lam[0], T)
    mean_row = basis.moment_matrix()[0]
    N = null_space(mean_row[None, :])
    dirs = N.T @ basis.antiderivative(times)
    dirs[:, 0] = 0.0
    dirs[:, -1] = 0.0
    return dirs


def local_exact_control(psi_f: ModalState, T: float, p: SystemParams, tol: float = 1e-9,
                        psi0: ModalState | None = None, method: str = "newton",
                        radius: float = DEFAULT_RADIUS, max_iter: int = 10,
                        dt: float | None = None, damping: bool = False) -> LocalControlResult:
    """Control in ``H^1_0(0, T)`` steering ``psi0`` (default ``phi_1``) exactly to ``psi_f``.

    ``method="newton"`` re-linearizes the discrete endpoint map at every
    iterate, with increments drawn from the antiderivatives of the moment
    family; ``method="frozen"`` reuses the derivative at ``u = 0`` by solving
    the moment problem for each defect (chord iteration, ``psi0 = phi_1`` only).
    With ``damping`` the step length is halved until the defect decreases.
    The real part of the first coefficient, taken in the frame of the free
    endpoint, is not matched: norm conservation fixes it.
    """
    spec = p.spectrum
    if psi0 is None:
        psi0 = ModalState.basis(1, spec)
    if not psi_f.is_unit(1e-8):
        raise PreconditionError("target must have unit norm")
    if method not in ("newton", "frozen"):
        raise PreconditionError(f"unknown method {method!r}")
    reference = free_evolve(psi0, T)
    distance = sobolev_norm(psi_f - reference, 5)
    if distance > radius:
        raise RadiusTooLarge(
            f"truncated H5 distance {distance:.3e} to the free endpoint exceeds radius {radius:g}"
        )
    if dt is None:
        dt = default_dt(p, 1.0)
    n = steps_for(T, dt)
    u = ControlSignal.zeros(T, n, Regularity.H10)
    lam = p.eigenvalues
    c1 = psi0.coeffs[0]
    frame = np.exp(1j * lam * T) * (np.conj(c1) / abs(c1) if abs(c1) > 0 else 1.0)

    if method == "frozen":
        if np.linalg.norm(psi0.coeffs - ModalState.basis(1, spec).coeffs) > 1e-12:
            raise PreconditionError("the frozen iteration linearizes around phi_1 only")
        directions = None
    else:
        directions = _basis_directions(p, T, u.times)

    history, defects, tangent_defects, steps = [], [], [], []
    for it in range(max_iter + 1):
        if directions is None:
            psi_T = propagate(psi0, u, p)
        else:
            psi_T, J = endpoint_jacobian(psi0, u, p, directions)
        defect = psi_f - psi_T
        err = defect.norm
        defects.append(err)
        radial = np.vdot(psi_T.coeffs, defect.coeffs).real
        tangent_defects.append(float(np.linalg.norm(defect.coeffs - radial * psi_T.coeffs)))
        if err < tol:
            history.append((it, err, 0.0, u.h1_norm()))
            return LocalControlResult(u, err, it, history, defects, tangent_defects, steps)
        if len(defects) >= 3 and defects[-1] > defects[-2] > defects[-3]:
            raise DivergenceError(f"Newton defect grew twice in a row (now {err:.3e})")
        if it == max_iter:
            break
        if directions is None:
            d_frame = project_H(ModalState(frame * defect.coeffs, spec))
            Psi_f = free_evolve(d_frame, T)
            sol = solve_moment_problem(build_moment_problem(Psi_f, T, p), n)
            increment = moment_control(sol)
            residual = float(np.max(sol.residuals))
        else:
            # J has rank 2K - 1 with range orthogonal (real sense) to psi_T, so the
            # least-squares solution discards exactly the defect component along
            # psi_T; at u = 0 this is project_H in the frame of Phi_1(T).
            rows = np.concatenate([J.real, J.imag])
            rhs = np.concatenate([defect.coeffs.real, defect.coeffs.imag])
            z = lstsq(rows, rhs)[0]
            tangent = rhs - np.concatenate([psi_T.coeffs.real, psi_T.coeffs.imag]) * (
                np.dot(rhs, np.concatenate([psi_T.coeffs.real, psi_T.coeffs.imag])))
            residual = float(np.max(np.abs(rows @ z - tangent)))
            increment = ControlSignal(z @ directions, T, Regularity.H10)
        history.append((it, err, residual, u.h1_norm()))
        step = 1.0
        if damping:
            # halve the step until the defect decreases; near the solution the
            # full step is always taken, so the local rate is unaffected
            while step >= 1.0 / 64:
                trial = ControlSignal(u.values + step * increment.values, T, Regularity.H10)
                if (psi_f - propagate(psi0, trial, p)).norm < err:
                    break
                step /= 2
            else:
                raise DivergenceError(f"no step length reduces the defect {err:.3e}")
        steps.append(step)
        u = ControlSignal(u.values + step * increment.values, T, Regularity.H10)
    exc = NumericalFailure(f"no convergence in {max_iter} iterations (defect {defects[-1]:.3e})")
    exc.partial = LocalControlResult(u, defects[-1], max_iter, history, defects, tangent_defects, steps)
    raise exc


def write_newton_log(result: LocalControlResult, path) -> None:
    with open(path, "w") as fh:
        fh.write("iteration,defect_l2,residual_max,control_h1\n")
        for it, err, res, h1 in result.history:
            fh.write(f"{int(it)},{float(err)!r},{float(res)!r},{float(h1)!r}\n")


def target_near_ground(T: float, p: SystemParams, weights: dict) -> ModalState:
    """``normalize(Phi_1(T) + sum_k a_k Phi_k(T))`` for a ``{k: a_k}`` mapping."""
    state = eigenstate(1, T, p.spectrum)
    for k, a in weights.items():
        state = state + a * eigenstate(int(k), T, p.spectrum)
    return state.normalized()
