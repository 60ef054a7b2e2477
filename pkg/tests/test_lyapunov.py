import numpy as np
import pytest

from polarcontrol.dynamics import ControlSignal, SystemParams, default_dt, propagate
from polarcontrol.errors import NoDescentFound, NonUnitState, PreconditionError, StagnationError
from polarcontrol.lyapunov import (
    DEFAULT_GAMMA,
    LyapunovConfig,
    choose_gamma,
    descent_step,
    ensure_overlap,
    lyapunov_value,
    phase_min_h5_distance,
    pulse_duration,
    select_modes,
    steer_to_ground,
    write_convergence_log,
)
from polarcontrol.spectral import ModalState, PotentialFn


@pytest.fixture(scope="module")
def small(grid, x, x2):
    """V = 5x, mu1 = x, mu2 = x^2 at K = 6 (cheap steering)."""
    return SystemParams.build(PotentialFn.builtin("linear 5", grid), x, x2, 6)


class TestValues:
    def test_ground_state_is_zero(self, tilted):
        psi = ModalState(np.r_[np.exp(0.7j), np.zeros(11)], tilted.spectrum)
        assert lyapunov_value(psi, 1e-9) == pytest.approx(0.0, abs=1e-15)
        assert phase_min_h5_distance(psi) == pytest.approx(0.0, abs=1e-15)

    def test_excited_state(self, tilted):
        lam2 = tilted.eigenvalues[1]
        psi = ModalState.basis(2, tilted.spectrum)
        assert lyapunov_value(psi, 1e-9) == pytest.approx(1.0 + 1e-9 * lam2**6)
        assert phase_min_h5_distance(psi) == pytest.approx(np.sqrt(1 + 32.0**2))

    def test_equal_superposition(self, tilted):
        lam2 = tilted.eigenvalues[1]
        psi = ModalState.from_amplitudes({1: 1, 2: 1}, tilted.spectrum)
        assert lyapunov_value(psi, 1e-9) == pytest.approx(1e-9 * lam2**6 / 2 + 0.5)

    def test_phase_invariant(self, tilted):
        psi = ModalState.from_amplitudes({1: 1, 2: 0.3j, 5: 0.1}, tilted.spectrum)
        rotated = ModalState(np.exp(1.3j) * psi.coeffs, tilted.spectrum)
        assert lyapunov_value(rotated, 1e-10) == pytest.approx(lyapunov_value(psi, 1e-10))

    def test_non_unit_rejected(self, tilted):
        with pytest.raises(NonUnitState):
            lyapunov_value(ModalState(np.full(12, 1.0), tilted.spectrum), 1.0)


class TestGamma:
    def test_equal_superposition(self, tilted):
        psi = ModalState.from_amplitudes({1: 1, 2: 1}, tilted.spectrum)
        gamma = choose_gamma(psi)
        assert gamma == pytest.approx(0.5 / tilted.eigenvalues[1] ** 6)
        assert lyapunov_value(psi, gamma) == pytest.approx(0.75)

    def test_spread_population(self, tilted):
        c = np.zeros(12, complex)
        c[0] = np.sqrt(0.9)
        c[1:5] = np.sqrt(0.1 / 4)
        psi = ModalState(c, tilted.spectrum)
        assert lyapunov_value(psi, choose_gamma(psi)) == pytest.approx(0.55)

    def test_ground_state_default(self, tilted):
        assert choose_gamma(ModalState.basis(1, tilted.spectrum)) == DEFAULT_GAMMA

    def test_overlap_floor(self, tilted):
        with pytest.raises(PreconditionError):
            choose_gamma(ModalState.basis(3, tilted.spectrum))

    def test_config_validation(self):
        with pytest.raises(PreconditionError):
            LyapunovConfig(gamma=0.0)
        with pytest.raises(PreconditionError):
            LyapunovConfig(resonant_modes=[1])


class TestPulseDesign:
    def test_select_modes(self, tilted):
        psi = ModalState.from_amplitudes({1: 1, 2: 1e-3, 5: 1e-8, 7: 1e-2}, tilted.spectrum)
        assert select_modes(psi, 1e-12) == [2, 7]
        assert select_modes(psi, 1e-12, max_modes=1) == [7]
        ground = ModalState.from_amplitudes({1: 1, 4: 1e-9}, tilted.spectrum)
        assert select_modes(ground, 1e-12) == [4]

    def test_pulse_duration(self, tilted):
        lam = tilted.eigenvalues
        assert pulse_duration([2], lam) == pytest.approx(4 * np.pi / (lam[1] - lam[0]))
        assert pulse_duration([2, 3], lam) == pytest.approx(
            4 * np.pi / min(lam[1] - lam[0], lam[2] - lam[1]))

    def test_strict_decrease_and_slope(self, small):
        psi = ModalState.from_amplitudes({1: 1, 2: 0.4, 3: 0.1j}, small.spectrum)
        cfg = LyapunovConfig(gamma=choose_gamma(psi))
        u, nxt, pulse = descent_step(psi, small, cfg)
        assert lyapunov_value(nxt, cfg.gamma) < lyapunov_value(psi, cfg.gamma)
        assert pulse.slope < 0
        assert pulse.amplitude <= cfg.pulse_amplitude
        assert np.sum(pulse.amplitudes) == pytest.approx(1.0)
        assert u.regularity.value == "C20"
        assert (propagate(psi, u, small) - nxt).norm < 1e-12

    def test_weak_excitation(self, grid, x):
        p = SystemParams.build(PotentialFn.builtin("linear 5", grid), x, PotentialFn.zero(grid), 6)
        psi = ModalState(np.r_[0.99, 0.141, np.zeros(4)], p.spectrum).normalized()
        cfg = LyapunovConfig(gamma=choose_gamma(psi))
        _, nxt, _ = descent_step(psi, p, cfg)
        assert lyapunov_value(nxt, cfg.gamma) < lyapunov_value(psi, cfg.gamma)

    def test_ground_state_rejected(self, small):
        with pytest.raises(PreconditionError):
            descent_step(ModalState.basis(1, small.spectrum), small, LyapunovConfig())

    def test_slope_matches_simulation(self, small):
        psi = ModalState.from_amplitudes({1: 1, 2: 0.4, 3: 0.1j}, small.spectrum)
        cfg = LyapunovConfig(gamma=choose_gamma(psi))
        u, _, pulse = descent_step(psi, small, cfg)
        shape = u.values / pulse.amplitude
        L0 = lyapunov_value(psi, cfg.gamma)
        h = 1e-5
        Lp = lyapunov_value(propagate(psi, ControlSignal(h * shape, u.t_final), small), cfg.gamma)
        Lm = lyapunov_value(propagate(psi, ControlSignal(-h * shape, u.t_final), small), cfg.gamma)
        assert (Lp - Lm) / (2 * h) == pytest.approx(pulse.slope, rel=1e-4)

    def test_flipped_pulse_ascends_to_first_order(self, small):
        psi = ModalState.from_amplitudes({1: 1, 2: 0.4}, small.spectrum)
        cfg = LyapunovConfig(gamma=choose_gamma(psi))
        try:
            _, _, pulse = descent_step(psi, small, cfg, flip=True)
        except NoDescentFound:  # no decrease along any reversed direction
            return
        assert pulse.slope > 0


class TestSteering:
    def test_reaches_tolerance(self, small, tmp_path):
        psi0 = ModalState.from_amplitudes({1: 1, 2: 0.05}, small.spectrum)
        d0 = phase_min_h5_distance(psi0)
        res = steer_to_ground(psi0, small, 0.5 * d0)
        Ls = [row[1] for row in res.log]
        assert np.all(np.diff(Ls) < 0)
        assert res.distance < 0.5 * d0
        assert res.log[-1][4] == pytest.approx(res.control.t_final)
        assert (propagate(psi0, res.control, small) - res.state).norm < 1e-10
        write_convergence_log(res, tmp_path / "conv.csv")
        table = np.loadtxt(tmp_path / "conv.csv", delimiter=",", skiprows=1, ndmin=2)
        assert table.shape == (res.iterations + 1, 5)

    def test_already_close(self, small):
        psi0 = ModalState.basis(1, small.spectrum)
        res = steer_to_ground(psi0, small, 1e-3)
        assert res.control is None and res.iterations == 0

    def test_iteration_budget(self, small):
        psi0 = ModalState.from_amplitudes({1: 1, 2: 0.3, 3: 0.2}, small.spectrum)
        cfg = LyapunovConfig(gamma=choose_gamma(psi0), max_iterations=1)
        with pytest.raises(StagnationError):
            steer_to_ground(psi0, small, 1e-6, cfg)

    def test_needs_overlap(self, small):
        with pytest.raises(PreconditionError):
            steer_to_ground(ModalState.basis(2, small.spectrum), small, 1e-2,
                            LyapunovConfig())


class TestOverlap:
    def test_from_excited_state(self, small):
        u, psi1 = ensure_overlap(ModalState.basis(2, small.spectrum), small)
        assert u is not None
        assert abs(psi1.coeffs[0]) > 1e-3
        assert u.values[0] == 0 and u.values[-1] == 0

    @pytest.mark.parametrize("amps", [{1: 1}, {1: 0.5, 2: np.sqrt(0.75)}, {1: 0.1, 2: 1}])
    def test_noop_when_present(self, small, amps):
        psi = ModalState.from_amplitudes(amps, small.spectrum)
        u, out = ensure_overlap(psi, small)
        assert u is None and out is psi

    def test_polarizability_only(self, grid, zero, x):
        p = SystemParams.build(zero, zero, x, 6)
        u, psi1 = ensure_overlap(ModalState.basis(2, p.spectrum), p,
                                 dt=default_dt(p, 10.0))
        assert abs(psi1.coeffs[0]) > 1e-3
