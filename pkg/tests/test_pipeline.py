import json

import numpy as np
import pytest

from polarcontrol.dynamics import SystemParams, conjugate, propagate, reverse_control
from polarcontrol.errors import PreconditionError, VerificationFailure
from polarcontrol.moments import target_near_ground
from polarcontrol.pipeline import (
    TransferOptions,
    _connect_time,
    global_transfer_basic,
    load_plan,
    quintic_ramp,
    replay_plan,
)
from polarcontrol.spectral import ModalState, PotentialFn


@pytest.fixture(scope="module")
def small(grid, x, x2):
    return SystemParams.build(PotentialFn.builtin("linear 5", grid), x, x2, 6)


@pytest.fixture(scope="module")
def steered_plan(small):
    psi0 = ModalState.from_amplitudes({1: 1, 2: 0.05}, small.spectrum)
    psi_f = ModalState.from_amplitudes({1: 1, 2: 0.03j, 3: 0.01}, small.spectrum)
    return global_transfer_basic(psi0, psi_f, small, 1e-6)


class TestRamp:
    def test_shape(self):
        u = quintic_ramp(1.0, 1000)
        assert u.values[0] == 0.0 and u.values[-1] == pytest.approx(2.0)
        assert np.all(np.diff(u.values) >= 0)
        s = u.times
        np.testing.assert_allclose(u.values, 2 * (10 * s**3 - 15 * s**4 + 6 * s**5), atol=1e-14)
        # near either end u behaves like 20 s^3: flat to second order
        h = u.dt
        assert abs(u.values[1]) < 21 * h**3
        assert abs(2.0 - u.values[-2]) < 21 * h**3
        assert u.values[500] == pytest.approx(1.0)

    def test_height(self):
        assert quintic_ramp(2.0, 10, height=-1.0).values[-1] == pytest.approx(-1.0)


class TestConnectTime:
    def test_phase_condition(self):
        lam1 = 14.6
        T = _connect_time(0.3, -1.2, lam1, 1.0)
        assert 1.0 <= T < 1.0 + 2 * np.pi / lam1
        mismatch = np.exp(1j * (0.3 - lam1 * T)) * np.exp(1.2j)
        assert np.angle(mismatch) == pytest.approx(0.0, abs=1e-12)


class TestBasicTransfer:
    def test_identity(self, small):
        psi = ModalState.from_amplitudes({1: 1, 2: 0.5}, small.spectrum)
        plan = global_transfer_basic(psi, psi, small, 1e-6)
        assert plan.segments == [] and plan.achieved_error == 0.0 and plan.control is None

    def test_direct_local_connection(self, tilted):
        psi0 = ModalState.basis(1, tilted.spectrum)
        psi_f = target_near_ground(1.0, tilted, {2: 0.01})
        plan = global_transfer_basic(psi0, psi_f, tilted, 1e-6)
        assert plan.labels == ["local_connect"]
        assert plan.achieved_error < 1e-9

    def test_steered_plan(self, small, steered_plan):
        plan = steered_plan
        assert plan.labels == ["steer_fwd", "local_connect", "steer_bwd_reversed"]
        assert plan.achieved_error < 1e-6
        u = plan.control
        assert u.values[0] == 0.0 and u.values[-1] == 0.0
        assert plan.total_T == pytest.approx(u.t_final)
        resim = (propagate(plan.psi0, u, small) - plan.psi_f).norm
        assert resim == pytest.approx(plan.achieved_error, abs=1e-14)

    def test_segment_reversal(self, small, steered_plan):
        # the reversed leg maps the conjugate of its own end state back onto psi_f
        seg = dict(steered_plan.segments)["steer_bwd_reversed"]
        mid = propagate(conjugate(steered_plan.psi_f), reverse_control(seg), small)
        back = propagate(conjugate(mid), seg, small)
        assert (back - steered_plan.psi_f).norm < 1e-6

    def test_save_and_replay(self, small, steered_plan, tmp_path):
        steered_plan.save(tmp_path / "plan.json", tmp_path / "control.csv")
        d = json.loads((tmp_path / "plan.json").read_text())
        assert [s["label"] for s in d["segments"]] == steered_plan.labels
        assert d["control_file"] == "control.csv"
        _, control, psi0, psi_f = load_plan(tmp_path / "plan.json", small)
        np.testing.assert_array_equal(control.values, steered_plan.control.values)
        np.testing.assert_array_equal(psi_f.coeffs, steered_plan.psi_f.coeffs)
        replayed = replay_plan(tmp_path / "plan.json", small)
        assert replayed == pytest.approx(steered_plan.achieved_error, abs=1e-12)

    def test_verification_failure_carries_plan(self, tilted):
        psi0 = ModalState.basis(1, tilted.spectrum)
        psi_f = target_near_ground(1.0, tilted, {2: 0.01})
        opts = TransferOptions(local_tolerance=1e-3)
        with pytest.raises(VerificationFailure) as info:
            global_transfer_basic(psi0, psi_f, tilted, 1e-12, opts)
        assert info.value.exit_code == 4
        assert info.value.plan.labels == ["local_connect"]

    def test_inputs_checked(self, small, tilted):
        with pytest.raises(PreconditionError):
            global_transfer_basic(ModalState.basis(1, tilted.spectrum),
                                  ModalState.basis(1, small.spectrum), small, 1e-3)
