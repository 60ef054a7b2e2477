import itertools
import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from polarcontrol.conditions import (
    TIE_RTOL,
    c2_gaps,
    check_C1,
    check_C2,
    check_C3,
    check_conditions,
    check_shifted,
)
from polarcontrol.dynamics import SystemParams, shift_params
from polarcontrol.errors import PreconditionError
from polarcontrol.spectral import PotentialFn, compute_spectrum


def brute_force_c2(lam, exclude_tautologies=True):
    """Exhaustive loop over (j, p, q), 1-based, smallest gap with lexicographic ties."""
    K = len(lam)
    rows = []
    for j, p, q in itertools.product(range(2, K + 1), range(1, K + 1), range(1, K + 1)):
        if exclude_tautologies and (p, q) == (1, j):
            continue
        gap = abs((lam[0] - lam[j - 1]) - (lam[p - 1] - lam[q - 1]))
        rows.append((gap, (j, p, q)))
    best = min(g for g, _ in rows)
    tol = TIE_RTOL * max(abs(v) for v in lam)
    witness = min(w for g, w in rows if g <= best + tol)
    gap = next(g for g, w in rows if w == witness)
    return gap, witness


class TestC2:
    @pytest.mark.parametrize("K", range(2, 9))
    def test_brute_force_free_spectrum(self, K):
        lam = np.pi**2 * np.arange(1, K + 1) ** 2
        ok, gap, witness = check_C2(lam)
        assert (gap, witness) == brute_force_c2(list(lam))

    @settings(max_examples=40, deadline=None)
    @given(st.integers(2, 8).flatmap(
        lambda K: st.lists(st.floats(1.0, 500.0), min_size=K, max_size=K, unique=True)))
    def test_brute_force_random(self, values):
        lam = np.sort(values)
        _, gap, witness = check_C2(lam)
        assert (gap, witness) == brute_force_c2(list(lam))

    @settings(max_examples=40, deadline=None)
    @given(st.lists(st.integers(1, 40), min_size=2, max_size=8, unique=True))
    def test_brute_force_integer_ties(self, values):
        lam = np.sort(np.array(values, dtype=float))
        for excl in (True, False):
            _, gap, witness = check_C2(lam, exclude_tautologies=excl)
            assert (gap, witness) == brute_force_c2(list(lam), excl)

    def test_two_modes(self):
        ok, gap, witness = check_C2(np.array([1.0, 4.0]))
        # only (j, p, q) = (2, 1, 1), (2, 2, 1), (2, 2, 2) remain
        assert witness == (2, 1, 1) and gap == 3.0 and ok

    def test_free_resonance(self, zero):
        spec = compute_spectrum(zero, 12)
        ok, gap, witness = check_C2(spec)
        assert not ok
        assert witness == (4, 7, 8)
        assert gap < 1e-8 * spec.eigenvalues[0]

    def test_tautologies_kept(self):
        ok, gap, witness = check_C2(np.array([1.0, 2.5, 7.0]), exclude_tautologies=False)
        assert not ok and gap == 0.0 and witness == (2, 1, 2)

    def test_gap_tensor_layout(self):
        lam = np.array([1.0, 3.0, 8.0])
        G = c2_gaps(lam)
        assert np.all(np.isnan(G[0]))
        assert np.isnan(G[1, 0, 1]) and np.isnan(G[2, 0, 2])
        assert G[2, 1, 0] == pytest.approx((1 - 8) - (3 - 1))

    def test_needs_two_modes(self):
        with pytest.raises(PreconditionError):
            check_C2(np.array([1.0]))


class TestCouplingChecks:
    def test_parity_zeros_fail_C1(self, free_dipole):
        ok, bmin, k = check_C1(free_dipole)
        assert not ok and k % 2 == 1 and k >= 3 and bmin < 1e-12

    def test_zero_and_constant_dipole(self, grid, zero):
        p = SystemParams.build(zero, zero, zero, 8)
        ok, bmin, _ = check_C1(p)
        assert not ok and bmin == 0.0
        assert not check_C3(p)[0]
        q = SystemParams.build(zero, PotentialFn.builtin("constant 1", grid), zero, 8)
        ok, bmin, k = check_C1(q)
        assert not ok and k >= 2 and bmin < 1e-12

    def test_symmetric_dipole_parity_witness(self, grid, zero, x2):
        mu1 = x2 - PotentialFn.builtin("linear 1", grid)
        p = SystemParams.build(zero, mu1, zero, 12)
        ok, m, _, k = check_C3(p)
        assert not ok and k % 2 == 0 and m < 1e-10

    def test_tilted_C1_passes(self, tilted):
        ok, bmin, _ = check_C1(tilted)
        assert ok and bmin > 1e-6

    def test_C3_constant(self, tilted):
        ok, m, slope, k = check_C3(tilted)
        b = np.abs(tilted.coupling1[0])
        kk = np.arange(1, 13)
        assert m == pytest.approx(np.min(kk**3 * b))
        assert k == int(np.argmin(kk**3 * b)) + 1

    def test_C3_needs_modes(self, grid, x, x2):
        p = SystemParams.build(PotentialFn.builtin("linear 5", grid), x, x2, 4)
        with pytest.raises(PreconditionError):
            check_C3(p)


class TestReport:
    def test_fields_and_json(self, tilted, tmp_path):
        rep = check_conditions(tilted)
        assert set(rep.passed_flags) == {"C1", "C2", "C3"}
        rep.to_json(tmp_path / "c.json")
        d = json.loads((tmp_path / "c.json").read_text())
        assert d["scope"] == "at truncation K=12"
        assert d["c2_witness"] == list(rep.c2_witness)
        assert d["k_max"] == 12

    def test_shifted_report(self, grid, zero, x):
        p = SystemParams.build(zero, zero, x, 12)
        ps = shift_params(p)
        np.testing.assert_allclose(ps.V.samples, -4 * grid.nodes)
        np.testing.assert_allclose(ps.mu1.samples, 4 * grid.nodes)
        rep = check_shifted(p)
        assert set(rep.passed_flags) == {"C1'", "C2'", "C3'"}
        assert rep.shifted
        assert rep.passed
        plain = check_conditions(p)
        assert not plain.passed_flags["C1"]

    def test_no_coupling_shifted(self, grid, zero):
        p = SystemParams.build(PotentialFn.builtin("linear 5", grid), zero, zero, 8)
        assert not check_shifted(p).passed_flags["C3'"]

    def test_polarizability_construction(self, grid, zero):
        # mu2 = -(mu1 + mu) / 4 turns (V, mu1) into potential V - mu1 + mu with dipole -mu
        V = PotentialFn.builtin("gauss 3,0.3,0.1", grid)
        mu1 = PotentialFn.builtin("linear 2", grid)
        mu = PotentialFn.builtin("quadratic 1", grid)
        mu2 = (mu1 + mu) * -0.25
        ps = shift_params(SystemParams.build(V, mu1, mu2, 6))
        np.testing.assert_allclose(ps.V.samples, (V - mu1 + mu).samples, atol=1e-14)
        np.testing.assert_allclose(ps.mu1.samples, -mu.samples, atol=1e-14)

    def test_tilted_report_at_K20(self, grid, x, x2):
        p = SystemParams.build(PotentialFn.builtin("linear 5", grid), x, x2, 20)
        rep = check_shifted(p)
        assert rep.k_max == 20
        assert np.isfinite([rep.c1_min_coupling, rep.c2_min_gap, rep.c3_constant, rep.c3_trend]).all()
