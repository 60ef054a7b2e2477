"""Finite-truncation audits of the spectral hypotheses.

* coupling: ``<mu1 phi_1, phi_k> != 0`` for every ``k``;
* non-resonance: ``lambda_1 - lambda_j != lambda_p - lambda_q`` for ``j != 1``
  and ``(p, q) != (1, j)``;
* coupling decay: ``|<mu1 phi_1, phi_k>| >= C / k^3``.

Every statistic is computed on the ``K`` retained modes only, so a report
can refute a hypothesis but never certify it beyond ``K``.  The shifted
variants run the same checks on ``(V - 2 mu1 - 4 mu2, mu1 + 4 mu2)``.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field

import numpy as np

from .dynamics import SystemParams, shift_params
from .errors import PreconditionError
from .spectral import Spectrum

C1_FLOOR = 1e-12
C2_RELATIVE_FLOOR = 1e-6
C3_FLOOR = 1e-10
C3_SLOPE_LIMIT = -0.5
TIE_RTOL = 1e-9


@dataclass
class ConditionReport:
    """Statistics of the three checks at truncation ``k_max``.

    Indices in witnesses are 1-based mode numbers.
    """

    k_max: int
    c1_min_coupling: float
    c1_witness: int
    c2_min_gap: float
    c2_witness: tuple
    c3_constant: float
    c3_witness: int
    c3_trend: float
    passed_flags: dict = field(default_factory=dict)
    shifted: bool = False
    potential: str = ""
    dipole: str = ""

    @property
    def passed(self) -> bool:
        return all(self.passed_flags.values())

    def to_dict(self) -> dict:
        d = asdict(self)
        d["c2_witness"] = list(self.c2_witness)
        d["scope"] = f"at truncation K={self.k_max}"
        return d

    def to_json(self, path=None, indent: int = 2) -> str:
        text = json.dumps(self.to_dict(), indent=indent, sort_keys=True)
        if path is not None:
            with open(path, "w") as fh:
                fh.write(text + "\n")
        return text


def _couplings(p: SystemParams) -> np.ndarray:
    return np.abs(p.coupling1[0])


def check_C1(p: SystemParams, floor: float = C1_FLOOR):
    """``(passed, min_k |B1[1,k]|, argmin k)`` over ``k = 1..K``."""
    b = _couplings(p)
    k = int(np.argmin(b))
    return bool(b[k] > floor), float(b[k]), k + 1


def c2_gaps(lam, exclude_tautologies: bool = True) -> np.ndarray:
    """``G[j, p, q] = (lam_1 - lam_j) - (lam_p - lam_q)`` (0-based), ``nan`` where not scanned."""
    lam = np.asarray(lam, dtype=float)
    K = len(lam)
    left = lam[0] - lam
    right = lam[:, None] - lam[None, :]
    G = left[:, None, None] - right[None, :, :]
    G[0] = np.nan
    if exclude_tautologies:
        j = np.arange(1, K)
        G[j, 0, j] = np.nan
    return G


def check_C2(spec: Spectrum | np.ndarray, gap_floor: float = C2_RELATIVE_FLOOR,
             exclude_tautologies: bool = True, tie_rtol: float = TIE_RTOL):
    """Scan for gap coincidences ``lambda_1 - lambda_j = lambda_p - lambda_q``.

    Returns ``(passed, min_gap, (j, p, q))``.  The floor is relative to
    ``|lambda_1|``.  Gaps within ``tie_rtol * max|lambda|`` of the minimum count
    as ties and the lexicographically smallest ``(j, p, q)`` is reported.
    With ``exclude_tautologies`` false the pairs ``(p, q) = (1, j)`` are kept,
    so the check fails trivially.
    """
    lam = spec.eigenvalues if isinstance(spec, Spectrum) else np.asarray(spec, dtype=float)
    if len(lam) < 2:
        raise PreconditionError("the non-resonance scan needs at least two modes")
    A = np.abs(c2_gaps(lam, exclude_tautologies))
    best = np.nanmin(A)
    tol = tie_rtol * float(np.max(np.abs(lam)))
    ties = np.argwhere(A <= best + tol)  # row-major, so lexicographic
    j, p, q = (int(i) + 1 for i in ties[0])
    gap = float(A[j - 1, p - 1, q - 1])
    return bool(gap > gap_floor * abs(lam[0])), gap, (j, p, q)


def check_C3(p: SystemParams, floor: float = C3_FLOOR, slope_limit: float = C3_SLOPE_LIMIT):
    """``(passed, min_k k^3 |B1[1,k]|, slope, argmin k)``.

    The slope is the least-squares fit of ``log m_k`` against ``log k`` over
    ``k`` in ``[K/2, K]``, using the entries that are nonzero to round-off.
    """
    K = p.k_max
    if K < 5:
        raise PreconditionError("the decay check needs K >= 5")
    k = np.arange(1, K + 1, dtype=float)
    m = k**3 * _couplings(p)
    kmin = int(np.argmin(m))
    sel = (k >= K / 2) & (m > 1e-10 * max(float(np.max(m)), 1e-300))
    slope = float(np.polyfit(np.log(k[sel]), np.log(m[sel]), 1)[0]) if np.sum(sel) >= 2 else 0.0
    passed = bool(m[kmin] > floor and slope > slope_limit)
    return passed, float(m[kmin]), slope, kmin + 1


def check_conditions(p: SystemParams, exclude_tautologies: bool = True, shifted: bool = False) -> ConditionReport:
    ok1, b_min, k1 = check_C1(p)
    ok2, gap, witness = check_C2(p.spectrum, exclude_tautologies=exclude_tautologies)
    ok3, m_min, slope, k3 = check_C3(p)
    prime = "'" if shifted else ""
    flags = {f"C1{prime}": ok1, f"C2{prime}": ok2, f"C3{prime}": ok3}
    return ConditionReport(p.k_max, b_min, k1, gap, witness, m_min, k3, slope, flags,
                           shifted, p.V.label, p.mu1.label)


def check_shifted(p: SystemParams, exclude_tautologies: bool = True) -> ConditionReport:
    """Checks on the shifted system ``(V - 2 mu1 - 4 mu2, mu1 + 4 mu2, mu2)``."""
    return check_conditions(shift_params(p), exclude_tautologies, shifted=True)
