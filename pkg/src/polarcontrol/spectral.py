"""Dirichlet eigenproblem for ``A_V = -d^2/dx^2 + V`` on (0, 1).

The operator is discretized with second-order central differences on a
uniform grid; Dirichlet rows are eliminated so the matrix is symmetric
tridiagonal.  States are then handled in the truncated eigenbasis as
:class:`ModalState` coefficient vectors.

Inner products follow ``<f, g> = int f conj(g) dx`` and are evaluated with
the composite trapezoid rule including the zero boundary values, which on
the interior nodes reduces to ``h * sum(f * conj(g))``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.linalg import eigh_tridiagonal

from .errors import GridMismatch, PreconditionError, TruncationTooLarge

DEFAULT_N_INTERIOR = 1999
DEFAULT_K_MAX = 30


def _frozen(a, dtype=float) -> np.ndarray:
    arr = np.array(a, dtype=dtype)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True)
class SpatialGrid:
    """Uniform interior nodes ``x_j = (j + 1) h`` with ``h = 1 / (n + 1)``."""

    n_interior: int = DEFAULT_N_INTERIOR

    def __post_init__(self):
        if int(self.n_interior) < 1:
            raise PreconditionError("n_interior must be a positive integer")
        object.__setattr__(self, "n_interior", int(self.n_interior))

    @property
    def h(self) -> float:
        return 1.0 / (self.n_interior + 1)

    @property
    def nodes(self) -> np.ndarray:
        return np.arange(1, self.n_interior + 1) * self.h

    def inner(self, f, g) -> complex:
        return self.h * np.sum(np.asarray(f) * np.conj(g))


@dataclass(frozen=True, eq=False)
class PotentialFn:
    """A real function sampled on the interior nodes of a grid.

    Used for the potential ``V`` as well as for the dipole and
    polarizability moments.
    """

    grid: SpatialGrid
    samples: np.ndarray
    label: str = "custom"

    def __post_init__(self):
        samples = np.asarray(self.samples, dtype=float)
        if samples.shape != (self.grid.n_interior,):
            raise GridMismatch(
                f"expected {self.grid.n_interior} samples, got {samples.shape}"
            )
        if not np.all(np.isfinite(samples)):
            raise PreconditionError(f"potential {self.label!r} has non-finite samples")
        object.__setattr__(self, "samples", _frozen(samples))

    @classmethod
    def from_callable(cls, func, grid: SpatialGrid, label: str = "custom") -> "PotentialFn":
        return cls(grid, np.broadcast_to(func(grid.nodes), (grid.n_interior,)), label)

    @classmethod
    def zero(cls, grid: SpatialGrid) -> "PotentialFn":
        return cls(grid, np.zeros(grid.n_interior), "zero")

    @classmethod
    def builtin(cls, spec: str, grid: SpatialGrid) -> "PotentialFn":
        """Build a named family member.

        ``spec`` is one of ``zero``, ``constant c``, ``linear a`` (``a x``),
        ``quadratic a`` (``a x^2``) or ``gauss a,x0,w``
        (``a exp(-(x - x0)^2 / (2 w^2))``).
        """
        parts = spec.strip().split(None, 1)
        if not parts:
            raise PreconditionError("empty potential spec")
        name = parts[0].lower()
        try:
            args = [float(a) for a in parts[1].replace(",", " ").split()] if len(parts) > 1 else []
        except ValueError as exc:
            raise PreconditionError(f"bad arguments in potential spec {spec!r}") from exc
        x = grid.nodes
        expected = {"zero": 0, "constant": 1, "linear": 1, "quadratic": 1, "gauss": 3}
        if name not in expected:
            raise PreconditionError(f"unknown potential family {name!r}")
        if len(args) != expected[name]:
            raise PreconditionError(
                f"family {name!r} takes {expected[name]} argument(s), got {len(args)}"
            )
        if name == "zero":
            values = np.zeros_like(x)
        elif name == "constant":
            values = np.full_like(x, args[0])
        elif name == "linear":
            values = args[0] * x
        elif name == "quadratic":
            values = args[0] * x**2
        else:
            a, x0, w = args
            if w <= 0:
                raise PreconditionError("gauss width must be positive")
            values = a * np.exp(-((x - x0) ** 2) / (2 * w**2))
        return cls(grid, values, spec.strip())

    @classmethod
    def from_table(cls, path, grid: SpatialGrid) -> "PotentialFn":
        """Read a two-column ``x value`` table and interpolate onto the grid."""
        path = Path(path)
        if not path.exists():
            raise PreconditionError(f"potential table {path} does not exist")
        table = np.loadtxt(path, delimiter=None if path.suffix != ".csv" else ",", ndmin=2)
        if table.shape[1] != 2:
            raise PreconditionError(f"{path}: expected two columns (x, value)")
        order = np.argsort(table[:, 0])
        values = np.interp(grid.nodes, table[order, 0], table[order, 1])
        return cls(grid, values, str(path))

    @classmethod
    def parse(cls, spec: str, grid: SpatialGrid, base_dir=None) -> "PotentialFn":
        """Builtin family name or path to a table file."""
        candidate = Path(spec.strip())
        if base_dir is not None and not candidate.is_absolute():
            candidate = Path(base_dir) / candidate
        if candidate.suffix in {".txt", ".csv", ".dat"} or candidate.is_file():
            return cls.from_table(candidate, grid)
        return cls.builtin(spec, grid)

    def _check_grid(self, other: "PotentialFn"):
        if other.grid != self.grid:
            raise GridMismatch("potentials live on different grids")

    def __add__(self, other):
        if isinstance(other, PotentialFn):
            self._check_grid(other)
            return PotentialFn(self.grid, self.samples + other.samples,
                               f"({self.label}) + ({other.label})")
        return PotentialFn(self.grid, self.samples + float(other), f"({self.label}) + {other}")

    def __sub__(self, other):
        return self + (-1.0) * other if isinstance(other, PotentialFn) else self + (-float(other))

    def __mul__(self, scalar):
        return PotentialFn(self.grid, float(scalar) * self.samples, f"{scalar}*({self.label})")

    __rmul__ = __mul__

    def is_zero(self) -> bool:
        return not np.any(self.samples)


@dataclass(frozen=True, eq=False)
class Spectrum:
    """Lowest ``k_max`` eigenpairs of ``A_V``.

    ``eigenvalues`` carry the asymptotic correction (see
    :func:`compute_spectrum`); ``fd_eigenvalues`` are the raw eigenvalues of
    the finite-difference matrix, which is what the eigenvectors belong to.
    Row ``k - 1`` of ``eigenfunctions`` holds ``phi_k`` on the grid.
    """

    potential: PotentialFn
    eigenvalues: np.ndarray
    fd_eigenvalues: np.ndarray
    eigenfunctions: np.ndarray

    @property
    def grid(self) -> SpatialGrid:
        return self.potential.grid

    @property
    def k_max(self) -> int:
        return len(self.eigenvalues)

    @property
    def potential_id(self) -> str:
        return self.potential.label


def fd_laplacian_eigenvalues(k, h) -> np.ndarray:
    """Eigenvalues ``(4 / h^2) sin^2(k pi h / 2)`` of the discrete Dirichlet Laplacian."""
    k = np.asarray(k, dtype=float)
    return 4.0 / h**2 * np.sin(0.5 * k * np.pi * h) ** 2


def compute_spectrum(V: PotentialFn, k_max: int = DEFAULT_K_MAX, correct: bool = True) -> Spectrum:
    """Return the ``k_max`` lowest Dirichlet eigenpairs of ``-d^2/dx^2 + V``.

    Eigenfunctions are normalized in the trapezoid ``L^2`` inner product and
    signed so that their first non-negligible grid value is positive.

    With ``correct=True`` each eigenvalue receives the shift
    ``k^2 pi^2 - (4/h^2) sin^2(k pi h/2)``, i.e. the exact discretization
    error of the free Laplacian.  This removes the dominant ``O(k^4 h^2)``
    error and makes the result exact for constant potentials.
    """
    grid = V.grid
    n, h = grid.n_interior, grid.h
    k_max = int(k_max)
    if k_max < 1:
        raise PreconditionError("k_max must be at least 1")
    if k_max > n / 10:
        raise TruncationTooLarge(
            f"k_max={k_max} exceeds n_interior/10={n / 10:g}; refine the grid"
        )
    diag = 2.0 / h**2 + V.samples
    off = np.full(n - 1, -1.0 / h**2)
    fd_vals, vecs = eigh_tridiagonal(diag, off, select="i", select_range=(0, k_max - 1))
    funcs = vecs.T / math.sqrt(h)
    for row in funcs:
        first = np.flatnonzero(np.abs(row) > 1e-8 * np.max(np.abs(row)))[0]
        if row[first] < 0:
            row *= -1.0
    ks = np.arange(1, k_max + 1)
    values = fd_vals.copy()
    if correct:
        values += (ks * np.pi) ** 2 - fd_laplacian_eigenvalues(ks, h)
    if np.any(np.diff(values) <= 0):
        raise PreconditionError("computed eigenvalues are not strictly increasing")
    return Spectrum(V, _frozen(values), _frozen(fd_vals), _frozen(funcs))


def apply_operator(V: PotentialFn, f) -> np.ndarray:
    """Apply the finite-difference matrix of ``A_V`` to grid values ``f``."""
    f = np.asarray(f)
    h = V.grid.h
    padded = np.concatenate([[0.0], f, [0.0]])
    return (2.0 * f - padded[:-2] - padded[2:]) / h**2 + V.samples * f


@dataclass(frozen=True, eq=False)
class ModalState:
    """Complex coefficients ``c_k = <psi, phi_k>`` in a spectrum's eigenbasis."""

    coeffs: np.ndarray
    spectrum: Spectrum = field(repr=False)

    def __post_init__(self):
        coeffs = np.asarray(self.coeffs, dtype=complex)
        if coeffs.shape != (self.spectrum.k_max,):
            raise GridMismatch(
                f"expected {self.spectrum.k_max} coefficients, got {coeffs.shape}"
            )
        object.__setattr__(self, "coeffs", _frozen(coeffs, complex))

    @classmethod
    def basis(cls, k: int, spectrum: Spectrum) -> "ModalState":
        """The unit vector ``e_k`` (1-based), i.e. ``phi_k``."""
        c = np.zeros(spectrum.k_max, dtype=complex)
        c[k - 1] = 1.0
        return cls(c, spectrum)

    @classmethod
    def from_amplitudes(cls, amplitudes: dict, spectrum: Spectrum, normalize: bool = True) -> "ModalState":
        """Build from a ``{k: amplitude}`` mapping with 1-based mode indices."""
        c = np.zeros(spectrum.k_max, dtype=complex)
        for k, a in amplitudes.items():
            if not 1 <= int(k) <= spectrum.k_max:
                raise PreconditionError(f"mode {k} outside 1..{spectrum.k_max}")
            c[int(k) - 1] += complex(a)
        state = cls(c, spectrum)
        return state.normalized() if normalize else state

    @property
    def norm(self) -> float:
        return float(np.linalg.norm(self.coeffs))

    def is_unit(self, tol: float = 1e-10) -> bool:
        return abs(self.norm - 1.0) <= tol

    def normalized(self) -> "ModalState":
        nrm = self.norm
        if nrm == 0:
            raise PreconditionError("cannot normalize the zero state")
        return ModalState(self.coeffs / nrm, self.spectrum)

    def overlap_ground(self) -> complex:
        return complex(self.coeffs[0])

    def __add__(self, other: "ModalState") -> "ModalState":
        _same_basis(self, other)
        return ModalState(self.coeffs + other.coeffs, self.spectrum)

    def __sub__(self, other: "ModalState") -> "ModalState":
        _same_basis(self, other)
        return ModalState(self.coeffs - other.coeffs, self.spectrum)

    def __mul__(self, scalar) -> "ModalState":
        return ModalState(complex(scalar) * self.coeffs, self.spectrum)

    __rmul__ = __mul__


def _same_basis(a: ModalState, b: ModalState):
    if a.spectrum is not b.spectrum:
        raise GridMismatch("states are expressed in different eigenbases")


def project(state_on_grid, spec: Spectrum) -> ModalState:
    """Coefficients ``<psi, phi_k>`` of a grid function."""
    psi = np.asarray(state_on_grid, dtype=complex)
    if psi.shape != (spec.grid.n_interior,):
        raise GridMismatch(f"expected {spec.grid.n_interior} grid values, got {psi.shape}")
    return ModalState(spec.grid.h * spec.eigenfunctions @ psi, spec)


def synthesize(state: ModalState) -> np.ndarray:
    """Grid values of ``sum_k c_k phi_k``."""
    return state.spectrum.eigenfunctions.T @ state.coeffs


def change_basis(state: ModalState, spec: Spectrum) -> ModalState:
    """Re-express a state in another eigenbasis on the same grid (truncating)."""
    if spec.grid != state.spectrum.grid:
        raise GridMismatch("spectra live on different grids")
    return project(synthesize(state), spec)


def eigenstate(k: int, t: float, spec: Spectrum) -> ModalState:
    """``Phi_k(t) = exp(-i lambda_k t) phi_k``."""
    c = np.zeros(spec.k_max, dtype=complex)
    c[k - 1] = np.exp(-1j * spec.eigenvalues[k - 1] * t)
    return ModalState(c, spec)


def free_evolve(state: ModalState, t: float) -> ModalState:
    """Exact evolution with zero control for time ``t`` (negative allowed)."""
    return ModalState(state.coeffs * np.exp(-1j * state.spectrum.eigenvalues * t), state.spectrum)


def sobolev_norm(state: ModalState, s: float) -> float:
    """Truncated weighted norm ``(sum_k |k^s c_k|^2)^(1/2)``.

    The weight is ``k^s``, not ``lambda_k^(s/2)``; both give equivalent norms
    on the full space but differ numerically.
    """
    if s < 0:
        raise PreconditionError("s must be nonnegative")
    c = state.coeffs
    if not np.all(np.isfinite(c)):
        raise PreconditionError("state has non-finite coefficients")
    k = np.arange(1, len(c) + 1, dtype=float)
    return float(np.linalg.norm(k**s * c))


def coupling_matrix(mu: PotentialFn, spec: Spectrum) -> np.ndarray:
    """``B[j, k] = <mu phi_j, phi_k>`` (0-based indices), symmetric by construction."""
    if mu.grid != spec.grid:
        raise GridMismatch("moment and spectrum live on different grids")
    phi = spec.eigenfunctions
    B = spec.grid.h * (phi * mu.samples) @ phi.T
    return _frozen(0.5 * (B + B.T))


def write_spectrum_csv(spec: Spectrum, path) -> None:
    ks = np.arange(1, spec.k_max + 1)
    with open(path, "w") as fh:
        fh.write("k,lambda_k\n")
        for k, lam in zip(ks, spec.eigenvalues):
            fh.write(f"{k},{float(lam)!r}\n")


def write_eigenfunctions_txt(spec: Spectrum, path) -> None:
    """Plain-text table: column 0 is x, column k is phi_k."""
    table = np.column_stack([spec.grid.nodes, spec.eigenfunctions.T])
    header = "x " + " ".join(f"phi_{k}" for k in range(1, spec.k_max + 1))
    np.savetxt(path, table, header=header, fmt="%.17g")
