"""Dense complex matrix helpers and the quantum-state data model.

Everything downstream works with plain ``numpy`` arrays of dtype
``complex128``.  The two small dataclasses here exist to carry validated
invariants (a density matrix, a coupling set) across module boundaries;
the arithmetic itself is done on the raw arrays.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import DimensionMismatch, NotPositive, TraceVanishing, ValidationError

HERMITIAN_TOL = 1e-12
UNITARY_TOL = 1e-10
TRACE_TOL = 1e-9
DEFAULT_CLIP_TOL = 1e-10
TRACE_FLOOR = 1e-12
# Eigenvalues this close to zero are rounding noise of an eigen-reconstruction;
# leaving them alone is what makes repeated clipping a bitwise fixed point.
ROUNDING_FLOOR = 64 * np.finfo(float).eps

SIGMA_X = np.array([[0, 1], [1, 0]], dtype=complex)
SIGMA_Y = np.array([[0, -1j], [1j, 0]], dtype=complex)
SIGMA_Z = np.array([[1, 0], [0, -1]], dtype=complex)
# Basis order is (ground, excited); sigma_minus lowers excited -> ground.
SIGMA_MINUS = np.array([[0, 1], [0, 0]], dtype=complex)
SIGMA_PLUS = SIGMA_MINUS.conj().T.copy()


def as_matrix(x, *, name: str = "matrix") -> np.ndarray:
    """Return ``x`` as a finite 2-d complex array.

    Raises
    ------
    ValidationError
        If ``x`` is not two-dimensional or contains NaN/Inf.
    """
    arr = np.array(x, dtype=complex)
    if arr.ndim != 2:
        raise ValidationError(f"{name}: expected a 2-d array, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ValidationError(f"{name}: entries must be finite")
    return arr


def dagger(x: np.ndarray) -> np.ndarray:
    """Conjugate transpose over the last two axes (works on stacks)."""
    return np.conj(np.swapaxes(x, -1, -2))


def is_hermitian(x: np.ndarray, tol: float = HERMITIAN_TOL) -> bool:
    return bool(np.max(np.abs(x - dagger(x)), initial=0.0) <= tol)


def is_unitary(x: np.ndarray, tol: float = UNITARY_TOL) -> bool:
    n = x.shape[0]
    return bool(np.max(np.abs(dagger(x) @ x - np.eye(n)), initial=0.0) <= tol)


def _check_square_pair(x: np.ndarray, y: np.ndarray) -> None:
    if x.ndim != 2 or x.shape[0] != x.shape[1]:
        raise DimensionMismatch(f"expected a square matrix, got {x.shape}")
    if x.shape != y.shape:
        raise DimensionMismatch(f"shapes differ: {x.shape} vs {y.shape}")


def pair(rho, x) -> complex:
    """Trace pairing ``tr[rho @ x]``.

    Accepts a :class:`DensityMatrix` or a bare array for ``rho``.  The
    product is never formed; the trace is an elementwise sum.
    """
    r = rho.matrix if isinstance(rho, DensityMatrix) else np.asarray(rho)
    x = np.asarray(x)
    _check_square_pair(r, x)
    return complex(np.sum(r * x.T))


def commutator(x, y) -> np.ndarray:
    """``x @ y - y @ x``."""
    x = np.asarray(x, dtype=complex)
    y = np.asarray(y, dtype=complex)
    _check_square_pair(x, y)
    return x @ y - y @ x


def anticommutator(x: np.ndarray, y: np.ndarray) -> np.ndarray:
    return x @ y + y @ x


def clip_spectrum(raw, clip_tol: float = DEFAULT_CLIP_TOL) -> np.ndarray:
    """Symmetrize, clip tiny negative eigenvalues and renormalize.

    This is the array-level worker behind :func:`normalize_and_clip`.
    When no eigenvalue is negative the input is only symmetrized and
    rescaled, which keeps the result as close as possible to the input
    bits (an eigen-reconstruction would add rounding noise for nothing).

    Raises
    ------
    NotPositive
        An eigenvalue lies below ``-clip_tol``.
    TraceVanishing
        The trace is below ``1e-12``.
    """
    raw = np.asarray(raw, dtype=complex)
    if raw.ndim != 2 or raw.shape[0] != raw.shape[1]:
        raise DimensionMismatch(f"expected a square matrix, got {raw.shape}")
    if not np.all(np.isfinite(raw)):
        raise NotPositive("state has non-finite entries")
    herm = 0.5 * (raw + raw.conj().T)
    evals, evecs = np.linalg.eigh(herm)
    if evals[0] < -clip_tol:
        raise NotPositive(
            f"eigenvalue {evals[0]:.3e} below -clip_tol={clip_tol:.1e}; reduce dt"
        )
    if evals[0] < -ROUNDING_FLOOR * max(1.0, evals[-1]):
        evals = np.where(evals < 0.0, 0.0, evals)
        herm = (evecs * evals) @ evecs.conj().T
        herm = 0.5 * (herm + herm.conj().T)
    tr = float(np.real(np.trace(herm)))
    if tr < TRACE_FLOOR:
        raise TraceVanishing(f"trace {tr:.3e} is below {TRACE_FLOOR:.0e}")
    if abs(tr - 1.0) <= 4 * np.finfo(float).eps:
        return herm
    return herm / tr


@dataclass(frozen=True)
class DensityMatrix:
    """A validated finite-dimensional quantum state.

    Construct through :meth:`from_array` (strict validation) or
    :func:`normalize_and_clip` (repair of small numerical defects).
    """

    matrix: np.ndarray

    def __post_init__(self) -> None:
        self.matrix.setflags(write=False)

    @property
    def dim(self) -> int:
        return self.matrix.shape[0]

    @classmethod
    def from_array(cls, x, clip_tol: float = DEFAULT_CLIP_TOL) -> "DensityMatrix":
        m = as_matrix(x, name="density matrix")
        if m.shape[0] != m.shape[1]:
            raise ValidationError(f"density matrix must be square, got {m.shape}")
        if not is_hermitian(m):
            raise ValidationError("density matrix is not Hermitian within 1e-12")
        if abs(np.trace(m).real - 1.0) > TRACE_TOL:
            raise ValidationError("density matrix trace differs from 1 by more than 1e-9")
        if np.linalg.eigvalsh(m)[0] < -clip_tol:
            raise NotPositive("density matrix has a negative eigenvalue")
        return cls(m.copy())

    @classmethod
    def pure(cls, psi) -> "DensityMatrix":
        v = np.asarray(psi, dtype=complex).ravel()
        v = v / np.linalg.norm(v)
        return cls(np.outer(v, v.conj()))

    @classmethod
    def basis(cls, dim: int, k: int) -> "DensityMatrix":
        m = np.zeros((dim, dim), dtype=complex)
        m[k, k] = 1.0
        return cls(m)

    @classmethod
    def maximally_mixed(cls, dim: int) -> "DensityMatrix":
        return cls(np.eye(dim, dtype=complex) / dim)

    def purity(self) -> float:
        return float(np.real(np.sum(self.matrix * self.matrix.T)))


def normalize_and_clip(raw, clip_tol: float = DEFAULT_CLIP_TOL) -> DensityMatrix:
    """Repair an almost-valid state into a :class:`DensityMatrix`.

    The input must be Hermitian to within 1e-6; larger asymmetry means the
    caller produced something that is not a state update at all.

    >>> normalize_and_clip(np.diag([1.0, -1e-11])).matrix.real
    array([[1., 0.],
           [0., 0.]])
    """
    raw = np.asarray(raw, dtype=complex)
    if raw.ndim == 2 and raw.shape[0] == raw.shape[1]:
        asym = np.max(np.abs(raw - raw.conj().T), initial=0.0)
        if asym >= 1e-6:
            raise ValidationError(f"input is not approximately Hermitian (asymmetry {asym:.2e})")
    return DensityMatrix(clip_spectrum(raw, clip_tol))


@dataclass(frozen=True)
class CouplingSet:
    """Schrodinger-picture operators of an open system model.

    Parameters
    ----------
    hamiltonian : ndarray, shape (dim, dim)
        Hermitian system Hamiltonian in energy units.
    jump_ops : sequence of ndarray
        One jump operator per field channel, already in the
        Schrodinger-picture convention used by all generator formulas.
    scattering : sequence of ndarray or None
        Optional unitary per channel.  Defaults to identities.  A non
        identity scattering matrix only matters for germ construction; the
        reduced dynamics do not see it.
    hbar : float
        Positive reduced Planck constant, default 1.
    """

    hamiltonian: np.ndarray
    jump_ops: tuple = ()
    scattering: tuple | None = None
    hbar: float = 1.0

    def __post_init__(self) -> None:
        h = as_matrix(self.hamiltonian, name="hamiltonian")
        if h.shape[0] != h.shape[1]:
            raise ValidationError(f"hamiltonian must be square, got {h.shape}")
        if not is_hermitian(h):
            raise ValidationError("hamiltonian is not Hermitian within 1e-12")
        dim = h.shape[0]
        ops = tuple(as_matrix(op, name=f"jump_ops[{i}]") for i, op in enumerate(self.jump_ops))
        for i, op in enumerate(ops):
            if op.shape != (dim, dim):
                raise DimensionMismatch(f"jump_ops[{i}] has shape {op.shape}, expected {(dim, dim)}")
        scat = None
        if self.scattering is not None:
            scat = tuple(as_matrix(s, name=f"scattering[{i}]") for i, s in enumerate(self.scattering))
            if len(scat) != len(ops):
                raise DimensionMismatch("one scattering matrix per channel is required")
            for i, s in enumerate(scat):
                if s.shape != (dim, dim):
                    raise DimensionMismatch(f"scattering[{i}] has shape {s.shape}")
                if not is_unitary(s):
                    raise ValidationError(f"scattering[{i}] is not unitary within 1e-10")
        if not (np.isfinite(self.hbar) and self.hbar > 0):
            raise ValidationError("hbar must be a positive real")
        for arr in (h, *ops, *(scat or ())):
            arr.setflags(write=False)
        object.__setattr__(self, "hamiltonian", h)
        object.__setattr__(self, "jump_ops", ops)
        object.__setattr__(self, "scattering", scat)
        object.__setattr__(self, "hbar", float(self.hbar))

    @property
    def dim(self) -> int:
        return self.hamiltonian.shape[0]

    @property
    def channels(self) -> int:
        return len(self.jump_ops)

    def scattering_ops(self) -> tuple:
        if self.scattering is None:
            eye = np.eye(self.dim, dtype=complex)
            return tuple(eye for _ in self.jump_ops)
        return self.scattering

    def replace(self, **changes) -> "CouplingSet":
        kwargs = dict(
            hamiltonian=self.hamiltonian,
            jump_ops=self.jump_ops,
            scattering=self.scattering,
            hbar=self.hbar,
        )
        kwargs.update(changes)
        return CouplingSet(**kwargs)


def random_density(dim: int, rng: np.random.Generator, rank: int | None = None) -> np.ndarray:
    """Random full-rank (or given-rank) density matrix from the Ginibre ensemble."""
    k = dim if rank is None else rank
    g = rng.normal(size=(dim, k)) + 1j * rng.normal(size=(dim, k))
    rho = g @ g.conj().T
    return rho / np.trace(rho).real


def random_hermitian(dim: int, rng: np.random.Generator, scale: float = 1.0) -> np.ndarray:
    g = rng.normal(size=(dim, dim)) + 1j * rng.normal(size=(dim, dim))
    return scale * 0.5 * (g + g.conj().T)


def random_unitary(dim: int, rng: np.random.Generator) -> np.ndarray:
    g = rng.normal(size=(dim, dim)) + 1j * rng.normal(size=(dim, dim))
    q, r = np.linalg.qr(g)
    return q * (np.diag(r) / np.abs(np.diag(r)))


def random_coupling(
    dim: int,
    channels: int,
    rng: np.random.Generator,
    *,
    hbar: float = 1.0,
    with_scattering: bool = False,
) -> CouplingSet:
    """A random model for property tests; operator norms are of order one."""
    h = random_hermitian(dim, rng, scale=0.5)
    ops = [
        0.5 * (rng.normal(size=(dim, dim)) + 1j * rng.normal(size=(dim, dim)))
        for _ in range(channels)
    ]
    scat = [random_unitary(dim, rng) for _ in range(channels)] if with_scattering else None
    return CouplingSet(h, tuple(ops), scat, hbar)


def matrix_to_json(x) -> dict:
    """Serialize a matrix as ``{"rows", "cols", "re", "im"}`` (row-major).

    Python's ``float`` repr is the shortest string that round-trips, so the
    encoding is exact.
    """
    a = np.atleast_2d(np.asarray(x, dtype=complex))
    return {
        "rows": int(a.shape[0]),
        "cols": int(a.shape[1]),
        "re": [float(v) for v in a.real.ravel()],
        "im": [float(v) for v in a.imag.ravel()],
    }


def matrix_from_json(obj: dict) -> np.ndarray:
    try:
        rows, cols = int(obj["rows"]), int(obj["cols"])
        re = np.asarray(obj["re"], dtype=float)
        im = np.asarray(obj.get("im", [0.0] * (rows * cols)), dtype=float)
    except (KeyError, TypeError, ValueError) as exc:
        raise ValidationError(f"malformed matrix object: {exc}") from exc
    if re.size != rows * cols or im.size != rows * cols:
        raise ValidationError("matrix entry count does not equal rows*cols")
    out = (re + 1j * im).reshape(rows, cols)
    if not np.all(np.isfinite(out)):
        raise ValidationError("matrix entries must be finite")
    return out


def stack_ops(ops: Sequence[np.ndarray], dim: int) -> np.ndarray:
    """Stack a list of operators into an array of shape (k, dim, dim)."""
    if len(ops) == 0:
        return np.zeros((0, dim, dim), dtype=complex)
    return np.stack([np.asarray(o, dtype=complex) for o in ops])


__all__ = [
    "CouplingSet",
    "DensityMatrix",
    "SIGMA_MINUS",
    "SIGMA_PLUS",
    "SIGMA_X",
    "SIGMA_Y",
    "SIGMA_Z",
    "anticommutator",
    "clip_spectrum",
    "commutator",
    "dagger",
    "matrix_from_json",
    "matrix_to_json",
    "normalize_and_clip",
    "pair",
    "random_coupling",
    "random_density",
]
