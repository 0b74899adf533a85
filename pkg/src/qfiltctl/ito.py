"""Finite matrix realization of the quantum Ito algebra.

A germ with ``d`` field channels acting on a ``dim``-dimensional system is
stored as an ``(n, n, dim, dim)`` array of operator blocks with
``n = d + 2`` and index order ``(-, 1, ..., d, +)``.  Index ``0`` is the
annihilation/time side ``-`` and index ``n-1`` is the creation side ``+``.
With this layout the Ito product of two increments is the ordinary block
matrix product, and the ``dt`` coefficient lives in block ``(-, +)``.

The involution reflects the index order, ``(-, i, +) -> (+, i, -)``, and
takes block adjoints::

    K_star[mu, nu] = K[-nu, -mu]^dagger
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from .errors import DimensionMismatch, PseudoUnitarityViolated, ValidationError
from .operators import CouplingSet, as_matrix, dagger, matrix_from_json, matrix_to_json

MINUS = "-"
PLUS = "+"


@dataclass(frozen=True)
class GermMatrix:
    """Triangular block matrix of a quantum stochastic differential.

    ``blocks[mu, nu]`` is the ``dim x dim`` coefficient in front of the
    basic increment ``dA_mu^nu``.  Blocks below the diagonal in the order
    ``- < channels < +`` are zero; the channel-channel block is a full
    ``d x d`` grid of operators.
    """

    blocks: np.ndarray

    def __post_init__(self) -> None:
        b = np.array(self.blocks, dtype=complex)
        if b.ndim != 4 or b.shape[0] != b.shape[1] or b.shape[2] != b.shape[3] or b.shape[0] < 2:
            raise DimensionMismatch(f"germ blocks must have shape (n, n, dim, dim), got {b.shape}")
        n = b.shape[0]
        lower = [(mu, nu) for mu in range(n) for nu in range(n) if _rank(mu, n) > _rank(nu, n)]
        for mu, nu in lower:
            if np.any(b[mu, nu] != 0):
                raise ValidationError(
                    f"germ block ({label(mu, n)},{label(nu, n)}) is below the diagonal but nonzero"
                )
        b.setflags(write=False)
        object.__setattr__(self, "blocks", b)

    @property
    def channels(self) -> int:
        return self.blocks.shape[0] - 2

    @property
    def dim(self) -> int:
        return self.blocks.shape[2]

    @property
    def size(self) -> int:
        return self.blocks.shape[0]

    def block(self, mu, nu) -> np.ndarray:
        return self.blocks[index(mu, self.size), index(nu, self.size)]

    def full(self) -> np.ndarray:
        """The germ as one ``(n*dim) x (n*dim)`` matrix."""
        n, dim = self.size, self.dim
        return self.blocks.transpose(0, 2, 1, 3).reshape(n * dim, n * dim)

    @classmethod
    def from_full(cls, mat: np.ndarray, channels: int) -> "GermMatrix":
        n = channels + 2
        dim = mat.shape[0] // n
        return cls(mat.reshape(n, dim, n, dim).transpose(0, 2, 1, 3))

    @classmethod
    def zeros(cls, dim: int, channels: int) -> "GermMatrix":
        n = channels + 2
        return cls(np.zeros((n, n, dim, dim), dtype=complex))

    @classmethod
    def identity(cls, dim: int, channels: int) -> "GermMatrix":
        n = channels + 2
        b = np.zeros((n, n, dim, dim), dtype=complex)
        for k in range(n):
            b[k, k] = np.eye(dim)
        return cls(b)

    @classmethod
    def from_blocks(cls, dim: int, channels: int, entries: dict) -> "GermMatrix":
        """Build a germ from ``{(mu, nu): block}`` with labels or indices."""
        n = channels + 2
        b = np.zeros((n, n, dim, dim), dtype=complex)
        for (mu, nu), blk in entries.items():
            b[index(mu, n), index(nu, n)] = blk
        return cls(b)

    def to_json(self) -> dict:
        n = self.size
        return {
            "dim": self.dim,
            "channels": self.channels,
            "labels": [label(k, n) for k in range(n)],
            "blocks": [[matrix_to_json(self.blocks[mu, nu]) for nu in range(n)] for mu in range(n)],
        }

    @classmethod
    def from_json(cls, obj: dict) -> "GermMatrix":
        try:
            labels = obj["labels"]
            rows = obj["blocks"]
        except (KeyError, TypeError) as exc:
            raise ValidationError(f"malformed germ object: missing {exc}") from exc
        n = len(labels)
        expected = [label(k, n) for k in range(n)]
        if list(labels) != expected:
            raise ValidationError(f"germ labels must be {expected}, got {labels}")
        if len(rows) != n or any(len(r) != n for r in rows):
            raise ValidationError("germ block grid must be square and match the labels")
        return cls(np.array([[matrix_from_json(blk) for blk in row] for row in rows]))


def _rank(k: int, n: int) -> int:
    """Position in the order ``- < channels < +`` (channels share rank 1)."""
    if k == 0:
        return 0
    if k == n - 1:
        return 2
    return 1


def label(k: int, n: int) -> str:
    if k == 0:
        return MINUS
    if k == n - 1:
        return PLUS
    return str(k)


def index(lab, n: int) -> int:
    """Map a label (``"-"``, ``"+"``, ``"1"``..``"d"`` or an int channel) to a block index."""
    if lab == MINUS:
        return 0
    if lab == PLUS:
        return n - 1
    k = int(lab)
    if not 1 <= k <= n - 2:
        raise ValidationError(f"channel label {lab!r} outside 1..{n - 2}")
    return k


def _reflect(k: int, n: int) -> int:
    if k == 0:
        return n - 1
    if k == n - 1:
        return 0
    return k


def involution(k: GermMatrix) -> GermMatrix:
    """The star operation of the Ito algebra (reflect indices, take adjoints)."""
    n = k.size
    perm = [_reflect(j, n) for j in range(n)]
    b = k.blocks[np.ix_(perm, perm)]
    return GermMatrix(dagger(b.transpose(1, 0, 2, 3)))


def germ_product(a: GermMatrix, b: GermMatrix) -> GermMatrix:
    """Ito product: ordinary block-matrix product of the two germs."""
    if a.blocks.shape != b.blocks.shape:
        raise DimensionMismatch(f"germ shapes differ: {a.blocks.shape} vs {b.blocks.shape}")
    return GermMatrix(np.einsum("ikab,kjbc->ijac", a.blocks, b.blocks))


def germ_sum(a: GermMatrix, b: GermMatrix) -> GermMatrix:
    if a.blocks.shape != b.blocks.shape:
        raise DimensionMismatch(f"germ shapes differ: {a.blocks.shape} vs {b.blocks.shape}")
    return GermMatrix(a.blocks + b.blocks)


def basic_increment(mu, nu, dim: int = 1, channels: int = 1) -> GermMatrix:
    """The germ of ``dA_mu^nu``: identity in block ``(mu, nu)``, zero elsewhere.

    ``basic_increment("-", "+")`` is the time differential ``dt``.
    """
    return GermMatrix.from_blocks(dim, channels, {(mu, nu): np.eye(dim)})


def wiener_germ(dim: int = 1, channels: int = 1, channel: int = 1) -> GermMatrix:
    """Germ of a standard Wiener increment ``dA^+ + dA_-`` on one channel."""
    eye = np.eye(dim)
    return GermMatrix.from_blocks(dim, channels, {(MINUS, channel): eye, (channel, PLUS): eye})


def poisson_germ(dim: int = 1, channels: int = 1, channel: int = 1) -> GermMatrix:
    """Germ of a unit-intensity compensated-free Poisson increment on one channel."""
    eye = np.eye(dim)
    return GermMatrix.from_blocks(
        dim,
        channels,
        {(MINUS, channel): eye, (channel, channel): eye, (channel, PLUS): eye, (MINUS, PLUS): eye},
    )


def _blocks_of(s: GermMatrix):
    n = s.size
    d = s.channels
    dim = s.dim
    scat = s.blocks[1 : n - 1, 1 : n - 1]  # (d, d, dim, dim)
    scat_full = scat.transpose(0, 2, 1, 3).reshape(d * dim, d * dim)
    r_minus = s.blocks[0, 1 : n - 1]  # row of d blocks
    r_plus = s.blocks[1 : n - 1, n - 1]  # column of d blocks
    drift = s.blocks[0, n - 1]
    return scat_full, r_minus, r_plus, drift


@dataclass(frozen=True)
class UnitarityReport:
    ok: bool
    residuals: tuple[float, float, float]
    tol: float

    def to_json(self) -> dict:
        return {"ok": self.ok, "residuals": list(self.residuals), "tol": self.tol}


def check_pseudo_unitarity(s: GermMatrix, tol: float = 1e-10) -> UnitarityReport:
    """Check the three unitarity conditions of a transition germ.

    Residuals are spectral norms of

    1. ``S^dagger S - I`` for the channel-channel scattering block,
    2. ``R^- + R_+^dagger S`` (the annihilation row against the creation column),
    3. ``2 Re(R_+^-) + R_+^dagger R_+`` (the drift against the creation column),

    where ``Re X = (X + X^dagger)/2`` and channel sums are implied.
    """
    n, dim, d = s.size, s.dim, s.channels
    for k in (0, n - 1):
        if not np.allclose(s.blocks[k, k], np.eye(dim), rtol=0, atol=tol):
            raise ValidationError("pseudo-unitarity check needs identity (-,-) and (+,+) blocks")
    scat, r_minus, r_plus, drift = _blocks_of(s)
    if d:
        res1 = np.linalg.norm(scat.conj().T @ scat - np.eye(d * dim), 2)
        # row (-, j): R^-_j + sum_k R_{+k}^dagger S_{kj}
        s_blocks = s.blocks[1 : n - 1, 1 : n - 1]
        row = r_minus + np.einsum("kba,kjbc->jac", r_plus.conj(), s_blocks)
        res2 = np.linalg.norm(np.concatenate(list(row), axis=1), 2)
        gram = np.einsum("kba,kbc->ac", r_plus.conj(), r_plus)
    else:
        res1 = res2 = 0.0
        gram = np.zeros((dim, dim), dtype=complex)
    res3 = np.linalg.norm(drift + drift.conj().T + gram, 2)
    residuals = (float(res1), float(res2), float(res3))
    return UnitarityReport(all(r <= tol for r in residuals), residuals, tol)


def germ_from_coupling(c: CouplingSet) -> GermMatrix:
    """Pseudo-unitary transition germ of a coupling set.

    Blocks: scattering on the channel diagonal, ``L_i`` in ``(i, +)``,
    ``-L_i^dagger S_i`` in ``(-, i)`` and
    ``-(i/hbar) H - 1/2 sum_i L_i^dagger L_i`` in ``(-, +)``.
    """
    d, dim = c.channels, c.dim
    n = d + 2
    b = np.zeros((n, n, dim, dim), dtype=complex)
    b[0, 0] = np.eye(dim)
    b[n - 1, n - 1] = np.eye(dim)
    drift = -1j / c.hbar * c.hamiltonian
    for i, (op, sc) in enumerate(zip(c.jump_ops, c.scattering_ops()), start=1):
        b[i, i] = sc
        b[i, n - 1] = op
        b[0, i] = -op.conj().T @ sc
        drift = drift - 0.5 * op.conj().T @ op
    b[0, n - 1] = drift
    return GermMatrix(b)


def jump_ops_from_germ(s: GermMatrix) -> list[np.ndarray]:
    n = s.size
    return [s.blocks[i, n - 1] for i in range(1, n - 1)]


def hamiltonian_from_germ(s: GermMatrix, hbar: float = 1.0) -> np.ndarray:
    """Recover ``H = -hbar Im(R_+^-)`` with ``Im X = (X - X^dagger)/(2i)``."""
    drift = s.blocks[0, s.size - 1]
    return -hbar * (drift - drift.conj().T) / 2j


def lindblad_from_germ(s: GermMatrix, tol: float = 1e-8) -> Callable[[np.ndarray], np.ndarray]:
    """Return the reduced generator ``rho -> lambda(rho)`` encoded in a germ.

    The generator is ``sum_i L_i rho L_i^dagger + D rho + rho D^dagger`` with
    ``L_i`` the creation blocks and ``D`` the drift block; no ``hbar`` is
    needed because the Hamiltonian part already sits inside ``D``.

    Raises
    ------
    PseudoUnitarityViolated
        If the germ fails :func:`check_pseudo_unitarity` at ``tol``.
    """
    report = check_pseudo_unitarity(s, tol)
    if not report.ok:
        raise PseudoUnitarityViolated(f"germ residuals {report.residuals} exceed {tol}")
    ops = np.array(jump_ops_from_germ(s)).reshape(-1, s.dim, s.dim)
    drift = s.blocks[0, s.size - 1].copy()
    drift_dag = drift.conj().T

    def generator(rho: np.ndarray) -> np.ndarray:
        rho = np.asarray(rho, dtype=complex)
        out = drift @ rho + rho @ drift_dag
        if len(ops):
            out = out + np.einsum("iab,bc,idc->ad", ops, rho, ops.conj())
        return out

    return generator


def _lift(x: np.ndarray, n: int) -> GermMatrix:
    """Ampliation ``x (x) 1``: ``x`` repeated on the block diagonal."""
    dim = x.shape[0]
    b = np.zeros((n, n, dim, dim), dtype=complex)
    for k in range(n):
        b[k, k] = x
    return GermMatrix(b)


def homomorphism_residuals(s: GermMatrix, x) -> tuple[float, float]:
    """Residuals of unitality and star-multiplicativity of ``x -> s (x(x)1) s_star``.

    Returns ``(||sigma(1) - 1||, ||sigma(x^dagger x) - sigma(x)_star sigma(x)||)``
    as max-abs norms over all blocks.
    """
    x = as_matrix(x, name="x")
    if x.shape != (s.dim, s.dim):
        raise DimensionMismatch(f"x has shape {x.shape}, expected {(s.dim, s.dim)}")
    n = s.size
    s_star = involution(s)

    def sigma(y: np.ndarray) -> GermMatrix:
        return germ_product(germ_product(s, _lift(y, n)), s_star)

    one = sigma(np.eye(s.dim))
    unital = float(np.max(np.abs(one.blocks - GermMatrix.identity(s.dim, s.channels).blocks)))
    sx = sigma(x)
    lhs = sigma(x.conj().T @ x)
    rhs = germ_product(involution(sx), sx)
    mult = float(np.max(np.abs(lhs.blocks - rhs.blocks)))
    return unital, mult


def is_hermitian_germ(k: GermMatrix, tol: float = 1e-13) -> bool:
    return bool(np.max(np.abs(involution(k).blocks - k.blocks)) <= tol)


__all__ = [
    "GermMatrix",
    "UnitarityReport",
    "basic_increment",
    "check_pseudo_unitarity",
    "germ_from_coupling",
    "germ_product",
    "germ_sum",
    "hamiltonian_from_germ",
    "homomorphism_residuals",
    "involution",
    "is_hermitian_germ",
    "lindblad_from_germ",
    "poisson_germ",
    "wiener_germ",
]
