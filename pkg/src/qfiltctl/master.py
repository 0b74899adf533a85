"""Deterministic Lindblad evolution and coherent control of the generator.

The integrator is a fixed-step classical RK4 with a spectral repair
(:func:`~qfiltctl.operators.clip_spectrum`) after every step.  It shares
its time grid with the stochastic filters so ensemble averages can be
compared against it point by point.  :func:`integrate_master_expm` is an
independent exact-propagator path kept for oracle use only.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy.linalg import expm

from .errors import ChannelOverlap, DimensionMismatch, NotPositive, StepTooLarge, ValidationError
from .operators import CouplingSet, DensityMatrix, clip_spectrum, stack_ops

STABILITY_FACTOR = 0.1


def _ops_array(c: CouplingSet) -> np.ndarray:
    return stack_ops(c.jump_ops, c.dim)


def effective_drift(c: CouplingSet) -> np.ndarray:
    """``-(i/hbar) H - 1/2 sum_i L_i^dagger L_i``."""
    ops = _ops_array(c)
    out = -1j / c.hbar * c.hamiltonian
    if len(ops):
        out = out - 0.5 * np.einsum("iba,ibc->ac", ops.conj(), ops)
    return out


def lindblad_apply(c: CouplingSet, rho) -> np.ndarray:
    """Right-hand side of the master equation.

    ``sum_i L_i rho L_i^dagger - 1/2 {L_i^dagger L_i, rho} - (i/hbar)[H, rho]``

    Works on a single ``(dim, dim)`` state or on a stack ``(..., dim, dim)``.
    """
    r = rho.matrix if isinstance(rho, DensityMatrix) else np.asarray(rho, dtype=complex)
    if r.shape[-2:] != (c.dim, c.dim):
        raise DimensionMismatch(f"state shape {r.shape} does not match model dim {c.dim}")
    drift = effective_drift(c)
    out = drift @ r + r @ drift.conj().T
    for op in c.jump_ops:
        out = out + op @ r @ op.conj().T
    return out


def generator_matrix(c: CouplingSet) -> np.ndarray:
    """Superoperator of :func:`lindblad_apply` acting on row-major ``vec(rho)``.

    Uses ``vec(A rho B) = (A kron B^T) vec(rho)``.
    """
    eye = np.eye(c.dim)
    drift = effective_drift(c)
    sup = np.kron(drift, eye) + np.kron(eye, drift.conj())
    for op in c.jump_ops:
        sup = sup + np.kron(op, op.conj())
    return sup


def stability_bound(c: CouplingSet) -> float:
    """Largest admissible RK4 step, ``0.1 / ||generator||_2``."""
    norm = np.linalg.norm(generator_matrix(c), 2)
    return np.inf if norm == 0 else STABILITY_FACTOR / norm


def time_grid(horizon: float, dt: float) -> np.ndarray:
    """Uniform grid ``0, dt, ..., K dt`` with ``K = round(T/dt)``.

    ``T`` must be an integer multiple of ``dt`` to within 1e-9 relative.
    """
    if dt <= 0 or not np.isfinite(dt):
        raise ValidationError("dt must be a positive finite number")
    if horizon < 0:
        raise ValidationError("horizon must be non-negative")
    steps = int(round(horizon / dt))
    if abs(steps * dt - horizon) > 1e-9 * max(1.0, horizon):
        raise ValidationError(f"horizon {horizon} is not a multiple of dt {dt}")
    return dt * np.arange(steps + 1)


@dataclass(frozen=True)
class StatePath:
    times: np.ndarray
    states: np.ndarray  # (K+1, dim, dim)

    def entry(self, i: int, j: int) -> np.ndarray:
        return self.states[:, i, j]


def integrate_master(
    c: CouplingSet,
    rho0,
    horizon: float,
    dt: float,
    *,
    clip_tol: float = 1e-10,
    allow_large_step: bool = False,
) -> StatePath:
    """RK4 integration of the master equation with a repair after each step.

    Parameters
    ----------
    allow_large_step : bool
        Skip the ``dt <= 0.1/||generator||_2`` guard.  Positivity is still
        checked by the repair step, so an unstable run fails loudly with
        :class:`NotPositive` instead of drifting.
    """
    r = rho0.matrix if isinstance(rho0, DensityMatrix) else np.asarray(rho0, dtype=complex)
    times = time_grid(horizon, dt)
    if not allow_large_step:
        bound = stability_bound(c)
        if dt > bound:
            raise StepTooLarge(
                f"dt={dt:g} exceeds the stability bound {bound:.3g}; reduce dt or set allow_large_step",
                module="master",
            )
    out = np.empty((len(times), c.dim, c.dim), dtype=complex)
    out[0] = r
    for k in range(1, len(times)):
        k1 = lindblad_apply(c, r)
        k2 = lindblad_apply(c, r + 0.5 * dt * k1)
        k3 = lindblad_apply(c, r + 0.5 * dt * k2)
        k4 = lindblad_apply(c, r + dt * k3)
        raw = r + dt / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
        try:
            r = clip_spectrum(raw, clip_tol)
        except NotPositive as exc:
            raise NotPositive(str(exc), module="master", step=k) from exc
        out[k] = r
    return StatePath(times, out)


def integrate_master_expm(c: CouplingSet, rho0, horizon: float, dt: float) -> StatePath:
    """Exact propagation ``vec(rho_k) = exp(k dt L) vec(rho_0)`` on the same grid."""
    r = rho0.matrix if isinstance(rho0, DensityMatrix) else np.asarray(rho0, dtype=complex)
    times = time_grid(horizon, dt)
    step = expm(dt * generator_matrix(c))
    vec = r.reshape(-1)
    out = np.empty((len(times), c.dim, c.dim), dtype=complex)
    out[0] = r
    for k in range(1, len(times)):
        vec = step @ vec
        out[k] = vec.reshape(c.dim, c.dim)
    return StatePath(times, out)


def coherent_control_apply(
    c: CouplingSet,
    u: Sequence[float],
    control_channels: Sequence[int],
    estimation_channels: Sequence[int] = (),
) -> CouplingSet:
    """Displace the field of the feedback channels by a real amplitude.

    For every control channel ``i`` (0-based) with amplitude ``u_i``::

        H   -> H + u_i Re(L_i),        Re X = (X + X^dagger) / 2
        L_i -> L_i + (i/hbar) u_i

    The jump shift contributes another ``u_i Re(L_i)`` to the effective
    Hamiltonian, so the reduced generator is the uncontrolled dissipator
    plus the Hamiltonian with doubled amplitude; see
    :func:`controlled_generator_reference`.

    Raises
    ------
    ChannelOverlap
        If a control channel is also an estimation channel.
    """
    ctrl = list(control_channels)
    u = np.asarray(u, dtype=float).ravel()
    if len(u) != len(ctrl):
        raise DimensionMismatch(f"{len(u)} control values for {len(ctrl)} control channels")
    overlap = set(ctrl) & set(estimation_channels)
    if overlap:
        raise ChannelOverlap(f"channels {sorted(overlap)} are both control and estimation")
    if len(set(ctrl)) != len(ctrl) or any(not 0 <= i < c.channels for i in ctrl):
        raise ValidationError(f"control channels {ctrl} invalid for {c.channels} channels")
    if not np.any(u):
        return c
    h = c.hamiltonian.copy()
    ops = list(c.jump_ops)
    eye = np.eye(c.dim)
    for ui, i in zip(u, ctrl):
        if ui == 0.0:
            continue
        op = ops[i]
        h = h + ui * 0.5 * (op + op.conj().T)
        ops[i] = op + (1j / c.hbar) * ui * eye
    h = 0.5 * (h + h.conj().T)
    return c.replace(hamiltonian=h, jump_ops=tuple(ops))


def controlled_generator_reference(
    c: CouplingSet, u: Sequence[float], control_channels: Sequence[int]
):
    """Controlled generator in decomposed form, written independently.

    ``lambda_u(rho) = -(i/hbar)[H_{2u}, rho] + sum_i D[L_i](rho)`` with
    ``H_{2u} = H + sum_{i in control} 2 u_i Re(L_i)`` and the uncontrolled
    dissipators ``D[L](rho) = L rho L^dagger - 1/2 {L^dagger L, rho}``.
    """
    h2 = c.hamiltonian.astype(complex)
    for ui, i in zip(np.asarray(u, dtype=float).ravel(), control_channels):
        op = c.jump_ops[i]
        h2 = h2 + 2.0 * ui * 0.5 * (op + op.conj().T)

    def generator(rho: np.ndarray) -> np.ndarray:
        out = -1j / c.hbar * (h2 @ rho - rho @ h2)
        for op in c.jump_ops:
            ld = op.conj().T @ op
            out = out + op @ rho @ op.conj().T - 0.5 * (ld @ rho + rho @ ld)
        return out

    return generator


__all__ = [
    "StatePath",
    "coherent_control_apply",
    "controlled_generator_reference",
    "effective_drift",
    "generator_matrix",
    "integrate_master",
    "integrate_master_expm",
    "lindblad_apply",
    "stability_bound",
    "time_grid",
]
