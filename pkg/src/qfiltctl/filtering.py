"""Diffusive and counting quantum filters, trajectories and ensembles.

Two update schemes are available for each filter.

``"euler"``
    The additive Euler-Maruyama step of the filtering equation followed by
    :func:`~qfiltctl.operators.normalize_and_clip`.  It is the literal
    discretisation, but for pure (or nearly pure) states its smallest
    eigenvalue drops by roughly ``dt - dW**2`` per step, far below the
    ``1e-10`` clipping tolerance, so it is only usable on well mixed
    states and in unit tests of the formula itself.

``"kraus"`` (default for simulation)
    The same first-order expansion written as a completely positive map:
    ``rho -> M rho M^dagger / tr`` with
    ``M = 1 + D dt + sum_i L_i dY_i`` for diffusive channels and
    ``rho -> L_j rho L_j^dagger / tr`` on a count in channel ``j``.
    It agrees with the Euler step to the order that matters (strong order
    1/2, weak order 1), is positive by construction and maps pure states
    to pure states.

Records are synthesised through the innovation representation: each
diffusive increment is ``dY = <L + L^dagger> dt + dW`` with ``dW`` a
Gaussian of variance ``dt`` from the counter-based stream in
:mod:`qfiltctl.rng`, and counts are Bernoulli draws at probability
``nu dt`` (at most one channel fires per step).
"""
from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from . import rng as rngmod
from .errors import (
    ChannelOverlap,
    DimensionMismatch,
    GridMismatch,
    NotPositive,
    RateStepTooLarge,
    TraceVanishing,
    ValidationError,
    ZeroIntensityJump,
)
from .master import time_grid
from .operators import CouplingSet, DensityMatrix, clip_spectrum, dagger, normalize_and_clip, stack_ops

SCHEMES = ("euler", "kraus")
MAX_RATE_STEP = 0.1
ZERO_INTENSITY = 1e-14
# Ensembles are cut into chunks of this many trajectories.  The partition is
# fixed so that reductions happen in the same order for any worker count.
CHUNK = 2048
# Noise is generated in blocks of this many steps to bound memory.
NOISE_BLOCK = 512


@dataclass(frozen=True)
class FilterModel:
    """A coupling set plus the role of each field channel (0-based indices).

    Channels that are neither diffusive, counting nor feedback are
    unobserved: they still dissipate, but carry no record.
    """

    coupling: CouplingSet
    diffusive: tuple = ()
    counting: tuple = ()
    feedback: tuple = ()

    def __post_init__(self) -> None:
        groups = {
            "diffusive": tuple(int(i) for i in self.diffusive),
            "counting": tuple(int(i) for i in self.counting),
            "feedback": tuple(int(i) for i in self.feedback),
        }
        seen: dict[int, str] = {}
        for name, idx in groups.items():
            if len(set(idx)) != len(idx):
                raise ValidationError(f"{name} channels contain duplicates: {idx}")
            for i in idx:
                if not 0 <= i < self.coupling.channels:
                    raise ValidationError(
                        f"{name} channel {i} outside 0..{self.coupling.channels - 1}"
                    )
                if i in seen:
                    raise ChannelOverlap(f"channel {i} is both {seen[i]} and {name}")
                seen[i] = name
            object.__setattr__(self, name, idx)

    @property
    def unobserved(self) -> tuple:
        used = set(self.diffusive) | set(self.counting)
        return tuple(i for i in range(self.coupling.channels) if i not in used)


@dataclass(frozen=True)
class ControlSignal:
    """Open-loop control: ``values(t)`` returns one real per feedback channel."""

    values: Callable[[float], Sequence[float]]

    def __call__(self, t: float, rho: np.ndarray) -> np.ndarray:
        return np.asarray(self.values(t), dtype=float)


# ---------------------------------------------------------------------------
# single-state formulas


def _mat(rho) -> np.ndarray:
    return rho.matrix if isinstance(rho, DensityMatrix) else np.asarray(rho, dtype=complex)


def measurement_expectation(rho, op: np.ndarray) -> float:
    """``tr[rho (L + L^dagger)]``, the conditional mean of a diffusive record rate."""
    r = _mat(rho)
    return float(2.0 * np.real(np.sum(r * op.T)))


def fluctuation(rho, op: np.ndarray) -> np.ndarray:
    """Diffusive gain ``rho L^dagger + L rho - tr[rho (L + L^dagger)] rho``; it is traceless."""
    r = _mat(rho)
    return r @ op.conj().T + op @ r - measurement_expectation(r, op) * r


def intensity(rho, op: np.ndarray) -> float:
    """Counting intensity ``tr[L rho L^dagger]``."""
    r = _mat(rho)
    return float(np.real(np.trace(op @ r @ op.conj().T)))


def jump_map(rho, op: np.ndarray) -> np.ndarray:
    """Post-count state ``L rho L^dagger / nu``.

    Raises
    ------
    ZeroIntensityJump
        If the intensity is below 1e-14.
    """
    r = _mat(rho)
    num = op @ r @ op.conj().T
    nu = float(np.real(np.trace(num)))
    if nu < ZERO_INTENSITY:
        raise ZeroIntensityJump(f"count recorded at intensity {nu:.2e}")
    return num / nu


def _channels_ops(c: CouplingSet, channels: Sequence[int]) -> list[np.ndarray]:
    for i in channels:
        if not 0 <= i < c.channels:
            raise ValidationError(f"channel {i} outside 0..{c.channels - 1}")
    return [c.jump_ops[i] for i in channels]


def _drift(c: CouplingSet) -> np.ndarray:
    out = -1j / c.hbar * c.hamiltonian
    for op in c.jump_ops:
        out = out - 0.5 * op.conj().T @ op
    return out


def _lindblad(c: CouplingSet, r: np.ndarray) -> np.ndarray:
    d = _drift(c)
    out = d @ r + r @ d.conj().T
    for op in c.jump_ops:
        out = out + op @ r @ op.conj().T
    return out


def diffusive_step(
    rho,
    c: CouplingSet,
    channels: Sequence[int],
    dW: Sequence[float],
    dt: float,
    *,
    scheme: str = "euler",
    clip_tol: float = 1e-10,
) -> DensityMatrix:
    """One step of the diffusive filter driven by innovation increments ``dW``.

    ``"euler"``: ``rho + lambda(rho) dt + sum_i fluctuation_i(rho) dW_i``.
    ``"kraus"``: ``M rho M^dagger + dt sum_{other} L rho L^dagger`` with
    ``M = 1 + D dt + sum_i L_i dY_i`` and ``dY_i = <L_i + L_i^dagger> dt + dW_i``.
    Both are followed by :func:`normalize_and_clip`.
    """
    r = _mat(rho)
    dW = np.atleast_1d(np.asarray(dW, dtype=float))
    ops = _channels_ops(c, channels)
    if len(ops) != len(dW):
        raise DimensionMismatch(f"{len(dW)} increments for {len(ops)} channels")
    if dt <= 0 or not np.all(np.isfinite(dW)):
        raise ValidationError("dt must be positive and dW finite")
    if scheme == "euler":
        raw = r + _lindblad(c, r) * dt
        for op, w in zip(ops, dW):
            raw = raw + fluctuation(r, op) * w
    elif scheme == "kraus":
        m = np.eye(c.dim) + _drift(c) * dt
        for op, w in zip(ops, dW):
            m = m + op * (measurement_expectation(r, op) * dt + w)
        raw = m @ r @ m.conj().T
        for i, op in enumerate(c.jump_ops):
            if i not in channels:
                raw = raw + dt * op @ r @ op.conj().T
    else:
        raise ValidationError(f"unknown scheme {scheme!r}; use one of {SCHEMES}")
    return normalize_and_clip(raw, clip_tol)


def counting_step(
    rho,
    c: CouplingSet,
    channels: Sequence[int],
    dN: Sequence[int],
    dt: float,
    *,
    scheme: str = "euler",
    clip_tol: float = 1e-10,
) -> DensityMatrix:
    """One step of the counting filter for the event indicators ``dN``.

    ``"euler"``: ``rho + lambda(rho) dt + sum_i (alpha_i(rho) - rho)(dN_i - nu_i dt)``.
    ``"kraus"``: the no-count map ``M0 rho M0^dagger`` (plus the dissipators
    of unobserved channels) or the jump map on a count.
    """
    r = _mat(rho)
    dN = np.atleast_1d(np.asarray(dN, dtype=int))
    ops = _channels_ops(c, channels)
    if len(ops) != len(dN):
        raise DimensionMismatch(f"{len(dN)} indicators for {len(ops)} channels")
    if np.any((dN != 0) & (dN != 1)):
        raise ValidationError("count indicators must be 0 or 1")
    if dN.sum() > 1:
        raise ValidationError("at most one counting channel may fire per step")
    if scheme == "euler":
        raw = r + _lindblad(c, r) * dt
        for op, n in zip(ops, dN):
            num = op @ r @ op.conj().T
            nu = float(np.real(np.trace(num)))
            raw = raw - dt * (num - nu * r)
            if n:
                raw = raw + (jump_map(r, op) - r)
    elif scheme == "kraus":
        fired = [op for op, n in zip(ops, dN) if n]
        if fired:
            raw = jump_map(r, fired[0])
        else:
            m = np.eye(c.dim) + _drift(c) * dt
            raw = m @ r @ m.conj().T
            for i, op in enumerate(c.jump_ops):
                if i not in channels:
                    raw = raw + dt * op @ r @ op.conj().T
    else:
        raise ValidationError(f"unknown scheme {scheme!r}; use one of {SCHEMES}")
    return normalize_and_clip(raw, clip_tol)


# ---------------------------------------------------------------------------
# batched engine


def clip_batch(raw: np.ndarray, clip_tol: float) -> np.ndarray:
    """Vectorised :func:`~qfiltctl.operators.clip_spectrum` over a stack of states.

    Only states with a negative eigenvalue go through the eigen
    reconstruction; the rest are symmetrised and rescaled.
    """
    herm = 0.5 * (raw + dagger(raw))
    if not np.all(np.isfinite(herm)):
        raise NotPositive("state has non-finite entries")
    dim = herm.shape[-1]
    if dim == 2:
        a = herm[:, 0, 0].real
        d = herm[:, 1, 1].real
        b = np.abs(herm[:, 0, 1])
        mins = 0.5 * (a + d) - np.sqrt((0.5 * (a - d)) ** 2 + b * b)
        scale = np.maximum(1.0, 0.5 * (a + d) + np.sqrt((0.5 * (a - d)) ** 2 + b * b))
    else:
        ev = np.linalg.eigvalsh(herm)
        mins = ev[:, 0]
        scale = np.maximum(1.0, ev[:, -1])
    trace = np.real(np.trace(herm, axis1=-2, axis2=-1))
    # compare against the trace-normalised state so the tolerance is scale free
    rel_min = mins / np.where(trace > 0, trace, 1.0)
    if np.any(rel_min < -clip_tol):
        worst = float(rel_min.min())
        raise NotPositive(f"eigenvalue {worst:.3e} below -clip_tol={clip_tol:.1e}; reduce dt")
    fix = np.nonzero(mins < -64 * np.finfo(float).eps * scale)[0]
    for b_idx in fix:
        herm[b_idx] = clip_spectrum(herm[b_idx], clip_tol) * trace[b_idx]
    if np.any(trace < 1e-12):
        raise TraceVanishing(f"trace {float(trace.min()):.3e} is below 1e-12")
    return herm / trace[:, None, None]


class _Engine:
    """Precomputed operators and the vectorised one-step update."""

    def __init__(self, model: FilterModel, dt: float, scheme: str, clip_tol: float, control):
        if scheme not in SCHEMES:
            raise ValidationError(f"unknown scheme {scheme!r}; use one of {SCHEMES}")
        c = model.coupling
        self.model = model
        self.dim = c.dim
        self.hbar = c.hbar
        self.dt = float(dt)
        self.scheme = scheme
        self.clip_tol = clip_tol
        self.control = control
        self.ops0 = stack_ops(c.jump_ops, c.dim)  # (n, d, d)
        self.h0 = c.hamiltonian
        self.w_idx = np.array(model.diffusive, dtype=int)
        self.n_idx = np.array(model.counting, dtype=int)
        self.f_idx = np.array(model.feedback, dtype=int)
        self.unobs_idx = np.array(model.unobserved, dtype=int)
        if control is not None and len(self.f_idx) == 0:
            raise ValidationError("a control signal needs at least one feedback channel")
        self.re_f = 0.5 * (self.ops0[self.f_idx] + dagger(self.ops0[self.f_idx]))
        self.eye = np.eye(c.dim)

    # -- couplings under control ------------------------------------------------
    def control_values(self, t: float, rho: np.ndarray) -> np.ndarray:
        b = rho.shape[0]
        if self.control is None:
            return np.zeros((b, 0))
        u = np.asarray(self.control(t, rho), dtype=float)
        u = np.broadcast_to(u, (b, len(self.f_idx)))
        if not np.all(np.isfinite(u)):
            raise ValidationError("control values must be finite")
        return np.ascontiguousarray(u)

    def couplings(self, u: np.ndarray):
        """Batched operators ``(B|1, n, d, d)`` and drift ``(B|1, d, d)``."""
        ops = self.ops0[None]
        h = self.h0[None]
        if u.shape[1] and np.any(u):
            ops = np.repeat(ops, u.shape[0], axis=0)
            ops[:, self.f_idx] = ops[:, self.f_idx] + (1j / self.hbar) * u[:, :, None, None] * self.eye
            h = h + np.einsum("bf,fij->bij", u, self.re_f)
        gram = np.einsum("bkji,bkjl->bil", ops.conj(), ops)
        drift = -1j / self.hbar * h - 0.5 * gram
        return ops, drift

    # -- one step -----------------------------------------------------------------
    def step(self, rho, u, z, unif, k):
        """Advance a batch by one step.

        ``z`` are standard normals ``(B, nW)``, ``unif`` uniforms ``(B,)``.
        Returns the new states, the record increments and the innovations.
        """
        dt = self.dt
        ops, drift = self.couplings(u)
        b = rho.shape[0]
        op_w = ops[:, self.w_idx] if len(self.w_idx) else None
        dW = np.sqrt(dt) * z
        if op_w is not None:
            expect = 2.0 * np.real(np.einsum("bij,bkji->bk", rho, np.broadcast_to(op_w, (b,) + op_w.shape[1:])))
            dY = expect * dt + dW
        else:
            expect = np.zeros((b, 0))
            dY = np.zeros((b, 0))
        dN = np.zeros((b, len(self.n_idx)), dtype=np.int8)
        if len(self.n_idx):
            op_n = np.broadcast_to(ops[:, self.n_idx], (b, len(self.n_idx), self.dim, self.dim))
            num = np.einsum("bkij,bjl,bkml->bkim", op_n, rho, op_n.conj())
            nu = np.real(np.trace(num, axis1=-2, axis2=-1))
            worst = float(nu.max(initial=0.0)) * dt
            if worst > MAX_RATE_STEP:
                raise RateStepTooLarge(
                    f"intensity*dt = {worst:.3g} exceeds {MAX_RATE_STEP}; reduce dt",
                    module="filtering",
                    step=k,
                )
            cum = np.cumsum(nu * dt, axis=1)
            below = unif[:, None] < cum
            fired = below.any(axis=1)
            first = np.argmax(below, axis=1)
            dN[fired, first[fired]] = 1
        else:
            fired = np.zeros(b, dtype=bool)

        rho_dag_drift = rho @ dagger(drift)
        if self.scheme == "kraus":
            m = self.eye + drift * dt
            if op_w is not None:
                m = m + np.einsum("bk,bkij->bij", dY, np.broadcast_to(op_w, (b,) + op_w.shape[1:]))
            raw = m @ rho @ dagger(m)
            if len(self.unobs_idx):
                op_u = ops[:, self.unobs_idx]
                raw = raw + dt * np.einsum("bkij,bjl,bkml->bim", np.broadcast_to(op_u, (b,) + op_u.shape[1:]), rho, np.broadcast_to(op_u, (b,) + op_u.shape[1:]).conj())
            if fired.any():
                rows = np.nonzero(fired)[0]
                raw[rows] = num[rows, first[rows]]
        else:
            all_ops = np.broadcast_to(ops, (b,) + ops.shape[1:])
            lind = drift @ rho + rho_dag_drift + np.einsum("bkij,bjl,bkml->bim", all_ops, rho, all_ops.conj())
            raw = rho + lind * dt
            if op_w is not None:
                ow = np.broadcast_to(op_w, (b,) + op_w.shape[1:])
                fl = (
                    np.einsum("bij,bkmj->bkim", rho, ow.conj())
                    + np.einsum("bkij,bjl->bkil", ow, rho)
                    - expect[:, :, None, None] * rho[:, None]
                )
                raw = raw + np.einsum("bk,bkij->bij", dW, fl)
            if len(self.n_idx):
                raw = raw - dt * (num.sum(axis=1) - nu.sum(axis=1)[:, None, None] * rho)
                if fired.any():
                    rows = np.nonzero(fired)[0]
                    ch = first[rows]
                    nu_f = nu[rows, ch]
                    if np.any(nu_f < ZERO_INTENSITY):
                        raise ZeroIntensityJump("count drawn at vanishing intensity", module="filtering", step=k)
                    raw[rows] = raw[rows] + num[rows, ch] / nu_f[:, None, None] - rho[rows]
        try:
            new = clip_batch(raw, self.clip_tol)
        except (NotPositive, TraceVanishing) as exc:
            raise type(exc)(str(exc), module="filtering", step=k) from exc
        innov = dY - expect * dt
        return new, dY, dN, innov


def _initial_batch(rho0, b: int, dim: int) -> np.ndarray:
    r = _mat(rho0)
    if r.ndim == 2:
        if r.shape != (dim, dim):
            raise DimensionMismatch(f"initial state shape {r.shape} does not match dim {dim}")
        return np.repeat(r[None], b, axis=0).copy()
    if r.shape != (b, dim, dim):
        raise DimensionMismatch(f"initial states shape {r.shape} != {(b, dim, dim)}")
    return r.copy()


@dataclass
class _ChunkResult:
    sum_rho: np.ndarray
    sumsq_re: np.ndarray
    sumsq_im: np.ndarray
    innov_sum: np.ndarray
    innov_sumsq: np.ndarray
    count_sum: np.ndarray
    first_jump: np.ndarray
    total_counts: np.ndarray
    final: np.ndarray
    record: dict | None = None
    costs: np.ndarray | None = None


def _run_chunk(
    engine: _Engine,
    rho0,
    seed: int,
    indices: np.ndarray,
    n_steps: int,
    record: bool,
    noise: np.ndarray | None = None,
    cost=None,
) -> _ChunkResult:
    b = len(indices)
    dim = engine.dim
    dt = engine.dt
    n_w, n_n, n_f = len(engine.w_idx), len(engine.n_idx), len(engine.f_idx)
    rho = _initial_batch(rho0, b, dim)
    sum_rho = np.zeros((n_steps + 1, dim, dim), dtype=complex)
    sumsq_re = np.zeros((n_steps + 1, dim, dim))
    sumsq_im = np.zeros((n_steps + 1, dim, dim))
    innov_sum = np.zeros((n_steps, n_w))
    innov_sumsq = np.zeros((n_steps, n_w))
    count_sum = np.zeros((n_steps, n_n))
    first_jump = np.full(b, -1, dtype=np.int64)
    total_counts = np.zeros((b, n_n), dtype=np.int64)

    def accumulate(k: int, r: np.ndarray) -> None:
        sum_rho[k] = r.sum(axis=0)
        sumsq_re[k] = (r.real**2).sum(axis=0)
        sumsq_im[k] = (r.imag**2).sum(axis=0)

    accumulate(0, rho)
    costs = np.zeros(b) if cost is not None else None
    rec = None
    if record:
        rec = {
            "states": np.empty((b, n_steps + 1, dim, dim), dtype=complex),
            "dY": np.zeros((b, n_steps, n_w)),
            "dN": np.zeros((b, n_steps, n_n), dtype=np.int8),
            "u": np.zeros((b, n_steps, n_f)),
        }
        rec["states"][:, 0] = rho
    for k0 in range(0, n_steps, NOISE_BLOCK):
        nb = min(NOISE_BLOCK, n_steps - k0)
        if noise is not None:
            z_blk = noise[:, k0 : k0 + nb]
        else:
            z_blk = rngmod.normal_block(seed, indices, k0, nb, n_w)
        u_blk = rngmod.uniform_block(seed, indices, k0, nb) if n_n else np.zeros((b, nb))
        for j in range(nb):
            k = k0 + j
            t = k * dt
            u = engine.control_values(t, rho)
            if costs is not None:
                costs += cost[0](rho, u) * dt
            rho, dY, dN, innov = engine.step(rho, u, z_blk[:, j], u_blk[:, j], k)
            accumulate(k + 1, rho)
            if n_w:
                innov_sum[k] = innov.sum(axis=0)
                innov_sumsq[k] = (innov**2).sum(axis=0)
            if n_n:
                count_sum[k] = dN.sum(axis=0)
                total_counts += dN
                newly = (first_jump < 0) & dN.any(axis=1)
                first_jump[newly] = k + 1
            if rec is not None:
                rec["states"][:, k + 1] = rho
                rec["dY"][:, k] = dY
                rec["dN"][:, k] = dN
                rec["u"][:, k] = u
    if costs is not None and cost[1] is not None:
        costs += cost[1](rho)
    return _ChunkResult(
        sum_rho, sumsq_re, sumsq_im, innov_sum, innov_sumsq, count_sum, first_jump, total_counts, rho, rec, costs
    )


# ---------------------------------------------------------------------------
# public simulation API


@dataclass(frozen=True)
class TrajectoryRecord:
    """One simulated measurement record with its filtered states.

    ``innovations`` are recomputed from the stored record as
    ``dY - pair(state, L + L^dagger) dt`` so that identity holds bit for bit.
    Row ``k`` of ``dY``, ``dN``, ``u`` and ``innovations`` belongs to the step
    from ``times[k]`` to ``times[k+1]``.
    """

    times: np.ndarray
    states: np.ndarray
    dY: np.ndarray
    dN: np.ndarray
    u: np.ndarray
    innovations: np.ndarray
    seed: int
    trajectory_index: int
    diffusive: tuple = ()
    counting: tuple = ()
    feedback: tuple = ()

    def jump_times(self) -> np.ndarray:
        steps = np.nonzero(self.dN.any(axis=1))[0]
        return self.times[steps + 1]


def _innovations_from_record(model: FilterModel, states, dY, u, dt) -> np.ndarray:
    """``dY - tr[rho (L + L^dagger)] dt`` with the estimation operators in force."""
    from .operators import pair

    out = np.empty_like(dY)
    ops = [model.coupling.jump_ops[i] for i in model.diffusive]
    for k in range(dY.shape[0]):
        for col, op in enumerate(ops):
            herm = op + op.conj().T
            out[k, col] = dY[k, col] - pair(states[k], herm).real * dt
    return out


def simulate_trajectory(
    model: FilterModel,
    rho0,
    horizon: float,
    dt: float,
    seed: int,
    index: int = 0,
    *,
    control=None,
    scheme: str = "kraus",
    clip_tol: float = 1e-10,
) -> TrajectoryRecord:
    """Simulate one filtered trajectory; identical to member ``index`` of an ensemble.

    ``control`` is ``None``, a :class:`ControlSignal`, or a feedback closure
    ``(t, rho_batch) -> u`` that sees only the current filtered state (a
    function of the past record).
    """
    times = time_grid(horizon, dt)
    engine = _Engine(model, dt, scheme, clip_tol, control)
    res = _run_chunk(engine, rho0, rngmod.check_seed(seed), np.array([index]), len(times) - 1, True)
    rec = res.record
    states = rec["states"][0]
    dY = rec["dY"][0]
    return TrajectoryRecord(
        times=times,
        states=states,
        dY=dY,
        dN=rec["dN"][0],
        u=rec["u"][0],
        innovations=_innovations_from_record(model, states, dY, rec["u"][0], dt),
        seed=int(seed),
        trajectory_index=int(index),
        diffusive=model.diffusive,
        counting=model.counting,
        feedback=model.feedback,
    )


@dataclass(frozen=True)
class EnsembleResult:
    """Streaming statistics of an ensemble of filtered trajectories.

    Attributes
    ----------
    mean, stderr : ndarray, shape (K+1, dim, dim)
        Pointwise mean state and per-entry standard error (real part of
        ``stderr`` is the error of the real part, likewise for imaginary).
    innovation_mean, innovation_var : ndarray, shape (K, n_diffusive)
        Cross-trajectory mean and (unbiased) variance of each innovation
        increment, per step.
    count_mean : ndarray, shape (K, n_counting)
        Fraction of trajectories with a count in each step.
    first_jump_times : ndarray, shape (N,)
        Time of the first count, ``nan`` if none occurred.
    total_counts : ndarray, shape (N, n_counting)
    final_states : ndarray, shape (N, dim, dim)
    costs : ndarray, shape (N,), or None
        Realised cost per trajectory when a cost was requested.
    """

    times: np.ndarray
    n: int
    seed: int
    mean: np.ndarray
    stderr: np.ndarray
    innovation_mean: np.ndarray
    innovation_var: np.ndarray
    count_mean: np.ndarray
    first_jump_times: np.ndarray
    total_counts: np.ndarray
    final_states: np.ndarray
    costs: np.ndarray | None = None


def _chunks(n: int) -> list[np.ndarray]:
    return [np.arange(s, min(s + CHUNK, n)) for s in range(0, n, CHUNK)]


def simulate_ensemble(
    model: FilterModel,
    rho0,
    horizon: float,
    dt: float,
    n_trajectories: int,
    seed: int,
    *,
    control=None,
    scheme: str = "kraus",
    clip_tol: float = 1e-10,
    threads: int = 1,
    first_index: int = 0,
    running_cost=None,
    terminal_cost=None,
) -> EnsembleResult:
    """Simulate ``n_trajectories`` independent records and reduce them in a fixed order.

    ``running_cost(rho_batch, u_batch)`` and ``terminal_cost(rho_batch)``,
    when given, return one real per trajectory; the running part is summed
    with the left-point rule, so ``result.costs`` holds each trajectory's
    realised cost.
    """
    if n_trajectories < 1:
        raise ValidationError("ensemble size must be at least 1")
    if threads < 1:
        raise ValidationError("threads must be at least 1")
    seed = rngmod.check_seed(seed)
    times = time_grid(horizon, dt)
    n_steps = len(times) - 1
    engine = _Engine(model, dt, scheme, clip_tol, control)
    chunks = [c + first_index for c in _chunks(n_trajectories)]

    cost = None
    if running_cost is not None or terminal_cost is not None:
        cost = (running_cost or (lambda r, u: np.zeros(r.shape[0])), terminal_cost)

    def work(idx):
        return _run_chunk(engine, rho0, seed, idx, n_steps, False, cost=cost)

    if threads == 1 or len(chunks) == 1:
        results = [work(c) for c in chunks]
    else:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(work, chunks))
    return _reduce(times, seed, n_trajectories, results)


def _reduce(times, seed, n, results: list[_ChunkResult]) -> EnsembleResult:
    tot = results[0]
    sum_rho = tot.sum_rho.copy()
    sq_re = tot.sumsq_re.copy()
    sq_im = tot.sumsq_im.copy()
    i_sum = tot.innov_sum.copy()
    i_sq = tot.innov_sumsq.copy()
    c_sum = tot.count_sum.copy()
    for r in results[1:]:
        sum_rho += r.sum_rho
        sq_re += r.sumsq_re
        sq_im += r.sumsq_im
        i_sum += r.innov_sum
        i_sq += r.innov_sumsq
        c_sum += r.count_sum
    mean = sum_rho / n
    if n > 1:
        var_re = np.maximum(sq_re - n * mean.real**2, 0.0) / (n - 1)
        var_im = np.maximum(sq_im - n * mean.imag**2, 0.0) / (n - 1)
        i_var = np.maximum(i_sq - n * (i_sum / n) ** 2, 0.0) / (n - 1)
    else:
        var_re = np.zeros_like(sq_re)
        var_im = np.zeros_like(sq_im)
        i_var = np.zeros_like(i_sq)
    stderr = np.sqrt(var_re / n) + 1j * np.sqrt(var_im / n)
    first = np.concatenate([r.first_jump for r in results])
    first_t = np.where(first >= 0, times[np.maximum(first, 0)], np.nan)
    return EnsembleResult(
        times=times,
        n=n,
        seed=seed,
        mean=mean,
        stderr=stderr,
        innovation_mean=i_sum / n,
        innovation_var=i_var,
        count_mean=c_sum / n,
        first_jump_times=first_t,
        total_counts=np.concatenate([r.total_counts for r in results]),
        final_states=np.concatenate([r.final for r in results]),
        costs=None if results[0].costs is None else np.concatenate([r.costs for r in results]),
    )


def ensemble_average(records: Sequence[TrajectoryRecord]):
    """Pointwise mean state path and per-entry standard error of a list of records.

    Returns ``(times, mean, stderr)``; ``stderr`` packs the standard errors
    of real and imaginary parts into one complex array.

    Raises
    ------
    GridMismatch
        If the records were produced on different time grids.
    """
    if not records:
        raise ValidationError("no records to average")
    times = records[0].times
    for r in records[1:]:
        if r.times.shape != times.shape or not np.array_equal(r.times, times):
            raise GridMismatch("records have different time grids")
    stack = np.stack([r.states for r in records])
    n = len(records)
    mean = stack.mean(axis=0)
    if n > 1:
        se = stack.real.std(axis=0, ddof=1) / np.sqrt(n) + 1j * stack.imag.std(axis=0, ddof=1) / np.sqrt(n)
    else:
        se = np.zeros_like(mean)
    return times, mean, se


def filter_with_innovations(
    model: FilterModel,
    rho0,
    dt: float,
    innovations: np.ndarray,
    *,
    scheme: str = "kraus",
    clip_tol: float = 1e-10,
    record_every: int = 1,
) -> np.ndarray:
    """Drive a batch of diffusive filters with given innovation increments.

    Parameters
    ----------
    innovations : ndarray, shape (B, K, n_diffusive)
        Increments ``dW`` (variance ``dt``), not standard normals.
    record_every : int
        Keep every ``record_every``-th state (always including step 0).

    Returns
    -------
    ndarray, shape (B, K // record_every + 1, dim, dim)
    """
    if model.counting:
        raise ValidationError("filter_with_innovations supports diffusive channels only")
    innovations = np.asarray(innovations, dtype=float)
    b, n_steps, n_w = innovations.shape
    if n_w != len(model.diffusive):
        raise DimensionMismatch(f"{n_w} innovation channels for {len(model.diffusive)} diffusive channels")
    engine = _Engine(model, dt, scheme, clip_tol, None)
    rho = _initial_batch(rho0, b, model.coupling.dim)
    z = innovations / np.sqrt(dt)
    keep = [rho.copy()]
    zeros = np.zeros(b)
    for k in range(n_steps):
        rho, _, _, _ = engine.step(rho, np.zeros((b, 0)), z[:, k], zeros, k)
        if (k + 1) % record_every == 0:
            keep.append(rho.copy())
    return np.stack(keep, axis=1)


def brownian_increments(seed: int, n_paths: int, n_steps: int, n_channels: int, dt: float, first_index: int = 0) -> np.ndarray:
    """Innovation increments from the shared counter-based stream, ``(B, K, n)``."""
    idx = np.arange(first_index, first_index + n_paths)
    return np.sqrt(dt) * rngmod.normal_block(seed, idx, 0, n_steps, n_channels)


def coarsen(increments: np.ndarray, factor: int) -> np.ndarray:
    """Sum consecutive groups of ``factor`` increments along the step axis."""
    b, k, n = increments.shape
    if k % factor:
        raise GridMismatch(f"{k} steps are not divisible by {factor}")
    return increments.reshape(b, k // factor, factor, n).sum(axis=2)


__all__ = [
    "ControlSignal",
    "EnsembleResult",
    "FilterModel",
    "TrajectoryRecord",
    "brownian_increments",
    "coarsen",
    "counting_step",
    "diffusive_step",
    "ensemble_average",
    "filter_with_innovations",
    "fluctuation",
    "intensity",
    "jump_map",
    "measurement_expectation",
    "simulate_ensemble",
    "simulate_trajectory",
]
