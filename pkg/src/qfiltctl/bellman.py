"""Residual checks of the dynamic-programming equations.

Nothing here solves a Bellman equation.  The functions evaluate the
equations on candidate value functions and compare policies by Monte
Carlo:

* :func:`hjb_residual_lqg` plugs the quadratic candidate
  ``S = x^T Omega x + Tr[Omega Sigma] + alpha`` into the Gaussian HJB
  equation, with the time derivatives taken from the Riccati and
  ``alpha`` right-hand sides rather than from finite differences.
* :func:`bellman_residual_counting` assembles the counting-filter Bellman
  equation for an arbitrary state functional, using finite-difference
  Frechet gradients on the density-matrix space.
* :func:`policy_cost_mc` compares policies on common random numbers.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Mapping, Sequence

import numpy as np

from . import lqg
from .errors import DimensionMismatch, GridMismatch, NumericalError, ValidationError
from .filtering import FilterModel, jump_map, intensity, simulate_ensemble
from .master import coherent_control_apply, lindblad_apply

# Weight of the jump term in the counting equation.  The difference
# combination below is doubled, so the product with this factor is the
# plain generator of the jump process; exposed so tests can vary it.
FELLER_FACTOR = 0.5

DEFAULT_FD_STEP = 1e-4
DEFAULT_TIME_STEP = 1e-5
GRID_TOL = 1e-12


# ---------------------------------------------------------------------------
# quadratic candidate for the LQG problem


@dataclass(frozen=True)
class QuadraticValue:
    """``S(t, x, Sigma) = x^T Omega(t) x + Tr[Omega(t) Sigma] + alpha(t)`` on a grid.

    ``Omega_dot`` is the Riccati right-hand side evaluated on the stored
    ``Omega`` path (``dOmega/dt``).  ``alpha`` was integrated along one
    covariance path; its rate at other covariances is recomputed on demand.
    """

    times: np.ndarray
    Omega: np.ndarray
    Omega_dot: np.ndarray
    alpha: np.ndarray

    def __post_init__(self) -> None:
        if self.Omega.shape[0] != len(self.times) or len(self.alpha) != len(self.times):
            raise GridMismatch("Omega, alpha and times must share one grid")
        if np.max(np.abs(self.Omega - np.swapaxes(self.Omega, 1, 2)), initial=0.0) > 1e-10:
            raise ValidationError("Omega must be symmetric within 1e-10")
        if len(self.alpha) and self.alpha[-1] != 0.0:
            raise ValidationError("alpha must vanish at the horizon")

    def index(self, t: float) -> int:
        k = int(round(t / (self.times[1] - self.times[0]))) if len(self.times) > 1 else 0
        if not 0 <= k < len(self.times) or abs(self.times[k] - t) > GRID_TOL * max(1.0, abs(t)):
            raise GridMismatch(f"t={t} is not a grid point")
        return k

    def __call__(self, t: float, x, Sigma) -> float:
        k = self.index(t)
        x = np.asarray(x, dtype=float)
        om = self.Omega[k]
        return float(x @ om @ x + np.trace(om @ np.asarray(Sigma)) + self.alpha[k])

    def with_omega(self, Omega: np.ndarray) -> "QuadraticValue":
        """Same derivatives and alpha, replaced ``Omega`` (perturbation tests)."""
        return QuadraticValue(self.times, np.asarray(Omega, dtype=float), self.Omega_dot, self.alpha)


def quadratic_value(model: lqg.LinearModel, cost: lqg.CostSpec, sigma: lqg.MatrixPath, omega: lqg.MatrixPath) -> QuadraticValue:
    """Assemble the candidate from solved Riccati paths."""
    if not np.array_equal(sigma.times, omega.times):
        raise GridMismatch("Sigma and Omega paths use different grids")
    om_dot = np.array([-lqg.control_riccati_rhs(model, cost, o) for o in omega.values])
    alpha = lqg.alpha_path(model, cost, sigma, omega)
    return QuadraticValue(omega.times, omega.values, om_dot, alpha)


def hjb_residual_lqg(value: QuadraticValue, model: lqg.LinearModel, cost: lqg.CostSpec, t: float, x, Sigma) -> float:
    """Signed residual of the Gaussian HJB equation at ``(t, x, Sigma)``.

    ``-dS/dt`` minus the minimised right-hand side, where with
    ``K = Sigma B_e^T + F_e`` and ``Q = G + F_e F_e^T``::

        rhs = -2 x^T Omega A x                              drift of the mean
              + x^T H x + Tr[(H + E^T E) Sigma]             state cost
              + Tr[Omega dSigma/dt]                         covariance flow
              + |E x|^2 - |C^T Omega x + E x|^2              minimum over u
              + Tr[K^T Omega K]                             innovation diffusion

    ``dS/dt = x^T dOmega x + Tr[dOmega Sigma] + dalpha`` with ``dOmega`` from
    the stored Riccati rates and ``dalpha`` from the alpha equation at
    ``(Omega(t), Sigma)``.
    """
    k = value.index(t)
    x = np.asarray(x, dtype=float).ravel()
    sig = np.asarray(Sigma, dtype=float)
    if x.shape != (model.m,) or sig.shape != (model.m, model.m):
        raise DimensionMismatch("x or Sigma does not match the model dimension")
    om = value.Omega[k]
    om_dot = value.Omega_dot[k]
    a_dot = -lqg.alpha_rate(model, cost, om, sig)
    ds_dt = x @ om_dot @ x + np.trace(om_dot @ sig) + a_dot

    e = cost.E_f
    gain = lqg.kalman_gain(model, sig)
    sig_dot = lqg.filter_riccati_rhs(model, sig)
    ex = e @ x
    opt = model.C_f.T @ om @ x + ex
    rhs = (
        -2.0 * x @ om @ model.A @ x
        + x @ cost.H @ x
        + np.trace((cost.H + e.T @ e) @ sig)
        + np.trace(om @ sig_dot)
        + ex @ ex
        - opt @ opt
        + np.trace(gain.T @ om @ gain)
    )
    return float(-ds_dt - rhs)


def optimal_control_quadratic(gradient, model: lqg.LinearModel, cost: lqg.CostSpec, x_hat) -> np.ndarray:
    """``u = (1/2) C_f^T grad + E_f x_hat`` for a value gradient ``grad`` in ``x``.

    ``gradient`` may be the gradient vector itself or a pair
    ``(QuadraticValue, t)``, in which case ``grad = 2 Omega(t) x_hat``.
    """
    x = np.asarray(x_hat, dtype=float).ravel()
    if isinstance(gradient, tuple):
        value, t = gradient
        grad = 2.0 * value.Omega[value.index(t)] @ x
    else:
        grad = np.asarray(gradient, dtype=float).ravel()
    return 0.5 * model.C_f.T @ grad + cost.E_f @ x


# ---------------------------------------------------------------------------
# calculus on density matrices


@dataclass(frozen=True)
class StateFunctional:
    """A real functional ``S(t, rho)`` of a density matrix.

    ``evaluator`` receives a Hermitian ``(dim, dim)`` array, which during
    differencing may sit slightly outside the state space.
    """

    evaluator: Callable[[float, np.ndarray], float]
    controls: tuple = ()

    def __call__(self, t: float, rho: np.ndarray) -> float:
        val = float(self.evaluator(t, rho))
        if not np.isfinite(val):
            raise NumericalError("state functional returned a non-finite value", module="bellman")
        return val


def gell_mann_basis(dim: int) -> np.ndarray:
    """Orthonormal traceless Hermitian basis, ``Tr[tau_a tau_b] = delta_ab``.

    Symmetric, antisymmetric and diagonal generalised Gell-Mann matrices,
    ``dim**2 - 1`` of them.
    """
    out = []
    for j in range(dim):
        for k in range(j + 1, dim):
            s = np.zeros((dim, dim), dtype=complex)
            s[j, k] = s[k, j] = 1.0
            out.append(s / np.sqrt(2.0))
            a = np.zeros((dim, dim), dtype=complex)
            a[j, k] = -1j
            a[k, j] = 1j
            out.append(a / np.sqrt(2.0))
    for l in range(1, dim):
        d = np.zeros((dim, dim), dtype=complex)
        d[np.arange(l), np.arange(l)] = 1.0
        d[l, l] = -l
        out.append(d / np.sqrt(l * (l + 1)))
    return np.array(out).reshape(-1, dim, dim)


def frechet_gradient(F, rho, h: float = DEFAULT_FD_STEP, t: float = 0.0) -> np.ndarray:
    """Traceless Hermitian gradient of ``F`` at ``rho`` by central differences.

    ``F`` is a :class:`StateFunctional` or a plain callable ``rho -> float``.
    Directional derivatives along the Gell-Mann basis are assembled into
    the matrix ``sum_a dF(tau_a) tau_a``, whose trace pairing with any
    traceless ``tau`` reproduces the derivative along ``tau``.
    """
    if not 1e-6 <= h <= 1e-3:
        raise ValidationError(f"difference step h={h} outside [1e-6, 1e-3]")
    r = np.asarray(getattr(rho, "matrix", rho), dtype=complex)
    evaluate = _evaluator(F, t)
    basis = gell_mann_basis(r.shape[0])
    grad = np.zeros_like(r)
    for tau in basis:
        d = (evaluate(r + h * tau) - evaluate(r - h * tau)) / (2.0 * h)
        grad += d * tau
    return grad


def _evaluator(F, t: float):
    if isinstance(F, StateFunctional):
        return lambda r: F(t, r)

    def call(r):
        val = float(F(r))
        if not np.isfinite(val):
            raise NumericalError("state functional returned a non-finite value", module="bellman")
        return val

    return call


def hessian_contraction(F, rho, direction, h: float = 1e-3, t: float = 0.0) -> float:
    """Second directional derivative ``<d (x) d, grad (x) grad F>`` by nested differencing.

    The symmetric three-point stencil has error ``O(h^2)`` times the fourth
    directional derivative.
    """
    r = np.asarray(getattr(rho, "matrix", rho), dtype=complex)
    d = np.asarray(direction, dtype=complex)
    evaluate = _evaluator(F, t)
    return (evaluate(r + h * d) - 2.0 * evaluate(r) + evaluate(r - h * d)) / (h * h)


# ---------------------------------------------------------------------------
# Pontryagin Hamiltonian and the counting Bellman residual


def _pairing(a: np.ndarray, b: np.ndarray) -> float:
    return float(np.real(np.sum(a * b.T)))


def pontryagin_hamiltonian(
    q,
    p,
    cost_family: Callable[[np.ndarray], np.ndarray],
    generator_family: Callable[[np.ndarray], Callable[[np.ndarray], np.ndarray]],
    controls: Sequence,
    stationary=None,
) -> tuple[float, int]:
    """Legendre-Fenchel transform over a finite control grid.

    ``H(q, p) = max_u <generator_u[q], p> - <stationary - q, cost(u)>``.
    ``stationary`` defaults to zero.  Returns the value and the index of
    the maximising control; ties go to the lowest index.

    Raises
    ------
    ValidationError
        If ``controls`` is empty.
    """
    if len(controls) == 0:
        raise ValidationError("the control set is empty")
    q = np.asarray(q, dtype=complex)
    p = np.asarray(p, dtype=complex)
    rho_s = np.zeros_like(q) if stationary is None else np.asarray(stationary, dtype=complex)
    vals = np.empty(len(controls))
    for n, u in enumerate(controls):
        u = np.atleast_1d(np.asarray(u, dtype=float))
        vals[n] = _pairing(generator_family(u)(q), p) - _pairing(rho_s - q, cost_family(u))
    best = int(np.argmax(vals))
    return float(vals[best]), best


def controlled_generators(model: FilterModel):
    """``u -> (rho -> lindblad generator of the coherently controlled couplings)``."""
    c = model.coupling
    all_est = model.diffusive + model.counting

    def family(u):
        u = np.atleast_1d(np.asarray(u, dtype=float))
        cu = coherent_control_apply(c, u, model.feedback, all_est) if len(model.feedback) else c
        return lambda r: lindblad_apply(cu, r)

    return family


@dataclass(frozen=True)
class CountingResidual:
    """Terms of the counting Bellman equation at one ``(t, rho)``."""

    residual: float
    time_derivative: float
    hamiltonian: float
    argmax: int
    jump_terms: tuple
    gradient: np.ndarray


def bellman_residual_counting(
    S: StateFunctional,
    model: FilterModel,
    t: float,
    rho,
    controls: Sequence,
    cost_family: Callable[[np.ndarray], np.ndarray] | None = None,
    *,
    h: float = DEFAULT_FD_STEP,
    ht: float = DEFAULT_TIME_STEP,
    stationary=None,
    feller_factor: float = FELLER_FACTOR,
) -> CountingResidual:
    """Residual ``-dS/dt + H(stationary - rho, grad S) - f sum_i nu_i Delta_i S``.

    ``Delta_i S = 2 (S(jump_i(rho)) - S(rho) - <jump_i(rho) - rho, grad S>)``
    and ``f`` is ``feller_factor``.  Channels with zero intensity contribute
    nothing.  ``cost_family`` maps a control to the Hermitian running-cost
    observable (default: zero cost).  Controls act through the model's
    feedback channels.
    """
    if model.diffusive:
        raise ValidationError("the counting residual needs a counting-only model")
    r = np.asarray(getattr(rho, "matrix", rho), dtype=complex)
    dim = r.shape[0]
    cost_family = cost_family or (lambda u: np.zeros((dim, dim)))
    grad = frechet_gradient(S, r, h, t)
    ds_dt = (S(t + ht, r) - S(t - ht, r)) / (2.0 * ht)
    rho_s = np.zeros_like(r) if stationary is None else np.asarray(stationary, dtype=complex)
    ham, best = pontryagin_hamiltonian(rho_s - r, grad, cost_family, controlled_generators(model), controls, rho_s)
    s0 = S(t, r)
    jumps = []
    for i in model.counting:
        op = model.coupling.jump_ops[i]
        nu = intensity(r, op)
        if nu < 1e-14:
            jumps.append(0.0)
            continue
        post = jump_map(r, op)
        delta = 2.0 * (S(t, post) - s0 - _pairing(post - r, grad))
        jumps.append(nu * delta)
    res = -ds_dt + ham - feller_factor * float(np.sum(jumps))
    return CountingResidual(float(res), float(ds_dt), ham, best, tuple(jumps), grad)


# ---------------------------------------------------------------------------
# Monte Carlo policy comparison


@dataclass(frozen=True)
class PolicyComparison:
    names: tuple
    means: dict
    stderrs: dict
    differences: dict  # (a, b) -> (mean of cost_a - cost_b, its standard error)
    n: int

    def to_json(self) -> dict:
        return {
            "n": self.n,
            "policies": {k: {"mean": self.means[k], "stderr": self.stderrs[k]} for k in self.names},
            "differences": [
                {"a": a, "b": b, "mean": d[0], "stderr": d[1]} for (a, b), d in self.differences.items()
            ],
        }


def _compare(costs: Mapping[str, np.ndarray]) -> PolicyComparison:
    names = tuple(costs)
    n = len(next(iter(costs.values())))
    root = np.sqrt(n)
    means = {k: float(v.mean()) for k, v in costs.items()}
    ses = {k: float(v.std(ddof=1) / root) if n > 1 else 0.0 for k, v in costs.items()}
    diffs = {}
    for i, a in enumerate(names):
        for b in names[i + 1 :]:
            d = costs[a] - costs[b]
            diffs[(a, b)] = (float(d.mean()), float(d.std(ddof=1) / root) if n > 1 else 0.0)
    return PolicyComparison(names, means, ses, diffs, n)


def policy_cost_mc(
    model,
    policies: Mapping[str, object],
    initial,
    horizon: float,
    dt: float,
    n_trajectories: int,
    seed: int,
    *,
    cost: lqg.CostSpec | None = None,
    running_cost=None,
    terminal_cost=None,
    threads: int = 1,
    scheme: str = "kraus",
) -> PolicyComparison:
    """Expected cost of several policies on common random numbers.

    Two modes, picked by the type of ``model``:

    * :class:`~qfiltctl.lqg.LinearModel`: ``initial`` is a
      :class:`~qfiltctl.lqg.GaussianBelief`, ``cost`` a ``CostSpec`` and
      each policy is a gain schedule of shape ``(K+1, d_f, m)``, a constant
      ``(d_f, m)`` gain, or ``None`` for the optimal schedule.
    * :class:`~qfiltctl.filtering.FilterModel`: ``initial`` is a density
      matrix and each policy is a feedback closure ``(t, rho_batch) -> u``;
      ``running_cost(rho_batch, u_batch)`` and ``terminal_cost(rho_batch)``
      define the cost.
    """
    if not policies:
        raise ValidationError("no policies given")
    costs: dict[str, np.ndarray] = {}
    if isinstance(model, lqg.LinearModel):
        if cost is None:
            raise ValidationError("LQG policy comparison needs a CostSpec")
        n_grid = int(round(horizon / dt)) + 1
        for name, pol in policies.items():
            gains = None
            if pol is not None:
                g = np.asarray(pol, dtype=float)
                gains = np.broadcast_to(g, (n_grid,) + g.shape[-2:]) if g.ndim == 2 else g
            res = lqg.simulate_closed_loop(model, cost, initial, horizon, dt, seed, n_trajectories, gains=gains, threads=threads)
            costs[name] = res.costs
    elif isinstance(model, FilterModel):
        for name, pol in policies.items():
            res = simulate_ensemble(
                model,
                initial,
                horizon,
                dt,
                n_trajectories,
                seed,
                control=pol,
                scheme=scheme,
                threads=threads,
                running_cost=running_cost,
                terminal_cost=terminal_cost,
            )
            costs[name] = res.costs if res.costs is not None else np.zeros(n_trajectories)
    else:
        raise ValidationError(f"unsupported model type {type(model).__name__}")
    return _compare(costs)


__all__ = [
    "CountingResidual",
    "FELLER_FACTOR",
    "PolicyComparison",
    "QuadraticValue",
    "StateFunctional",
    "bellman_residual_counting",
    "controlled_generators",
    "frechet_gradient",
    "gell_mann_basis",
    "hessian_contraction",
    "hjb_residual_lqg",
    "optimal_control_quadratic",
    "policy_cost_mc",
    "pontryagin_hamiltonian",
    "quadratic_value",
]
