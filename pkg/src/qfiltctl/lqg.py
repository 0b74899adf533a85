"""Linear-Gaussian filtering and control in moment coordinates.

All vectors are columns.  A phase-space state is ``x`` of length ``m``,
the belief is ``(x_hat, Sigma)``, and the conventions are::

    belief mean      dx_hat = -(A x_hat + C_f u) dt + K dW_hat
    innovation       dW_hat = dY - B_e x_hat dt
    Kalman gain      K      = Sigma B_e^T + F_e
    filter Riccati   dSigma/dt  = G - A_e Sigma - Sigma A_e^T - Sigma B_e^T B_e Sigma,
                     A_e = A + F_e B_e
    control Riccati  -dOmega/dt = H - Omega A_f - A_f^T Omega - Omega C_f C_f^T Omega,
                     A_f = A + C_f E_f
    feedback gain    L^T = Omega C_f + E_f^T,   u = L x_hat
    running cost     |u - E_f x_hat|^2 + x_hat^T H x_hat + Tr[(H + E_f^T E_f) Sigma]

A model is built either from the quantum data ``(J, Lambda_e, Lambda_f,
Minv, hbar)`` by :func:`derive_matrices`, or directly from coefficient
matrices by :meth:`LinearModel.from_coefficients` (classical models and
duals, where ``J`` may be degenerate or absent).
"""
from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Mapping

import numpy as np
from scipy.linalg import solve_continuous_are

from . import rng as rngmod
from .errors import BlowUp, ChannelOverlap, DimensionMismatch, GridMismatch, ValidationError
from .master import time_grid

SYM_TOL = 1e-12
PSD_TOL = 1e-10
HEISENBERG_TOL = 1e-9
BLOWUP = 1e12
MC_CHUNK = 2048


def _real(x, name: str, shape: tuple | None = None) -> np.ndarray:
    a = np.array(x, dtype=float)
    if a.ndim == 1 and shape is not None and len(shape) == 2:
        a = a.reshape(shape)
    if shape is not None and a.shape != shape:
        raise DimensionMismatch(f"{name} has shape {a.shape}, expected {shape}")
    if not np.all(np.isfinite(a)):
        raise ValidationError(f"{name} must be finite")
    a.setflags(write=False)
    return a


def _sym(x: np.ndarray) -> np.ndarray:
    return 0.5 * (x + x.T)


def standard_symplectic(m: int) -> np.ndarray:
    """``[[0, I], [-I, 0]]`` of size ``m`` (even)."""
    if m % 2:
        raise ValidationError("standard symplectic form needs an even dimension")
    n = m // 2
    j = np.zeros((m, m))
    j[:n, n:] = np.eye(n)
    j[n:, :n] = -np.eye(n)
    return j


@dataclass(frozen=True)
class LinearModel:
    """Coefficient matrices of a linear open system.

    ``B_e`` is ``d_e x m`` (one row per estimation channel), ``C_f`` is
    ``m x d_f`` (one column per feedback channel), ``F_e`` is ``m x d_e``,
    ``E_f`` is ``d_f x m`` and ``G``, ``H`` are ``m x m``.  ``J`` is the
    commutator matrix of the canonical operators; it may be zero for
    classical models.  ``source`` holds the quantum inputs when the model
    was derived from them.
    """

    J: np.ndarray
    A: np.ndarray
    B_e: np.ndarray
    C_f: np.ndarray
    F_e: np.ndarray
    E_f: np.ndarray
    G: np.ndarray
    H: np.ndarray
    hbar: float = 1.0
    source: Mapping | None = field(default=None, compare=False)

    def __post_init__(self) -> None:
        a = _real(self.A, "A")
        if a.ndim != 2 or a.shape[0] != a.shape[1]:
            raise DimensionMismatch(f"A must be square, got {a.shape}")
        m = a.shape[0]
        b = _real(np.reshape(self.B_e, (-1, m)), "B_e")
        c = _real(np.reshape(self.C_f, (m, -1)), "C_f")
        f = _real(np.reshape(self.F_e, (m, -1)), "F_e")
        e = _real(np.reshape(self.E_f, (-1, m)), "E_f")
        if f.shape[1] != b.shape[0]:
            raise DimensionMismatch(f"F_e has {f.shape[1]} columns but B_e has {b.shape[0]} rows")
        if e.shape[0] != c.shape[1]:
            raise DimensionMismatch(f"E_f has {e.shape[0]} rows but C_f has {c.shape[1]} columns")
        j = _real(self.J, "J", (m, m))
        if np.max(np.abs(j + j.T), initial=0.0) > SYM_TOL:
            raise ValidationError("J must be antisymmetric within 1e-12")
        g = _real(self.G, "G", (m, m))
        h = _real(self.H, "H", (m, m))
        for name, mat in (("G", g), ("H", h)):
            if np.max(np.abs(mat - mat.T), initial=0.0) > SYM_TOL:
                raise ValidationError(f"{name} must be symmetric within 1e-12")
        if not (np.isfinite(self.hbar) and self.hbar > 0):
            raise ValidationError("hbar must be a positive real")
        for name, val in (("J", j), ("A", a), ("B_e", b), ("C_f", c), ("F_e", f), ("E_f", e), ("G", g), ("H", h)):
            object.__setattr__(self, name, val)
        object.__setattr__(self, "hbar", float(self.hbar))

    @property
    def m(self) -> int:
        return self.A.shape[0]

    @property
    def d_e(self) -> int:
        return self.B_e.shape[0]

    @property
    def d_f(self) -> int:
        return self.C_f.shape[1]

    @property
    def A_e(self) -> np.ndarray:
        return self.A + self.F_e @ self.B_e

    @property
    def A_f(self) -> np.ndarray:
        return self.A + self.C_f @ self.E_f

    @property
    def Q(self) -> np.ndarray:
        """Total diffusion of the state noise, ``G + F_e F_e^T``."""
        return self.G + self.F_e @ self.F_e.T

    @classmethod
    def from_coefficients(
        cls,
        A,
        B_e,
        C_f,
        G,
        H,
        *,
        F_e=None,
        E_f=None,
        J=None,
        hbar: float = 1.0,
    ) -> "LinearModel":
        """Direct-coefficient construction (classical models, duals, tests)."""
        a = np.atleast_2d(np.asarray(A, dtype=float))
        m = a.shape[0]
        b = np.asarray(B_e, dtype=float).reshape(-1, m)
        c = np.asarray(C_f, dtype=float).reshape(m, -1)
        f = np.zeros((m, b.shape[0])) if F_e is None else F_e
        e = np.zeros((c.shape[1], m)) if E_f is None else E_f
        j = np.zeros((m, m)) if J is None else J
        return cls(j, a, b, c, f, e, np.atleast_2d(G), np.atleast_2d(H), hbar)


def derive_matrices(J, Lambda_e, Lambda_f, Minv, hbar: float = 1.0) -> LinearModel:
    """Derive the linear-system coefficients from the quantum couplings.

    ``Lambda_e`` and ``Lambda_f`` are complex ``d x m`` matrices over the
    same ``d`` field channels; a channel (row) may be nonzero in at most one
    of them.  Estimation channels are the nonzero rows of ``Lambda_e`` and
    feedback channels the nonzero rows of ``Lambda_f``; all-zero rows are
    dropped.  With ``Lambda = Lambda_e + Lambda_f``::

        A^T   = (hbar Im(Lambda^T conj(Lambda)) + Minv) J
        B_e   = 2 Re Lambda_e            C_f^T = 2 Re(Lambda_f) J
        F_e^T = hbar Im(Lambda_e) J      E_f   = hbar Im Lambda_f
        G     = (hbar^2/4) C_e C_e^T + hbar^2 J^T Re(Lambda_f^H Lambda_f) J,  C_e^T = B_e J
        H     = (hbar^2/4) B_f^T B_f + hbar^2 Re(Lambda_e^H Lambda_e),       B_f = 2 Re Lambda_f

    Raises
    ------
    ChannelOverlap
        A row is nonzero in both coupling matrices.
    """
    j = np.asarray(J, dtype=float)
    m = j.shape[0]
    le = np.atleast_2d(np.asarray(Lambda_e, dtype=complex))
    lf = np.atleast_2d(np.asarray(Lambda_f, dtype=complex))
    minv = np.asarray(Minv, dtype=float)
    if j.shape != (m, m) or minv.shape != (m, m):
        raise DimensionMismatch("J and Minv must be m x m")
    if le.shape[1] != m or lf.shape[1] != m or le.shape[0] != lf.shape[0]:
        raise DimensionMismatch(
            f"Lambda_e {le.shape} and Lambda_f {lf.shape} must both be d x {m}"
        )
    if np.max(np.abs(minv - minv.T), initial=0.0) > SYM_TOL:
        raise ValidationError("Minv must be symmetric within 1e-12")
    if not (np.isfinite(hbar) and hbar > 0):
        raise ValidationError("hbar must be a positive real")
    est = np.any(le != 0, axis=1)
    fb = np.any(lf != 0, axis=1)
    if np.any(est & fb):
        raise ChannelOverlap(f"channels {np.nonzero(est & fb)[0].tolist()} appear in both Lambda_e and Lambda_f")
    lam = le + lf
    a_t = (hbar * np.imag(lam.T @ lam.conj()) + minv) @ j
    le_r, lf_r = le[est], lf[fb]
    b_e = 2.0 * le_r.real
    b_f = 2.0 * lf_r.real
    c_f = (b_f @ j).T
    f_e = (hbar * le_r.imag @ j).T
    e_f = hbar * lf_r.imag
    c_e = (b_e @ j).T
    g = 0.25 * hbar**2 * c_e @ c_e.T + hbar**2 * j.T @ np.real(lf.conj().T @ lf) @ j
    h = 0.25 * hbar**2 * b_f.T @ b_f + hbar**2 * np.real(le.conj().T @ le)
    source = {"J": j.copy(), "Lambda_e": le.copy(), "Lambda_f": lf.copy(), "Minv": minv.copy()}
    return LinearModel(j, a_t.T, b_e, c_f, f_e, e_f, _sym(g), _sym(h), hbar, source)


def noise_matrix_reference(model: LinearModel) -> np.ndarray:
    """``G`` recomputed from the stored quantum inputs (for the invariant check)."""
    if model.source is None:
        raise ValidationError("model was not derived from quantum couplings")
    j, le, lf = model.source["J"], model.source["Lambda_e"], model.source["Lambda_f"]
    hb = model.hbar
    ce = 2.0 * j.T @ le.real.T
    return 0.25 * hb**2 * ce @ ce.T + hb**2 * j.T @ np.real(lf.conj().T @ lf) @ j


@dataclass(frozen=True)
class FreeParticleScalars:
    lam: float
    delta: float
    zeta_q: float
    zeta_p: float
    eta_q: float
    eta_p: float


def free_particle_model(
    alpha: float, beta: float, gamma: float, eps: float, mu: float = 1.0, hbar: float = 1.0
) -> tuple[LinearModel, FreeParticleScalars]:
    """Free particle of mass ``mu`` with coordinate estimation and a force channel.

    Channel 0 observes ``alpha q`` with back-action strength ``eps`` on the
    momentum; channel 1 applies the force with gain ``beta`` and output
    coupling ``gamma``.  Coordinates are ``(q, p)``.
    """
    if not mu > 0:
        raise ValidationError("mass mu must be positive")
    if not hbar > 0:
        raise ValidationError("hbar must be positive")
    j = np.array([[0.0, 1.0], [-1.0, 0.0]])
    le = np.array([[alpha / 2, 1j * eps / hbar], [0, 0]], dtype=complex)
    lf = np.array([[0, 0], [beta / 2, 1j * gamma / hbar]], dtype=complex)
    minv = np.diag([0.0, 1.0 / mu])
    model = derive_matrices(j, le, lf, minv, hbar)
    # Keep both channel blocks even when a coupling vanishes, so that the
    # shapes of B_e / C_f do not depend on the parameter values.
    if model.d_e == 0 or model.d_f == 0:
        b_e = np.array([[alpha, 0.0]])
        f_e = np.array([[-eps], [0.0]])
        c_f = np.array([[0.0], [beta]])
        e_f = np.array([[0.0, gamma]])
        model = LinearModel(model.J, model.A, b_e, c_f, f_e, e_f, model.G, model.H, hbar, model.source)
    scalars = FreeParticleScalars(
        lam=0.5 * (alpha * eps + beta * gamma),
        delta=0.5 * (alpha * eps - gamma * beta),
        zeta_q=gamma**2,
        zeta_p=(hbar / 2) ** 2 * (alpha**2 + beta**2),
        eta_q=(hbar / 2) ** 2 * (alpha**2 + beta**2),
        eta_p=eps**2,
    )
    return model, scalars


@dataclass(frozen=True)
class GaussianBelief:
    mean: np.ndarray
    cov: np.ndarray

    def __post_init__(self) -> None:
        mean = np.asarray(self.mean, dtype=float).ravel()
        cov = np.atleast_2d(np.asarray(self.cov, dtype=float))
        if cov.shape != (len(mean), len(mean)):
            raise DimensionMismatch(f"covariance {cov.shape} does not match mean length {len(mean)}")
        if np.max(np.abs(cov - cov.T), initial=0.0) > SYM_TOL:
            raise ValidationError("covariance must be symmetric within 1e-12")
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "cov", cov)

    def admissible(self, J: np.ndarray, hbar: float = 1.0) -> bool:
        return heisenberg_check(self.cov, J, hbar).ok


@dataclass(frozen=True)
class CostSpec:
    """Quadratic cost: output matrix ``E_f``, running ``H`` and terminal ``Omega_T``."""

    E_f: np.ndarray
    H: np.ndarray
    Omega_T: np.ndarray

    def __post_init__(self) -> None:
        h = np.atleast_2d(np.asarray(self.H, dtype=float))
        m = h.shape[0]
        e = np.asarray(self.E_f, dtype=float).reshape(-1, m)
        om = np.atleast_2d(np.asarray(self.Omega_T, dtype=float))
        if om.shape != (m, m):
            raise DimensionMismatch(f"Omega_T {om.shape} does not match H {h.shape}")
        for name, mat in (("H", h), ("Omega_T", om)):
            if np.max(np.abs(mat - mat.T), initial=0.0) > PSD_TOL:
                raise ValidationError(f"{name} must be symmetric within 1e-10")
            if np.linalg.eigvalsh(_sym(mat))[0] < -PSD_TOL:
                raise ValidationError(f"{name} must be positive semidefinite within 1e-10")
        object.__setattr__(self, "E_f", e)
        object.__setattr__(self, "H", h)
        object.__setattr__(self, "Omega_T", om)

    @classmethod
    def from_model(cls, model: LinearModel, Omega_T=None) -> "CostSpec":
        om = np.zeros((model.m, model.m)) if Omega_T is None else Omega_T
        return cls(model.E_f, model.H, om)


@dataclass(frozen=True)
class HeisenbergReport:
    ok: bool
    min_eig: float


def heisenberg_check(Sigma, J, hbar: float = 1.0, tol: float = HEISENBERG_TOL) -> HeisenbergReport:
    """Smallest eigenvalue of the Hermitian matrix ``Sigma + (i hbar / 2) J``."""
    s = np.asarray(Sigma, dtype=float)
    mat = s + 0.5j * hbar * np.asarray(J, dtype=float)
    ev = float(np.linalg.eigvalsh(0.5 * (mat + mat.conj().T))[0])
    return HeisenbergReport(ev >= -tol, ev)


# ---------------------------------------------------------------------------
# Riccati flows


def filter_riccati_rhs(model: LinearModel, Sigma: np.ndarray) -> np.ndarray:
    ae = model.A_e
    sb = Sigma @ model.B_e.T
    return model.G - ae @ Sigma - Sigma @ ae.T - sb @ sb.T


def control_riccati_rhs(model: LinearModel, cost: CostSpec, Omega: np.ndarray) -> np.ndarray:
    """Right side of ``-dOmega/dt``."""
    af = model.A + model.C_f @ cost.E_f
    oc = Omega @ model.C_f
    return cost.H - Omega @ af - af.T @ Omega - oc @ oc.T


@dataclass(frozen=True)
class MatrixPath:
    """A matrix-valued function on a uniform grid; ``values[k]`` is at ``times[k]``."""

    times: np.ndarray
    values: np.ndarray

    def at_index(self, k: int) -> np.ndarray:
        return self.values[k]

    @property
    def final(self) -> np.ndarray:
        return self.values[-1]


def _rk4_matrix(f: Callable[[np.ndarray], np.ndarray], x0: np.ndarray, dt: float, n: int, what: str) -> np.ndarray:
    out = np.empty((n + 1,) + x0.shape)
    x = _sym(np.asarray(x0, dtype=float))
    out[0] = x
    for k in range(1, n + 1):
        k1 = f(x)
        k2 = f(x + 0.5 * dt * k1)
        k3 = f(x + 0.5 * dt * k2)
        k4 = f(x + dt * k3)
        x = _sym(x + dt / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4))
        if not np.all(np.isfinite(x)) or np.max(np.abs(x)) > BLOWUP:
            raise BlowUp(f"{what} Riccati solution exceeded 1e12", module="lqg", step=k)
        out[k] = x
    return out


def filter_riccati_solve(model: LinearModel, Sigma0, horizon: float, dt: float) -> MatrixPath:
    """Forward RK4 for the error covariance, symmetrised every step."""
    s0 = np.asarray(Sigma0, dtype=float)
    if s0.shape != (model.m, model.m):
        raise DimensionMismatch(f"Sigma0 {s0.shape} does not match m={model.m}")
    times = time_grid(horizon, dt)
    vals = _rk4_matrix(lambda s: filter_riccati_rhs(model, s), s0, dt, len(times) - 1, "filter")
    return MatrixPath(times, vals)


def control_riccati_solve(model: LinearModel, cost: CostSpec, horizon: float, dt: float) -> MatrixPath:
    """Backward RK4 from ``Omega(T) = Omega_T``; returned on the forward grid."""
    if cost.H.shape != (model.m, model.m) or cost.E_f.shape != (model.d_f, model.m):
        raise DimensionMismatch("cost matrices do not match the model")
    times = time_grid(horizon, dt)
    rev = _rk4_matrix(lambda o: control_riccati_rhs(model, cost, o), cost.Omega_T, dt, len(times) - 1, "control")
    return MatrixPath(times, rev[::-1].copy())


def kalman_gain(model: LinearModel, Sigma: np.ndarray) -> np.ndarray:
    """``K = Sigma B_e^T + F_e`` (``m x d_e``)."""
    return Sigma @ model.B_e.T + model.F_e


def kalman_step(model: LinearModel, belief: GaussianBelief, Sigma_t, u, dY, dt: float):
    """Advance the posterior mean by one Euler step of the Kalman filter.

    Returns ``(belief_next, innovation)``; the covariance of the returned
    belief is ``Sigma_t`` (the caller takes the next covariance from the
    Riccati path).
    """
    sig = np.asarray(Sigma_t, dtype=float)
    x = belief.mean
    u = np.asarray(u, dtype=float).ravel()
    dY = np.asarray(dY, dtype=float).ravel()
    if u.shape != (model.d_f,) or dY.shape != (model.d_e,):
        raise DimensionMismatch(f"u needs {model.d_f} entries and dY {model.d_e}")
    innov = dY - model.B_e @ x * dt
    dx = -(model.A @ x + model.C_f @ u) * dt + kalman_gain(model, sig) @ innov
    return GaussianBelief(x + dx, sig), innov


def optimal_gain(Omega, model: LinearModel, cost: CostSpec) -> np.ndarray:
    """Feedback matrix ``L`` (``d_f x m``) with ``L^T = Omega C_f + E_f^T``."""
    return (np.asarray(Omega) @ model.C_f + cost.E_f.T).T


def _trapezoid(y: np.ndarray, dt: float) -> float:
    if len(y) < 2:
        return 0.0
    return float(dt * (0.5 * y[0] + y[1:-1].sum() + 0.5 * y[-1]))


def alpha_rate(model: LinearModel, cost: CostSpec, Omega: np.ndarray, Sigma: np.ndarray) -> float:
    """``-dalpha/dt = Tr[L Sigma L^T] + Tr[Omega (G + F_e F_e^T)]``."""
    lt = Omega @ model.C_f + cost.E_f.T
    return float(np.trace(lt.T @ Sigma @ lt) + np.trace(Omega @ model.Q))


def alpha_path(model: LinearModel, cost: CostSpec, sigma: MatrixPath, omega: MatrixPath) -> np.ndarray:
    """``alpha(t) = int_t^T (-dalpha/ds) ds`` by the trapezoidal rule, ``alpha(T) = 0``."""
    if not np.array_equal(sigma.times, omega.times):
        raise GridMismatch("Sigma and Omega paths use different grids")
    rate = np.array([alpha_rate(model, cost, o, s) for o, s in zip(omega.values, sigma.values)])
    dt = sigma.times[1] - sigma.times[0] if len(sigma.times) > 1 else 0.0
    out = np.zeros(len(rate))
    for k in range(len(rate) - 2, -1, -1):
        out[k] = out[k + 1] + 0.5 * dt * (rate[k] + rate[k + 1])
    return out


def min_cost(
    model: LinearModel,
    cost: CostSpec,
    sigma: MatrixPath,
    omega: MatrixPath,
    x0,
    Sigma0=None,
) -> float:
    """Optimal expected cost ``x0^T Omega_0 x0 + Tr[Omega_0 Sigma_0] + alpha(0)``.

    ``alpha(0)`` integrates ``Tr[Omega (G + F_e F_e^T)] + Tr[L Sigma L^T]``
    with the trapezoidal rule on the shared grid.  The ``F_e F_e^T`` part is
    the diffusion the Kalman gain's constant term injects into the mean; it
    vanishes when the estimation channel has no back-action term.
    """
    if not np.array_equal(sigma.times, omega.times):
        raise GridMismatch("Sigma and Omega paths use different grids")
    x0 = np.asarray(x0, dtype=float).ravel()
    s0 = sigma.values[0] if Sigma0 is None else np.asarray(Sigma0, dtype=float)
    om0 = omega.values[0]
    alpha0 = alpha_path(model, cost, sigma, omega)[0] if len(sigma.times) > 1 else 0.0
    return float(x0 @ om0 @ x0 + np.trace(om0 @ s0) + alpha0)


# ---------------------------------------------------------------------------
# duality


def dualize(model: LinearModel, cost: CostSpec, Sigma0=None):
    """Map a filtering/control problem to its dual under ``J`` conjugation.

    With the filtering data ``(A, B_e, F_e, G, Sigma0)`` and the control data
    ``(A, C_f, E_f, H, Omega_T)`` the dual problem is::

        A'   = J^T A^T J
        C_f' = J^T B_e^T        B_e' = C_f^T J^T
        E_f' = F_e^T J          F_e' = J E_f^T
        H'   = J^T G J          G'   = J^T H J
        Omega_T' = J^T Sigma0 J Sigma0' = J^T Omega_T J

    so that ``A' + C_f' E_f' = J^T A_e^T J`` and the dual control Riccati
    flow is the filter flow conjugated by ``J``, run backwards in time.
    For ``J J^T = 1`` the map is an involution, exact in floating point
    because every product with ``J`` only permutes entries and flips signs.

    Returns ``(model', cost', Sigma0')``.
    """
    j = model.J
    jt = j.T
    s0 = np.zeros((model.m, model.m)) if Sigma0 is None else np.asarray(Sigma0, dtype=float)
    a = jt @ model.A.T @ j
    c_f = jt @ model.B_e.T
    b_e = model.C_f.T @ jt
    e_f = model.F_e.T @ j
    f_e = j @ cost.E_f.T
    h = jt @ model.G @ j
    g = jt @ cost.H @ j
    om_t = jt @ s0 @ j
    s0_dual = jt @ cost.Omega_T @ j
    dual_model = LinearModel(j, a, b_e, c_f, f_e, e_f, g, h, model.hbar)
    dual_cost = CostSpec(e_f, h, om_t)
    return dual_model, dual_cost, s0_dual


@dataclass(frozen=True)
class DualityReport:
    riccati_gap: float
    gain_gap: float
    table: dict
    horizon: float
    dt: float

    def to_json(self) -> dict:
        return {
            "riccati_gap": self.riccati_gap,
            "gain_gap": self.gain_gap,
            "table": self.table,
            "horizon": self.horizon,
            "dt": self.dt,
        }


def duality_check(model: LinearModel, cost: CostSpec, Sigma0, horizon: float, dt: float) -> DualityReport:
    """Solve the filter forward and the dual control backward; compare them.

    ``riccati_gap = max_t |J Omega'(t) J^T - Sigma(T - t)|`` and
    ``gain_gap = max_t |J L'^T(t) - K(T - t)|``.  The table entries give the
    coefficient-level residuals of the substitution.
    """
    sigma = filter_riccati_solve(model, Sigma0, horizon, dt)
    dmodel, dcost, _ = dualize(model, cost, Sigma0)
    omega = control_riccati_solve(dmodel, dcost, horizon, dt)
    j = model.J
    n = len(sigma.times) - 1
    rgap = 0.0
    ggap = 0.0
    for k in range(n + 1):
        mapped = j @ omega.values[k] @ j.T
        rgap = max(rgap, float(np.max(np.abs(mapped - sigma.values[n - k]))))
        lt = optimal_gain(omega.values[k], dmodel, dcost).T
        kk = kalman_gain(model, sigma.values[n - k])
        ggap = max(ggap, float(np.max(np.abs(j @ lt - kk), initial=0.0)))

    def gap(x, y):
        return float(np.max(np.abs(x - y), initial=0.0))

    table = {
        "AJ_vs_JA'^T": gap(model.A @ j, j @ dmodel.A.T),
        "B_eJ_vs_C_f'^T": gap(model.B_e @ j, dmodel.C_f.T),
        "G_vs_JH'J^T": gap(model.G, j @ dcost.H @ j.T),
        "F_e_vs_JE_f'^T": gap(model.F_e, j @ dcost.E_f.T),
        "A_e_vs_JA_f'^TJ^T": gap(model.A_e, j @ dmodel.A_f.T @ j.T),
    }
    return DualityReport(rgap, ggap, table, float(horizon), float(dt))


# ---------------------------------------------------------------------------
# closed loop


@dataclass(frozen=True)
class ClosedLoopResult:
    costs: np.ndarray
    mean: float
    stderr: float
    innovation_mean: np.ndarray
    innovation_var: np.ndarray


def _closed_loop_chunk(model, cost, sigma, gains, x0, dt, seed, idx):
    n_steps = len(sigma.times) - 1
    b = len(idx)
    x = np.repeat(np.asarray(x0, dtype=float)[None], b, axis=0)
    z = rngmod.normal_block(seed, idx, 0, n_steps, model.d_e)
    dw = np.sqrt(dt) * z
    h_tot = cost.H + cost.E_f.T @ cost.E_f
    const = np.array([np.trace(h_tot @ s) for s in sigma.values])
    gains_k = np.array([kalman_gain(model, s) for s in sigma.values])

    def running(xk, k):
        u = xk @ gains[k].T
        dev = u - xk @ cost.E_f.T
        return np.sum(dev * dev, axis=1) + np.einsum("bi,ij,bj->b", xk, cost.H, xk) + const[k], u

    total = np.zeros(b)
    c_prev, u = running(x, 0)
    for k in range(n_steps):
        x = x - (x @ model.A.T + u @ model.C_f.T) * dt + dw[:, k] @ gains_k[k].T
        c_next, u = running(x, k + 1)
        total += 0.5 * dt * (c_prev + c_next)
        c_prev = c_next
    total += np.einsum("bi,ij,bj->b", x, cost.Omega_T, x) + np.trace(cost.Omega_T @ sigma.values[-1])
    return total, dw.sum(axis=0), (dw**2).sum(axis=0)


def simulate_closed_loop(
    model: LinearModel,
    cost: CostSpec,
    belief0: GaussianBelief,
    horizon: float,
    dt: float,
    seed: int,
    n_trajectories: int,
    *,
    gains: np.ndarray | None = None,
    threads: int = 1,
) -> ClosedLoopResult:
    """Monte Carlo of the innovation-driven Kalman belief under linear feedback.

    ``gains`` is an array ``(K+1, d_f, m)`` of feedback matrices on the
    grid; by default the optimal ``L(t)``.  The realised cost integrates the
    Gaussian-moment running cost with the trapezoidal rule and adds
    ``x^T Omega_T x + Tr[Omega_T Sigma(T)]``.  Trajectory ``j`` always uses
    the innovations of stream ``(seed, j)``, so different gain schedules
    see common random numbers.
    """
    if n_trajectories < 1:
        raise ValidationError("ensemble size must be at least 1")
    seed = rngmod.check_seed(seed)
    sigma = filter_riccati_solve(model, belief0.cov, horizon, dt)
    if gains is None:
        omega = control_riccati_solve(model, cost, horizon, dt)
        gains = np.array([optimal_gain(o, model, cost) for o in omega.values])
    gains = np.asarray(gains, dtype=float)
    if gains.shape != (len(sigma.times), model.d_f, model.m):
        raise GridMismatch(f"gains shape {gains.shape} does not match the grid")
    chunks = [np.arange(s, min(s + MC_CHUNK, n_trajectories)) for s in range(0, n_trajectories, MC_CHUNK)]

    def work(idx):
        return _closed_loop_chunk(model, cost, sigma, gains, belief0.mean, dt, seed, idx)

    if threads > 1 and len(chunks) > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            parts = list(pool.map(work, chunks))
    else:
        parts = [work(c) for c in chunks]
    costs = np.concatenate([p[0] for p in parts])
    s1 = sum((p[1] for p in parts[1:]), parts[0][1].copy())
    s2 = sum((p[2] for p in parts[1:]), parts[0][2].copy())
    n = n_trajectories
    i_mean = s1 / n
    i_var = (s2 - n * i_mean**2) / max(n - 1, 1)
    se = float(costs.std(ddof=1) / np.sqrt(n)) if n > 1 else 0.0
    return ClosedLoopResult(costs, float(costs.mean()), se, i_mean, i_var)


# ---------------------------------------------------------------------------
# free-particle componentwise codings and the classical oracle


def free_particle_filter_rhs(sc: FreeParticleScalars, alpha: float, mu: float, s: np.ndarray) -> np.ndarray:
    """Componentwise covariance flow of the free particle (corrected form).

    ``d sq  = zeta_q + 2 (sqp / mu + delta sq) - alpha^2 sq^2``
    ``d sqp = sp / mu - (lambda - delta) sqp - alpha^2 sq sqp``
    ``d sp  = zeta_p - 2 lambda sp - alpha^2 sqp^2``
    """
    sq, sqp, sp = s[0, 0], s[0, 1], s[1, 1]
    dq = sc.zeta_q + 2 * (sqp / mu + sq * sc.delta) - (alpha * sq) ** 2
    dqp = sp / mu - (sc.lam - sc.delta) * sqp - alpha**2 * sq * sqp
    dp = sc.zeta_p - 2 * sc.lam * sp - alpha**2 * sqp**2
    return np.array([[dq, dqp], [dqp, dp]])


def free_particle_filter_rhs_literal(sc: FreeParticleScalars, alpha: float, mu: float, s: np.ndarray) -> np.ndarray:
    """Uncorrected variant whose last line carries ``(alpha sp)^2``; used only to measure its drift."""
    out = free_particle_filter_rhs(sc, alpha, mu, s)
    out[1, 1] = sc.zeta_p - 2 * sc.lam * s[1, 1] - (alpha * s[1, 1]) ** 2
    return out


def free_particle_control_rhs(
    sc: FreeParticleScalars, beta: float, gamma: float, mu: float, w: np.ndarray
) -> np.ndarray:
    """Componentwise ``-dOmega/dt`` for the free particle (corrected form).

    ``-d wq  = eta_q - 2 lambda wq - beta^2 wqp^2``
    ``-d wqp = wq / mu - (2 lambda + beta gamma) wqp - beta^2 wqp wp``
    ``-d wp  = eta_p + 2 (wqp / mu - (lambda + beta gamma) wp) - beta^2 wp^2``
    """
    wq, wqp, wp = w[0, 0], w[0, 1], w[1, 1]
    lam_f = sc.lam + beta * gamma
    dq = sc.eta_q - 2 * sc.lam * wq - beta**2 * wqp**2
    dqp = wq / mu - (sc.lam + lam_f) * wqp - beta**2 * wqp * wp
    dp = sc.eta_p + 2 * (wqp / mu - lam_f * wp) - (beta * wp) ** 2
    return np.array([[dq, dqp], [dqp, dp]])


def free_particle_control_rhs_literal(
    sc: FreeParticleScalars, beta: float, gamma: float, mu: float, w: np.ndarray
) -> np.ndarray:
    """Uncorrected variant that mixes ``sigma`` and ``omega`` entries; used only to measure its drift."""
    wq, wqp, wp = w[0, 0], w[0, 1], w[1, 1]
    dq = sc.eta_q - 2 * sc.lam * wq - (beta * wq) ** 2
    dqp = wq / mu - (sc.lam + sc.delta) * wqp - beta**2 * wp * wqp
    dp = sc.eta_p + 2 * (wqp / mu - wp * sc.delta) - (beta * wp) ** 2
    return np.array([[dq, dqp], [dqp, dp]])


def free_particle_total_cost(
    sc: FreeParticleScalars,
    beta: float,
    gamma: float,
    eps: float,
    sigma: MatrixPath,
    omega: MatrixPath,
    x0,
    *,
    literal: bool = False,
) -> float:
    """Componentwise minimal cost for the free particle.

    Corrected integrand: ``zeta_q wq + zeta_p wp + eps^2 wq`` (noise terms)
    plus ``l^T Sigma l`` with ``l = (beta wqp, beta wp + gamma)``.
    ``literal=True`` uses the uncorrected integrand ``hbar^2 wp + wqp^2 sq +
    wp^2 sp + 2 wqp wp sqp`` (``hbar = 1``) for the discrepancy report.
    """
    q, p = np.asarray(x0, dtype=float)
    w0 = omega.values[0]
    s0 = sigma.values[0]
    head = w0[0, 0] * (q * q + s0[0, 0]) + 2 * w0[0, 1] * (q * p + s0[0, 1]) + w0[1, 1] * (p * p + s0[1, 1])
    w, s = omega.values, sigma.values
    if literal:
        integrand = w[:, 1, 1] + w[:, 0, 1] ** 2 * s[:, 0, 0] + w[:, 1, 1] ** 2 * s[:, 1, 1] + 2 * w[:, 0, 1] * w[:, 1, 1] * s[:, 0, 1]
    else:
        l_q = beta * w[:, 0, 1]
        l_p = beta * w[:, 1, 1] + gamma
        integrand = (
            (sc.zeta_q + eps**2) * w[:, 0, 0]
            + sc.zeta_p * w[:, 1, 1]
            + l_q**2 * s[:, 0, 0]
            + 2 * l_q * l_p * s[:, 0, 1]
            + l_p**2 * s[:, 1, 1]
        )
    dt = sigma.times[1] - sigma.times[0]
    return float(head + _trapezoid(integrand, dt))


def free_particle_crosscheck(
    alpha: float, beta: float, gamma: float, eps: float, mu: float, hbar: float, Sigma0, Omega_T, x0, horizon: float, dt: float
) -> dict:
    """Compare the generic matrix codings with the componentwise ones.

    Returns the max discrepancy of each pair along the solved paths, for
    both the corrected and the uncorrected componentwise forms.
    """
    model, sc = free_particle_model(alpha, beta, gamma, eps, mu, hbar)
    cost = CostSpec.from_model(model, Omega_T)
    sigma = filter_riccati_solve(model, Sigma0, horizon, dt)
    omega = control_riccati_solve(model, cost, horizon, dt)

    def worst(fn, path, rhs):
        return max(float(np.max(np.abs(fn(v) - rhs(v)))) for v in path.values)

    report = {
        "filter_rhs_gap": worst(lambda s: free_particle_filter_rhs(sc, alpha, mu, s), sigma, lambda s: filter_riccati_rhs(model, s)),
        "filter_rhs_gap_literal": worst(lambda s: free_particle_filter_rhs_literal(sc, alpha, mu, s), sigma, lambda s: filter_riccati_rhs(model, s)),
        "control_rhs_gap": worst(lambda w: free_particle_control_rhs(sc, beta, gamma, mu, w), omega, lambda w: control_riccati_rhs(model, cost, w)),
        "control_rhs_gap_literal": worst(lambda w: free_particle_control_rhs_literal(sc, beta, gamma, mu, w), omega, lambda w: control_riccati_rhs(model, cost, w)),
    }
    generic = min_cost(model, cost, sigma, omega, x0)
    report["min_cost_generic"] = generic
    report["min_cost_componentwise"] = free_particle_total_cost(sc, beta, gamma, eps, sigma, omega, x0)
    report["min_cost_literal"] = free_particle_total_cost(sc, beta, gamma, eps, sigma, omega, x0, literal=True)
    return report


def stationary_classical(model: LinearModel, cost: CostSpec | None = None):
    """Algebraic Riccati roots via scipy (independent oracle for fixed points).

    Returns ``(Sigma_inf, Omega_inf)``; ``Omega_inf`` is ``None`` without a cost.
    The filter root solves ``0 = Q_g - A_e S - S A_e^T - S B^T B S``, which is
    the standard CARE with ``a = -A_e^T``, ``b = B_e^T``, ``q = G``, ``r = I``.
    """
    sig = solve_continuous_are(-model.A_e.T, model.B_e.T, model.G, np.eye(model.d_e))
    om = None
    if cost is not None:
        af = model.A + model.C_f @ cost.E_f
        om = solve_continuous_are(-af, model.C_f, cost.H, np.eye(model.d_f))
    return sig, om


def random_quantum_model(m: int, d_e: int, d_f: int, rng: np.random.Generator, hbar: float = 1.0) -> LinearModel:
    """Random model with the standard symplectic ``J`` (for property tests)."""
    d = d_e + d_f
    le = np.zeros((d, m), dtype=complex)
    lf = np.zeros((d, m), dtype=complex)
    le[:d_e] = 0.5 * (rng.normal(size=(d_e, m)) + 1j * rng.normal(size=(d_e, m)))
    lf[d_e:] = 0.5 * (rng.normal(size=(d_f, m)) + 1j * rng.normal(size=(d_f, m)))
    s = rng.normal(size=(m, m))
    minv = 0.5 * (s + s.T)
    return derive_matrices(standard_symplectic(m), le, lf, minv, hbar)


def random_admissible_cov(m: int, rng: np.random.Generator, hbar: float = 1.0, extra: float = 0.5) -> np.ndarray:
    """``(hbar/2) S S^T + P`` with ``S`` symplectic and ``P`` PSD."""
    from scipy.linalg import expm

    j = standard_symplectic(m)
    s = rng.normal(size=(m, m)) * 0.4
    sym = np.asarray(expm(j @ (0.5 * (s + s.T))))
    p = rng.normal(size=(m, m)) * extra
    return _sym(0.5 * hbar * sym @ sym.T + p @ p.T)


__all__ = [
    "ClosedLoopResult",
    "CostSpec",
    "DualityReport",
    "FreeParticleScalars",
    "GaussianBelief",
    "LinearModel",
    "MatrixPath",
    "alpha_path",
    "alpha_rate",
    "control_riccati_rhs",
    "control_riccati_solve",
    "derive_matrices",
    "dualize",
    "duality_check",
    "filter_riccati_rhs",
    "filter_riccati_solve",
    "free_particle_crosscheck",
    "free_particle_model",
    "heisenberg_check",
    "kalman_gain",
    "kalman_step",
    "min_cost",
    "optimal_gain",
    "simulate_closed_loop",
    "stationary_classical",
]
