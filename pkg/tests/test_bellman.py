import json

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from qfiltctl import bellman, lqg
from qfiltctl.bellman import (
    QuadraticValue,
    StateFunctional,
    bellman_residual_counting,
    frechet_gradient,
    gell_mann_basis,
    hjb_residual_lqg,
    optimal_control_quadratic,
    policy_cost_mc,
    pontryagin_hamiltonian,
    quadratic_value,
)
from qfiltctl.errors import GridMismatch, NumericalError, ValidationError
from qfiltctl.filtering import FilterModel
from qfiltctl.master import lindblad_apply
from qfiltctl.operators import SIGMA_MINUS, SIGMA_X, SIGMA_Z, CouplingSet, pair, random_density, random_hermitian

seeds = st.integers(min_value=0, max_value=2**32 - 1)
P_EXCITED = np.diag([0.0, 1.0])


def traceless(x):
    return x - np.trace(x) / x.shape[0] * np.eye(x.shape[0])


def lqg_value(model, cost, sigma0, horizon=1.0, dt=1e-3):
    sigma = lqg.filter_riccati_solve(model, sigma0, horizon, dt)
    omega = lqg.control_riccati_solve(model, cost, horizon, dt)
    return quadratic_value(model, cost, sigma, omega)


@pytest.fixture
def free_particle():
    model, _ = lqg.free_particle_model(1.0, 1.0, 0.0, 0.0)
    return model, lqg.CostSpec.from_model(model, np.eye(2))


class TestHJBResidual:
    def test_zero_problem_has_zero_residual(self):
        model = lqg.LinearModel.from_coefficients(
            np.array([[0.1, 1.0], [-1.0, 0.0]]), [[1.0, 0.0]], [[0.0], [1.0]], np.zeros((2, 2)), np.zeros((2, 2))
        )
        cost = lqg.CostSpec(np.zeros((1, 2)), np.zeros((2, 2)), np.zeros((2, 2)))
        value = lqg_value(model, cost, np.eye(2), 0.5, 1e-2)
        assert hjb_residual_lqg(value, model, cost, 0.2, [0.4, -1.0], np.diag([2.0, 1.0])) == 0.0

    def test_riccati_candidate_solves_the_equation(self, free_particle, rng):
        model, cost = free_particle
        value = lqg_value(model, cost, np.eye(2))
        for _ in range(30):
            t = value.times[rng.integers(len(value.times))]
            x = rng.normal(size=2)
            sig = lqg.random_admissible_cov(2, rng)
            assert abs(hjb_residual_lqg(value, model, cost, t, x, sig)) <= 1e-6

    def test_residual_is_linear_in_omega_error(self, free_particle, rng):
        model, cost = free_particle
        value = lqg_value(model, cost, np.eye(2))
        x, sig, t = rng.normal(size=2), lqg.random_admissible_cov(2, rng), value.times[400]
        res = [abs(hjb_residual_lqg(value.with_omega(value.Omega + e * np.eye(2)), model, cost, t, x, sig)) for e in (1e-3, 1e-4)]
        assert 10 / 1.2 <= res[0] / res[1] <= 10 * 1.2

    def test_off_grid_time(self, free_particle):
        model, cost = free_particle
        value = lqg_value(model, cost, np.eye(2), 0.1, 1e-2)
        with pytest.raises(GridMismatch):
            hjb_residual_lqg(value, model, cost, 0.0123, [0, 0], np.eye(2))

    def test_value_invariants(self):
        t = np.array([0.0, 1.0])
        with pytest.raises(ValidationError):
            QuadraticValue(t, np.array([[[1.0, 2.0], [0.0, 1.0]]] * 2), np.zeros((2, 2, 2)), np.zeros(2))
        with pytest.raises(ValidationError):
            QuadraticValue(t, np.zeros((2, 2, 2)), np.zeros((2, 2, 2)), np.array([1.0, 0.5]))


class TestOptimalControl:
    def test_zero_gradient_no_tracking(self, free_particle):
        model, _ = free_particle
        cost = lqg.CostSpec(np.zeros((1, 2)), np.zeros((2, 2)), np.zeros((2, 2)))
        assert not optimal_control_quadratic(np.zeros(2), model, cost, [1.0, 2.0]).any()

    def test_matches_optimal_gain(self, rng):
        model = lqg.random_quantum_model(4, 1, 2, rng)
        cost = lqg.CostSpec.from_model(model, np.eye(4))
        value = lqg_value(model, cost, lqg.random_admissible_cov(4, rng), 0.5, 1e-2)
        for _ in range(100):
            k = int(rng.integers(len(value.times)))
            x = rng.normal(size=4)
            u = optimal_control_quadratic((value, value.times[k]), model, cost, x)
            ref = lqg.optimal_gain(value.Omega[k], model, cost) @ x
            assert np.max(np.abs(u - ref)) <= 1e-12

    def test_output_tracking_only(self):
        model, _ = lqg.free_particle_model(1.0, 1.0, 0.7, 0.0)
        cost = lqg.CostSpec.from_model(model, np.zeros((2, 2)))
        x = np.array([0.3, -2.0])
        np.testing.assert_allclose(optimal_control_quadratic(np.zeros(2), model, cost, x), [0.7 * -2.0])


class TestGellMann:
    @pytest.mark.parametrize("dim", [2, 3, 4])
    def test_orthonormal_traceless_hermitian(self, dim):
        basis = gell_mann_basis(dim)
        assert len(basis) == dim * dim - 1
        for tau in basis:
            assert abs(np.trace(tau)) <= 1e-15
            assert np.max(np.abs(tau - tau.conj().T)) == 0
        gram = np.array([[np.trace(a @ b).real for b in basis] for a in basis])
        np.testing.assert_allclose(gram, np.eye(len(basis)), atol=1e-15)


    def test_one_dimension_has_no_directions(self):
        assert len(gell_mann_basis(1)) == 0


class TestFrechetGradient:
    def test_linear_functional(self, rng):
        x = random_hermitian(3, rng)
        grad = frechet_gradient(lambda r: pair(r, x).real, random_density(3, rng))
        assert np.max(np.abs(grad - traceless(x))) <= 1e-8

    def test_constant(self, rng):
        assert np.max(np.abs(frechet_gradient(lambda r: 2.5, random_density(2, rng)))) == 0

    def test_square_of_expectation(self, rng):
        rho = random_density(2, rng)
        grad = frechet_gradient(lambda r: pair(r, SIGMA_X).real ** 2, rho)
        expected = 2 * pair(rho, SIGMA_X).real * traceless(SIGMA_X)
        assert np.max(np.abs(grad - expected)) <= 1e-6

    def test_half_step_agrees(self, rng):
        rho = random_density(2, rng)
        f = lambda r: pair(r, SIGMA_Z).real ** 3  # noqa: E731
        assert np.max(np.abs(frechet_gradient(f, rho, 1e-4) - frechet_gradient(f, rho, 5e-5))) <= 1e-7

    @pytest.mark.parametrize("h", [1e-7, 1e-2])
    def test_step_range(self, h):
        with pytest.raises(ValidationError):
            frechet_gradient(lambda r: 0.0, np.eye(2) / 2, h)

    def test_non_finite_values(self):
        with pytest.raises(NumericalError):
            frechet_gradient(lambda r: float("nan"), np.eye(2) / 2)
        with pytest.raises(NumericalError):
            frechet_gradient(StateFunctional(lambda t, r: float("inf")), np.eye(2) / 2)

    def test_hessian_contraction_of_purity(self, rng):
        tau = gell_mann_basis(3)[2]
        val = bellman.hessian_contraction(lambda r: np.sum(r * r.T).real, random_density(3, rng), tau)
        assert val == pytest.approx(2 * np.trace(tau @ tau).real, abs=1e-8)


@given(seeds, st.integers(2, 4), st.sampled_from([1e-4, 1e-3]))
def test_gradient_of_closed_form_functionals(seed, dim, h):
    g = np.random.default_rng(seed)
    rho = random_density(dim, g)
    x = random_hermitian(dim, g)
    cases = [
        (lambda r: np.sum(r * r.T).real, 2 * traceless(rho)),
        (lambda r: pair(r, x).real ** 2, 2 * pair(rho, x).real * traceless(x)),
        (lambda r: pair(r @ r, x).real, traceless(rho @ x + x @ rho)),
    ]
    for f, exact in cases:
        assert np.max(np.abs(frechet_gradient(f, rho, h) - exact)) <= 10 * h * h + 1e-9


class TestPontryagin:
    def setup_method(self):
        c = CouplingSet(0.3 * SIGMA_Z, (SIGMA_MINUS, SIGMA_X))
        self.model = FilterModel(c, counting=(0,), feedback=(1,))
        self.gens = bellman.controlled_generators(self.model)
        self.rho = random_density(2, np.random.default_rng(3))
        self.p = np.diag([-0.5, 0.5]) + 0.2 * SIGMA_X

    def test_singleton_set(self):
        cost = lambda u: u[0] ** 2 * np.eye(2) + SIGMA_Z  # noqa: E731
        q = -self.rho
        value, idx = pontryagin_hamiltonian(q, self.p, cost, self.gens, [[0.0]])
        expected = np.trace(lindblad_apply(self.model.coupling, q) @ self.p).real - np.trace((0 - q) @ SIGMA_Z).real
        assert idx == 0 and value == pytest.approx(expected, abs=1e-14)

    def test_quadratic_program_on_a_grid(self):
        q = -self.rho
        cost = lambda u: u[0] ** 2 * np.eye(2)  # noqa: E731
        # value(u) = a + b u - u^2 because the generator is affine in u and tr(0 - q) = 1
        a = np.trace(lindblad_apply(self.model.coupling, q) @ self.p).real
        b = np.trace((self.gens([1.0])(q) - self.gens([-1.0])(q)) @ self.p).real / 2
        exact = a + b * b / 4
        prev = None
        for n in (11, 21, 41):
            grid = np.linspace(-2, 2, n)
            value, idx = pontryagin_hamiltonian(q, self.p, cost, self.gens, grid[:, None])
            half = (grid[1] - grid[0]) / 2
            assert 0 <= exact - value <= half**2 + 1e-14
            assert abs(grid[idx] - b / 2) <= half + 1e-14
            if prev is not None:
                assert abs(value - prev) <= (2 * half) ** 2
            prev = value

    def test_zero_costate(self):
        q = -self.rho
        cost = lambda u: (u[0] - 0.3) ** 2 * np.eye(2) + 0.1 * SIGMA_Z  # noqa: E731
        grid = np.linspace(-1, 1, 21)[:, None]
        value, _ = pontryagin_hamiltonian(q, np.zeros((2, 2)), cost, self.gens, grid)
        lagr = [np.trace((0 - q) @ cost(u)).real for u in grid]
        assert value == pytest.approx(-min(lagr), abs=1e-14)

    def test_ties_go_to_the_lowest_index(self):
        value, idx = pontryagin_hamiltonian(-self.rho, np.zeros((2, 2)), lambda u: np.zeros((2, 2)), self.gens, [[1.0], [0.0], [-1.0]])
        assert idx == 0 and value == 0.0

    def test_empty_set(self):
        with pytest.raises(ValidationError):
            pontryagin_hamiltonian(-self.rho, self.p, lambda u: np.eye(2), self.gens, [])

    @given(seeds)
    def test_refinement_never_lowers_the_value(self, seed):
        g = np.random.default_rng(seed)
        q, p = -random_density(2, g), random_hermitian(2, g)
        cost = lambda u: float(u[0] ** 2) * np.eye(2) + 0.3 * SIGMA_X  # noqa: E731
        coarse = np.linspace(-2, 2, 5)
        fine = np.linspace(-2, 2, 9)
        v1, _ = pontryagin_hamiltonian(q, p, cost, self.gens, coarse[:, None])
        v2, _ = pontryagin_hamiltonian(q, p, cost, self.gens, fine[:, None])
        assert v2 >= v1


class TestCountingResidual:
    def setup_method(self):
        self.model = FilterModel(CouplingSet(np.zeros((2, 2)), (SIGMA_MINUS,)), counting=(0,))

    def test_constant_value(self, rng):
        out = bellman_residual_counting(StateFunctional(lambda t, r: 1.5), self.model, 0.3, random_density(2, rng), [[0.0]])
        assert out.residual == 0.0

    def test_excited_population_closed_form(self, rng):
        rho = random_density(2, rng)
        s = StateFunctional(lambda t, r: pair(r, P_EXCITED).real)
        out = bellman_residual_counting(s, self.model, 0.5, rho, [[0.0]])
        # linear S: no Feller correction, gradient is the traceless projector, drift pairs to -d rho_ee/dt
        assert abs(out.time_derivative) <= 1e-12
        assert np.max(np.abs(out.gradient - np.diag([-0.5, 0.5]))) <= 1e-10
        assert abs(out.jump_terms[0]) <= 1e-5
        assert abs(out.hamiltonian - rho[1, 1].real) <= 1e-5
        assert abs(out.residual - rho[1, 1].real) <= 1e-5

    def test_ground_state_has_no_jump_term(self):
        s = StateFunctional(lambda t, r: np.sum(r * r.T).real + t)
        out = bellman_residual_counting(s, self.model, 0.5, np.diag([1.0, 0.0]), [[0.0]])
        assert out.jump_terms == (0.0,)
        assert out.residual == pytest.approx(-1.0 + out.hamiltonian, abs=1e-9)

    def test_feller_factor_scales_the_jump_terms(self, rng):
        rho = random_density(2, rng)
        s = StateFunctional(lambda t, r: np.sum(r * r.T).real)
        half = bellman_residual_counting(s, self.model, 0.0, rho, [[0.0]])
        full = bellman_residual_counting(s, self.model, 0.0, rho, [[0.0]], feller_factor=1.0)
        assert full.residual - half.residual == pytest.approx(-0.5 * sum(half.jump_terms), abs=1e-12)
        assert sum(half.jump_terms) != 0

    def test_counting_only(self):
        model = FilterModel(CouplingSet(np.zeros((2, 2)), (SIGMA_MINUS,)), diffusive=(0,))
        with pytest.raises(ValidationError):
            bellman_residual_counting(StateFunctional(lambda t, r: 0.0), model, 0.0, np.eye(2) / 2, [[0.0]])


class TestPolicyComparison:
    def test_identical_policies_have_zero_difference(self, free_particle):
        model, cost = free_particle
        cmp_ = policy_cost_mc(model, {"a": None, "b": None}, lqg.GaussianBelief([1, 0], np.eye(2)), 0.5, 1e-2, 200, 3, cost=cost)
        assert cmp_.differences[("a", "b")] == (0.0, 0.0)

    def test_optimal_beats_zero_control(self, free_particle):
        model, cost = free_particle
        cmp_ = policy_cost_mc(
            model, {"optimal": None, "zero": np.zeros((1, 2))}, lqg.GaussianBelief([1, 0], np.eye(2)), 1.0, 1e-2, 2000, 5, cost=cost
        )
        diff, se = cmp_.differences[("optimal", "zero")]
        assert diff < -3 * se

    def test_filter_mode_common_random_numbers(self):
        c = CouplingSet(np.zeros((2, 2)), (SIGMA_MINUS, SIGMA_X))
        model = FilterModel(c, diffusive=(0,), feedback=(1,))
        policy = lambda t, r: -np.real(r[:, 0, 1])[:, None]  # noqa: E731
        cmp_ = policy_cost_mc(
            model, {"a": policy, "b": policy, "off": lambda t, r: np.zeros((r.shape[0], 1))},
            np.eye(2) / 2, 0.1, 1e-3, 20, 9,
            running_cost=lambda r, u: np.real(r[:, 1, 1]) + u[:, 0] ** 2,
            terminal_cost=lambda r: np.real(r[:, 1, 1]),
        )
        assert cmp_.differences[("a", "b")] == (0.0, 0.0)
        assert cmp_.differences[("a", "off")][0] != 0.0
        out = json.loads(json.dumps(cmp_.to_json()))
        assert out["n"] == 20 and set(out["policies"]) == {"a", "b", "off"}

    def test_no_policies(self, free_particle):
        model, cost = free_particle
        with pytest.raises(ValidationError):
            policy_cost_mc(model, {}, lqg.GaussianBelief([1, 0], np.eye(2)), 0.5, 1e-2, 10, 0, cost=cost)
