import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from qfiltctl import lqg
from qfiltctl.errors import BlowUp, ChannelOverlap, DimensionMismatch, GridMismatch, ValidationError
from qfiltctl.lqg import (
    CostSpec,
    GaussianBelief,
    LinearModel,
    control_riccati_solve,
    derive_matrices,
    dualize,
    filter_riccati_solve,
    free_particle_model,
    heisenberg_check,
    kalman_step,
    min_cost,
    optimal_gain,
    standard_symplectic,
)

J2 = standard_symplectic(2)
seeds = st.integers(min_value=0, max_value=2**32 - 1)
# Stationary covariance of the free particle under position measurement
# (alpha = mu = hbar = 1): sigma_q^3 = 2 sigma_p and sigma_p = 1/2.
SIGMA_INF = np.array([[1.0, 0.5], [0.5, 0.5]])


def scalar_model(a=0.0, b=1.0, c=1.0, g=1.0, h=1.0):
    return LinearModel.from_coefficients([[a]], [[b]], [[c]], [[g]], [[h]])


def free_particle(alpha=1.0, beta=1.0, gamma=0.0, eps=0.0, **kw):
    model, sc = free_particle_model(alpha, beta, gamma, eps, **kw)
    return model, sc


class TestDeriveMatrices:
    def test_position_measurement_noise(self):
        model, _ = free_particle(1.0, 0.0, 0.0, 0.0)
        np.testing.assert_allclose(model.G, np.diag([0.0, 0.25]), atol=1e-15)
        np.testing.assert_allclose(model.H, np.diag([0.25, 0.0]), atol=1e-15)

    def test_no_coupling_is_hamiltonian_flow(self):
        minv = np.array([[2.0, 0.3], [0.3, 1.0]])
        z = np.zeros((1, 2))
        model = derive_matrices(J2, z, z, minv)
        assert not model.G.any() and not model.H.any()
        np.testing.assert_allclose(model.A.T, minv @ J2, atol=0)

    def test_free_particle_damping_rates(self):
        model, sc = free_particle(0.7, 1.3, 0.4, 0.9, mu=2.0)
        assert sc.lam == pytest.approx(0.5 * (0.7 * 0.9 + 1.3 * 0.4))
        assert sc.delta == pytest.approx(0.5 * (0.7 * 0.9 - 0.4 * 1.3))
        np.testing.assert_allclose(model.A, sc.lam * np.eye(2) - np.array([[0, 0.5], [0, 0]]), atol=1e-15)
        np.testing.assert_allclose(np.diag(model.A_e), [-sc.delta, sc.lam], atol=1e-15)
        np.testing.assert_allclose(np.diag(model.A_f), [sc.lam, sc.lam + 1.3 * 0.4], atol=1e-15)

    def test_scalar_view(self):
        _, sc = free_particle(0.7, 1.3, 0.4, 0.9, hbar=0.5)
        assert sc.zeta_q == pytest.approx(0.16)
        assert sc.zeta_p == sc.eta_q == pytest.approx(0.0625 * (0.49 + 1.69))
        assert sc.eta_p == pytest.approx(0.81)

    def test_noise_matrix_matches_definition(self, rng):
        model = lqg.random_quantum_model(4, 2, 1, rng)
        assert np.max(np.abs(model.G - lqg.noise_matrix_reference(model))) <= 1e-12
        assert np.linalg.eigvalsh(model.G)[0] >= -1e-12
        assert np.linalg.eigvalsh(model.H)[0] >= -1e-12

    def test_recomputation_is_bitwise(self, rng):
        j, le, lf, minv = standard_symplectic(4), rng.normal(size=(3, 4)) + 0j, rng.normal(size=(3, 4)) + 0j, np.eye(4)
        le[2] = 0
        lf[:2] = 0
        a, b = derive_matrices(j, le, lf, minv), derive_matrices(j, le, lf, minv)
        for name in ("A", "B_e", "C_f", "F_e", "E_f", "G", "H"):
            assert np.array_equal(getattr(a, name), getattr(b, name))

    def test_overlapping_rows(self, rng):
        le = rng.normal(size=(2, 2)) + 0j
        with pytest.raises(ChannelOverlap):
            derive_matrices(J2, le, le, np.eye(2))

    def test_rejects_non_antisymmetric_j(self):
        with pytest.raises(ValidationError):
            derive_matrices(np.eye(2), np.zeros((1, 2)), np.zeros((1, 2)), np.eye(2))

    @pytest.mark.parametrize("mu,hbar", [(0.0, 1.0), (1.0, -1.0)])
    def test_free_particle_parameters(self, mu, hbar):
        with pytest.raises(ValidationError):
            free_particle_model(1, 1, 0, 0, mu, hbar)


class TestHeisenbergCheck:
    @pytest.mark.parametrize("hbar", [1.0, 0.7])
    def test_coherent_state_boundary(self, hbar):
        rep = heisenberg_check(hbar / 2 * np.eye(2), J2, hbar)
        assert rep.ok and abs(rep.min_eig) <= 1e-15

    @pytest.mark.parametrize("hbar", [1.0, 0.7])
    def test_inside(self, hbar):
        rep = heisenberg_check(hbar * np.eye(2), J2, hbar)
        assert rep.ok and rep.min_eig == pytest.approx(hbar / 2)

    @pytest.mark.parametrize("hbar", [1.0, 0.7])
    def test_violation(self, hbar):
        rep = heisenberg_check(hbar / 4 * np.eye(2), J2, hbar)
        assert not rep.ok and rep.min_eig == pytest.approx(-hbar / 4)

    def test_belief_admissibility(self):
        assert GaussianBelief([0, 0], np.eye(2)).admissible(J2)
        assert not GaussianBelief([0, 0], 0.1 * np.eye(2)).admissible(J2)

    def test_belief_shape(self):
        with pytest.raises(DimensionMismatch):
            GaussianBelief([0, 0, 0], np.eye(2))


class TestFilterRiccati:
    def test_no_noise_no_measurement_is_constant(self):
        model = LinearModel.from_coefficients(np.zeros((2, 2)), np.zeros((1, 2)), np.zeros((2, 1)), np.zeros((2, 2)), np.zeros((2, 2)))
        path = filter_riccati_solve(model, np.diag([2.0, 3.0]), 1.0, 0.01)
        assert np.all(path.values == np.diag([2.0, 3.0]))

    def test_position_measurement_fixed_point(self):
        model, _ = free_particle(1.0, 0.0, 0.0, 0.0)
        final = filter_riccati_solve(model, np.eye(2), 30.0, 1e-3).final
        assert np.max(np.abs(final - SIGMA_INF)) <= 1e-6
        assert abs(np.linalg.det(final) - 0.25) <= 1e-6

    def test_fixed_point_solves_the_algebraic_equation(self):
        model, _ = free_particle(1.0, 0.0, 0.0, 0.0)
        assert np.max(np.abs(lqg.filter_riccati_rhs(model, SIGMA_INF))) <= 1e-15

    def test_scalar_kalman_fixed_point(self):
        final = filter_riccati_solve(scalar_model(), np.array([[3.0]]), 20.0, 1e-3).final
        assert final[0, 0] == pytest.approx(1.0, abs=1e-8)

    def test_blow_up_detection(self):
        model = LinearModel.from_coefficients([[-5.0]], [[0.0]], [[0.0]], [[1.0]], [[0.0]])
        with pytest.raises(BlowUp):
            filter_riccati_solve(model, np.array([[1.0]]), 10.0, 1e-2)

    def test_zero_horizon(self):
        model, _ = free_particle()
        path = filter_riccati_solve(model, np.eye(2), 0.0, 0.1)
        assert len(path.times) == 1 and np.array_equal(path.final, np.eye(2))


class TestControlRiccati:
    def test_no_cost_gives_zero(self):
        model, _ = free_particle(1, 1, 0, 0)
        cost = CostSpec(np.zeros((1, 2)), np.zeros((2, 2)), np.zeros((2, 2)))
        assert not control_riccati_solve(model, cost, 1.0, 0.01).values.any()

    def test_scalar_lqr_fixed_point(self):
        model = scalar_model()
        cost = CostSpec(np.zeros((1, 1)), np.eye(1), np.zeros((1, 1)))
        omega = control_riccati_solve(model, cost, 20.0, 1e-3)
        assert omega.values[0][0, 0] == pytest.approx(1.0, abs=1e-8)
        assert omega.final[0, 0] == 0.0

    def test_dual_of_position_measurement(self):
        model, _ = free_particle(1.0, 0.0, 0.0, 0.0)
        cost = CostSpec.from_model(model, np.zeros((2, 2)))
        dmodel, dcost, _ = dualize(model, cost, np.eye(2))
        omega0 = control_riccati_solve(dmodel, dcost, 30.0, 1e-3).values[0]
        assert np.max(np.abs(J2 @ omega0 @ J2.T - SIGMA_INF)) <= 1e-6

    def test_symmetric_and_positive_along_path(self, rng):
        model = lqg.random_quantum_model(4, 1, 2, rng)
        cost = CostSpec.from_model(model, np.eye(4))
        omega = control_riccati_solve(model, cost, 2.0, 1e-3)
        assert np.max(np.abs(omega.values - np.swapaxes(omega.values, 1, 2))) <= 1e-10
        assert min(np.linalg.eigvalsh(o)[0] for o in omega.values) >= -1e-9


class TestKalmanStep:
    def test_zero_innovation_leaves_mean(self):
        model = LinearModel.from_coefficients(np.zeros((2, 2)), [[1.0, 0.5]], np.zeros((2, 1)), np.eye(2), np.eye(2))
        belief = GaussianBelief([0.3, -1.2], np.eye(2))
        dy = model.B_e @ belief.mean * 0.01
        new, innov = kalman_step(model, belief, np.eye(2), [0.0], dy, 0.01)
        np.testing.assert_allclose(new.mean, belief.mean, atol=1e-16)
        assert not innov.any()

    def test_scalar_hand_arithmetic(self):
        new, innov = kalman_step(scalar_model(), GaussianBelief([0.0], [[1.0]]), [[1.0]], [0.0], [0.1], 0.01)
        assert innov[0] == pytest.approx(0.1)
        assert new.mean[0] == pytest.approx(0.1)

    def test_force_shifts_momentum(self):
        beta, u, dt = 1.7, 0.4, 1e-3
        model, _ = free_particle(1.0, beta, 0.0, 0.0)
        new, _ = kalman_step(model, GaussianBelief([0.0, 0.0], np.eye(2)), np.eye(2), [u], [0.0], dt)
        assert new.mean[0] == 0.0
        assert new.mean[1] == -beta * u * dt

    def test_shapes(self):
        with pytest.raises(DimensionMismatch):
            kalman_step(scalar_model(), GaussianBelief([0.0], [[1.0]]), [[1.0]], [0.0, 1.0], [0.1], 0.01)


class TestOptimalGain:
    def test_zero(self):
        model, _ = free_particle(1, 1, 0, 0)
        cost = CostSpec.from_model(model, np.zeros((2, 2)))
        assert not optimal_gain(np.zeros((2, 2)), model, cost).any()

    def test_momentum_feedback_only(self):
        model, _ = free_particle(1, 1, 0, 0)
        cost = CostSpec.from_model(model, np.zeros((2, 2)))
        np.testing.assert_array_equal(optimal_gain(np.eye(2), model, cost), [[0.0, 1.0]])

    def test_free_particle_control_law(self, rng):
        beta = 1.3
        model, _ = free_particle(0.5, beta, 0.0, 0.2)
        cost = CostSpec.from_model(model, np.zeros((2, 2)))
        w = np.array([[0.7, 0.2], [0.2, 0.4]])
        x = rng.normal(size=2)
        u = optimal_gain(w, model, cost) @ x
        assert u[0] == pytest.approx(beta * (w[0, 1] * x[0] + w[1, 1] * x[1]))


class TestMinCost:
    def test_zero_horizon(self):
        model, _ = free_particle()
        wt = np.array([[2.0, 0.1], [0.1, 1.0]])
        cost = CostSpec.from_model(model, wt)
        s0 = np.array([[1.0, 0.2], [0.2, 0.8]])
        x0 = np.array([0.5, -1.0])
        sig = filter_riccati_solve(model, s0, 0.0, 0.1)
        om = control_riccati_solve(model, cost, 0.0, 0.1)
        assert min_cost(model, cost, sig, om, x0) == pytest.approx(x0 @ wt @ x0 + np.trace(wt @ s0), rel=1e-15)

    def test_zero_cost(self):
        model, _ = free_particle(1, 1, 0, 0)
        cost = CostSpec(np.zeros((1, 2)), np.zeros((2, 2)), np.zeros((2, 2)))
        sig = filter_riccati_solve(model, np.eye(2), 1.0, 0.01)
        om = control_riccati_solve(model, cost, 1.0, 0.01)
        assert min_cost(model, cost, sig, om, [1.0, 2.0]) == 0.0

    def test_grid_mismatch(self):
        model, _ = free_particle()
        cost = CostSpec.from_model(model, np.eye(2))
        with pytest.raises(GridMismatch):
            min_cost(model, cost, filter_riccati_solve(model, np.eye(2), 1.0, 0.01), control_riccati_solve(model, cost, 1.0, 0.02), [0, 0])


class TestFreeParticleCodings:
    def test_generic_and_componentwise_agree(self):
        rep = lqg.free_particle_crosscheck(0.8, 1.1, 0.3, 0.6, 1.5, 1.0, np.eye(2), np.eye(2), [1.0, -0.5], 2.0, 1e-3)
        assert rep["filter_rhs_gap"] <= 1e-10
        assert rep["control_rhs_gap"] <= 1e-10
        assert abs(rep["min_cost_generic"] - rep["min_cost_componentwise"]) <= 1e-6

    def test_uncorrected_forms_are_reported_not_matched(self):
        rep = lqg.free_particle_crosscheck(0.8, 1.1, 0.3, 0.6, 1.5, 1.0, np.eye(2), np.eye(2), [1.0, -0.5], 2.0, 1e-3)
        assert rep["filter_rhs_gap_literal"] > 1e-3
        assert rep["control_rhs_gap_literal"] > 1e-3


class TestDualize:
    def test_free_particle_pairs_swap(self):
        a, b, g, e = 0.8, 1.1, 0.3, 0.6
        model, _ = free_particle(a, b, g, e)
        dmodel, dcost, _ = dualize(model, CostSpec.from_model(model, np.eye(2)), np.eye(2))
        np.testing.assert_array_equal(dmodel.B_e, [[b, 0.0]])
        np.testing.assert_array_equal(dmodel.C_f, [[0.0], [a]])
        np.testing.assert_array_equal(dcost.E_f, [[0.0, -e]])
        np.testing.assert_array_equal(dmodel.F_e, [[g], [0.0]])

    def test_is_an_involution(self, rng):
        model = lqg.random_quantum_model(4, 2, 1, rng)
        cost = CostSpec.from_model(model, lqg.random_admissible_cov(4, rng))
        s0 = lqg.random_admissible_cov(4, rng)
        m2, c2, s2 = dualize(*dualize(model, cost, s0))
        for name in ("A", "B_e", "C_f", "F_e", "G"):
            assert np.array_equal(getattr(m2, name), getattr(model, name)), name
        for name in ("E_f", "H", "Omega_T"):
            assert np.array_equal(getattr(c2, name), getattr(cost, name)), name
        assert np.array_equal(s2, s0)

    def test_riccati_flows_coincide(self, rng):
        model = lqg.random_quantum_model(4, 2, 2, rng)
        cost = CostSpec.from_model(model, np.eye(4))
        rep = lqg.duality_check(model, cost, lqg.random_admissible_cov(4, rng), 1.0, 1e-3)
        assert rep.riccati_gap <= 1e-8
        assert max(rep.table.values()) <= 1e-12
        assert set(rep.to_json()) == {"riccati_gap", "gain_gap", "table", "horizon", "dt"}


class TestClosedLoop:
    def test_no_cost_no_realised_cost(self):
        model, _ = free_particle(1, 1, 0, 0)
        cost = CostSpec(np.zeros((1, 2)), np.zeros((2, 2)), np.zeros((2, 2)))
        res = lqg.simulate_closed_loop(model, cost, GaussianBelief([1.0, 0.0], np.eye(2)), 0.5, 1e-2, 1, 50)
        assert not res.costs.any()

    def test_threads_and_chunks_do_not_matter(self):
        model, _ = free_particle(1, 1, 0, 0)
        cost = CostSpec.from_model(model, np.eye(2))
        belief = GaussianBelief([1.0, 0.0], np.eye(2))
        a = lqg.simulate_closed_loop(model, cost, belief, 0.2, 1e-2, 4, 5000)
        b = lqg.simulate_closed_loop(model, cost, belief, 0.2, 1e-2, 4, 5000, threads=3)
        assert np.array_equal(a.costs, b.costs)
        c = lqg.simulate_closed_loop(model, cost, belief, 0.2, 1e-2, 4, 10)
        assert np.array_equal(c.costs, a.costs[:10])

    def test_gain_schedule_shape(self):
        model, _ = free_particle(1, 1, 0, 0)
        cost = CostSpec.from_model(model, np.eye(2))
        with pytest.raises(GridMismatch):
            lqg.simulate_closed_loop(model, cost, GaussianBelief([0, 0], np.eye(2)), 0.2, 1e-2, 0, 5, gains=np.zeros((3, 1, 2)))


def test_classical_limit_matches_algebraic_riccati(rng):
    a = np.array([[-0.5, 1.0], [0.0, -0.2]])
    model = LinearModel.from_coefficients(a, [[1.0, 0.3]], [[0.0], [1.0]], np.diag([0.4, 0.2]), np.diag([1.0, 0.5]))
    cost = CostSpec.from_model(model, np.zeros((2, 2)))
    sig_inf, om_inf = lqg.stationary_classical(model, cost)
    sig = filter_riccati_solve(model, np.eye(2), 40.0, 1e-3).final
    om = control_riccati_solve(model, cost, 40.0, 1e-3).values[0]
    assert np.max(np.abs(sig - sig_inf)) <= 1e-8
    assert np.max(np.abs(om - om_inf)) <= 1e-8


@given(seeds, st.sampled_from([2, 4]), st.floats(0.3, 2.0))
def test_heisenberg_bound_is_preserved(seed, m, hbar):
    g = np.random.default_rng(seed)
    model = lqg.random_quantum_model(m, 1, 1, g, hbar)
    s0 = lqg.random_admissible_cov(m, g, hbar, extra=0.0)
    path = filter_riccati_solve(model, s0, 1.0, 1e-2)
    for s in path.values:
        assert heisenberg_check(s, model.J, hbar).ok
    assert np.max(np.abs(path.values - np.swapaxes(path.values, 1, 2))) <= 1e-10


@given(seeds)
def test_dual_riccati_identity_on_random_models(seed):
    g = np.random.default_rng(seed)
    model = lqg.random_quantum_model(2, 1, 1, g)
    cost = CostSpec.from_model(model, lqg.random_admissible_cov(2, g))
    rep = lqg.duality_check(model, cost, lqg.random_admissible_cov(2, g), 0.5, 1e-2)
    assert rep.riccati_gap <= 1e-10
