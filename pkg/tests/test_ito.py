import itertools
import json

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from qfiltctl.errors import DimensionMismatch, PseudoUnitarityViolated, ValidationError
from qfiltctl.ito import (
    GermMatrix,
    basic_increment,
    check_pseudo_unitarity,
    germ_from_coupling,
    germ_product,
    hamiltonian_from_germ,
    homomorphism_residuals,
    involution,
    is_hermitian_germ,
    lindblad_from_germ,
    poisson_germ,
    wiener_germ,
)
from qfiltctl.operators import (
    SIGMA_MINUS,
    SIGMA_PLUS,
    SIGMA_Z,
    CouplingSet,
    random_coupling,
    random_density,
    random_hermitian,
)

I2 = np.eye(2)
seeds = st.integers(min_value=0, max_value=2**32 - 1)


def labels(d):
    return ["-"] + list(range(1, d + 1)) + ["+"]


def allowed_increments(d):
    """Index pairs of the nonzero basic increments: (-,i), (i,j), (i,+), (-,+)."""
    chans = list(range(1, d + 1))
    out = [("-", i) for i in chans] + [(i, j) for i in chans for j in chans]
    return out + [(i, "+") for i in chans] + [("-", "+")]


def qubit_decay_germ(drift_scale=0.5):
    return GermMatrix.from_blocks(
        2,
        1,
        {("-", "-"): I2, ("+", "+"): I2, (1, 1): I2, (1, "+"): SIGMA_MINUS, ("-", 1): -SIGMA_PLUS,
         ("-", "+"): -drift_scale * SIGMA_PLUS @ SIGMA_MINUS},
    )


class TestMultiplicationTable:
    def test_annihilation_times_creation_is_dt(self):
        prod = germ_product(basic_increment("-", 1), basic_increment(1, "+"))
        assert np.array_equal(prod.blocks, basic_increment("-", "+").blocks)

    def test_wiener_squares_to_dt(self):
        w = wiener_germ()
        assert np.array_equal(germ_product(w, w).blocks, basic_increment("-", "+").blocks)

    def test_poisson_is_idempotent(self):
        n = poisson_germ()
        assert np.array_equal(germ_product(n, n).blocks, n.blocks)

    @pytest.mark.parametrize("d", [1, 2])
    def test_full_table(self, d):
        # dA_mu^nu dA_kappa^lambda = delta_{nu kappa} dA_mu^lambda on every allowed pair
        for (a, b), (c, e) in itertools.product(allowed_increments(d), repeat=2):
            prod = germ_product(basic_increment(a, b, channels=d), basic_increment(c, e, channels=d))
            expected = basic_increment(a, e, channels=d).blocks if b == c else np.zeros_like(prod.blocks)
            assert np.array_equal(prod.blocks, expected), (a, b, c, e)

    def test_time_differential_annihilates_everything(self):
        dt = basic_increment("-", "+", channels=2)
        for a, b in allowed_increments(2):
            k = basic_increment(a, b, channels=2)
            assert not germ_product(dt, k).blocks.any()
            assert not germ_product(k, dt).blocks.any()

    def test_wiener_and_poisson_on_disjoint_channels(self):
        w = wiener_germ(channels=2, channel=1)
        n = poisson_germ(channels=2, channel=2)
        assert not germ_product(w, n).blocks[0, -1].any()
        assert not germ_product(n, w).blocks.any()

    def test_wiener_and_poisson_on_one_channel_interact(self):
        w, n = wiener_germ(), poisson_germ()
        assert germ_product(w, n).blocks[0, -1].any()

    def test_shape_mismatch(self):
        with pytest.raises(DimensionMismatch):
            germ_product(wiener_germ(channels=1), wiener_germ(channels=2))


class TestInvolution:
    def test_creation_becomes_annihilation(self):
        op = np.array([[1, 2j], [3, 4]])
        k = GermMatrix.from_blocks(2, 1, {(1, "+"): op})
        star = involution(k)
        expected = GermMatrix.from_blocks(2, 1, {("-", 1): op.conj().T})
        assert np.array_equal(star.blocks, expected.blocks)

    def test_drift_is_time_reversed(self):
        h = np.array([[1.0, 0.5 - 1j], [0.5 + 1j, -2.0]])
        star = involution(GermMatrix.from_blocks(2, 1, {("-", "+"): 1j * h}))
        np.testing.assert_array_equal(star.blocks[0, -1], -1j * h)

    def test_wiener_germ_is_hermitian(self):
        w = wiener_germ(dim=3)
        assert is_hermitian_germ(w)
        assert np.array_equal(involution(w).blocks, w.blocks)

    def test_is_an_involution(self, rng):
        b = rng.normal(size=(4, 4, 2, 2)) + 1j * rng.normal(size=(4, 4, 2, 2))
        k = GermMatrix(np.triu(np.ones((4, 4)))[:, :, None, None] * b)
        assert np.array_equal(involution(involution(k)).blocks, k.blocks)


class TestPseudoUnitarity:
    def test_identity_germ(self):
        rep = check_pseudo_unitarity(GermMatrix.identity(3, 2))
        assert rep.ok and rep.residuals == (0.0, 0.0, 0.0)

    def test_qubit_decay_germ(self):
        rep = check_pseudo_unitarity(qubit_decay_germ(), tol=1e-12)
        assert rep.ok
        assert max(rep.residuals) <= 1e-12

    def test_factor_two_error_in_drift(self):
        rep = check_pseudo_unitarity(qubit_decay_germ(drift_scale=1.0))
        assert not rep.ok
        assert rep.residuals[:2] == (0.0, 0.0)
        assert rep.residuals[2] == pytest.approx(1.0, abs=1e-15)

    def test_equivalent_to_star_product(self, rng):
        s = germ_from_coupling(random_coupling(3, 2, rng, with_scattering=True))
        prod = germ_product(involution(s), s)
        np.testing.assert_allclose(prod.blocks, GermMatrix.identity(3, 2).blocks, atol=1e-12)

    def test_needs_transition_normalization(self):
        with pytest.raises(ValidationError):
            check_pseudo_unitarity(wiener_germ())

    def test_report_json(self):
        out = check_pseudo_unitarity(GermMatrix.identity(2, 1)).to_json()
        assert out == {"ok": True, "residuals": [0.0, 0.0, 0.0], "tol": 1e-10}


class TestGermFromCoupling:
    def test_empty_coupling_gives_identity(self):
        s = germ_from_coupling(CouplingSet(np.zeros((2, 2))))
        assert np.array_equal(s.blocks, GermMatrix.identity(2, 0).blocks)

    def test_qubit_decay(self):
        s = germ_from_coupling(CouplingSet(np.zeros((2, 2)), (SIGMA_MINUS,)))
        np.testing.assert_array_equal(s.blocks, qubit_decay_germ().blocks)

    def test_drift_block_with_hamiltonian(self):
        s = germ_from_coupling(CouplingSet(0.5 * SIGMA_Z, (SIGMA_MINUS,)))
        expected = -0.5j * SIGMA_Z - 0.5 * SIGMA_PLUS @ SIGMA_MINUS
        np.testing.assert_allclose(s.blocks[0, -1], expected, atol=1e-15)
        assert check_pseudo_unitarity(s).ok

    def test_hamiltonian_round_trip(self, rng):
        c = random_coupling(3, 2, rng, hbar=0.7)
        s = germ_from_coupling(c)
        np.testing.assert_allclose(hamiltonian_from_germ(s, c.hbar), c.hamiltonian, atol=1e-14)

    @pytest.mark.parametrize("dim", [2, 3, 4])
    def test_fifty_random_models(self, dim):
        g = np.random.default_rng(dim)
        for _ in range(50):
            c = random_coupling(dim, int(g.integers(1, 4)), g, with_scattering=bool(g.integers(2)))
            rep = check_pseudo_unitarity(germ_from_coupling(c))
            assert rep.ok, rep.residuals


class TestLindbladFromGerm:
    def test_identity_germ_is_zero_generator(self, rng):
        gen = lindblad_from_germ(GermMatrix.identity(3, 1))
        assert not gen(random_density(3, rng)).any()

    def test_excited_state_decays(self):
        gen = lindblad_from_germ(qubit_decay_germ())
        np.testing.assert_allclose(gen(np.diag([0.0, 1.0])), np.diag([1.0, -1.0]), atol=1e-15)

    def test_ground_state_is_dark(self):
        gen = lindblad_from_germ(qubit_decay_germ())
        assert not gen(np.diag([1.0, 0.0])).any()

    def test_rejects_non_unitary_germ(self):
        with pytest.raises(PseudoUnitarityViolated):
            lindblad_from_germ(qubit_decay_germ(drift_scale=1.0))


def test_germ_json_round_trip(rng):
    s = germ_from_coupling(random_coupling(2, 2, rng, with_scattering=True))
    obj = json.loads(json.dumps(s.to_json()))
    assert obj["labels"] == ["-", "1", "2", "+"]
    assert np.array_equal(GermMatrix.from_json(obj).blocks, s.blocks)


def test_germ_json_rejects_bad_labels(rng):
    obj = GermMatrix.identity(2, 1).to_json()
    obj["labels"] = ["-", "0", "+"]
    with pytest.raises(ValidationError):
        GermMatrix.from_json(obj)


def test_germ_rejects_lower_triangular_blocks():
    b = GermMatrix.identity(2, 1).blocks.copy()
    b[2, 0] = np.eye(2)
    with pytest.raises(ValidationError):
        GermMatrix(b)


def _integer_germ(g, dim, d):
    n = d + 2
    mask = np.triu(np.ones((n, n)))[:, :, None, None]
    mask[0, 0] = mask[-1, -1] = 0
    return GermMatrix(mask * (g.integers(-3, 4, size=(n, n, dim, dim)) + 1j * g.integers(-3, 4, size=(n, n, dim, dim))))


@given(seeds, st.integers(1, 3), st.integers(1, 3))
def test_product_is_associative_on_integer_germs(seed, dim, d):
    g = np.random.default_rng(seed)
    a, b, c = (_integer_germ(g, dim, d) for _ in range(3))
    left = germ_product(a, germ_product(b, c))
    right = germ_product(germ_product(a, b), c)
    assert np.array_equal(left.blocks, right.blocks)


@given(seeds, st.integers(1, 3), st.integers(1, 3))
def test_involution_reverses_products(seed, dim, d):
    g = np.random.default_rng(seed)
    a = germ_from_coupling(random_coupling(dim, d, g))
    b = germ_from_coupling(random_coupling(dim, d, g))
    lhs = involution(germ_product(a, b))
    rhs = germ_product(involution(b), involution(a))
    assert np.max(np.abs(lhs.blocks - rhs.blocks)) <= 1e-13


@given(seeds, st.integers(2, 4), st.integers(1, 3))
def test_germ_is_a_star_homomorphism(seed, dim, d):
    g = np.random.default_rng(seed)
    s = germ_from_coupling(random_coupling(dim, d, g, with_scattering=True))
    unital, mult = homomorphism_residuals(s, random_hermitian(dim, g))
    assert unital <= 1e-10 and mult <= 1e-10


@given(seeds, st.integers(1, 4), st.integers(0, 3))
def test_generator_is_trace_free(seed, dim, d):
    g = np.random.default_rng(seed)
    gen = lindblad_from_germ(germ_from_coupling(random_coupling(dim, d, g)))
    for _ in range(100):
        assert abs(np.trace(gen(random_density(dim, g)))) <= 1e-10
