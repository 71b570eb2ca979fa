"""Forward-backward correctness against the enumeration oracle, plus
stability and marginalization properties."""

import numpy as np
import pytest

from oracles import chain_marginals
from shiftfit.errors import DegenerateLikelihoodError, InvalidParameterError
from shiftfit.markov import (
    HmmParams,
    brute_force_posterior,
    forward_backward,
    transition_matrix,
)


def sigmoid(x):
    return 1.0 / (1.0 + np.exp(-x))


def random_instance(rng, J, p_cov=1):
    h = HmmParams(
        init_prob_engaged=rng.uniform(0.05, 0.95),
        coefs=rng.normal(0.0, 1.0, (2, 1 + p_cov)),
    )
    x = rng.normal(0.0, 1.0, p_cov)
    log_em = rng.normal(-1.0, 2.0, (J, 2))
    return log_em, h, x


class TestTransitionMatrix:
    def test_logistic_values_from_simulation_coefficients(self):
        h = HmmParams(0.95, np.array([[-0.3, -0.3], [1.3, 1.3]]))
        mat = transition_matrix(h, [1.0])
        assert mat[0, 1] == pytest.approx(sigmoid(-0.6), abs=1e-5)
        assert mat[0, 1] == pytest.approx(0.35434, abs=1e-5)
        mat0 = transition_matrix(h, [0.0])
        assert mat0[1, 1] == pytest.approx(sigmoid(1.3), abs=1e-5)
        assert mat0[1, 1] == pytest.approx(0.78583, abs=1e-5)

    def test_zero_coefficients_give_uniform_rows(self):
        h = HmmParams(0.5, np.zeros((2, 2)))
        mat = transition_matrix(h, [0.7])
        assert np.all(mat == 0.5)

    def test_rows_sum_to_one_exactly(self):
        rng = np.random.default_rng(0)
        for _ in range(200):
            h = HmmParams(0.5, rng.normal(0, 3, (2, 3)))
            mat = transition_matrix(h, rng.normal(0, 2, 2))
            assert np.all(mat.sum(axis=1) == 1.0)

    def test_invalid_inputs(self):
        with pytest.raises(InvalidParameterError):
            HmmParams(0.0, np.zeros((2, 2)))
        with pytest.raises(InvalidParameterError):
            HmmParams(0.5, np.full((2, 2), np.nan))
        h = HmmParams(0.5, np.zeros((2, 2)))
        with pytest.raises(InvalidParameterError):
            transition_matrix(h, [np.inf])


class TestForwardBackward:
    def test_single_trial_recovers_weighted_prior(self):
        h = HmmParams(0.95, np.zeros((2, 2)))
        post = forward_backward(np.array([[0.3, 0.3]]), h, [0.0])
        assert post.zeta[0] == pytest.approx([0.05, 0.95], abs=1e-14)
        assert post.xi.shape == (0, 2, 2)
        assert post.log_marginal == pytest.approx(0.3, abs=1e-12)

    def test_uniform_emissions_reproduce_chain_marginals(self):
        h = HmmParams(0.8, np.array([[-0.6, -0.6], [1.2, 1.2]]))
        x = [1.0]
        J = 40
        post = forward_backward(np.zeros((J, 2)), h, x)
        expected = chain_marginals([0.2, 0.8], transition_matrix(h, x), J)
        assert np.abs(post.zeta - expected).max() < 1e-12

    def test_matches_enumeration_on_small_instance(self):
        rng = np.random.default_rng(42)
        log_em, h, x = random_instance(rng, J=5)
        fb = forward_backward(log_em, h, x)
        bf = brute_force_posterior(log_em, h, x)
        assert np.abs(fb.zeta - bf.zeta).max() < 1e-10
        assert np.abs(fb.xi - bf.xi).max() < 1e-10
        assert abs(fb.log_marginal - bf.log_marginal) < 1e-10

    def test_matches_enumeration_with_task_like_emissions(self):
        # Emission scale mimicking response-time log densities.
        rng = np.random.default_rng(7)
        log_em = rng.normal(0.0, 1.5, (8, 2)) - np.array([0.0, 0.4])
        h = HmmParams(0.95, np.array([[-0.3, -0.3], [1.3, 1.3]]))
        fb = forward_backward(log_em, h, [1.0])
        bf = brute_force_posterior(log_em, h, [1.0])
        assert np.abs(fb.zeta - bf.zeta).max() < 1e-10
        assert np.abs(fb.xi - bf.xi).max() < 1e-10
        assert abs(fb.log_marginal - bf.log_marginal) < 1e-10

    def test_randomized_equivalence_with_oracle(self):
        rng = np.random.default_rng(2024)
        for _ in range(60):
            J = int(rng.integers(1, 13))
            log_em, h, x = random_instance(rng, J)
            if rng.random() < 0.3:
                log_em[rng.integers(0, J), rng.integers(0, 2)] = -np.inf
            fb = forward_backward(log_em, h, x)
            bf = brute_force_posterior(log_em, h, x)
            assert np.abs(fb.zeta - bf.zeta).max() < 1e-10
            assert fb.xi.shape == bf.xi.shape
            if fb.xi.size:
                assert np.abs(fb.xi - bf.xi).max() < 1e-10
            assert abs(fb.log_marginal - bf.log_marginal) < 1e-10

    def test_marginalization_identities(self):
        rng = np.random.default_rng(11)
        for _ in range(25):
            log_em, h, x = random_instance(rng, int(rng.integers(2, 60)))
            post = forward_backward(log_em, h, x)
            assert np.abs(post.zeta.sum(axis=1) - 1.0).max() < 1e-12
            assert np.abs(post.xi.sum(axis=2) - post.zeta[:-1]).max() < 1e-12
            assert np.abs(post.xi.sum(axis=1) - post.zeta[1:]).max() < 1e-12
            assert post.zeta.min() >= 0.0 and post.zeta.max() <= 1.0
            assert post.xi.min() >= 0.0 and post.xi.max() <= 1.0

    def test_per_trial_offset_shifts_log_marginal_only(self):
        rng = np.random.default_rng(3)
        log_em, h, x = random_instance(rng, 30)
        offsets = rng.normal(0, 5, 30)
        post = forward_backward(log_em, h, x)
        shifted = forward_backward(log_em + offsets[:, None], h, x)
        assert shifted.log_marginal == pytest.approx(post.log_marginal + offsets.sum(), rel=1e-12)
        assert np.abs(shifted.zeta - post.zeta).max() < 1e-10
        assert np.abs(shifted.xi - post.xi).max() < 1e-10

    def test_long_sequence_with_tiny_emissions_stays_finite(self):
        h = HmmParams(0.9, np.array([[-0.5, 0.2], [1.0, -0.1]]))
        log_em = np.full((200, 2), -700.0) + np.random.default_rng(0).normal(0, 1, (200, 2))
        post = forward_backward(log_em, h, [0.5])
        assert np.isfinite(post.log_marginal)
        assert not np.isnan(post.zeta).any() and not np.isnan(post.xi).any()
        assert np.abs(post.zeta.sum(axis=1) - 1.0).max() < 1e-12

    def test_impossible_trial_raises_with_index(self):
        h = HmmParams(0.9, np.zeros((2, 2)))
        log_em = np.zeros((6, 2))
        log_em[3] = -np.inf
        with pytest.raises(DegenerateLikelihoodError) as err:
            forward_backward(log_em, h, [0.0])
        assert err.value.trial == 3


class TestBruteForce:
    def test_single_trial_matches_forward_backward(self):
        h = HmmParams(0.6, np.array([[0.5, -1.0], [0.2, 0.3]]))
        log_em = np.array([[-0.2, -1.1]])
        fb = forward_backward(log_em, h, [0.4])
        bf = brute_force_posterior(log_em, h, [0.4])
        assert np.array_equal(fb.zeta, bf.zeta) or np.abs(fb.zeta - bf.zeta).max() < 1e-14
        assert abs(fb.log_marginal - bf.log_marginal) < 1e-14

    def test_absorbing_chain_puts_mass_on_all_ones_path(self):
        # Logistic transitions cannot be exactly the identity; +/-40 on the
        # logit scale saturates them to 1 within double precision.
        h = HmmParams(1.0 - 1e-15, np.array([[-40.0, 0.0], [40.0, 0.0]]))
        post = brute_force_posterior(np.zeros((6, 2)), h, [0.0])
        assert np.abs(post.zeta[:, 1] - 1.0).max() < 1e-12

    def test_refuses_large_state_space(self):
        h = HmmParams(0.5, np.zeros((2, 2)))
        with pytest.raises(InvalidParameterError):
            brute_force_posterior(np.zeros((17, 2)), h, [0.0])
