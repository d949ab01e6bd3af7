"""Tests for adaptive sampling, re-weighting, and the estimator oracles.

The estimator checks use exhaustive expectations: with K candidates the
sampled-index distribution is finite, so E[G], E[||G||^2] and the expected
one-step progress can be summed directly and compared against the closed
forms.
"""

import numpy as np
import pytest

from adasample.errors import DegenerateDistributionError, StateError
from adasample.sampler import (LossTracker, SamplerConfig, adaptive_exponent,
                               categorical_sample, expected_rectification,
                               optimal_probs, positive_probs, reweights,
                               trace_variance, unbiased_weights,
                               update_loss_avg)

CFG = SamplerConfig()


class TestLossTracker:
    def test_first_observation_initializes(self):
        t = update_loss_avg(LossTracker(), 2.0, CFG)
        assert t.initialized and t.l_avg == 2.0

    def test_fixed_point(self):
        t = LossTracker(l_avg=1.0, initialized=True)
        assert update_loss_avg(t, 1.0, CFG).l_avg == pytest.approx(1.0)

    def test_ema_arithmetic(self):
        t = LossTracker(l_avg=1.0, initialized=True)
        cfg = SamplerConfig(ema_decay=0.9)
        assert update_loss_avg(t, 0.0, cfg).l_avg == pytest.approx(0.9)

    def test_negative_loss_rejected(self):
        with pytest.raises(ValueError):
            update_loss_avg(LossTracker(), -0.1, CFG)


class TestAdaptiveExponent:
    def test_default_lambda_over_unit_loss(self):
        t = LossTracker(l_avg=1.0, initialized=True)
        assert adaptive_exponent(t, SamplerConfig(lambda_=10.0)) == 10.0

    def test_zero_lambda_means_uniform(self):
        t = LossTracker(l_avg=0.7, initialized=True)
        assert adaptive_exponent(t, SamplerConfig(lambda_=0.0)) == 0.0

    def test_cap_engages_for_tiny_loss(self):
        t = LossTracker(l_avg=1e-9, initialized=True)
        assert adaptive_exponent(t, SamplerConfig(lambda_=10.0)) == 50.0

    def test_infinite_lambda_pins_to_cap(self):
        t = LossTracker(l_avg=3.0, initialized=True)
        assert adaptive_exponent(t, SamplerConfig(lambda_=np.inf)) == 50.0

    def test_uninitialized_tracker_rejected(self):
        with pytest.raises(StateError):
            adaptive_exponent(LossTracker(), CFG)


class TestPositiveProbs:
    def test_equal_distances_are_uniform(self):
        for e in (0.0, 1.0, 17.0):
            np.testing.assert_allclose(positive_probs(np.ones(3), e), 1 / 3)

    def test_linear_proportionality(self):
        np.testing.assert_allclose(positive_probs(np.array([0.5, 1.0]), 1.0),
                                   [1 / 3, 2 / 3], atol=1e-15)

    def test_large_exponent_concentrates_on_argmax(self):
        p = positive_probs(np.array([0.5, 1.0]), 50.0)
        assert p[1] > 1.0 - 1e-10

    def test_zero_exponent_and_zero_distances_fall_back_to_uniform(self):
        np.testing.assert_allclose(positive_probs(np.zeros(4), 9.0), 0.25)
        np.testing.assert_allclose(positive_probs(np.array([0.2, 0.4]), 0.0),
                                   0.5)

    def test_probabilities_are_normalized_and_nonnegative(self):
        rng = np.random.default_rng(0)
        for _ in range(200):
            d = rng.uniform(0, np.pi, size=rng.integers(1, 9))
            e = rng.uniform(0, 60)
            p = positive_probs(d, e)
            assert abs(p.sum() - 1.0) < 1e-12
            assert np.all(p >= 0)

    def test_extreme_exponent_is_numerically_stable(self):
        p = positive_probs(np.array([1e-7, 2e-7, 3e-7]), 50.0)
        assert np.all(np.isfinite(p))
        assert p[2] > 1.0 - 1e-8

    def test_negative_distance_rejected(self):
        with pytest.raises(ValueError):
            positive_probs(np.array([0.1, -0.2]), 1.0)


class TestReweights:
    def test_equal_distances_give_unit_weights(self):
        w, clamped = reweights(np.array([1.0, 1.0]))
        np.testing.assert_allclose(w, 1.0)
        assert not clamped

    def test_inverse_distance_normalized_to_mean_one(self):
        w, _ = reweights(np.array([0.5, 1.0]))
        np.testing.assert_allclose(w, [4 / 3, 2 / 3], atol=1e-15)

    def test_scale_invariance(self):
        for c in (1e-3, 0.7, 42.0):
            w, _ = reweights(np.full(5, c))
            np.testing.assert_allclose(w, 1.0, atol=1e-12)

    def test_tiny_distances_clamped_and_flagged(self):
        w, clamped = reweights(np.array([1e-9, 1.0]))
        assert clamped
        assert np.all(np.isfinite(w))
        assert w.mean() == pytest.approx(1.0)


class TestCategoricalSample:
    def test_single_outcome(self):
        rng = np.random.default_rng(0)
        assert all(categorical_sample(np.array([1.0]), rng) == 0
                   for _ in range(20))

    def test_degenerate_mass(self):
        rng = np.random.default_rng(0)
        assert all(categorical_sample(np.array([0.0, 1.0, 0.0]), rng) == 1
                   for _ in range(200))

    def test_empirical_frequency(self):
        rng = np.random.default_rng(123)
        draws = np.array([categorical_sample(np.array([0.3, 0.7]), rng)
                          for _ in range(100_000)])
        assert abs(draws.mean() - 0.7) < 0.01

    def test_unnormalized_probs_rejected(self):
        rng = np.random.default_rng(0)
        with pytest.raises(ValueError, match="sum to 1"):
            categorical_sample(np.array([0.5, 0.6]), rng)

    def test_deterministic_given_rng_state(self):
        p = np.array([0.2, 0.5, 0.3])
        a = [categorical_sample(p, np.random.default_rng(9)) for _ in range(5)]
        b = [categorical_sample(p, np.random.default_rng(9)) for _ in range(5)]
        assert a == b


class TestOptimalProbs:
    def test_alpha_one_is_proportional_to_grad_norms(self):
        p = optimal_probs(np.array([5.0, 5.0]), np.array([3.0, 4.0]), 1.0)
        np.testing.assert_allclose(p, [3 / 7, 4 / 7], atol=1e-15)

    def test_alpha_two_closed_form(self):
        p = optimal_probs(np.array([1.0, 2.0]), np.array([3.0, 4.0]), 2.0)
        np.testing.assert_allclose(p, [3 / 11, 8 / 11], atol=1e-15)

    def test_symmetric_inputs_give_uniform(self):
        p = optimal_probs(np.full(4, 2.0), np.full(4, 0.3), 3.0)
        np.testing.assert_allclose(p, 0.25, atol=1e-15)

    def test_all_zero_mass_rejected(self):
        with pytest.raises(DegenerateDistributionError):
            optimal_probs(np.array([1.0, 1.0]), np.zeros(2), 2.0)


class TestUnbiasedWeights:
    def test_plain_sgd_recovery(self):
        w = unbiased_weights(np.full(4, 0.25), np.array([1.0, 2.0, 3.0, 4.0]),
                             1.0, 4)
        np.testing.assert_allclose(w, 1.0, atol=1e-15)

    def test_closed_form_case(self):
        probs = np.array([3 / 11, 8 / 11])
        w = unbiased_weights(probs, np.array([1.0, 2.0]), 2.0, 2)
        np.testing.assert_allclose(w, [11 / 3, 11 / 4], atol=1e-12)

    def test_defining_identity(self):
        rng = np.random.default_rng(1)
        for _ in range(100):
            K = int(rng.integers(2, 9))
            L = rng.uniform(0.1, 3.0, size=K)
            alpha = float(rng.uniform(1.0, 4.0))
            p = optimal_probs(L, rng.uniform(0.1, 2.0, size=K), alpha)
            w = unbiased_weights(p, L, alpha, K)
            np.testing.assert_allclose(p * w, (alpha / K) * L ** (alpha - 1),
                                       atol=1e-12)

    def test_zero_probability_with_mass_rejected(self):
        with pytest.raises(ZeroDivisionError):
            unbiased_weights(np.array([0.0, 1.0]), np.array([2.0, 2.0]), 2.0, 2)


def exhaustive_moments(probs, weights, grads):
    """E[G] and E[||G||^2] by direct summation over the K outcomes."""
    mean = np.zeros_like(grads[0])
    second = 0.0
    for p, w, g in zip(probs, weights, grads):
        mean = mean + p * (w * g)
        second += p * float((w * g) @ (w * g))
    return mean, second


class TestTraceVariance:
    def test_single_sample_has_no_variance(self):
        g = [np.array([1.0, -2.0])]
        assert trace_variance([1.0], [3.0], g) == pytest.approx(0.0)

    def test_identical_weighted_gradients_have_no_variance(self):
        grads = [np.array([2.0, 1.0]), np.array([1.0, 0.5])]
        # w * g identical: (1, 2) scaling
        tv = trace_variance([0.5, 0.5], [1.0, 2.0], grads)
        assert tv == pytest.approx(0.0, abs=1e-14)

    def test_matches_exhaustive_expectation(self):
        rng = np.random.default_rng(2)
        for _ in range(50):
            K = 3
            grads = [rng.normal(size=5) for _ in range(K)]
            p = rng.dirichlet(np.ones(K))
            w = rng.uniform(0.2, 2.0, size=K)
            mean, second = exhaustive_moments(p, w, grads)
            expected = second - float(mean @ mean)
            assert trace_variance(p, w, grads) == pytest.approx(expected,
                                                                abs=1e-12)

    def test_shape_mismatch_rejected(self):
        with pytest.raises(ValueError):
            trace_variance([0.5, 0.5], [1.0, 1.0],
                           [np.ones(3), np.ones(4)])


class TestExpectedRectification:
    def test_zero_gradients_give_zero(self):
        grads = [np.zeros(3), np.zeros(3)]
        r = expected_rectification(np.ones(3), np.zeros(3), 0.1,
                                   [0.5, 0.5], [1.0, 1.0], grads)
        assert r == 0.0

    def test_at_optimum_progress_is_nonpositive(self):
        rng = np.random.default_rng(3)
        theta = rng.normal(size=4)
        grads = [rng.normal(size=4) for _ in range(3)]
        p = rng.dirichlet(np.ones(3))
        w = rng.uniform(0.5, 1.5, size=3)
        r = expected_rectification(theta, theta.copy(), 0.2, p, w, grads)
        mean, second = exhaustive_moments(p, w, grads)
        tv = second - float(mean @ mean)
        assert r <= 0
        assert r == pytest.approx(-0.04 * (float(mean @ mean) + tv), abs=1e-12)

    def test_matches_exhaustive_definition(self):
        """Agrees with -sum_i p_i (||t - eta w_i g_i - t*||^2 - ||t - t*||^2)."""
        rng = np.random.default_rng(4)
        for _ in range(100):
            K = int(rng.integers(2, 5))
            dim = int(rng.integers(2, 6))
            theta = rng.normal(size=dim)
            theta_star = rng.normal(size=dim)
            eta = float(rng.uniform(0.01, 0.5))
            grads = [rng.normal(size=dim) for _ in range(K)]
            p = rng.dirichlet(np.ones(K))
            w = rng.uniform(0.2, 2.0, size=K)
            exhaustive = -sum(
                pi * (np.linalg.norm(theta - eta * wi * gi - theta_star) ** 2
                      - np.linalg.norm(theta - theta_star) ** 2)
                for pi, wi, gi in zip(p, w, grads))
            r = expected_rectification(theta, theta_star, eta, p, w, grads)
            assert r == pytest.approx(exhaustive, abs=1e-10)


class TestEstimatorProperties:
    def test_reweighted_estimator_is_unbiased(self):
        """sum_i p_i w_i grad(L_i) equals (1/K) sum_i grad(L_i^alpha) when
        probabilities come from the optimal rule and weights enforce the
        product constraint, for quadratic per-sample losses."""
        rng = np.random.default_rng(5)
        for K in (2, 4, 8, 16):
            dim = 6
            theta = rng.normal(size=dim)
            centers = rng.normal(size=(K, dim))
            L = 0.5 * np.sum((theta - centers) ** 2, axis=1)
            grads = theta - centers
            norms = np.linalg.norm(grads, axis=1)
            for alpha in (1.0, 2.0, 3.0):
                p = optimal_probs(L, norms, alpha)
                w = unbiased_weights(p, L, alpha, K)
                estimate = (p * w) @ grads
                target = np.mean(alpha * L[:, None] ** (alpha - 1) * grads,
                                 axis=0)
                np.testing.assert_allclose(estimate, target, atol=1e-10)

    def test_optimal_probs_minimize_trace_variance(self):
        """No random simplex point beats the closed-form distribution."""
        rng = np.random.default_rng(6)
        for _ in range(20):
            K = int(rng.integers(2, 7))
            L = rng.uniform(0.1, 2.0, size=K)
            grads = [rng.normal(size=4) for _ in range(K)]
            norms = np.array([np.linalg.norm(g) for g in grads])
            alpha = float(rng.choice([1.0, 2.0, 3.0]))
            p_star = optimal_probs(L, norms, alpha)
            w_star = unbiased_weights(p_star, L, alpha, K)
            tv_star = trace_variance(p_star, w_star, grads)
            for _ in range(200):
                p = rng.dirichlet(np.ones(K))
                w = unbiased_weights(p, L, alpha, K)
                assert tv_star <= trace_variance(p, w, grads) + 1e-12
