import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from fedexperts.core import ParameterError, ShapeError, StateError
from fedexperts.dp_mechanisms import (
    AboveThresholdState,
    Outcome,
    above_threshold_query,
    exponential_probabilities,
    exponential_sample,
    laplace_noise,
    laplace_sample,
    noisy_avg_argmin,
)


def empirical(samples, d):
    """1-indexed samples -> empirical distribution over d outcomes."""
    return np.bincount(np.asarray(samples) - 1, minlength=d) / len(samples)


def tv(p, q):
    return 0.5 * np.abs(np.asarray(p) - np.asarray(q)).sum()


class TestLaplace:
    def test_mean(self):
        rng = np.random.default_rng(0)
        draws = [laplace_sample(2.0, rng) for _ in range(100_000)]
        assert abs(np.mean(draws)) <= 3 * math.sqrt(8 / 1e5)

    def test_median_abs_tail(self):
        # P(|X| > lam ln 2) = exp(-ln 2) = 1/2
        lam = 1.7
        x = laplace_noise(lam, 100_000, np.random.default_rng(1))
        assert np.mean(np.abs(x) > lam * math.log(2)) == pytest.approx(0.5, abs=0.01)

    @pytest.mark.parametrize("scale", [0.0, -1.0, math.inf, math.nan])
    def test_bad_scale(self, scale):
        with pytest.raises(ParameterError):
            laplace_sample(scale, np.random.default_rng(0))

    def test_zero_scale_noise_is_zero(self):
        np.testing.assert_array_equal(laplace_noise(0.0, 4, None), np.zeros(4))


class TestAboveThreshold:
    def test_deterministic_sequence(self):
        state = AboveThresholdState(5.0, 1.0, noise_override=True)
        out = [above_threshold_query(state, q) for q in (1, 2, 6)]
        assert out == [Outcome.BELOW, Outcome.BELOW, Outcome.ABOVE]
        assert state.halted

    def test_tie_is_below(self):
        state = AboveThresholdState(5.0, 1.0, noise_override=True)
        assert state.query(5.0) is Outcome.BELOW

    def test_query_after_halt_raises(self):
        state = AboveThresholdState(0.0, 1.0, noise_override=True)
        state.query(1.0)
        with pytest.raises(StateError):
            state.query(-1.0)

    def test_reset_clears_halt(self):
        state = AboveThresholdState(0.0, 1.0, noise_override=True)
        state.query(1.0)
        state.reset()
        assert not state.halted
        assert state.noisy_threshold == 0.0
        assert state.query(-1.0) is Outcome.BELOW

    def test_noisy_threshold_is_shifted(self):
        rng = np.random.default_rng(3)
        shifts = [AboveThresholdState(10.0, 2.0, rng).noisy_threshold - 10.0
                  for _ in range(20_000)]
        # Lap(4/eps) has variance 2 * (4/eps)^2 = 8
        assert np.var(shifts) == pytest.approx(8.0, rel=0.05)

    def test_band_guarantee(self):
        eps, T, rho = 1.0, 100, 0.1
        alpha = 8 * (math.log(T) + math.log(2 / rho)) / eps
        L = 50.0
        rng = np.random.default_rng(11)
        runs = 500
        fired = 0
        for _ in range(runs):
            state = AboveThresholdState(L, eps, rng)
            if any(state.query(L - alpha, rng) is Outcome.ABOVE for _ in range(T)):
                fired += 1
        assert fired / runs <= rho + 0.05

    def test_bad_epsilon(self):
        with pytest.raises(ParameterError):
            AboveThresholdState(1.0, 0.0, noise_override=True)

    @settings(max_examples=100, deadline=None)
    @given(st.floats(-100, 100), st.floats(-100, 100))
    def test_noise_override_is_pure_comparator(self, L, q):
        state = AboveThresholdState(L, 1.0, noise_override=True)
        assert (state.query(q) is Outcome.BELOW) == (q <= L)


class TestExponentialSample:
    def test_uniform_scores(self):
        rng = np.random.default_rng(0)
        d = 5
        draws = [exponential_sample(np.full(d, 3.0), 1.0, rng) for _ in range(100_000)]
        assert tv(empirical(draws, d), np.full(d, 1 / d)) <= 0.02

    def test_single_outcome(self):
        rng = np.random.default_rng(0)
        assert {exponential_sample([7.0], 0.3, rng) for _ in range(50)} == {1}

    def test_two_point_closed_form(self):
        np.testing.assert_allclose(exponential_probabilities([0.0, math.log(4)], 2.0), [0.8, 0.2])
        rng = np.random.default_rng(1)
        draws = [exponential_sample([0.0, math.log(4)], 2.0, rng) for _ in range(100_000)]
        assert tv(empirical(draws, 2), [0.8, 0.2]) <= 0.01

    def test_shift_invariance(self):
        s = np.array([0.0, 1.0, 3.0, 0.5])
        rng_a, rng_b = np.random.default_rng(2), np.random.default_rng(3)
        a = [exponential_sample(s, 1.0, rng_a) for _ in range(100_000)]
        b = [exponential_sample(s + 1000.0, 1.0, rng_b) for _ in range(100_000)]
        assert tv(empirical(a, 4), empirical(b, 4)) <= 0.01

    def test_large_scores_do_not_underflow(self):
        p = exponential_probabilities([5000.0, 5001.0], 2.0)
        assert np.all(np.isfinite(p)) and p[0] > p[1] > 0

    def test_empty_scores(self):
        with pytest.raises(ParameterError):
            exponential_sample([], 1.0, np.random.default_rng(0))

    def test_bad_eta(self):
        with pytest.raises(ParameterError):
            exponential_sample([1.0], 0.0, np.random.default_rng(0))


class TestNoisyAvgArgmin:
    def test_column_means(self):
        assert noisy_avg_argmin([[1, 2], [3, 0]], 0.0) == 2

    def test_tie_breaks_low(self):
        assert noisy_avg_argmin([[1, 1]], 0.0) == 1

    def test_single_row(self):
        assert noisy_avg_argmin([[5, 3, 4]], 0.0) == 2

    def test_ragged(self):
        with pytest.raises(ShapeError):
            noisy_avg_argmin([[1, 2], [3]], 0.0)

    def test_noise_needs_rng(self):
        with pytest.raises(ParameterError):
            noisy_avg_argmin([[1, 2]], 1.0)

    def test_large_noise_randomizes(self):
        rng = np.random.default_rng(0)
        picks = {noisy_avg_argmin([[0.0, 0.1, 0.2]], 10.0, rng) for _ in range(200)}
        assert picks == {1, 2, 3}

    @settings(max_examples=200, deadline=None)
    @given(hnp.arrays(float, hnp.array_shapes(min_dims=2, max_dims=2, max_side=6),
                      elements=st.floats(-10, 10)))
    def test_zero_noise_is_exact_argmin(self, rows):
        assert noisy_avg_argmin(rows, 0.0) == int(np.argmin(rows.mean(axis=0))) + 1
