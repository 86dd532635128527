import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from specrl import distributions as D


def test_uniform_logits_entropy_and_probs():
    logits = np.zeros((1, 2))
    np.testing.assert_allclose(D.softmax(logits), [[0.5, 0.5]])
    assert D.categorical_entropy(logits)[0] == pytest.approx(np.log(2))


def test_saturated_logits_stable():
    lp = D.categorical_log_prob(np.array([[1000.0, 0.0]]), np.array([0]))
    assert np.isfinite(lp[0]) and lp[0] == pytest.approx(0.0, abs=1e-12)


def test_categorical_sample_frequencies():
    rng = np.random.default_rng(0)
    logits = np.tile(np.log([0.2, 0.8]), (100_000, 1))
    a = D.categorical_sample(logits, rng)
    assert np.mean(a == 1) == pytest.approx(0.8, abs=0.01)


def test_categorical_action_out_of_range():
    with pytest.raises(ValueError):
        D.categorical_log_prob(np.zeros((1, 3)), np.array([3]))


@settings(max_examples=60, deadline=None)
@given(arrays(np.float64, (3, 5), elements=st.floats(-50, 50)))
def test_categorical_entropy_bounds(logits):
    h = D.categorical_entropy(logits)
    assert np.all(h >= -1e-12) and np.all(h <= np.log(5) + 1e-12)


def test_log_prob_grad_matches_finite_differences():
    rng = np.random.default_rng(1)
    logits = rng.normal(size=(4, 3))
    actions = rng.integers(0, 3, size=4)
    g = D.categorical_log_prob_grad(logits, actions)
    ge = D.categorical_entropy_grad(logits)
    h = 1e-6
    for i in range(3):
        e = np.zeros_like(logits)
        e[:, i] = h
        num = (D.categorical_log_prob(logits + e, actions) - D.categorical_log_prob(logits - e, actions)) / (2 * h)
        np.testing.assert_allclose(g[:, i], num, atol=1e-8)
        num = (D.categorical_entropy(logits + e) - D.categorical_entropy(logits - e)) / (2 * h)
        np.testing.assert_allclose(ge[:, i], num, atol=1e-8)


def test_tanh_correction_zero_at_origin():
    assert D.squash_correction(np.zeros(1))[0] == pytest.approx(np.log(1 + 1e-6))
    assert abs(D.squash_correction(np.zeros(1))[0]) < 1e-5


@pytest.mark.parametrize("mean,log_std", [(0.0, 0.0), (0.7, -1.0), (-0.3, 0.3)])
def test_tanh_gaussian_density_integrates_to_one(mean, log_std):
    # integrate over the squashed action a = tanh(u); da = (1 - tanh^2 u) du
    u = np.linspace(-12, 12, 400_001)
    logp = D.tanh_gaussian_log_prob(np.full((len(u), 1), mean), np.full((len(u), 1), log_std), u[:, None])
    da = np.gradient(np.tanh(u))
    assert np.sum(np.exp(logp) * da) == pytest.approx(1.0, abs=1e-3)


def test_tanh_gaussian_deterministic_and_bounds():
    mean = np.array([[0.3, -2.0]])
    np.testing.assert_array_equal(D.tanh_gaussian_deterministic(mean), np.tanh(mean))
    a, u = D.tanh_gaussian_sample(np.zeros((1000, 2)), np.full((1000, 2), 1.5), np.random.default_rng(2))
    assert np.all(np.abs(a) <= 1.0)
    np.testing.assert_array_equal(a, np.tanh(u))


def test_log_std_clamp():
    np.testing.assert_array_equal(D.clamp_log_std(np.array([-50.0, 0.0, 10.0])), [-20.0, 0.0, 2.0])


def test_gumbel_hard_low_temperature_is_one_hot():
    y = D.gumbel_softmax_sample(np.random.default_rng(3).normal(size=(500, 4)), 0.01,
                                np.random.default_rng(4), hard=True)
    assert np.all(y.sum(axis=1) == 1.0) and set(np.unique(y)) <= {0.0, 1.0}


def test_gumbel_relaxed_low_temperature_near_one_hot_when_separated():
    logits = np.array([[0.0, 1.0, -1.0]])
    y = D.gumbel_softmax_sample(logits, 0.01, noise=np.zeros((1, 3)))
    assert np.max(np.abs(y - np.array([[0.0, 1.0, 0.0]]))) < 1e-3


def test_gumbel_argmax_marginals():
    probs = np.array([0.1, 0.3, 0.6])
    rng = np.random.default_rng(5)
    for tau in (0.1, 1.0, 5.0):
        y = D.gumbel_softmax_sample(np.tile(np.log(probs), (100_000, 1)), tau, rng, hard=True)
        np.testing.assert_allclose(y.mean(axis=0), probs, atol=0.01)


def test_gumbel_zero_noise_uniform_logits():
    y = D.gumbel_softmax_sample(np.zeros((1, 4)), 0.5, noise=np.zeros((1, 4)))
    np.testing.assert_array_equal(y, np.full((1, 4), 0.25))


def test_gumbel_bad_temperature():
    with pytest.raises(ValueError):
        D.gumbel_softmax_sample(np.zeros((1, 2)), 0.0, np.random.default_rng(0))


def test_gumbel_backward_matches_finite_differences():
    rng = np.random.default_rng(6)
    logits, noise, gy = rng.normal(size=(2, 4)), rng.gumbel(size=(2, 4)), rng.normal(size=(2, 4))
    tau = 0.7
    y = D.gumbel_softmax_relaxed(logits, tau, noise)
    g = D.gumbel_softmax_backward(y, tau, gy)
    h = 1e-6
    for i in range(4):
        e = np.zeros_like(logits)
        e[:, i] = h
        num = (np.sum(D.gumbel_softmax_relaxed(logits + e, tau, noise) * gy, axis=1)
               - np.sum(D.gumbel_softmax_relaxed(logits - e, tau, noise) * gy, axis=1)) / (2 * h)
        np.testing.assert_allclose(g[:, i], num, atol=1e-8)


def test_epsilon_greedy_cases():
    rng = np.random.default_rng(7)
    assert D.epsilon_greedy([1.0, 3.0, 2.0], 0.0, rng) == 1
    assert D.epsilon_greedy([2.0, 2.0], 0.0, rng) == 0
    a = D.epsilon_greedy(np.zeros((100_000, 4)) + [0, 0, 5, 0], 1.0, rng)
    np.testing.assert_allclose(np.bincount(a, minlength=4) / len(a), 0.25, atol=0.01)
    with pytest.raises(ValueError):
        D.epsilon_greedy([0.0], 1.5, rng)


def test_boltzmann_limits():
    q = np.array([0.0, 1.0, -1.0])
    assert np.max(np.abs(D.boltzmann_probs(q, 1e6) - 1 / 3)) < 0.01
    assert D.boltzmann_probs(np.array([0.0, 0.1]), 1e-3)[1] > 0.999
    np.testing.assert_allclose(D.boltzmann_probs(np.array([0.0, np.log(3)]), 1.0), [0.25, 0.75])
    with pytest.raises(ValueError):
        D.boltzmann_probs(q, 0.0)
