import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from specrl import oracles
from specrl.algorithms import losses
from specrl.algorithms import returns as R
from specrl.memory import Batch


# --- n-step returns -------------------------------------------------------------

def test_one_step_returns():
    rng = np.random.default_rng(0)
    r, v = rng.normal(size=6), rng.normal(size=6)
    d = np.array([0, 0, 1, 0, 0, 1.0])
    boot = 0.7
    got = R.calc_nstep_returns(r, d, boot, 0.9, 1, values=v)
    next_v = np.append(v[1:], boot)
    np.testing.assert_allclose(got, r + 0.9 * next_v * (1 - d), rtol=0, atol=1e-15)


def test_three_step_arithmetic():
    got = R.calc_nstep_returns([1.0, 1.0, 1.0], [0, 0, 0], 10.0, 0.9, 3, values=np.zeros(3))
    assert got[0] == pytest.approx(10.0, abs=1e-12)


def test_nstep_length_mismatch():
    with pytest.raises(ValueError, match="length"):
        R.calc_nstep_returns([1.0, 2.0], [0.0], 0.0, 0.9, 1, values=[0.0, 0.0])


def test_nstep_matches_oracle_on_random_sequences():
    rng = np.random.default_rng(1)
    for _ in range(300):
        T = int(rng.integers(1, 65))
        r, v = rng.normal(size=T), rng.normal(size=T)
        d = (rng.random(T) < 0.15).astype(float)
        n = int(rng.integers(1, T + 3))
        boot, gamma = float(rng.normal()), float(rng.uniform(0.8, 1.0))
        got = R.calc_nstep_returns(r, d, boot, gamma, n, values=v)
        np.testing.assert_allclose(got, oracles.nstep_oracle(r, d, boot, v, gamma, n), rtol=0, atol=1e-12)


# --- GAE -------------------------------------------------------------------------

def test_gae_lambda_zero_is_td_error():
    rng = np.random.default_rng(2)
    r, v = rng.normal(size=8), rng.normal(size=9)
    d = np.zeros(8)
    d[4] = 1
    adv, targets = R.calc_gae(r, d, v, 0.95, 0.0)
    np.testing.assert_array_equal(adv, r + 0.95 * (1 - d) * v[1:] - v[:-1])
    np.testing.assert_allclose(targets, adv + v[:-1])


def test_gae_monte_carlo_case():
    adv, _ = R.calc_gae([1.0, 2.0, 3.0], [0, 0, 1], np.zeros(4), 1.0, 1.0)
    np.testing.assert_array_equal(adv, [6.0, 5.0, 3.0])


def test_gae_requires_bootstrap_value():
    with pytest.raises(ValueError, match="bootstrap"):
        R.calc_gae([1.0, 2.0], [0, 0], [0.0, 0.0], 0.9, 0.9)


@settings(max_examples=100, deadline=None)
@given(st.integers(1, 64), st.floats(0.0, 1.0), st.floats(0.0, 1.0), st.integers(0, 2**31))
def test_gae_matches_double_sum_oracle(T, gamma, lam, seed):
    rng = np.random.default_rng(seed)
    r, v = rng.normal(size=T), rng.normal(size=T + 1)
    d = (rng.random(T) < 0.2).astype(float)
    adv, _ = R.calc_gae(r, d, v, gamma, lam)
    np.testing.assert_allclose(adv, oracles.gae_oracle(r, d, v, gamma, lam), rtol=0, atol=1e-12)


def test_gae_with_lambda_one_equals_discounted_minus_values_when_episode_ends():
    rng = np.random.default_rng(3)
    r, v = rng.normal(size=10), rng.normal(size=11)
    d = np.zeros(10)
    d[-1] = 1
    adv, _ = R.calc_gae(r, d, v, 0.9, 1.0)
    np.testing.assert_allclose(adv, R.discounted_returns(r, d, 0.9) - v[:-1], atol=1e-12)


# --- standardization ------------------------------------------------------------

def test_standardize_two_points():
    np.testing.assert_array_equal(R.standardize_advantages([1.0, 3.0]), [-1.0, 1.0])


def test_standardize_constant_is_zero():
    np.testing.assert_array_equal(R.standardize_advantages(np.full(5, 4.2)), 0.0)


def test_standardize_too_short():
    with pytest.raises(ValueError):
        R.standardize_advantages([1.0])


@settings(max_examples=50, deadline=None)
@given(arrays(np.float64, st.integers(2, 100), elements=st.floats(-1e3, 1e3)))
def test_standardize_mean_zero(x):
    assert abs(R.standardize_advantages(x).mean()) < 1e-10


# --- policy losses --------------------------------------------------------------

def test_reinforce_zero_returns():
    assert losses.reinforce_loss(np.array([-1.0, -2.0]), np.zeros(2), np.ones(2), 0.0) == 0.0


def test_reinforce_arithmetic():
    assert losses.reinforce_loss(np.array([-1.0]), np.array([2.0]), np.array([0.5]), 0.0) == 2.0


def test_reinforce_length_mismatch():
    with pytest.raises(ValueError, match="length"):
        losses.reinforce_loss(np.zeros(2), np.zeros(3), np.zeros(2), 0.0)


def test_a2c_zero_case_and_arithmetic():
    z = np.zeros(3)
    v = np.array([1.0, 2.0, 3.0])
    assert losses.a2c_loss(z - 1, z, v, v, z + 1, 0.0, 0.5) == 0.0
    loss = losses.a2c_loss(np.zeros(1), np.zeros(1), np.array([1.0]), np.array([3.0]), np.zeros(1), 0.0, 1.0)
    assert loss == 4.0


def test_a2c_grad_matches_finite_differences():
    rng = np.random.default_rng(4)
    lp, adv, vp, vt, ent = (rng.normal(size=5) for _ in range(5))
    g_lp, g_v, g_ent = losses.a2c_loss_grad(lp, adv, vp, vt, ent, 0.01, 0.5)
    f = lambda lp_, vp_, ent_: losses.a2c_loss(lp_, adv, vp_, vt, ent_, 0.01, 0.5)
    np.testing.assert_allclose(g_lp, oracles.central_difference(lambda x: f(x, vp, ent), lp), atol=1e-8)
    np.testing.assert_allclose(g_v, oracles.central_difference(lambda x: f(lp, x, ent), vp), atol=1e-8)
    np.testing.assert_allclose(g_ent, oracles.central_difference(lambda x: f(lp, vp, x), ent), atol=1e-8)


def test_ppo_on_policy_start():
    adv = np.array([1.0, -2.0, 0.5])
    lp = np.array([-0.3, -1.2, -2.0])
    assert losses.ppo_policy_loss(lp, lp, adv, 0.2) == pytest.approx(-adv.mean())


def test_ppo_clip_cases():
    assert losses.ppo_policy_loss(np.log([1.5]), np.zeros(1), np.ones(1), 0.2) == pytest.approx(-1.2)
    assert losses.ppo_policy_loss(np.log([0.5]), np.zeros(1), -np.ones(1), 0.2) == pytest.approx(0.8)


def test_ppo_grad_zero_on_clipped_branch():
    g, ratio = losses.ppo_policy_loss_grad(np.log([1.5, 1.1]), np.zeros(2), np.ones(2), 0.2)
    assert g[0] == 0.0 and g[1] == pytest.approx(-1.1 / 2)
    np.testing.assert_allclose(ratio, [1.5, 1.1])


def test_ppo_grad_matches_finite_differences_off_kink():
    rng = np.random.default_rng(5)
    old = rng.normal(size=20)
    new = old + rng.normal(scale=0.4, size=20)
    ratio = np.exp(new - old)
    keep = (np.abs(ratio - 0.8) > 1e-3) & (np.abs(ratio - 1.2) > 1e-3)
    new, old = new[keep], old[keep]
    adv = rng.normal(size=len(new))
    g, _ = losses.ppo_policy_loss_grad(new, old, adv, 0.2)
    num = oracles.central_difference(lambda x: losses.ppo_policy_loss(x, old, adv, 0.2), new)
    np.testing.assert_allclose(g, num, atol=1e-8)


# --- Q targets ----------------------------------------------------------------------

def _batch(rewards, dones):
    n = len(rewards)
    return Batch(np.zeros((n, 1)), np.zeros(n), np.asarray(rewards, float), np.zeros((n, 1)), np.asarray(dones, float))


def test_dqn_target_cases():
    b = _batch([0.0, 2.0], [0, 1])
    q = np.array([[5.0, 3.0], [100.0, 7.0]])
    np.testing.assert_allclose(losses.dqn_target(b, q, 0.9), [4.5, 2.0])


def test_dqn_target_matches_loop():
    rng = np.random.default_rng(6)
    n, k = 17, 4
    b = _batch(rng.normal(size=n), rng.random(n) < 0.3)
    q = rng.normal(size=(n, k))
    ref = np.zeros(n)
    for i in range(n):
        best = -np.inf
        for a in range(k):
            best = max(best, q[i, a])
        ref[i] = b.rewards[i] + (0.0 if b.dones[i] else 0.95 * best)
    np.testing.assert_array_equal(losses.dqn_target(b, q, 0.95), ref)


def test_ddqn_target_decouples_selection():
    b = _batch([0.0], [0])
    assert losses.ddqn_target(b, np.array([[1.0, 2.0]]), np.array([[5.0, 3.0]]), 0.9)[0] == pytest.approx(2.7)
    assert losses.ddqn_target(_batch([1.5], [1]), np.array([[1.0, 2.0]]), np.array([[5.0, 3.0]]), 0.9)[0] == 1.5


def test_ddqn_equals_dqn_when_nets_equal():
    rng = np.random.default_rng(7)
    b = _batch(rng.normal(size=9), rng.random(9) < 0.3)
    q = rng.normal(size=(9, 3))
    np.testing.assert_array_equal(losses.ddqn_target(b, q, q, 0.9), losses.dqn_target(b, q, 0.9))


def test_q_target_shape_mismatch():
    with pytest.raises(ValueError):
        losses.dqn_target(_batch([0.0, 1.0], [0, 0]), np.zeros((3, 2)), 0.9)
    with pytest.raises(ValueError):
        losses.ddqn_target(_batch([0.0], [0]), np.zeros((1, 2)), np.zeros((1, 3)), 0.9)


def test_discounted_returns_oracle():
    rng = np.random.default_rng(8)
    r = rng.normal(size=30)
    d = (rng.random(30) < 0.2).astype(float)
    np.testing.assert_allclose(R.discounted_returns(r, d, 0.97), oracles.discounted_oracle(r, d, 0.97), atol=1e-12)
