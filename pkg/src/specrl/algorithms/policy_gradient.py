"""REINFORCE, advantage actor-critic (n-step and GAE) and PPO.

PPO reuses the actor-critic machinery and only changes the policy loss and
the training loop; its "old policy" is a snapshot of log-probs taken before
the first update on a batch.
"""
from __future__ import annotations

import numpy as np

from .. import distributions as D
from ..memory import Transition
from . import losses
from . import returns as R
from .base import Agent


class PolicyOps:
    """Sampling, log-probs and head gradients for the policy output heads."""

    def __init__(self, discrete: bool):
        self.discrete = discrete

    def sample(self, outs, rng):
        if self.discrete:
            return D.categorical_sample(outs[0], rng), None
        return D.tanh_gaussian_sample(outs[0], outs[1], rng)

    def greedy(self, outs):
        if self.discrete:
            return np.argmax(outs[0], axis=-1)
        return D.tanh_gaussian_deterministic(outs[0])

    def log_prob_entropy(self, outs, key):
        """``key`` is the action index (discrete) or pre-squash sample u (continuous)."""
        if self.discrete:
            return D.categorical_log_prob(outs[0], key), D.categorical_entropy(outs[0])
        return D.tanh_gaussian_log_prob(outs[0], outs[1], key), D.gaussian_entropy(outs[1])

    def head_grads(self, outs, key, d_logp, d_ent):
        if self.discrete:
            g = (D.categorical_log_prob_grad(outs[0], key) * d_logp[:, None]
                 + D.categorical_entropy_grad(outs[0]) * d_ent[:, None])
            return [g]
        mean, raw_log_std = outs
        log_std = D.clamp_log_std(raw_log_std)
        var = np.exp(2.0 * log_std)
        diff = key - mean
        g_mean = d_logp[:, None] * diff / var
        g_log_std = d_logp[:, None] * (diff * diff / var - 1.0) + d_ent[:, None]
        g_log_std = np.where(raw_log_std == log_std, g_log_std, 0.0)
        return [g_mean, g_log_std]


class Reinforce(Agent):
    name = "reinforce"

    def __init__(self, *args, **kwargs):
        super().__init__(*args, **kwargs)
        self.pi = PolicyOps(self.discrete)
        self._make_net("policy", self._policy_heads())
        self._pending_u = None

    def _policy_outputs(self, states):
        return self.nets["policy"](states)

    def act(self, states, mode="train"):
        outs = self._policy_outputs(self.check_state(states))
        if mode == "eval":
            return self.pi.greedy(outs)
        actions, u = self.pi.sample(outs, self.rng)
        self._pending_u = u
        return actions

    def observe(self, states, actions, rewards, next_states, dones, truncated):
        for lane in range(len(rewards)):
            extras = {"truncated": float(truncated[lane])}
            if not self.discrete:
                extras["u"] = self._pending_u[lane]
            self.memory.add(Transition(states[lane], actions[lane], rewards[lane], next_states[lane],
                                       bool(dones[lane]), extras), lane)
        self.frame += len(rewards)

    def _key(self, batch):
        return batch.actions.astype(np.int64) if self.discrete else batch.extras["u"]

    def train(self):
        if self.memory.complete_size() < self.algo.training_frequency:
            return None
        batch = self.memory.drain_episodes()
        rets = R.discounted_returns(batch.rewards, batch.dones, self.algo.gamma)
        if self.algo.standardize_advantages and len(rets) > 1:
            rets = R.standardize_advantages(rets)
        return self._update(batch.states, self._key(batch), rets)

    def _update(self, states, key, rets):
        """One policy-gradient step with fixed returns."""
        net = self.nets["policy"]
        outs, cache = net.forward_train(states)
        logp, ent = self.pi.log_prob_entropy(outs, key)
        loss = losses.reinforce_loss(logp, rets, ent, self.algo.entropy_coef)
        self._check_finite(loss=loss)
        d_logp, d_ent = losses.reinforce_loss_grad(logp, rets, ent, self.algo.entropy_coef)
        grads, _ = net.backward(states, self.pi.head_grads(outs, key, d_logp, d_ent), cache)
        norm = self.apply_grads("policy", grads)
        self.train_steps += 1
        return {"loss": loss, "policy_loss": loss, "entropy": float(np.mean(ent)), "grad_norm": norm}


class ActorCritic(Agent):
    """A2C with n-step returns or GAE, shared-body or separate actor/critic nets."""

    name = "a2c"

    def __init__(self, *args, **kwargs):
        super().__init__(*args, **kwargs)
        self.pi = PolicyOps(self.discrete)
        self.use_gae = self.algo.name in ("a2c_gae", "ppo")
        self.shared = self.spec.net.shared
        if self.shared:
            self._make_net("ac", self._policy_heads() + [(1, "identity")])
        else:
            self._make_net("policy", self._policy_heads())
            self._make_net("critic", [(1, "identity")], lr=self.spec.net.critic_lr)
        self._pending_u = None

    act = Reinforce.act
    observe = Reinforce.observe
    _key = Reinforce._key

    def _policy_outputs(self, states):
        if self.shared:
            return self.nets["ac"](states)[:-1]
        return self.nets["policy"](states)

    def values(self, states) -> np.ndarray:
        if self.shared:
            return self.nets["ac"](states)[-1][:, 0]
        return self.nets["critic"](states)[0][:, 0]

    def compute_targets(self, batch):
        """Advantages and value targets with pre-update values, lane by lane."""
        algo = self.algo
        values = self.values(batch.states)
        rewards = batch.rewards.copy()
        truncated = batch.extras["truncated"] > 0
        # time-limit ends bootstrap from the critic instead of counting as terminal
        need = truncated.copy()
        lane_ends = [sl.stop - 1 for sl in batch.lane_slices() if sl.stop > sl.start]
        need[lane_ends] = True
        next_v = np.zeros(len(rewards))
        if np.any(need):
            next_v[need] = self.values(batch.next_states[need])
        rewards[truncated] += algo.gamma * next_v[truncated]
        adv = np.zeros(len(rewards))
        v_targets = np.zeros(len(rewards))
        for sl in batch.lane_slices():
            if sl.stop == sl.start:
                continue
            v_boot = next_v[sl.stop - 1]
            r, d, v = rewards[sl], batch.dones[sl], values[sl]
            if self.use_gae:
                adv[sl], v_targets[sl] = R.calc_gae(r, d, np.append(v, v_boot), algo.gamma, algo.lam)
            else:
                v_targets[sl] = R.calc_nstep_returns(r, d, v_boot, algo.gamma, algo.num_step_returns, values=v)
                adv[sl] = v_targets[sl] - v
        return adv, v_targets, values

    def _normalized(self, adv):
        if self.algo.standardize_advantages and len(adv) > 1:
            return R.standardize_advantages(adv)
        return adv

    def _update(self, states, key, adv, v_targets, policy_grad_fn):
        """One gradient step on the combined loss; ``policy_grad_fn(logp)`` gives
        (policy loss, d loss / d logp)."""
        algo = self.algo
        if self.shared:
            net = self.nets["ac"]
            outs, cache = net.forward_train(states)
            pol_outs, v_pred = outs[:-1], outs[-1][:, 0]
        else:
            pol_outs, pcache = self.nets["policy"].forward_train(states)
            vouts, vcache = self.nets["critic"].forward_train(states)
            v_pred = vouts[0][:, 0]
        logp, ent = self.pi.log_prob_entropy(pol_outs, key)
        policy_loss, d_logp = policy_grad_fn(logp)
        n = len(v_pred)
        value_loss = float(np.mean((v_pred - v_targets) ** 2))
        entropy = float(np.mean(ent))
        loss = policy_loss + algo.val_loss_coef * value_loss - algo.entropy_coef * entropy
        self._check_finite(loss=loss, policy_loss=policy_loss, value_loss=value_loss)
        d_ent = np.full(n, -algo.entropy_coef / n)
        d_v = (2.0 * algo.val_loss_coef * (v_pred - v_targets) / n)[:, None]
        pol_grads = self.pi.head_grads(pol_outs, key, d_logp, d_ent)
        if self.shared:
            grads, _ = net.backward(states, pol_grads + [d_v], cache)
            norm = self.apply_grads("ac", grads)
        else:
            g_pol, _ = self.nets["policy"].backward(states, pol_grads, pcache)
            g_val, _ = self.nets["critic"].backward(states, [d_v], vcache)
            norm = self.apply_grads("policy", g_pol)
            self.apply_grads("critic", g_val)
        self.train_steps += 1
        return {"loss": loss, "policy_loss": policy_loss, "value_loss": value_loss,
                "entropy": entropy, "v_mean": float(np.mean(v_pred)), "grad_norm": norm}

    def _ready(self) -> bool:
        return self.memory.size >= self.algo.training_frequency

    def train(self):
        if not self._ready():
            return None
        return self.train_on(self.memory.drain())

    def train_on(self, batch):
        adv, v_targets, _ = self.compute_targets(batch)
        adv = self._normalized(adv)

        def pg(logp):
            return float(-np.mean(logp * adv)), -adv / len(adv)

        return self._update(batch.states, self._key(batch), adv, v_targets, pg)


class PPO(ActorCritic):
    name = "ppo"

    def train_on(self, batch):
        algo = self.algo
        adv, v_targets, _ = self.compute_targets(batch)
        adv = self._normalized(adv)
        key = self._key(batch)
        old_logp, _ = self.pi.log_prob_entropy(self._policy_outputs(batch.states), key)
        n = len(adv)
        metrics = []
        first_ratio = None
        for _ in range(algo.ppo_epochs):
            order = self.rng.permutation(n)
            for idx in np.array_split(order, algo.ppo_minibatches):
                if len(idx) == 0:
                    continue
                mb_adv, mb_old = adv[idx], old_logp[idx]

                def pg(logp, mb_adv=mb_adv, mb_old=mb_old):
                    loss = losses.ppo_policy_loss(logp, mb_old, mb_adv, algo.clip_eps)
                    grad, ratio = losses.ppo_policy_loss_grad(logp, mb_old, mb_adv, algo.clip_eps)
                    pg.ratio = float(np.mean(ratio))
                    return loss, grad

                mb_key = key[idx]
                m = self._update(batch.states[idx], mb_key, mb_adv, v_targets[idx], pg)
                m["ratio_mean"] = pg.ratio
                if first_ratio is None:
                    first_ratio = pg.ratio
                metrics.append(m)
        out = {k: float(np.mean([m[k] for m in metrics])) for k in metrics[0]}
        out["first_ratio_mean"] = first_ratio
        return out
