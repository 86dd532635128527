"""Soft actor-critic with twin Q nets and a fixed entropy coefficient.

Continuous actions use a tanh-squashed Gaussian policy with reparameterized
samples. Discrete actions use a Gumbel-Softmax policy: acting takes the hard
(argmax) sample, while the policy loss differentiates through the relaxed
sample dotted with the per-action Q rows.
"""
from __future__ import annotations

import numpy as np

from .. import distributions as D
from ..netcore import forward, regression_loss, update_target
from .base import Agent, linear_decay
from .dqn import OffPolicyMixin


class SAC(OffPolicyMixin, Agent):
    name = "sac"

    def __init__(self, *args, **kwargs):
        super().__init__(*args, **kwargs)
        self._make_net("policy", self._policy_heads())
        critic_lr = self.spec.net.critic_lr
        if self.discrete:
            q_in, q_heads = self.obs_dim, [(self.act_dim, "identity")]
        else:
            q_in, q_heads = self.obs_dim + self.act_dim, [(1, "identity")]
        for name in ("q1", "q2"):
            self._make_net(name, q_heads, in_dim=q_in, lr=critic_lr)
        self.targets = {name: self.nets[name].params.copy() for name in ("q1", "q2")}
        self._due = 0

    # -- acting
    def gumbel_tau(self) -> float:
        a = self.algo
        if a.gumbel_tau_end is None:
            return a.gumbel_tau
        return linear_decay(a.gumbel_tau, a.gumbel_tau_end, a.gumbel_tau_decay_frames, self.frame)

    def explore_var(self) -> float:
        return self.gumbel_tau() if self.discrete else float("nan")

    def act(self, states, mode="train"):
        outs = self.nets["policy"](self.check_state(states))
        if self.discrete:
            if mode == "eval":
                return np.argmax(outs[0], axis=-1)
            hard = D.gumbel_softmax_sample(outs[0], self.gumbel_tau(), self.rng, hard=True)
            return np.argmax(hard, axis=-1)
        if mode == "eval":
            return D.tanh_gaussian_deterministic(outs[0])
        return D.tanh_gaussian_sample(outs[0], outs[1], self.rng)[0]

    # -- critic helpers
    def _q(self, params_or_name, states, actions=None):
        net = self.nets["q1"]
        params = self.nets[params_or_name].params if isinstance(params_or_name, str) else params_or_name
        x = states if self.discrete else np.hstack([states, actions])
        return forward(params, net.spec, x)[0]

    def q_target(self, batch) -> np.ndarray:
        """r + gamma (1 - done) (min target Q(s', a') - alpha log pi(a'|s')), a' fresh from the policy."""
        algo = self.algo
        outs = self.nets["policy"](batch.next_states)
        if self.discrete:
            logits = outs[0]
            g = D.sample_gumbel(logits.shape, self.rng)
            a_next = np.argmax(logits + g, axis=-1)
            logp = D.categorical_log_prob(logits, a_next)
            rows = np.arange(len(a_next))
            q1 = self._q(self.targets["q1"], batch.next_states)[rows, a_next]
            q2 = self._q(self.targets["q2"], batch.next_states)[rows, a_next]
        else:
            a_next, u = D.tanh_gaussian_sample(outs[0], outs[1], self.rng)
            logp = D.tanh_gaussian_log_prob(outs[0], outs[1], u)
            q1 = self._q(self.targets["q1"], batch.next_states, a_next)[:, 0]
            q2 = self._q(self.targets["q2"], batch.next_states, a_next)[:, 0]
        soft = np.minimum(q1, q2) - algo.sac_alpha * logp
        return batch.rewards + algo.gamma * (1.0 - batch.dones) * soft

    def _critic_step(self, name, batch, y, weights):
        net = self.nets[name]
        x = batch.states if self.discrete else np.hstack([batch.states, batch.actions])
        outs, cache = net.forward_train(x)
        q = outs[0]
        if self.discrete:
            rows = np.arange(len(y))
            actions = batch.actions.astype(np.int64)
            pred = q[rows, actions]
        else:
            pred = q[:, 0]
        if pred.shape != y.shape:
            raise ValueError(f"prediction {pred.shape} and target {y.shape} shapes differ")
        loss, d = regression_loss(net.spec, pred, y, weights)
        g = np.zeros_like(q)
        if self.discrete:
            g[rows, actions] = d
        else:
            g[:, 0] = d
        grads, _ = net.backward(x, [g], cache)
        self.apply_grads(name, grads)
        return loss, pred

    # -- policy loss and gradient
    def policy_loss_and_grads(self, states, noise):
        """Policy loss and its head gradients for a fixed noise draw.

        ``noise`` is Gumbel noise (discrete) or standard-normal noise (continuous).
        Returns (loss, head_grads, entropy estimate, cache).
        """
        alpha = self.algo.sac_alpha
        net = self.nets["policy"]
        outs, cache = net.forward_train(states)
        n = len(states)
        if self.discrete:
            logits = outs[0]
            tau = self.gumbel_tau()
            y = D.gumbel_softmax_relaxed(logits, tau, noise)
            logp = D.log_softmax(logits)
            q_min = np.minimum(self._q("q1", states), self._q("q2", states))
            per = np.sum(y * (alpha * logp - q_min), axis=1)
            loss = float(np.mean(per))
            d_y = (alpha * logp - q_min) / n
            g_logits = D.gumbel_softmax_backward(y, tau, d_y) + alpha * (y - D.softmax(logits)) / n
            entropy = float(np.mean(D.categorical_entropy(logits)))
            return loss, [g_logits], entropy, cache
        mean, raw_log_std = outs
        log_std = D.clamp_log_std(raw_log_std)
        std = np.exp(log_std)
        u = mean + std * noise
        a = np.tanh(u)
        logp = D.tanh_gaussian_log_prob(mean, raw_log_std, u)
        x = np.hstack([states, a])
        q1_out, c1 = self.nets["q1"].forward_train(x)
        q2_out, c2 = self.nets["q2"].forward_train(x)
        q1, q2 = q1_out[0][:, 0], q2_out[0][:, 0]
        use1 = q1 <= q2
        loss = float(np.mean(alpha * logp - np.where(use1, q1, q2)))
        # d(-min Q)/da through whichever critic is smaller for each sample
        _, gx1 = self.nets["q1"].backward(x, [np.where(use1, -1.0 / n, 0.0)[:, None]], c1)
        _, gx2 = self.nets["q2"].backward(x, [np.where(use1, 0.0, -1.0 / n)[:, None]], c2)
        d_a = (gx1 + gx2)[:, self.obs_dim:]
        t = a
        dcorr_du = 2.0 * t * (1.0 - t * t) / (1.0 - t * t + D.SQUASH_EPS)
        d_u = alpha / n * dcorr_du + d_a * (1.0 - t * t)
        g_mean = d_u
        g_log_std = -alpha / n + d_u * std * noise
        g_log_std = np.where(raw_log_std == log_std, g_log_std, 0.0)
        entropy = float(-np.mean(logp))
        return loss, [g_mean, g_log_std], entropy, cache

    def train_step(self):
        batch, indices, weights = self.sample_batch()
        y = self.q_target(batch)
        loss1, pred1 = self._critic_step("q1", batch, y, weights)
        loss2, _ = self._critic_step("q2", batch, y, weights)
        if indices is not None:
            self.memory.update_priorities(indices, pred1 - y)
        states = batch.states
        if self.discrete:
            noise = D.sample_gumbel((len(states), self.act_dim), self.rng)
        else:
            noise = self.rng.standard_normal((len(states), self.act_dim))
        pol_loss, head_grads, entropy, cache = self.policy_loss_and_grads(states, noise)
        self._check_finite(q1_loss=loss1, q2_loss=loss2, policy_loss=pol_loss)
        grads, _ = self.nets["policy"].backward(states, head_grads, cache)
        norm = self.apply_grads("policy", grads)
        self.train_steps += 1
        self.update_targets()
        return {"loss": loss1 + loss2 + pol_loss, "policy_loss": pol_loss, "value_loss": 0.5 * (loss1 + loss2),
                "entropy": entropy, "q_mean": float(np.mean(pred1)), "grad_norm": norm,
                "explore_var": self.explore_var()}

    def update_targets(self):
        spec = self.spec.net
        if spec.update == "polyak" or self.train_steps % spec.update_frequency == 0:
            for name in ("q1", "q2"):
                self.targets[name] = update_target(self.targets[name], self.nets[name].params, spec)
