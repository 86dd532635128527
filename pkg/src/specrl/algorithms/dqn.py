"""DQN and double DQN with prioritized replay."""
from __future__ import annotations

import numpy as np

from .. import distributions as D
from ..memory import PrioritizedReplay, Transition
from ..netcore import forward, regression_loss, update_target
from . import losses
from .base import Agent, linear_decay


class OffPolicyMixin:
    """Replay storage and the shared train schedule for off-policy agents."""

    def observe(self, states, actions, rewards, next_states, dones, truncated):
        for lane in range(len(rewards)):
            # only true terminals stop bootstrapping; time-limit ends do not
            terminal = bool(dones[lane]) and not bool(truncated[lane])
            self.memory.add(Transition(states[lane], actions[lane], rewards[lane], next_states[lane], terminal))
        prev = self.frame
        self.frame += len(rewards)
        self._due += self.frame // self.algo.training_frequency - prev // self.algo.training_frequency

    def train(self):
        algo = self.algo
        if self.frame < algo.training_start or self._due <= 0 or self.memory.size < self.memory.batch_size:
            self._due = 0
            return None
        self._due = 0
        metrics = [self.train_step() for _ in range(algo.training_iter)]
        return {k: float(np.mean([m[k] for m in metrics])) for k in metrics[0]}

    def per_beta(self) -> float:
        spec = self.spec.memory
        return linear_decay(spec.per_beta_start, spec.per_beta_end, self.max_frame, self.frame)

    def sample_batch(self):
        """(batch, indices, is_weights); indices/weights are None for uniform replay."""
        if isinstance(self.memory, PrioritizedReplay):
            return self.memory.sample(self.rng, self.per_beta())
        return self.memory.sample(self.rng), None, None


class DQN(OffPolicyMixin, Agent):
    name = "dqn"

    def __init__(self, *args, **kwargs):
        super().__init__(*args, **kwargs)
        if not self.discrete:
            raise ValueError(f"{self.algo.name} requires a discrete action space")
        self.double = self.algo.name == "ddqn_per"
        q = self._make_net("q", [(self.act_dim, "identity")])
        self.target = q.params.copy()
        self._due = 0

    def explore_var(self) -> float:
        e = self.algo.explore
        return linear_decay(e.start, e.end, e.decay_frames, self.frame)

    def q_values(self, states) -> np.ndarray:
        return self.nets["q"](self.check_state(states))[0]

    def act(self, states, mode="train"):
        q = self.q_values(states)
        if mode == "eval":
            return np.argmax(q, axis=-1)
        if self.algo.explore.method == "boltzmann":
            return D.boltzmann(q, self.explore_var(), self.rng)
        return D.epsilon_greedy(q, self.explore_var(), self.rng)

    def targets(self, batch) -> np.ndarray:
        net = self.nets["q"]
        q_next_target = forward(self.target, net.spec, batch.next_states)[0]
        if self.double:
            return losses.ddqn_target(batch, net(batch.next_states)[0], q_next_target, self.algo.gamma)
        return losses.dqn_target(batch, q_next_target, self.algo.gamma)

    def train_step(self):
        batch, indices, weights = self.sample_batch()
        metrics = self.learn(batch, weights)
        if indices is not None:
            self.memory.update_priorities(indices, self._td)
        self.train_steps += 1
        self.update_targets()
        return metrics

    def learn(self, batch, weights=None, y=None):
        """One gradient step on a fixed batch; TD errors are kept for priority updates.

        ``y`` overrides the bootstrap targets (they are constants either way).
        """
        net = self.nets["q"]
        y = self.targets(batch) if y is None else y
        outs, cache = net.forward_train(batch.states)
        q_all = outs[0]
        rows = np.arange(len(y))
        actions = batch.actions.astype(np.int64)
        q_sa = q_all[rows, actions]
        if q_sa.shape != y.shape:
            raise ValueError(f"prediction {q_sa.shape} and target {y.shape} shapes differ")
        loss, d_q = regression_loss(net.spec, q_sa, y, weights)
        self._check_finite(loss=loss)
        g = np.zeros_like(q_all)
        g[rows, actions] = d_q
        grads, _ = net.backward(batch.states, [g], cache)
        norm = self.apply_grads("q", grads)
        self._td = q_sa - y
        return {"loss": loss, "q_mean": float(np.mean(q_sa)), "grad_norm": norm,
                "explore_var": self.explore_var()}

    def update_targets(self):
        spec = self.spec.net
        if spec.update == "polyak" or self.train_steps % spec.update_frequency == 0:
            self.target = update_target(self.target, self.nets["q"].params, spec)
