"""Agent base class and the algorithm-level spec types."""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from ..envs import Box, Discrete
from ..memory import MemorySpec, make_memory
from ..netcore import Net, NetSpec

ALGORITHMS = ("reinforce", "a2c_nstep", "a2c_gae", "ppo", "dqn", "ddqn_per", "sac")
ON_POLICY = ("reinforce", "a2c_nstep", "a2c_gae", "ppo")
DISCRETE_ONLY = ("dqn", "ddqn_per")


@dataclass
class ExploreSpec:
    method: str = "epsilon_greedy"
    start: float = 1.0
    end: float = 0.05
    decay_frames: int = 10000


@dataclass
class AlgorithmSpec:
    name: str = "ppo"
    gamma: float = 0.99
    entropy_coef: float = 0.01
    val_loss_coef: float = 0.5
    lam: float = 0.95
    num_step_returns: int = 5
    clip_eps: float = 0.2
    ppo_epochs: int = 4
    ppo_minibatches: int = 4
    standardize_advantages: bool = True
    training_frequency: int = 128
    training_start: int = 0
    training_iter: int = 1
    explore: ExploreSpec = field(default_factory=ExploreSpec)
    sac_alpha: float = 0.2
    gumbel_tau: float = 1.0
    gumbel_tau_end: float | None = None
    gumbel_tau_decay_frames: int = 0

    def violations(self) -> list[str]:
        out = []
        if self.name not in ALGORITHMS:
            out.append(f"algorithm.name {self.name!r} not in {ALGORITHMS}")
        if not 0.0 <= self.gamma <= 1.0:
            out.append("gamma out of [0,1]")
        if not 0.0 <= self.lam <= 1.0:
            out.append("lam out of [0,1]")
        if self.num_step_returns < 1:
            out.append("num_step_returns must be >= 1")
        if not self.clip_eps > 0:
            out.append("clip_eps must be > 0")
        if self.ppo_epochs < 1 or self.ppo_minibatches < 1:
            out.append("ppo_epochs and ppo_minibatches must be >= 1")
        if self.training_frequency < 1:
            out.append("training_frequency must be >= 1")
        if self.training_start < 0:
            out.append("training_start must be >= 0")
        if self.training_iter < 1:
            out.append("training_iter must be >= 1")
        if self.sac_alpha < 0:
            out.append("sac_alpha must be >= 0")
        if not self.gumbel_tau > 0 or (self.gumbel_tau_end is not None and not self.gumbel_tau_end > 0):
            out.append("gumbel temperatures must be > 0")
        if self.explore.method not in ("epsilon_greedy", "boltzmann"):
            out.append("algorithm.explore.method must be 'epsilon_greedy' or 'boltzmann'")
        elif self.explore.method == "epsilon_greedy":
            if not (0 <= self.explore.start <= 1 and 0 <= self.explore.end <= 1):
                out.append("epsilon schedule values must lie in [0,1]")
        elif not (self.explore.start > 0 and self.explore.end > 0):
            out.append("boltzmann temperatures must be > 0")
        if self.explore.decay_frames < 0:
            out.append("algorithm.explore.decay_frames must be >= 0")
        return out


@dataclass
class AgentSpec:
    algorithm: AlgorithmSpec = field(default_factory=AlgorithmSpec)
    memory: MemorySpec = field(default_factory=MemorySpec)
    net: NetSpec = field(default_factory=NetSpec)


def linear_decay(start: float, end: float, decay_frames: int, frame: int) -> float:
    if decay_frames <= 0 or frame >= decay_frames:
        return end
    return start + (end - start) * frame / decay_frames


class NonFiniteLossError(FloatingPointError):
    def __init__(self, frame: int, components: dict):
        self.frame = frame
        self.components = components
        super().__init__(f"non-finite loss at frame {frame}: {components}")


class LocalUpdater:
    """Applies gradients to the agent's own nets (synchronous training)."""

    def apply(self, agent: "Agent", name: str, grads) -> float:
        return agent.nets[name].step(grads)


class Agent:
    """Owns nets, memory, optimizer state, frame counter and rng for one Session."""

    name = "base"

    def __init__(self, spec: AgentSpec, obs_dim: int, action_space, rng: np.random.Generator,
                 num_lanes: int = 1, max_frame: int = 0):
        self.spec = spec
        self.algo = spec.algorithm
        self.obs_dim = int(obs_dim)
        self.action_space = action_space
        self.discrete = isinstance(action_space, Discrete)
        if not self.discrete and not isinstance(action_space, Box):
            raise TypeError(f"unsupported action space {action_space!r}")
        self.act_dim = action_space.n if self.discrete else action_space.dim
        self.rng = rng
        self.num_lanes = num_lanes
        self.max_frame = max_frame
        self.frame = 0
        self.train_steps = 0
        self.nets: dict[str, Net] = {}
        self.memory = make_memory(spec.memory, num_lanes)
        self.updater = LocalUpdater()

    # -- construction helpers
    def _policy_heads(self):
        if self.discrete:
            return [(self.act_dim, "identity")]
        return [(self.act_dim, "identity"), (self.act_dim, "identity")]

    def _make_net(self, name: str, heads, in_dim: int | None = None, lr: float | None = None) -> Net:
        net = Net(self.spec.net.with_heads(heads), self.obs_dim if in_dim is None else in_dim, self.rng, lr)
        self.nets[name] = net
        return net

    def check_state(self, states) -> np.ndarray:
        states = np.asarray(states, dtype=np.float64)
        if states.ndim == 1:
            states = states[None, :]
        if states.shape[1] != self.obs_dim:
            raise ValueError(f"state shape {states.shape} does not match obs_dim {self.obs_dim}")
        return states

    # -- interface used by the executor
    def act(self, states, mode: str = "train") -> np.ndarray:
        raise NotImplementedError

    def observe(self, states, actions, rewards, next_states, dones, truncated) -> None:
        raise NotImplementedError

    def train(self) -> dict | None:
        raise NotImplementedError

    def apply_grads(self, name: str, grads) -> float:
        return self.updater.apply(self, name, grads)

    def parameters(self) -> dict:
        return {name: net.params for name, net in self.nets.items()}

    def explore_var(self) -> float:
        return float("nan")

    def _check_finite(self, **components) -> None:
        if not all(math.isfinite(v) for v in components.values()):
            raise NonFiniteLossError(self.frame, components)


class RandomAgent(Agent):
    """Uniform random actions in every mode; the benchmark's Random column."""

    name = "random"

    def __init__(self, obs_dim: int, action_space, rng: np.random.Generator):
        super().__init__(AgentSpec(memory=MemorySpec(name="onpolicy")), obs_dim, action_space, rng)

    def act(self, states, mode="train"):
        n = len(self.check_state(states))
        if self.discrete:
            return self.rng.integers(0, self.act_dim, size=n)
        return self.rng.uniform(-1.0, 1.0, size=(n, self.act_dim))

    def observe(self, *args) -> None:
        self.frame += self.num_lanes

    def train(self):
        return None
