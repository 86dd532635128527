"""Built-in environments, preprocessing and a synchronous vector env.

Dynamics are pure Python floats so a lane of a vector env and a scalar env
given the same seed produce bit-identical trajectories. Every state handed
out is a freshly allocated array.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np


@dataclass
class EnvSpec:
    name: str = "cartpole"
    max_frame: int = 100000
    max_episode_steps: int | None = None
    num_envs: int = 1
    reward_clip: dict | None = None
    normalize_state: bool = False

    def violations(self) -> list[str]:
        out = []
        if self.name not in ENV_REGISTRY:
            out.append(f"env.name {self.name!r} not in registry {sorted(ENV_REGISTRY)}")
        if self.max_frame < 0:
            out.append("env.max_frame must be >= 0")
        if self.max_episode_steps is not None and self.max_episode_steps < 1:
            out.append("env.max_episode_steps must be >= 1")
        if self.num_envs < 1:
            out.append("env.num_envs must be >= 1")
        if self.reward_clip is not None:
            if set(self.reward_clip) != {"lo", "hi"}:
                out.append("env.reward_clip must have exactly the keys lo, hi")
            elif not self.reward_clip["lo"] <= self.reward_clip["hi"]:
                out.append("env.reward_clip requires lo <= hi")
        return out


@dataclass(frozen=True)
class Discrete:
    n: int


@dataclass(frozen=True)
class Box:
    dim: int
    low: float = -1.0
    high: float = 1.0


@dataclass
class StepResult:
    state: np.ndarray
    reward: float
    done: bool
    info: dict = field(default_factory=dict)


# --- cart-pole -------------------------------------------------------------

CARTPOLE = dict(gravity=9.8, masscart=1.0, masspole=0.1, length=0.5, force_mag=10.0,
                tau=0.02, x_threshold=2.4, theta_threshold=12 * 2 * math.pi / 360,
                max_episode_steps=500)


def cartpole_reset(rng: np.random.Generator) -> np.ndarray:
    return rng.uniform(-0.05, 0.05, size=4)


def cartpole_step(state, action) -> StepResult:
    """Classic cart-pole, Euler integration. The time limit is the caller's job."""
    if action not in (0, 1):
        raise ValueError(f"cart-pole action must be 0 or 1, got {action!r}")
    c = CARTPOLE
    x, x_dot, theta, theta_dot = (float(v) for v in state)
    total_mass = c["masspole"] + c["masscart"]
    polemass_length = c["masspole"] * c["length"]
    force = c["force_mag"] if action == 1 else -c["force_mag"]
    costheta, sintheta = math.cos(theta), math.sin(theta)
    temp = (force + polemass_length * theta_dot * theta_dot * sintheta) / total_mass
    thetaacc = (c["gravity"] * sintheta - costheta * temp) / (
        c["length"] * (4.0 / 3.0 - c["masspole"] * costheta * costheta / total_mass))
    xacc = temp - polemass_length * thetaacc * costheta / total_mass
    dt = c["tau"]
    x = x + dt * x_dot
    x_dot = x_dot + dt * xacc
    theta = theta + dt * theta_dot
    theta_dot = theta_dot + dt * thetaacc
    done = abs(x) > c["x_threshold"] or abs(theta) > c["theta_threshold"]
    return StepResult(np.array([x, x_dot, theta, theta_dot]), 1.0, bool(done))


# --- pendulum ----------------------------------------------------------------

PENDULUM = dict(max_speed=8.0, max_torque=2.0, dt=0.05, g=10.0, m=1.0, l=1.0,
                max_episode_steps=200)


def _wrap(th: float) -> float:
    return ((th + math.pi) % (2 * math.pi)) - math.pi


def pendulum_reset(rng: np.random.Generator) -> np.ndarray:
    """Internal state (theta, theta_dot); use pendulum_obs for the observation."""
    return np.array([rng.uniform(-math.pi, math.pi), rng.uniform(-1.0, 1.0)])


def pendulum_obs(state) -> np.ndarray:
    th, thdot = float(state[0]), float(state[1])
    return np.array([math.cos(th), math.sin(th), thdot])


def pendulum_step(state, action) -> StepResult:
    """Swing-up step; action in [-1, 1] is clipped then scaled by max_torque.

    Returns the new internal (theta, theta_dot) state; the observation is
    pendulum_obs of it.
    """
    p = PENDULUM
    a = float(np.clip(np.asarray(action, dtype=np.float64).reshape(-1)[0], -1.0, 1.0))
    torque = a * p["max_torque"]
    th, thdot = float(state[0]), float(state[1])
    cost = _wrap(th) ** 2 + 0.1 * thdot ** 2 + 0.001 * torque ** 2
    newthdot = thdot + (3.0 * p["g"] / (2.0 * p["l"]) * math.sin(th)
                        + 3.0 / (p["m"] * p["l"] ** 2) * torque) * p["dt"]
    newthdot = min(max(newthdot, -p["max_speed"]), p["max_speed"])
    newth = th + newthdot * p["dt"]
    return StepResult(np.array([newth, newthdot]), -cost, False)


# --- chain MDP and bandit ----------------------------------------------------

CHAIN = dict(n_states=5, max_episode_steps=100)


def chain_mdp_reset(rng=None) -> int:
    return 0


def chain_mdp_step(s: int, action) -> tuple[int, float, bool]:
    if action not in (0, 1):
        raise ValueError(f"chain action must be 0 (left) or 1 (right), got {action!r}")
    goal = CHAIN["n_states"] - 1
    s2 = min(s + 1, goal) if action == 1 else max(s - 1, 0)
    return s2, (1.0 if s2 == goal else 0.0), s2 == goal


def chain_q_star(gamma: float, n_states: int = 5, iters: int = 1000) -> np.ndarray:
    """Optimal Q over non-terminal states by value iteration, shape (n_states - 1, 2)."""
    q = np.zeros((n_states - 1, 2))
    for _ in range(iters):
        v = np.append(q.max(axis=1), 0.0)  # terminal state has value 0
        new = np.zeros_like(q)
        for s in range(n_states - 1):
            for a in (0, 1):
                s2 = min(s + 1, n_states - 1) if a == 1 else max(s - 1, 0)
                r = 1.0 if s2 == n_states - 1 else 0.0
                new[s, a] = r + gamma * v[s2] * (s2 != n_states - 1)
        if np.max(np.abs(new - q)) < 1e-15:
            return new
        q = new
    return q


# --- environment classes -----------------------------------------------------

class Env:
    """Episode bookkeeping around a pure step function."""

    name = "base"
    observation_dim = 0
    action_space: Discrete | Box = Discrete(1)
    default_max_episode_steps = 1000
    constants: dict = {}

    def __init__(self, seed=None, max_episode_steps: int | None = None):
        self.rng = np.random.default_rng(seed)
        self.max_episode_steps = max_episode_steps or self.default_max_episode_steps
        self._state = None
        self.steps = 0
        self.episode_return = 0.0

    @property
    def discrete(self) -> bool:
        return isinstance(self.action_space, Discrete)

    def _reset(self):
        raise NotImplementedError

    def _step(self, action) -> StepResult:
        raise NotImplementedError

    def _obs(self) -> np.ndarray:
        return np.array(self._state, dtype=np.float64)

    def reset(self) -> np.ndarray:
        self._reset()
        self.steps = 0
        self.episode_return = 0.0
        return self._obs()

    def step(self, action) -> StepResult:
        result = self._step(action)
        self.steps += 1
        self.episode_return += result.reward
        truncated = not result.done and self.steps >= self.max_episode_steps
        done = result.done or truncated
        info = {"truncated": truncated}
        if done:
            info["episode_return"] = self.episode_return
            info["episode_length"] = self.steps
        return StepResult(self._obs(), result.reward, done, info)

    @classmethod
    def describe(cls) -> dict:
        return {"name": cls.name, "observation_dim": cls.observation_dim,
                "action_space": repr(cls.action_space), "constants": dict(cls.constants)}


class CartPole(Env):
    name = "cartpole"
    observation_dim = 4
    action_space = Discrete(2)
    default_max_episode_steps = CARTPOLE["max_episode_steps"]
    constants = CARTPOLE

    def _reset(self):
        self._state = cartpole_reset(self.rng)

    def _step(self, action):
        r = cartpole_step(self._state, int(action))
        self._state = r.state
        return r


class Pendulum(Env):
    name = "pendulum"
    observation_dim = 3
    action_space = Box(1)
    default_max_episode_steps = PENDULUM["max_episode_steps"]
    constants = PENDULUM

    def _reset(self):
        self._state = pendulum_reset(self.rng)

    def _obs(self):
        return pendulum_obs(self._state)

    def _step(self, action):
        r = pendulum_step(self._state, action)
        self._state = r.state
        return r


class Chain5(Env):
    name = "chain5"
    observation_dim = CHAIN["n_states"]
    action_space = Discrete(2)
    default_max_episode_steps = CHAIN["max_episode_steps"]
    constants = CHAIN

    def _reset(self):
        self._state = chain_mdp_reset(self.rng)

    def _obs(self):
        obs = np.zeros(self.observation_dim)
        obs[self._state] = 1.0
        return obs

    def _step(self, action):
        s2, reward, done = chain_mdp_step(self._state, int(action))
        self._state = s2
        return StepResult(None, reward, done)


class Bandit2(Env):
    """One-step episodes; arm 1 pays 1, arm 0 pays 0."""

    name = "bandit2"
    observation_dim = 1
    action_space = Discrete(2)
    default_max_episode_steps = 1
    constants = dict(rewards=(0.0, 1.0))

    def _reset(self):
        self._state = np.ones(1)

    def _step(self, action):
        if int(action) not in (0, 1):
            raise ValueError(f"bandit action must be 0 or 1, got {action!r}")
        return StepResult(None, self.constants["rewards"][int(action)], True)


class Synthetic(Env):
    """Near-free dynamics for throughput measurement."""

    name = "synthetic"
    observation_dim = 4
    action_space = Discrete(2)
    default_max_episode_steps = 100
    constants = dict(episode_length=100)

    def _reset(self):
        self._state = self.rng.uniform(-1.0, 1.0, size=4)

    def _step(self, action):
        return StepResult(None, float(action), False)


ENV_REGISTRY: dict[str, type[Env]] = {
    cls.name: cls for cls in (CartPole, Pendulum, Chain5, Bandit2, Synthetic)
}


def register_env(cls: type[Env]) -> type[Env]:
    ENV_REGISTRY[cls.name] = cls
    return cls


def make_env(name: str, seed=None, max_episode_steps: int | None = None) -> Env:
    try:
        cls = ENV_REGISTRY[name]
    except KeyError:
        raise ValueError(f"unknown env {name!r}; known: {sorted(ENV_REGISTRY)}") from None
    return cls(seed, max_episode_steps)


def lane_seeds(seed: int, num_envs: int) -> list[int]:
    """Independent per-lane seeds derived from one session seed."""
    return [int(np.random.SeedSequence([int(seed), lane]).generate_state(1, np.uint64)[0])
            for lane in range(num_envs)]


@dataclass
class VectorStepResult:
    states: np.ndarray
    rewards: np.ndarray
    dones: np.ndarray
    infos: list


class VectorEnv:
    """Lanes stepped in lockstep; finished lanes are reset automatically.

    For a lane that finished, ``states`` holds the fresh reset state and its
    info carries ``terminal_state`` plus the episode statistics.
    """

    def __init__(self, name: str, seeds, max_episode_steps: int | None = None):
        self.envs = [make_env(name, s, max_episode_steps) for s in seeds]
        self.num_envs = len(self.envs)
        self.observation_dim = self.envs[0].observation_dim
        self.action_space = self.envs[0].action_space

    def reset(self) -> np.ndarray:
        return np.array([env.reset() for env in self.envs])

    def step(self, actions) -> VectorStepResult:
        if len(actions) != self.num_envs:
            raise ValueError(f"got {len(actions)} actions for {self.num_envs} lanes")
        states, rewards, dones, infos = [], [], [], []
        for env, action in zip(self.envs, actions):
            r = env.step(action)
            info = r.info
            state = r.state
            if r.done:
                info["terminal_state"] = state
                state = env.reset()
            states.append(state)
            rewards.append(r.reward)
            dones.append(r.done)
            infos.append(info)
        return VectorStepResult(np.array(states), np.array(rewards), np.array(dones), infos)


def vector_reset(venv: VectorEnv) -> np.ndarray:
    return venv.reset()


def vector_step(venv: VectorEnv, actions) -> VectorStepResult:
    return venv.step(actions)


class RunningStats:
    """Welford running mean/variance per state dimension."""

    def __init__(self, dim: int):
        self.count = 0
        self.mean = np.zeros(dim)
        self.m2 = np.zeros(dim)

    def update(self, x) -> None:
        for row in np.atleast_2d(x):
            self.count += 1
            delta = row - self.mean
            self.mean = self.mean + delta / self.count
            self.m2 = self.m2 + delta * (row - self.mean)

    @property
    def std(self) -> np.ndarray:
        var = self.m2 / self.count if self.count > 0 else np.ones_like(self.m2)
        return np.maximum(np.sqrt(var), 1e-8)

    def normalize(self, x) -> np.ndarray:
        return (np.asarray(x, dtype=np.float64) - self.mean) / self.std


def clip_reward(reward, env_spec: EnvSpec):
    if env_spec.reward_clip is None:
        return reward
    return np.clip(reward, env_spec.reward_clip["lo"], env_spec.reward_clip["hi"])


def preprocess(state, reward, env_spec: EnvSpec, running_stats: RunningStats | None, update: bool = True):
    """Returns (state', reward'); the raw reward is left for the caller to keep."""
    if env_spec.normalize_state:
        if update:
            running_stats.update(state)
        state = running_stats.normalize(state)
    return state, clip_reward(reward, env_spec)
