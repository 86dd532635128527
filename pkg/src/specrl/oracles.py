"""Slow reference implementations used to check the fast code paths.

Everything here is written for obviousness rather than speed: direct sums
instead of scans, linear scans instead of trees, central differences instead
of backprop.
"""
from __future__ import annotations

import numpy as np

from .algorithms import losses, make_agent
from .algorithms.base import AgentSpec, AlgorithmSpec
from .envs import Box, Discrete
from .memory import Batch, MemorySpec
from .netcore import NetSpec


# --- returns -------------------------------------------------------------------

def gae_oracle(rewards, dones, values, gamma, lam) -> np.ndarray:
    """A_t = sum_l (gamma lam)^l delta_{t+l}, truncated at the first done, O(T^2)."""
    T = len(rewards)
    deltas = [rewards[t] + gamma * values[t + 1] * (1.0 - dones[t]) - values[t] for t in range(T)]
    adv = np.zeros(T)
    for t in range(T):
        total, weight = 0.0, 1.0
        for k in range(t, T):
            total += weight * deltas[k]
            if dones[k]:
                break
            weight *= gamma * lam
        adv[t] = total
    return adv


def nstep_oracle(rewards, dones, v_bootstrap, values, gamma, n) -> np.ndarray:
    """Direct n-step sum per timestep; ``values`` may be None when n >= T."""
    T = len(rewards)
    out = np.zeros(T)
    for t in range(T):
        total, disc, ended = 0.0, 1.0, False
        for i in range(t, min(t + n, T)):
            total += disc * rewards[i]
            disc *= gamma
            if dones[i]:
                ended = True
                break
        if not ended:
            j = min(t + n, T)
            total += disc * (v_bootstrap if j == T else values[j])
        out[t] = total
    return out


def discounted_oracle(rewards, dones, gamma) -> np.ndarray:
    T = len(rewards)
    out = np.zeros(T)
    for t in range(T):
        total, disc = 0.0, 1.0
        for i in range(t, T):
            total += disc * rewards[i]
            if dones[i]:
                break
            disc *= gamma
        out[t] = total
    return out


# --- replay ------------------------------------------------------------------------

def linear_scan_find(priorities, u: float) -> int:
    """First index whose cumulative priority exceeds u."""
    acc = 0.0
    for i, p in enumerate(priorities):
        acc += p
        if u < acc:
            return i
    return len(priorities) - 1


# --- finite differences --------------------------------------------------------

def central_difference(fn, x: np.ndarray, h: float = 1e-6) -> np.ndarray:
    x = x.copy()
    out = np.zeros_like(x)
    for i in range(len(x)):
        orig = x[i]
        x[i] = orig + h
        up = fn(x)
        x[i] = orig - h
        down = fn(x)
        x[i] = orig
        out[i] = (up - down) / (2 * h)
    return out


def relative_error(a: np.ndarray, b: np.ndarray) -> float:
    if len(a) == 0:
        return 0.0
    return float(np.max(np.abs(a - b) / np.maximum(1.0, np.maximum(np.abs(a), np.abs(b)))))


class CaptureUpdater:
    """Records gradients instead of applying them, leaving parameters untouched."""

    def __init__(self):
        self.grads = {}

    def apply(self, agent, name, grads) -> float:
        self.grads[name] = grads.flat.copy()
        return 0.0


def _flat(agent, names) -> np.ndarray:
    return np.concatenate([agent.nets[n].params.flat for n in names])


def _set_flat(agent, names, x) -> None:
    offset = 0
    for n in names:
        p = agent.nets[n].params
        p.flat[:] = x[offset:offset + p.size]
        offset += p.size


def check_update(agent, names, run_update) -> float:
    """Max relative error between captured analytic grads and central differences.

    ``run_update()`` performs one update through ``agent.apply_grads`` and
    returns its scalar loss; all its non-parameter inputs must be fixed.
    """
    cap = CaptureUpdater()
    agent.updater = cap
    x0 = _flat(agent, names)
    run_update()
    analytic = np.concatenate([cap.grads.get(n, np.zeros(agent.nets[n].params.size)) for n in names])

    def loss_at(x):
        _set_flat(agent, names, x)
        return run_update()

    numeric = central_difference(loss_at, x0)
    _set_flat(agent, names, x0)
    return relative_error(analytic, numeric)


def _random_net(rng) -> NetSpec:
    hid = [int(rng.integers(3, 7)) for _ in range(int(rng.integers(1, 3)))]
    return NetSpec(hid_layers=hid, activation="tanh", loss="mse")


def _batch(rng, n, obs_dim, actions, extras=None) -> Batch:
    return Batch(rng.normal(size=(n, obs_dim)), actions, rng.normal(size=n),
                 rng.normal(size=(n, obs_dim)), (rng.random(n) < 0.2).astype(np.float64), extras or {})


def loss_gradient_errors(rng: np.random.Generator, n_nets: int = 100, batch: int = 6) -> dict[str, float]:
    """Worst relative error per loss over ``n_nets`` random small nets."""
    obs_dim, n_act, act_dim = 3, 3, 2
    worst: dict[str, float] = {}

    def record(key, err):
        worst[key] = max(worst.get(key, 0.0), err)

    for _ in range(n_nets):
        net = _random_net(rng)
        seed = int(rng.integers(2**31))
        disc, cont = Discrete(n_act), Box(act_dim)

        def agent_for(name, space, memory="onpolicy", **net_kw):
            ns = NetSpec(**{**net.__dict__, **net_kw})
            spec = AgentSpec(AlgorithmSpec(name=name, entropy_coef=0.05), MemorySpec(name=memory), ns)
            return make_agent(spec, obs_dim, space, np.random.default_rng(seed))

        states = rng.normal(size=(batch, obs_dim))
        a_idx = rng.integers(0, n_act, size=batch)
        u = rng.normal(size=(batch, act_dim))
        rets = rng.normal(size=batch)
        v_t = rng.normal(size=batch)

        # REINFORCE, both action types
        for space, key in ((disc, a_idx), (cont, u)):
            ag = agent_for("reinforce", space)
            err = check_update(ag, ["policy"], lambda ag=ag, key=key: ag._update(states, key, rets)["loss"])
            record("reinforce", err)

        # A2C shared-body and separate nets
        for shared in (True, False):
            ag = agent_for("a2c_gae", disc, shared=shared)

            def pg(logp):
                return float(-np.mean(logp * rets)), -rets / len(rets)

            names = ["ac"] if shared else ["policy", "critic"]
            record("a2c", check_update(ag, names, lambda ag=ag: ag._update(states, a_idx, rets, v_t, pg)["loss"]))

        # PPO: old log-probs offset from current so some ratios clip
        for space, key in ((disc, a_idx), (cont, u)):
            ag = agent_for("ppo", space)
            logp, _ = ag.pi.log_prob_entropy(ag._policy_outputs(states), key)
            old = logp + rng.normal(scale=0.3, size=batch)

            def ppo_pg(lp, old=old):
                return (losses.ppo_policy_loss(lp, old, rets, 0.2),
                        losses.ppo_policy_loss_grad(lp, old, rets, 0.2)[0])

            record("ppo", check_update(ag, ["ac"], lambda ag=ag, key=key, f=ppo_pg:
                                       ag._update(states, key, rets, v_t, f)["loss"]))

        # DQN / DDQN with mse and huber, with and without importance weights
        for loss_name in ("mse", "huber"):
            for algo in ("dqn", "ddqn_per"):
                ag = agent_for(algo, disc, memory="replay", loss=loss_name, huber_delta=0.5)
                ag.target = ag.nets["q"].params.copy()
                ag.target.flat += rng.normal(scale=0.1, size=ag.target.size)
                b = _batch(rng, batch, obs_dim, a_idx.astype(np.float64))
                w = rng.uniform(0.2, 1.0, size=batch)
                y = ag.targets(b)  # bootstrap targets are stop-gradient constants
                record(f"dqn_{loss_name}", check_update(ag, ["q"], lambda ag=ag, b=b, w=w, y=y:
                                                        ag.learn(b, w, y)["loss"]))

        # SAC critics and policy, discrete and continuous
        for space in (disc, cont):
            ag = agent_for("sac", space, memory="replay")
            acts = a_idx.astype(np.float64) if space is disc else np.tanh(u)
            b = _batch(rng, batch, obs_dim, acts)
            y = rng.normal(size=batch)
            record("sac_q", check_update(ag, ["q1"], lambda ag=ag, b=b, y=y: ag._critic_step("q1", b, y, None)[0]))
            if space is disc:
                noise = -np.log(-np.log(rng.uniform(1e-6, 1 - 1e-6, size=(batch, n_act))))
            else:
                noise = rng.normal(size=(batch, act_dim))

            def pol(ag=ag, noise=noise):
                loss, head_grads, _, cache = ag.policy_loss_and_grads(states, noise)
                grads, _ = ag.nets["policy"].backward(states, head_grads, cache)
                ag.apply_grads("policy", grads)
                return loss

            record("sac_policy_discrete" if space is disc else "sac_policy_continuous",
                   check_update(ag, ["policy"], pol))
    return worst
