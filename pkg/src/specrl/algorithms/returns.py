"""Return and advantage estimators over a single contiguous trajectory segment."""
from __future__ import annotations

import numpy as np


def _check_lengths(**arrays):
    lengths = {k: len(v) for k, v in arrays.items()}
    if len(set(lengths.values())) != 1:
        raise ValueError(f"length mismatch: {lengths}")


def calc_nstep_returns(rewards, dones, v_bootstrap: float, gamma: float, n: int, values=None) -> np.ndarray:
    """Bootstrapped n-step returns.

    R_t = sum_{k<m} gamma^k r_{t+k} + gamma^m V(s_{t+m}), where m stops early at
    a done (which also drops the bootstrap) or at the segment end, where
    ``v_bootstrap`` stands in for V(s_T). ``values[t]`` is V(s_t); it may be
    omitted only when n >= len(rewards), i.e. every bootstrap lands on s_T.
    """
    rewards = np.asarray(rewards, dtype=np.float64)
    dones = np.asarray(dones, dtype=np.float64)
    _check_lengths(rewards=rewards, dones=dones)
    if n < 1:
        raise ValueError("n must be >= 1")
    T = len(rewards)
    if values is None:
        if n < T:
            raise ValueError("values are required when n < len(rewards)")
        values = np.zeros(T)
    else:
        values = np.asarray(values, dtype=np.float64)
        _check_lengths(rewards=rewards, values=values)
    ext_values = np.append(values, v_bootstrap)
    t = np.arange(T)
    ret = np.zeros(T)
    discount = np.ones(T)
    alive = np.ones(T)
    end = np.minimum(t + n, T)
    for k in range(min(n, T)):
        idx = t + k
        active = idx < end
        safe = np.minimum(idx, T - 1)
        ret += np.where(active, alive * discount * rewards[safe], 0.0)
        alive = np.where(active, alive * (1.0 - dones[safe]), alive)
        discount = np.where(active, discount * gamma, discount)
    return ret + alive * discount * ext_values[end]


def calc_gae(rewards, dones, values, gamma: float, lam: float):
    """Generalized advantage estimation by reverse scan.

    ``values`` has T + 1 entries, the last being the bootstrap V(s_T).
    Returns (advantages, value targets = advantages + values[:T]).
    """
    rewards = np.asarray(rewards, dtype=np.float64)
    dones = np.asarray(dones, dtype=np.float64)
    values = np.asarray(values, dtype=np.float64)
    _check_lengths(rewards=rewards, dones=dones)
    T = len(rewards)
    if len(values) != T + 1:
        raise ValueError(f"values must have {T + 1} entries (one bootstrap), got {len(values)}")
    not_done = 1.0 - dones
    deltas = rewards + gamma * not_done * values[1:] - values[:-1]
    adv = np.zeros(T)
    running = 0.0
    coef = gamma * lam
    for i in range(T - 1, -1, -1):
        running = deltas[i] + coef * not_done[i] * running
        adv[i] = running
    return adv, adv + values[:-1]


def standardize_advantages(adv) -> np.ndarray:
    adv = np.asarray(adv, dtype=np.float64)
    if len(adv) < 2:
        raise ValueError("standardization needs at least 2 samples")
    centered = adv - adv.mean()
    # second pass removes the rounding residue of the first, which the std
    # floor would otherwise amplify for (near-)constant inputs
    centered -= centered.mean()
    return centered / max(centered.std(), 1e-8)


def discounted_returns(rewards, dones, gamma: float) -> np.ndarray:
    """Monte-Carlo returns within episodes (no bootstrap)."""
    rewards = np.asarray(rewards, dtype=np.float64)
    not_done = 1.0 - np.asarray(dones, dtype=np.float64)
    _check_lengths(rewards=rewards, dones=not_done)
    out = np.zeros(len(rewards))
    running = 0.0
    for i in range(len(rewards) - 1, -1, -1):
        running = rewards[i] + gamma * not_done[i] * running
        out[i] = running
    return out
