"""Per-algorithm losses and bootstrap targets.

Each loss has a ``*_grad`` companion giving the derivative with respect to
its differentiable inputs (log-probs, value predictions, entropies). Targets,
advantages and old log-probs are constants by construction: they are plain
arrays and never receive a gradient.
"""
from __future__ import annotations

import numpy as np


def _same_length(*arrays):
    lengths = [len(a) for a in arrays]
    if len(set(lengths)) != 1:
        raise ValueError(f"length mismatch: {lengths}")
    return lengths[0]


def reinforce_loss(log_probs, returns, entropy, entropy_coef: float) -> float:
    _same_length(log_probs, returns, entropy)
    return float(-np.mean(log_probs * returns) - entropy_coef * np.mean(entropy))


def reinforce_loss_grad(log_probs, returns, entropy, entropy_coef: float):
    """(d loss / d log_probs, d loss / d entropy)."""
    n = _same_length(log_probs, returns, entropy)
    return -np.asarray(returns) / n, np.full(n, -entropy_coef / n)


def a2c_loss(log_probs, advantages, v_pred, v_targets, entropy,
             entropy_coef: float, val_loss_coef: float) -> float:
    _same_length(log_probs, advantages, v_pred, v_targets, entropy)
    policy = -np.mean(log_probs * advantages)
    value = np.mean((v_pred - v_targets) ** 2)
    return float(policy + val_loss_coef * value - entropy_coef * np.mean(entropy))


def a2c_loss_grad(log_probs, advantages, v_pred, v_targets, entropy,
                  entropy_coef: float, val_loss_coef: float):
    """(d/d log_probs, d/d v_pred, d/d entropy)."""
    n = _same_length(log_probs, advantages, v_pred, v_targets, entropy)
    return (-np.asarray(advantages) / n,
            2.0 * val_loss_coef * (np.asarray(v_pred) - v_targets) / n,
            np.full(n, -entropy_coef / n))


def _ppo_terms(log_probs_new, log_probs_old, advantages, clip_eps):
    _same_length(log_probs_new, log_probs_old, advantages)
    ratio = np.exp(log_probs_new - log_probs_old)
    surr = ratio * advantages
    surr_clipped = np.clip(ratio, 1.0 - clip_eps, 1.0 + clip_eps) * advantages
    return ratio, surr, surr_clipped


def ppo_policy_loss(log_probs_new, log_probs_old, advantages, clip_eps: float) -> float:
    _, surr, surr_clipped = _ppo_terms(log_probs_new, log_probs_old, advantages, clip_eps)
    return float(-np.mean(np.minimum(surr, surr_clipped)))


def ppo_policy_loss_grad(log_probs_new, log_probs_old, advantages, clip_eps: float):
    """d loss / d log_probs_new; the unclipped branch wins ties."""
    ratio, surr, surr_clipped = _ppo_terms(log_probs_new, log_probs_old, advantages, clip_eps)
    n = len(ratio)
    return np.where(surr <= surr_clipped, -surr / n, 0.0), ratio


def _check_q(batch, q):
    q = np.asarray(q)
    if q.ndim != 2 or q.shape[0] != len(batch.rewards):
        raise ValueError(f"q output shape {q.shape} does not match batch size {len(batch.rewards)}")
    return q


def dqn_target(batch, q_target_out, gamma: float) -> np.ndarray:
    q = _check_q(batch, q_target_out)
    return batch.rewards + gamma * (1.0 - batch.dones) * np.max(q, axis=1)


def ddqn_target(batch, q_online_out, q_target_out, gamma: float) -> np.ndarray:
    q_on = _check_q(batch, q_online_out)
    q_tg = _check_q(batch, q_target_out)
    if q_on.shape != q_tg.shape:
        raise ValueError(f"online {q_on.shape} and target {q_tg.shape} outputs differ in shape")
    best = np.argmax(q_on, axis=1)
    return batch.rewards + gamma * (1.0 - batch.dones) * q_tg[np.arange(len(best)), best]
