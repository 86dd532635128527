"""Action distributions and exploration policies.

All functions are stateless; callers pass their own ``np.random.Generator``.
Batched inputs are ``(batch, n)`` arrays.
"""
from __future__ import annotations

import math

import numpy as np

LOG_STD_MIN = -20.0
LOG_STD_MAX = 2.0
SQUASH_EPS = 1e-6
GUMBEL_CLAMP = 1e-12
_HALF_LOG_2PI = 0.5 * math.log(2.0 * math.pi)


def logsumexp(z: np.ndarray) -> np.ndarray:
    m = np.max(z, axis=-1, keepdims=True)
    return (m + np.log(np.sum(np.exp(z - m), axis=-1, keepdims=True)))[..., 0]


def softmax(z: np.ndarray) -> np.ndarray:
    e = np.exp(z - np.max(z, axis=-1, keepdims=True))
    return e / np.sum(e, axis=-1, keepdims=True)


def log_softmax(z: np.ndarray) -> np.ndarray:
    return z - logsumexp(z)[..., None]


# --- categorical -------------------------------------------------------------

def _check_actions(logits, actions):
    actions = np.asarray(actions)
    n = logits.shape[-1]
    if np.any(actions < 0) or np.any(actions >= n):
        raise ValueError(f"action index out of range [0, {n})")
    return actions.astype(np.int64)


def categorical_sample(logits: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Inverse-CDF sampling on softmax probabilities, one draw per row."""
    logits = np.atleast_2d(logits)
    cdf = np.cumsum(softmax(logits), axis=-1)
    u = rng.random((logits.shape[0], 1))
    idx = np.sum(cdf <= u * cdf[:, -1:], axis=-1)
    return np.minimum(idx, logits.shape[-1] - 1)


def categorical_log_prob(logits: np.ndarray, actions) -> np.ndarray:
    logits = np.atleast_2d(logits)
    actions = _check_actions(logits, actions)
    return np.take_along_axis(log_softmax(logits), actions.reshape(-1, 1), axis=-1)[:, 0]


def categorical_entropy(logits: np.ndarray) -> np.ndarray:
    logp = log_softmax(np.atleast_2d(logits))
    return -np.sum(np.exp(logp) * logp, axis=-1)


def categorical_log_prob_grad(logits, actions) -> np.ndarray:
    """d log p(a) / d logits = onehot(a) - p."""
    logits = np.atleast_2d(logits)
    actions = _check_actions(logits, actions)
    g = -softmax(logits)
    g[np.arange(len(actions)), actions] += 1.0
    return g


def categorical_entropy_grad(logits) -> np.ndarray:
    logp = log_softmax(np.atleast_2d(logits))
    p = np.exp(logp)
    ent = -np.sum(p * logp, axis=-1, keepdims=True)
    return -p * (logp + ent)


# --- tanh-squashed diagonal Gaussian ----------------------------------------

def clamp_log_std(log_std: np.ndarray) -> np.ndarray:
    return np.clip(log_std, LOG_STD_MIN, LOG_STD_MAX)


def tanh_gaussian_sample(mean, log_std, rng: np.random.Generator):
    """Returns (action in (-1, 1)^d, pre-squash sample u)."""
    std = np.exp(clamp_log_std(log_std))
    u = mean + std * rng.standard_normal(np.shape(mean))
    return np.tanh(u), u


def tanh_gaussian_deterministic(mean) -> np.ndarray:
    return np.tanh(mean)


def squash_correction(u: np.ndarray) -> np.ndarray:
    """Per-dimension log-det term subtracted from the Gaussian log-density."""
    t = np.tanh(u)
    return np.log(1.0 - t * t + SQUASH_EPS)


def tanh_gaussian_log_prob(mean, log_std, u) -> np.ndarray:
    log_std = clamp_log_std(log_std)
    z = (u - mean) / np.exp(log_std)
    normal = -0.5 * z * z - log_std - _HALF_LOG_2PI
    return np.sum(normal - squash_correction(u), axis=-1)


def gaussian_entropy(log_std) -> np.ndarray:
    """Entropy of the pre-squash Gaussian (the squashed one has no closed form)."""
    return np.sum(clamp_log_std(log_std) + 0.5 + _HALF_LOG_2PI, axis=-1)


# --- Gumbel-Softmax ----------------------------------------------------------

def sample_gumbel(shape, rng: np.random.Generator) -> np.ndarray:
    u = np.clip(rng.random(shape), GUMBEL_CLAMP, 1.0 - GUMBEL_CLAMP)
    return -np.log(-np.log(u))


def gumbel_softmax_sample(logits, tau: float, rng: np.random.Generator | None = None,
                          hard: bool = False, noise: np.ndarray | None = None) -> np.ndarray:
    """Relaxed one-hot sample softmax((logits + g) / tau).

    ``noise`` injects a fixed Gumbel draw (test hook). With ``hard`` the
    one-hot of the argmax is returned; training code must differentiate
    through the relaxed sample, see :func:`gumbel_softmax_relaxed`.
    """
    if not tau > 0:
        raise ValueError("Gumbel-Softmax temperature must be > 0")
    logits = np.atleast_2d(np.asarray(logits, dtype=np.float64))
    g = sample_gumbel(logits.shape, rng) if noise is None else np.broadcast_to(noise, logits.shape)
    y = softmax((logits + g) / tau)
    if not hard:
        return y
    out = np.zeros_like(y)
    out[np.arange(len(y)), np.argmax(y, axis=-1)] = 1.0
    return out


def gumbel_softmax_relaxed(logits, tau, noise):
    """Relaxed sample for a given noise draw, plus the noise (for backprop)."""
    return softmax((logits + noise) / tau)


def gumbel_softmax_backward(y: np.ndarray, tau: float, grad_y: np.ndarray) -> np.ndarray:
    """Vector-Jacobian product of the relaxed sample w.r.t. logits."""
    inner = np.sum(y * grad_y, axis=-1, keepdims=True)
    return y * (grad_y - inner) / tau


# --- exploration -------------------------------------------------------------

def epsilon_greedy(q_values, epsilon: float, rng: np.random.Generator):
    """Uniform action with probability epsilon, else argmax (ties -> lowest index).

    Accepts a single Q row or a (batch, n) array.
    """
    if not 0.0 <= epsilon <= 1.0:
        raise ValueError("epsilon must lie in [0, 1]")
    q = np.asarray(q_values, dtype=np.float64)
    single = q.ndim == 1
    q = np.atleast_2d(q)
    greedy = np.argmax(q, axis=-1)
    explore = rng.random(len(q)) < epsilon
    random_actions = rng.integers(0, q.shape[-1], size=len(q))
    actions = np.where(explore, random_actions, greedy)
    return int(actions[0]) if single else actions


def boltzmann_probs(q_values, temperature: float) -> np.ndarray:
    if not temperature > 0:
        raise ValueError("temperature must be > 0")
    return softmax(np.asarray(q_values, dtype=np.float64) / temperature)


def boltzmann(q_values, temperature: float, rng: np.random.Generator):
    if not temperature > 0:
        raise ValueError("temperature must be > 0")
    q = np.asarray(q_values, dtype=np.float64)
    actions = categorical_sample(np.atleast_2d(q) / temperature, rng)
    return int(actions[0]) if q.ndim == 1 else actions
