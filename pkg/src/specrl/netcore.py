"""Small multilayer-perceptron engine with exact reverse-mode gradients.

Everything runs in float64 on numpy. A network is described by a
:class:`NetSpec`; its weights live in a :class:`Params` object, which packs
every weight matrix and bias vector into one contiguous buffer so that
optimizers, clipping, Polyak averaging and shared-memory exchange can work on
a single flat array.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, asdict, replace
from pathlib import Path
from typing import Sequence

import numpy as np

HIDDEN_ACTIVATIONS = ("relu", "tanh")
HEAD_ACTIVATIONS = ("identity", "tanh")


@dataclass
class NetSpec:
    hid_layers: list = field(default_factory=lambda: [64, 64])
    activation: str = "relu"
    # (width, activation) pairs; empty means "derived from the env by the agent"
    out_heads: list = field(default_factory=list)
    shared: bool = True
    optimizer: str = "adam"
    lr: float = 1e-3
    critic_lr: float | None = None
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    grad_clip_norm: float | None = None
    loss: str = "mse"
    huber_delta: float = 1.0
    update: str = "replace"
    update_frequency: int = 1
    polyak_tau: float = 0.005

    def violations(self) -> list[str]:
        out = []
        if any(int(w) < 1 for w in self.hid_layers):
            out.append("net.hid_layers widths must be >= 1")
        if self.activation not in HIDDEN_ACTIVATIONS:
            out.append(f"net.activation must be one of {HIDDEN_ACTIVATIONS}")
        for head in self.out_heads:
            if len(head) != 2 or int(head[0]) < 1 or head[1] not in HEAD_ACTIVATIONS:
                out.append(f"net.out_heads entry {head!r} is not (width>=1, activation)")
        if self.optimizer not in ("sgd", "adam"):
            out.append("net.optimizer must be 'sgd' or 'adam'")
        if not self.lr > 0:
            out.append("net.lr must be > 0")
        if self.critic_lr is not None and not self.critic_lr > 0:
            out.append("net.critic_lr must be > 0")
        if self.grad_clip_norm is not None and not self.grad_clip_norm > 0:
            out.append("net.grad_clip_norm must be > 0")
        if self.loss not in ("mse", "huber"):
            out.append("net.loss must be 'mse' or 'huber'")
        if not self.huber_delta > 0:
            out.append("net.huber_delta must be > 0")
        if self.update not in ("replace", "polyak"):
            out.append("net.update must be 'replace' or 'polyak'")
        if int(self.update_frequency) < 1:
            out.append("net.update_frequency must be >= 1")
        if not 0.0 <= self.polyak_tau <= 1.0:
            out.append("net.polyak_tau out of [0,1]")
        return out

    def with_heads(self, heads: Sequence[tuple[int, str]]) -> "NetSpec":
        return replace(self, out_heads=[[int(w), a] for w, a in heads])


def layer_shapes(net_spec: NetSpec, in_dim: int) -> list[tuple[int, ...]]:
    """Shapes in storage order: hidden (W, b) pairs, then one (W, b) per head."""
    shapes: list[tuple[int, ...]] = []
    d = int(in_dim)
    for width in net_spec.hid_layers:
        shapes += [(int(width), d), (int(width),)]
        d = int(width)
    for width, _ in net_spec.out_heads:
        shapes += [(int(width), d), (int(width),)]
    return shapes


class Params:
    """Per-layer arrays that are views into one flat float64 buffer.

    Grads use the same class, so they mirror Params shape-for-shape.
    """

    def __init__(self, shapes, flat: np.ndarray | None = None):
        self.shapes = [tuple(s) for s in shapes]
        sizes = [math.prod(s) for s in self.shapes]
        total = sum(sizes)
        if flat is None:
            flat = np.zeros(total)
        elif flat.shape != (total,):
            raise ValueError(f"flat buffer has shape {flat.shape}, expected ({total},)")
        self.flat = flat
        self.arrays = []
        offset = 0
        for shape, size in zip(self.shapes, sizes):
            self.arrays.append(flat[offset:offset + size].reshape(shape))
            offset += size

    def __len__(self):
        return len(self.arrays)

    def __getitem__(self, i):
        return self.arrays[i]

    def __iter__(self):
        return iter(self.arrays)

    @property
    def size(self) -> int:
        return self.flat.size

    def copy(self) -> "Params":
        return Params(self.shapes, self.flat.copy())

    def zeros_like(self) -> "Params":
        return Params(self.shapes)

    def assign(self, other: "Params") -> None:
        _check_same_shapes(self, other)
        self.flat[:] = other.flat


Grads = Params


def _check_same_shapes(a: Params, b: Params) -> None:
    if a.shapes != b.shapes:
        raise ValueError(f"parameter shape mismatch: {a.shapes} vs {b.shapes}")


def init_params(net_spec: NetSpec, in_dim: int, rng: np.random.Generator) -> Params:
    if in_dim < 1:
        raise ValueError(f"in_dim must be >= 1, got {in_dim}")
    params = Params(layer_shapes(net_spec, in_dim))
    for w in params.arrays[0::2]:
        bound = 1.0 / math.sqrt(w.shape[1])
        w[...] = rng.uniform(-bound, bound, size=w.shape)
    return params


def _activate(x: np.ndarray, name: str) -> np.ndarray:
    if name == "relu":
        return np.maximum(x, 0.0)
    if name == "tanh":
        return np.tanh(x)
    return x


def _activation_grad(out: np.ndarray, name: str, g: np.ndarray) -> np.ndarray:
    # derivative expressed through the activation's output
    if name == "relu":
        return g * (out > 0.0)
    if name == "tanh":
        return g * (1.0 - out * out)
    return g


def _check_input(params: Params, x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    in_dim = params.shapes[0][1]
    if x.ndim != 2 or x.shape[1] != in_dim:
        raise ValueError(f"input shape {x.shape} does not match expected (batch, {in_dim})")
    return x


def forward_with_cache(params: Params, net_spec: NetSpec, x: np.ndarray):
    """Forward pass returning (head outputs, activation cache for backward)."""
    x = _check_input(params, x)
    n_hidden = len(net_spec.hid_layers)
    if len(params) != 2 * (n_hidden + len(net_spec.out_heads)):
        raise ValueError("params do not match the net spec architecture")
    acts = [x]
    h = x
    arrays = params.arrays
    for i in range(n_hidden):
        h = _activate(h @ arrays[2 * i].T + arrays[2 * i + 1], net_spec.activation)
        acts.append(h)
    outputs = []
    for j, (_, head_act) in enumerate(net_spec.out_heads):
        k = 2 * (n_hidden + j)
        outputs.append(_activate(h @ arrays[k].T + arrays[k + 1], head_act))
    return outputs, (acts, outputs)


def forward(params: Params, net_spec: NetSpec, x: np.ndarray) -> list[np.ndarray]:
    return forward_with_cache(params, net_spec, x)[0]


def backward(params: Params, net_spec: NetSpec, x: np.ndarray, head_grads, cache=None):
    """Gradients of sum_i <head_i, head_grads_i> w.r.t. every parameter and the input.

    Entries of ``head_grads`` may be None for heads that receive no gradient.
    Returns (Grads, input_grad).
    """
    if cache is None:
        _, cache = forward_with_cache(params, net_spec, x)
    acts, outputs = cache
    if len(head_grads) != len(outputs):
        raise ValueError(f"expected {len(outputs)} head gradients, got {len(head_grads)}")
    n_hidden = len(net_spec.hid_layers)
    arrays = params.arrays
    grads = params.zeros_like()
    garr = grads.arrays
    h = acts[-1]
    g_h = np.zeros_like(h)
    for j, ((_, head_act), out, g) in enumerate(zip(net_spec.out_heads, outputs, head_grads)):
        if g is None:
            continue
        g = np.asarray(g, dtype=np.float64)
        if g.shape != out.shape:
            raise ValueError(f"head {j} grad shape {g.shape} does not match output shape {out.shape}")
        g = _activation_grad(out, head_act, g)
        k = 2 * (n_hidden + j)
        garr[k][...] = g.T @ h
        garr[k + 1][...] = g.sum(axis=0)
        g_h += g @ arrays[k]
    for i in reversed(range(n_hidden)):
        g_pre = _activation_grad(acts[i + 1], net_spec.activation, g_h)
        garr[2 * i][...] = g_pre.T @ acts[i]
        garr[2 * i + 1][...] = g_pre.sum(axis=0)
        g_h = g_pre @ arrays[2 * i]
    return grads, g_h


# --- losses: each returns (mean loss, d loss / d pred) ---------------------

def mse_loss(pred, target, weights=None):
    diff = pred - target
    if diff.shape != np.shape(pred):
        raise ValueError(f"prediction {np.shape(pred)} and target {np.shape(target)} shapes differ")
    w = 1.0 if weights is None else weights
    n = diff.size
    return float(np.sum(w * diff * diff) / n), 2.0 * w * diff / n


def huber_loss(pred, target, delta=1.0, weights=None):
    diff = pred - target
    if diff.shape != np.shape(pred):
        raise ValueError(f"prediction {np.shape(pred)} and target {np.shape(target)} shapes differ")
    w = 1.0 if weights is None else weights
    n = diff.size
    a = np.abs(diff)
    quad = a <= delta
    per = np.where(quad, 0.5 * diff * diff, delta * (a - 0.5 * delta))
    grad = np.where(quad, diff, delta * np.sign(diff))
    return float(np.sum(w * per) / n), w * grad / n


def regression_loss(net_spec: NetSpec, pred, target, weights=None):
    if net_spec.loss == "huber":
        return huber_loss(pred, target, net_spec.huber_delta, weights)
    return mse_loss(pred, target, weights)


# --- optimization ----------------------------------------------------------

def grad_norm(grads: Grads) -> float:
    return float(np.sqrt(np.dot(grads.flat, grads.flat)))


def clip_grad_norm(grads: Grads, max_norm: float) -> Grads:
    if not max_norm > 0:
        raise ValueError("max_norm must be > 0")
    norm = grad_norm(grads)
    if norm > max_norm:
        return Params(grads.shapes, grads.flat * (max_norm / norm))
    return grads


@dataclass
class OptState:
    m: np.ndarray
    v: np.ndarray
    t: int = 0


def init_opt_state(params: Params) -> OptState:
    return OptState(np.zeros(params.size), np.zeros(params.size), 0)


def optimizer_step(params: Params, grads: Grads, opt_state: OptState, net_spec: NetSpec,
                   lr: float | None = None, inplace: bool = False):
    """One SGD or Adam step. Returns (params', opt_state').

    With ``inplace`` the update is written into ``params.flat`` and
    ``opt_state`` is mutated, which avoids allocation on the hot path.
    """
    _check_same_shapes(params, grads)
    lr = net_spec.lr if lr is None else lr
    g = grads.flat
    if not inplace:
        params = params.copy()
        opt_state = OptState(opt_state.m.copy(), opt_state.v.copy(), opt_state.t)
    if net_spec.optimizer == "sgd":
        params.flat -= lr * g
        opt_state.t += 1
        return params, opt_state
    b1, b2 = net_spec.adam_beta1, net_spec.adam_beta2
    opt_state.t += 1
    t = opt_state.t
    opt_state.m *= b1
    opt_state.m += (1.0 - b1) * g
    opt_state.v *= b2
    opt_state.v += (1.0 - b2) * (g * g)
    m_hat = opt_state.m / (1.0 - b1 ** t)
    v_hat = opt_state.v / (1.0 - b2 ** t)
    params.flat -= lr * m_hat / (np.sqrt(v_hat) + net_spec.adam_eps)
    return params, opt_state


def update_target(target: Params, online: Params, net_spec: NetSpec) -> Params:
    """``replace`` copies online; ``polyak`` mixes with weight polyak_tau on online.

    The caller gates ``replace`` on update_frequency.
    """
    _check_same_shapes(target, online)
    if net_spec.update == "replace":
        return online.copy()
    tau = net_spec.polyak_tau
    return Params(target.shapes, tau * online.flat + (1.0 - tau) * target.flat)


# --- gradient checking -------------------------------------------------------

def grad_check(net_spec: NetSpec, params: Params, x: np.ndarray, probe_head_weights,
               h: float = 1e-6) -> float:
    """Worst relative error between backward() and central differences.

    The scalar probe is sum_i <head_i, probe_head_weights_i>.
    """
    if not h > 0:
        raise ValueError("h must be > 0")

    def probe(p: Params) -> float:
        outs = forward(p, net_spec, x)
        return float(sum(np.sum(o * w) for o, w in zip(outs, probe_head_weights)))

    analytic, _ = backward(params, net_spec, x, probe_head_weights)
    work = params.copy()
    worst = 0.0
    for i in range(work.size):
        orig = work.flat[i]
        work.flat[i] = orig + h
        up = probe(work)
        work.flat[i] = orig - h
        down = probe(work)
        work.flat[i] = orig
        numeric = (up - down) / (2 * h)
        err = abs(numeric - analytic.flat[i]) / max(1.0, abs(numeric), abs(analytic.flat[i]))
        worst = max(worst, err)
    return worst


# --- checkpoint format -----------------------------------------------------

def save_params(path, params: Params, net_spec: NetSpec, version: str = "") -> None:
    """Write ``<path>.json`` (manifest) and ``<path>.bin`` (little-endian float64)."""
    path = Path(path)
    manifest = {"net_spec": asdict(net_spec), "shapes": [list(s) for s in params.shapes],
                "version": version, "dtype": "<f8"}
    path.with_suffix(".json").write_text(json.dumps(manifest, sort_keys=True, indent=2))
    path.with_suffix(".bin").write_bytes(params.flat.astype("<f8").tobytes())


def load_params(path) -> tuple[Params, NetSpec]:
    path = Path(path)
    manifest = json.loads(path.with_suffix(".json").read_text())
    flat = np.frombuffer(path.with_suffix(".bin").read_bytes(), dtype="<f8").astype(np.float64)
    params = Params([tuple(s) for s in manifest["shapes"]], flat.copy())
    return params, NetSpec(**manifest["net_spec"])


class Net:
    """A NetSpec bundled with its Params and optimizer state."""

    def __init__(self, net_spec: NetSpec, in_dim: int, rng: np.random.Generator, lr: float | None = None):
        self.spec = net_spec
        self.in_dim = in_dim
        self.lr = net_spec.lr if lr is None else lr
        self.params = init_params(net_spec, in_dim, rng)
        self.opt_state = init_opt_state(self.params)

    def __call__(self, x) -> list[np.ndarray]:
        return forward(self.params, self.spec, x)

    def forward_train(self, x):
        return forward_with_cache(self.params, self.spec, x)

    def backward(self, x, head_grads, cache=None):
        return backward(self.params, self.spec, x, head_grads, cache)

    def step(self, grads: Grads) -> float:
        """Clip (if configured) and apply one optimizer step in place; returns the raw grad norm."""
        norm = grad_norm(grads)
        if self.spec.grad_clip_norm is not None:
            grads = clip_grad_norm(grads, self.spec.grad_clip_norm)
        optimizer_step(self.params, grads, self.opt_state, self.spec, lr=self.lr, inplace=True)
        return norm

    def clone(self) -> "Net":
        other = object.__new__(Net)
        other.spec, other.in_dim, other.lr = self.spec, self.in_dim, self.lr
        other.params = self.params.copy()
        other.opt_state = init_opt_state(other.params)
        return other
