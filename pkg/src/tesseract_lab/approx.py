"""Small fully connected networks with hand-written backprop, Adam, grad checks.

Hidden layers use relu (subgradient 0 at exactly 0), the output layer is
affine. Inputs may be a single vector ``(in,)`` or a batch ``(B, in)``.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


@dataclass
class MLP:
    sizes: tuple
    weights: list
    biases: list
    version: int = field(default=0, compare=False)

    def __post_init__(self):
        self.sizes = tuple(int(s) for s in self.sizes)
        if len(self.sizes) < 2 or min(self.sizes) < 1:
            raise ValueError("need at least input and output sizes, all >= 1")
        if len(self.weights) != len(self.sizes) - 1 or len(self.biases) != len(self.weights):
            raise ValueError("one weight matrix and bias per layer")
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            if w.shape != (self.sizes[i + 1], self.sizes[i]) or b.shape != (self.sizes[i + 1],):
                raise ValueError(f"layer {i} parameters do not chain with sizes {self.sizes}")

    @classmethod
    def init(cls, sizes, seed: int) -> "MLP":
        """Weights ~ N(0, 1/fan_in), biases 0."""
        rng = np.random.default_rng(seed)
        sizes = tuple(sizes)
        weights = [rng.standard_normal((o, i)) / np.sqrt(i) for i, o in zip(sizes[:-1], sizes[1:])]
        biases = [np.zeros(o) for o in sizes[1:]]
        return cls(sizes, weights, biases)

    @property
    def params(self) -> list:
        """Parameter arrays interleaved as ``[W0, b0, W1, b1, ...]`` (live references)."""
        out = []
        for w, b in zip(self.weights, self.biases):
            out += [w, b]
        return out

    def set_params(self, params) -> None:
        params = list(params)
        if len(params) != 2 * len(self.weights):
            raise ValueError("wrong number of parameter arrays")
        for i in range(len(self.weights)):
            if params[2 * i].shape != self.weights[i].shape or params[2 * i + 1].shape != self.biases[i].shape:
                raise ValueError("parameter shape mismatch")
            self.weights[i] = np.asarray(params[2 * i], dtype=float)
            self.biases[i] = np.asarray(params[2 * i + 1], dtype=float)
        self.version += 1

    def copy(self) -> "MLP":
        return MLP(self.sizes, [w.copy() for w in self.weights], [b.copy() for b in self.biases])

    def __call__(self, x: np.ndarray) -> np.ndarray:
        return mlp_forward(self, x)[0]


@dataclass
class ForwardCache:
    net_id: int
    version: int
    single: bool
    inputs: list
    pre: list


def mlp_forward(net: MLP, x) -> tuple[np.ndarray, ForwardCache]:
    x = np.asarray(x, dtype=float)
    single = x.ndim == 1
    h = x[None] if single else x
    if h.ndim != 2 or h.shape[1] != net.sizes[0]:
        raise ValueError(f"input has shape {x.shape}, network expects {net.sizes[0]} features")
    inputs, pre = [], []
    last = len(net.weights) - 1
    for i, (w, b) in enumerate(zip(net.weights, net.biases)):
        inputs.append(h)
        z = h @ w.T + b
        pre.append(z)
        h = z if i == last else np.maximum(z, 0.0)
    cache = ForwardCache(id(net), net.version, single, inputs, pre)
    return (h[0] if single else h), cache


def mlp_backward(net: MLP, cache: ForwardCache, output_grad, return_input_grad: bool = False):
    """Gradients of ``sum(output * output_grad)`` w.r.t. ``net.params``.

    Raises if the parameters changed (or a different net is passed) since
    the forward pass that produced ``cache``.
    """
    if cache.net_id != id(net) or cache.version != net.version:
        raise ValueError("stale cache: parameters changed since the forward pass")
    g = np.asarray(output_grad, dtype=float)
    g = g[None] if cache.single else g
    if g.shape != cache.pre[-1].shape:
        raise ValueError(f"output_grad shape {g.shape} does not match output {cache.pre[-1].shape}")
    grads = [None] * (2 * len(net.weights))
    for i in range(len(net.weights) - 1, -1, -1):
        if i != len(net.weights) - 1:
            g = g * (cache.pre[i] > 0)
        grads[2 * i] = g.T @ cache.inputs[i]
        grads[2 * i + 1] = g.sum(axis=0)
        g = g @ net.weights[i]
    if return_input_grad:
        return grads, (g[0] if cache.single else g)
    return grads


@dataclass
class AdamState:
    """Adam moments; ``weight_decay`` is classic L2 (added to the gradient)."""

    m: list
    v: list
    lr: float = 0.01
    weight_decay: float = 0.0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0

    @classmethod
    def for_params(cls, params, lr: float = 0.01, weight_decay: float = 0.0, **kw) -> "AdamState":
        return cls([np.zeros_like(p) for p in params], [np.zeros_like(p) for p in params],
                   lr=lr, weight_decay=weight_decay, **kw)


def adam_step(state: AdamState, params, grads) -> tuple[list, AdamState]:
    """One bias-corrected Adam update, in place. Returns ``(params, state)``."""
    params, grads = list(params), list(grads)
    if len(params) != len(grads) or len(params) != len(state.m):
        raise ValueError("params, grads and optimizer state must have the same length")
    state.step += 1
    c1 = 1.0 - state.beta1 ** state.step
    c2 = 1.0 - state.beta2 ** state.step
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if p.shape != g.shape or p.shape != m.shape:
            raise ValueError(f"shape mismatch {p.shape} / {g.shape} / {m.shape}")
        g = g + state.weight_decay * p if state.weight_decay else g
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * g * g
        p -= state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    return params, state


def adam_step_net(state: AdamState, net: MLP, grads) -> None:
    adam_step(state, net.params, grads)
    net.version += 1


def clip_grad_norm(grads, max_norm: float) -> tuple[list, float]:
    """Scale ``grads`` jointly so their global L2 norm is at most ``max_norm``."""
    norm = float(np.sqrt(sum(float(np.sum(g * g)) for g in grads)))
    if norm > max_norm > 0:
        grads = [g * (max_norm / norm) for g in grads]
    return grads, norm


def grad_check(f, params, n_probe: int = 20, seed: int = 0, h: float = 1e-5,
               floor: float = 1e-7) -> float:
    """Max relative error between analytic and central-difference gradients.

    ``f(params) -> (value, grads)``. ``n_probe`` coordinates are drawn at
    random over all parameter arrays. The relative error is
    ``|a - n| / max(|a|, |n|, floor)``, so two zero gradients give 0.
    """
    params = [np.array(p, dtype=float) for p in params]
    _, grads = f(params)
    sizes = np.array([p.size for p in params])
    rng = np.random.default_rng(seed)
    flat = rng.integers(0, sizes.sum(), n_probe)
    offsets = np.concatenate([[0], np.cumsum(sizes)])
    worst = 0.0
    for j in flat:
        a = int(np.searchsorted(offsets, j, side="right") - 1)
        idx = np.unravel_index(j - offsets[a], params[a].shape)
        old = params[a][idx]
        params[a][idx] = old + h
        fp = f(params)[0]
        params[a][idx] = old - h
        fm = f(params)[0]
        params[a][idx] = old
        num = (fp - fm) / (2 * h)
        ana = float(np.asarray(grads[a])[idx])
        worst = max(worst, abs(ana - num) / max(abs(ana), abs(num), floor))
    return worst


# ---------------------------------------------------------------------------
# checkpoints


def save_mlp(net: MLP, path) -> None:
    """Manifest line with the layer sizes, then one row-major line per array."""
    with open(path, "w") as fh:
        fh.write("sizes " + " ".join(str(s) for s in net.sizes) + "\n")
        for p in net.params:
            fh.write(" ".join(format(float(x), ".17g") for x in p.ravel()) + "\n")


def load_mlp(path) -> MLP:
    with open(path) as fh:
        lines = fh.read().splitlines()
    head = lines[0].split()
    if not head or head[0] != "sizes":
        raise ValueError("missing 'sizes' manifest line")
    sizes = tuple(int(s) for s in head[1:])
    shapes = []
    for i, o in zip(sizes[:-1], sizes[1:]):
        shapes += [(o, i), (o,)]
    if len(lines) - 1 < len(shapes):
        raise ValueError("checkpoint is truncated")
    arrays = []
    for shape, line in zip(shapes, lines[1:]):
        vals = np.array(line.split(), dtype=float)
        if vals.size != int(np.prod(shape)):
            raise ValueError(f"expected {int(np.prod(shape))} values, got {vals.size}")
        arrays.append(vals.reshape(shape))
    return MLP(sizes, arrays[0::2], arrays[1::2])
