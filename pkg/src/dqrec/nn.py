"""Small trainable substrate: dense layers, GELU, embeddings, Adam.

Everything runs in float64 numpy with hand-written backward passes. Layers
operate on row batches, i.e. inputs of shape ``(batch, in_dim)``; a 1-d input
is treated as a batch of one and returned as 1-d.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from scipy.special import ndtr

_INV_SQRT_2PI = 1.0 / np.sqrt(2.0 * np.pi)


def gelu(x):
    """Exact GELU, ``x * Phi(x)`` with the exact normal CDF."""
    x = np.asarray(x, dtype=np.float64)
    # ndtr uses erfc in the left tail, so Phi(-10) does not cancel to zero
    return x * ndtr(x)


def gelu_grad(x):
    x = np.asarray(x, dtype=np.float64)
    cdf = ndtr(x)
    pdf = _INV_SQRT_2PI * np.exp(-0.5 * x * x)
    return cdf + x * pdf


def sigmoid(x):
    x = np.asarray(x, dtype=np.float64)
    # split by sign so exp never overflows
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def log_sigmoid(x):
    x = np.asarray(x, dtype=np.float64)
    return -np.logaddexp(0.0, -x)


@dataclass
class DenseLayer:
    """``y = gelu(x @ weight.T + bias)`` with weight of shape (out, in)."""

    weight: np.ndarray
    bias: np.ndarray

    def __post_init__(self):
        self.weight = np.asarray(self.weight, dtype=np.float64)
        self.bias = np.asarray(self.bias, dtype=np.float64)
        if self.weight.ndim != 2 or self.bias.shape != (self.weight.shape[0],):
            raise ValueError(
                f"inconsistent layer shapes: weight {self.weight.shape}, bias {self.bias.shape}"
            )

    @classmethod
    def init(cls, in_dim: int, out_dim: int, rng: np.random.Generator) -> "DenseLayer":
        limit = np.sqrt(6.0 / (in_dim + out_dim))
        return cls(rng.uniform(-limit, limit, size=(out_dim, in_dim)), np.zeros(out_dim))

    @property
    def in_dim(self) -> int:
        return self.weight.shape[1]

    @property
    def out_dim(self) -> int:
        return self.weight.shape[0]


def dense_apply(layer: DenseLayer, e, mode: str = "forward", upstream=None, activate: bool = True):
    """Apply a dense layer, GELU-activated unless ``activate`` is False.

    ``mode="forward"`` returns the output. ``mode="backward"`` needs the
    upstream gradient (same shape as the output) and returns
    ``(grad_weight, grad_bias, grad_input)``.
    """
    e = np.asarray(e, dtype=np.float64)
    squeeze = e.ndim == 1
    x = e[None, :] if squeeze else e
    if x.shape[-1] != layer.in_dim:
        raise ValueError(f"input dim {x.shape[-1]} does not match layer in_dim {layer.in_dim}")
    pre = x @ layer.weight.T + layer.bias
    if mode == "forward":
        out = gelu(pre) if activate else pre
        return out[0] if squeeze else out
    if mode != "backward":
        raise ValueError(f"unknown mode {mode!r}")
    if upstream is None:
        raise ValueError("backward mode needs an upstream gradient")
    g = np.asarray(upstream, dtype=np.float64).reshape(pre.shape)
    if activate:
        g = g * gelu_grad(pre)
    grad_w = g.T @ x
    grad_b = g.sum(axis=0)
    grad_x = g @ layer.weight
    return grad_w, grad_b, (grad_x[0] if squeeze else grad_x)


@dataclass
class Tower:
    """Stack of dense layers with GELU between them.

    The top layer is linear unless ``activate_top`` is set.
    """

    layers: list[DenseLayer]
    activate_top: bool = False

    @classmethod
    def init(cls, sizes: list[int], rng: np.random.Generator, activate_top: bool = False) -> "Tower":
        return cls([DenseLayer.init(a, b, rng) for a, b in zip(sizes[:-1], sizes[1:])], activate_top)

    def _activated(self, k: int) -> bool:
        return k < len(self.layers) - 1 or self.activate_top

    def forward(self, e):
        """Return the top embedding and the per-layer inputs needed by ``backward``."""
        inputs = []
        h = np.asarray(e, dtype=np.float64)
        for k, layer in enumerate(self.layers):
            inputs.append(h)
            h = dense_apply(layer, h, activate=self._activated(k))
        return h, inputs

    def backward(self, inputs, upstream):
        """Return ``(layer_grads, grad_input)``; layer_grads is a list of (dW, db)."""
        grads = [None] * len(self.layers)
        g = upstream
        for k in range(len(self.layers) - 1, -1, -1):
            gw, gb, g = dense_apply(self.layers[k], inputs[k], "backward", g, self._activated(k))
            grads[k] = (gw, gb)
        return grads, g

    def params(self, prefix: str) -> dict[str, np.ndarray]:
        out = {}
        for k, layer in enumerate(self.layers):
            out[f"{prefix}.{k}.weight"] = layer.weight
            out[f"{prefix}.{k}.bias"] = layer.bias
        return out

    @staticmethod
    def grads_to_dict(grads, prefix: str) -> dict[str, np.ndarray]:
        out = {}
        for k, (gw, gb) in enumerate(grads):
            out[f"{prefix}.{k}.weight"] = gw
            out[f"{prefix}.{k}.bias"] = gb
        return out

    @classmethod
    def from_params(cls, params: dict[str, np.ndarray], prefix: str, activate_top: bool = False) -> "Tower":
        layers = []
        k = 0
        while f"{prefix}.{k}.weight" in params:
            layers.append(DenseLayer(params[f"{prefix}.{k}.weight"], params[f"{prefix}.{k}.bias"]))
            k += 1
        if not layers:
            raise KeyError(f"no tower parameters under {prefix!r}")
        return cls(layers, activate_top)


def tower_forward(e, tower: Tower):
    """Top embedding of ``tower`` for input ``e``."""
    return tower.forward(e)[0]


def init_embedding(vocab: int, dim: int, rng: np.random.Generator) -> np.ndarray:
    return rng.normal(0.0, 0.01, size=(vocab, dim))


def mean_pool(table: np.ndarray, idx: np.ndarray, mask: np.ndarray) -> np.ndarray:
    """Masked mean of ``table[idx]`` over the last index axis; empty rows give zeros."""
    rows = table[idx] * mask[..., None]
    count = mask.sum(axis=-1, keepdims=True)
    return rows.sum(axis=-2) / np.maximum(count, 1)


def mean_pool_backward(grad_table: np.ndarray, idx: np.ndarray, mask: np.ndarray, upstream):
    """Scatter-add the gradient of ``mean_pool`` into ``grad_table`` in place."""
    count = np.maximum(mask.sum(axis=-1, keepdims=True), 1)
    per_row = np.broadcast_to((upstream / count)[..., None, :], idx.shape + (grad_table.shape[1],))
    m = mask.astype(bool)
    np.add.at(grad_table, idx[m], per_row[m])


def lookup_backward(grad_table: np.ndarray, idx: np.ndarray, upstream):
    np.add.at(grad_table, idx, upstream)


@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(params: dict[str, np.ndarray], grads: dict[str, np.ndarray], state: AdamState):
    """Bias-corrected Adam update, applied to ``params`` in place.

    Parameters missing from ``grads`` are left alone (and their moments are
    not advanced).
    """
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise FloatingPointError(f"non-finite gradient for {name}")
        if g.shape != params[name].shape:
            raise ValueError(f"gradient shape {g.shape} != parameter shape {params[name].shape} for {name}")
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**state.t
    c2 = 1.0 - b2**state.t
    for name, g in grads.items():
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(g)
            state.v[name] = np.zeros_like(g)
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        params[name] -= state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    return params, state


def numeric_grad(fun: Callable[[np.ndarray], float], x: np.ndarray, step: float = 1e-3) -> np.ndarray:
    """Central differences of a scalar function; ``x`` is perturbed in place and restored."""
    grad = np.zeros_like(x, dtype=np.float64)
    flat = x.reshape(-1)
    gflat = grad.reshape(-1)
    for k in range(flat.size):
        orig = flat[k]
        flat[k] = orig + step
        hi = fun(x)
        flat[k] = orig - step
        lo = fun(x)
        flat[k] = orig
        gflat[k] = (hi - lo) / (2.0 * step)
    return grad


def relative_error(analytic, numeric, floor: float = 1e-3) -> float:
    """Max componentwise ``|a - n| / max(|n|, floor * max|n|)``.

    Components much smaller than the largest one are compared on the scale
    of the largest, where central differences are no longer meaningful
    relative to themselves.
    """
    a = np.asarray(analytic, dtype=np.float64).ravel()
    n = np.asarray(numeric, dtype=np.float64).ravel()
    scale = max(float(np.abs(n).max(initial=0.0)), 1e-12)
    denom = np.maximum(np.abs(n), floor * scale)
    return float(np.max(np.abs(a - n) / denom, initial=0.0))


def grad_check(fun: Callable[[np.ndarray], float], grad: Callable[[np.ndarray], np.ndarray] | np.ndarray,
               point: np.ndarray, step: float = 1e-3) -> float:
    """Max relative error between an analytic gradient and central differences.

    ``grad`` is either a callable returning the analytic gradient at ``point``
    or the already-computed gradient array.
    """
    x = np.array(point, dtype=np.float64, copy=True)
    analytic = grad(x.copy()) if callable(grad) else np.asarray(grad)
    numeric = numeric_grad(fun, x, step)
    return relative_error(analytic, numeric)
