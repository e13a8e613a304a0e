"""Small fully connected networks on flat parameter vectors, with manual backprop.

Parameters live in one contiguous float64 vector so that checkpoints, soft
updates and finite-difference probes all act on plain arrays.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np


@dataclass(frozen=True)
class Mlp:
    """``tanh`` hidden layers and a linear output layer.

    Inputs are batched as ``(n, sizes[0])``. Weights are stored row-major
    ``(fan_in, fan_out)`` followed by the bias, layer after layer.
    """

    sizes: tuple[int, ...]

    def __post_init__(self) -> None:
        if len(self.sizes) < 2 or min(self.sizes) < 1:
            raise ValueError(f"bad layer sizes {self.sizes}")
        object.__setattr__(self, "sizes", tuple(int(s) for s in self.sizes))

    @property
    def n_params(self) -> int:
        return sum(a * b + b for a, b in zip(self.sizes[:-1], self.sizes[1:]))

    @property
    def out_dim(self) -> int:
        return self.sizes[-1]

    def output_bias(self, params: np.ndarray) -> np.ndarray:
        """View of the last layer's bias inside ``params``."""
        return params[self.n_params - self.sizes[-1]:]

    def _layers(self, params: np.ndarray):
        off = 0
        for a, b in zip(self.sizes[:-1], self.sizes[1:]):
            W = params[off:off + a * b].reshape(a, b)
            off += a * b
            yield W, params[off:off + b]
            off += b

    def init(self, rng: np.random.Generator, out_scale: float = 1.0) -> np.ndarray:
        """Glorot-uniform weights, zero biases; the last layer is scaled by ``out_scale``."""
        params = np.zeros(self.n_params)
        off = 0
        n_layers = len(self.sizes) - 1
        for k, (a, b) in enumerate(zip(self.sizes[:-1], self.sizes[1:])):
            lim = np.sqrt(6.0 / (a + b)) * (out_scale if k == n_layers - 1 else 1.0)
            params[off:off + a * b] = rng.uniform(-lim, lim, size=a * b)
            off += a * b + b
        return params

    def forward(self, params: np.ndarray, x: np.ndarray) -> tuple[np.ndarray, list[np.ndarray]]:
        """Returns the output and the per-layer inputs needed by :meth:`backward`."""
        h = np.atleast_2d(np.asarray(x, dtype=float))
        if h.shape[1] != self.sizes[0]:
            raise ValueError(f"expected input width {self.sizes[0]}, got {h.shape[1]}")
        acts = [h]
        layers = list(self._layers(params))
        for k, (W, b) in enumerate(layers):
            h = h @ W + b
            if k < len(layers) - 1:
                h = np.tanh(h)
            acts.append(h)
        return h, acts

    def __call__(self, params: np.ndarray, x: np.ndarray) -> np.ndarray:
        return self.forward(params, x)[0]

    def backward(self, params: np.ndarray, acts: list[np.ndarray], grad_out: np.ndarray):
        """Vector-Jacobian product: gradients of ``sum(grad_out * out)``.

        Returns ``(grad_params, grad_input)``.
        """
        layers = list(self._layers(params))
        grads = []
        g = np.asarray(grad_out, dtype=float)
        for k in range(len(layers) - 1, -1, -1):
            W, _ = layers[k]
            if k < len(layers) - 1:
                g = g * (1.0 - acts[k + 1] ** 2)
            grads.append((acts[k].T @ g, g.sum(axis=0)))
            g = g @ W.T
        flat = np.concatenate([np.concatenate([gW.ravel(), gb]) for gW, gb in reversed(grads)])
        return flat, g


@dataclass(frozen=True)
class DeviceSetNet:
    """One shared :class:`Mlp` applied to every item (device) row.

    Input layout per sample: ``n_items * item_dim`` item features (item-major)
    followed by ``global_dim`` features appended to every item. The output is
    channel-major: all items' channel 0, then all items' channel 1, and so on,
    so a ``k``-channel head yields ``k * n_items`` values.
    """

    n_items: int
    item_dim: int
    global_dim: int
    channels: int
    hidden: tuple[int, ...] = (64, 64)

    @property
    def mlp(self) -> Mlp:
        return Mlp((self.item_dim + self.global_dim, *self.hidden, self.channels))

    @property
    def in_dim(self) -> int:
        return self.n_items * self.item_dim + self.global_dim

    @property
    def out_dim(self) -> int:
        return self.n_items * self.channels

    @property
    def n_params(self) -> int:
        return self.mlp.n_params

    def init(self, rng: np.random.Generator, out_scale: float = 1.0) -> np.ndarray:
        return self.mlp.init(rng, out_scale)

    def output_bias(self, params: np.ndarray) -> np.ndarray:
        return self.mlp.output_bias(params)

    def forward(self, params: np.ndarray, x: np.ndarray):
        x = np.atleast_2d(np.asarray(x, dtype=float))
        n, I, d = x.shape[0], self.n_items, self.item_dim
        if x.shape[1] != self.in_dim:
            raise ValueError(f"expected input width {self.in_dim}, got {x.shape[1]}")
        items = x[:, :I * d].reshape(n, I, d)
        glob = np.broadcast_to(x[:, None, I * d:], (n, I, self.global_dim))
        out, acts = self.mlp.forward(params, np.concatenate([items, glob], axis=2).reshape(n * I, -1))
        return out.reshape(n, I, self.channels).transpose(0, 2, 1).reshape(n, -1), acts

    def __call__(self, params: np.ndarray, x: np.ndarray) -> np.ndarray:
        return self.forward(params, x)[0]

    def backward(self, params: np.ndarray, acts: list[np.ndarray], grad_out: np.ndarray):
        I, d = self.n_items, self.item_dim
        g = np.asarray(grad_out, dtype=float)
        n = g.shape[0]
        g = g.reshape(n, self.channels, I).transpose(0, 2, 1).reshape(n * I, self.channels)
        gp, gin = self.mlp.backward(params, acts, g)
        gin = gin.reshape(n, I, -1)
        gx = np.concatenate([gin[:, :, :d].reshape(n, I * d), gin[:, :, d:].sum(axis=1)], axis=1)
        return gp, gx


class Adam:
    """Adam on a flat parameter vector (updates ``params`` in place)."""

    def __init__(self, size: int, lr: float, betas: tuple[float, float] = (0.9, 0.999),
                 eps: float = 1e-8, grad_clip: float | None = None):
        self.lr = float(lr)
        self.b1, self.b2 = betas
        self.eps = eps
        self.grad_clip = grad_clip
        self.m = np.zeros(size)
        self.v = np.zeros(size)
        self.t = 0

    def step(self, params: np.ndarray, grad: np.ndarray) -> np.ndarray:
        if self.lr == 0.0:
            return params
        if self.grad_clip is not None:
            norm = float(np.linalg.norm(grad))
            if norm > self.grad_clip:
                grad = grad * (self.grad_clip / norm)
        self.t += 1
        self.m = self.b1 * self.m + (1 - self.b1) * grad
        self.v = self.b2 * self.v + (1 - self.b2) * grad * grad
        mhat = self.m / (1 - self.b1 ** self.t)
        vhat = self.v / (1 - self.b2 ** self.t)
        params -= self.lr * mhat / (np.sqrt(vhat) + self.eps)
        return params

    def state_dict(self) -> dict:
        return {"m": self.m.copy(), "v": self.v.copy(), "t": self.t}


def numerical_gradient(f: Callable[[np.ndarray], float], x: np.ndarray, eps: float = 1e-6,
                       index: np.ndarray | None = None) -> np.ndarray:
    """Central differences of scalar ``f`` at ``x`` (optionally only at ``index``)."""
    x = np.array(x, dtype=float)
    idx = np.arange(x.size) if index is None else np.asarray(index)
    g = np.zeros(len(idx))
    flat = x.reshape(-1)
    for n, k in enumerate(idx):
        old = flat[k]
        flat[k] = old + eps
        hi = f(x)
        flat[k] = old - eps
        lo = f(x)
        flat[k] = old
        g[n] = (hi - lo) / (2 * eps)
    return g


def relative_error(a: np.ndarray, b: np.ndarray, floor: float = 1e-12) -> float:
    """``||a - b|| / max(||a||, ||b||, floor)`` over the flattened arrays."""
    a, b = np.ravel(a).astype(float), np.ravel(b).astype(float)
    return float(np.linalg.norm(a - b) / max(np.linalg.norm(a), np.linalg.norm(b), floor))
