"""Small fully-connected heads used by the scale predictor and the decoders.

Hidden layers use leaky-ReLU (slope 0.01); the output layer is linear. The
forward pass caches nothing; vjp() recomputes activations, which is cheap at
these sizes and keeps the nets immutable during decoding.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ShapeMismatch

LEAKY_SLOPE = 0.01


def leaky_relu(x: np.ndarray) -> np.ndarray:
    return np.where(x >= 0.0, x, LEAKY_SLOPE * x)


def _leaky_grad(x: np.ndarray) -> np.ndarray:
    return np.where(x >= 0.0, 1.0, LEAKY_SLOPE)


@dataclass
class TinyNet:
    """MLP with weights[i]: (out_i, in_i) and biases[i]: (out_i,)."""

    weights: list[np.ndarray]
    biases: list[np.ndarray]

    def __post_init__(self):
        if len(self.weights) != len(self.biases):
            raise ShapeMismatch("weights/biases length mismatch")
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            if w.ndim != 2 or b.shape != (w.shape[0],):
                raise ShapeMismatch(f"layer {i}: weight {w.shape} vs bias {b.shape}")
            if i > 0 and w.shape[1] != self.weights[i - 1].shape[0]:
                raise ShapeMismatch(f"layer {i}: input width {w.shape[1]} does not chain")
            if not (np.all(np.isfinite(w)) and np.all(np.isfinite(b))):
                raise ShapeMismatch(f"layer {i}: non-finite parameters")

    @property
    def in_width(self) -> int:
        return self.weights[0].shape[1]

    @property
    def out_width(self) -> int:
        return self.weights[-1].shape[0]

    @staticmethod
    def zeros(widths: list[int]) -> "TinyNet":
        ws = [np.zeros((o, i)) for i, o in zip(widths[:-1], widths[1:])]
        bs = [np.zeros(o) for o in widths[1:]]
        return TinyNet(ws, bs)

    @staticmethod
    def random(widths: list[int], rng: np.random.Generator, scale: float = 1.0) -> "TinyNet":
        """He-style init scaled by `scale`."""
        ws, bs = [], []
        for i, o in zip(widths[:-1], widths[1:]):
            ws.append(rng.standard_normal((o, i)) * scale * np.sqrt(2.0 / i))
            bs.append(np.zeros(o))
        return TinyNet(ws, bs)

    def forward(self, x: np.ndarray) -> np.ndarray:
        x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        if x.shape[1] != self.in_width:
            raise ShapeMismatch(f"input width {x.shape[1]}, net expects {self.in_width}")
        h = x
        last = len(self.weights) - 1
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            h = h @ w.T + b
            if i != last:
                h = leaky_relu(h)
        return h

    def vjp(self, x: np.ndarray, grad_out: np.ndarray):
        """Returns (grad_x, grad_weights, grad_biases) for sum(out * grad_out)."""
        x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        grad_out = np.atleast_2d(np.asarray(grad_out, dtype=np.float64))
        pre, post = [], [x]
        h = x
        last = len(self.weights) - 1
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            z = h @ w.T + b
            pre.append(z)
            h = leaky_relu(z) if i != last else z
            post.append(h)
        gw = [np.zeros_like(w) for w in self.weights]
        gb = [np.zeros_like(b) for b in self.biases]
        g = grad_out
        for i in range(last, -1, -1):
            if i != last:
                g = g * _leaky_grad(pre[i])
            gw[i] = g.T @ post[i]
            gb[i] = g.sum(axis=0)
            g = g @ self.weights[i]
        return g, gw, gb

    def parameters(self) -> list[np.ndarray]:
        return list(self.weights) + list(self.biases)


class MomentumOptimizer:
    """Plain gradient descent with momentum over a flat parameter list."""

    def __init__(self, params: list[np.ndarray], lr: float, momentum: float = 0.9):
        self.params = params
        self.lr = lr
        self.momentum = momentum
        self.velocity = [np.zeros_like(p) for p in params]

    def step(self, grads: list[np.ndarray]) -> None:
        for p, v, g in zip(self.params, self.velocity, grads):
            v *= self.momentum
            v += g
            p -= self.lr * v


def sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x, dtype=np.float64)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def logit(p: np.ndarray, eps: float = 1e-6) -> np.ndarray:
    p = np.clip(p, eps, 1.0 - eps)
    return np.log(p) - np.log1p(-p)


def softplus(x: np.ndarray) -> np.ndarray:
    return np.logaddexp(0.0, x)
