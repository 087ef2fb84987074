"""Numpy building blocks with hand-written backward passes.

Every ``*_forward`` returns ``(out, cache)`` and the matching ``*_backward``
consumes ``(d_out, cache)``. Shapes carry arbitrary leading batch axes.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np


class NumericError(ArithmeticError):
    """A loss or gradient became non-finite."""


def softmax(z: np.ndarray, axis: int = -1) -> np.ndarray:
    z = z - z.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


def log_softmax(z: np.ndarray, axis: int = -1) -> np.ndarray:
    z = z - z.max(axis=axis, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=axis, keepdims=True))


def softmax_backward(d_p: np.ndarray, p: np.ndarray, axis: int = -1) -> np.ndarray:
    return p * (d_p - (d_p * p).sum(axis=axis, keepdims=True))


def sinusoidal_encoding(T: int, width: int) -> np.ndarray:
    pos = np.arange(T)[:, None]
    i = np.arange(width)[None, :]
    angle = pos / np.power(10000.0, (2 * (i // 2)) / max(width, 1))
    return np.where(i % 2 == 0, np.sin(angle), np.cos(angle))


def attention_forward(X, Wq, Wk, Wv, n_heads: int, Wo=None):
    """Scaled dot-product self-attention over the second-to-last axis of ``X``."""
    *lead, T, _ = X.shape
    d = Wq.shape[1]
    dh = d // n_heads
    Q, K, V = X @ Wq, X @ Wk, X @ Wv

    def heads(A):
        return A.reshape(*lead, T, n_heads, dh).swapaxes(-2, -3)

    Qh, Kh, Vh = heads(Q), heads(K), heads(V)
    scale = 1.0 / math.sqrt(dh)
    P = softmax((Qh @ Kh.swapaxes(-1, -2)) * scale)
    Oh = P @ Vh
    O = Oh.swapaxes(-2, -3).reshape(*lead, T, d)
    out = O @ Wo if Wo is not None else O
    return out, (X, Qh, Kh, Vh, P, O, Wq, Wk, Wv, Wo, n_heads, scale)


def _sum_lead(A: np.ndarray) -> np.ndarray:
    return A.reshape(-1, A.shape[-2], A.shape[-1]).sum(axis=0)


def _outer(X: np.ndarray, dY: np.ndarray) -> np.ndarray:
    return X.reshape(-1, X.shape[-1]).T @ dY.reshape(-1, dY.shape[-1])


def attention_backward(d_out, cache):
    X, Qh, Kh, Vh, P, O, Wq, Wk, Wv, Wo, n_heads, scale = cache
    *lead, T, _ = X.shape
    d = Wq.shape[1]
    grads = {}
    if Wo is not None:
        grads["Wo"] = _outer(O, d_out)
        dO = d_out @ Wo.T
    else:
        dO = d_out
    dOh = dO.reshape(*lead, T, n_heads, d // n_heads).swapaxes(-2, -3)
    dP = dOh @ Vh.swapaxes(-1, -2)
    dVh = P.swapaxes(-1, -2) @ dOh
    dS = softmax_backward(dP, P) * scale
    dQh = dS @ Kh
    dKh = dS.swapaxes(-1, -2) @ Qh

    def merge(Ah):
        return Ah.swapaxes(-2, -3).reshape(*lead, T, d)

    dQ, dK, dV = merge(dQh), merge(dKh), merge(dVh)
    grads["Wq"] = _outer(X, dQ)
    grads["Wk"] = _outer(X, dK)
    grads["Wv"] = _outer(X, dV)
    dX = dQ @ Wq.T + dK @ Wk.T + dV @ Wv.T
    return dX, grads


def sigmoid(z: np.ndarray) -> np.ndarray:
    return 0.5 * (1.0 + np.tanh(0.5 * z))


@dataclass
class Adam:
    """Adam with L2 weight decay folded into the gradient.

    ``lr`` maps parameter name to learning rate so groups can differ.
    """

    lr: dict[str, float]
    weight_decay: float = 0.0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step_count: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)

    def step(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray]) -> None:
        self.step_count += 1
        b1c = 1.0 - self.beta1 ** self.step_count
        b2c = 1.0 - self.beta2 ** self.step_count
        for name in sorted(grads):
            g = grads[name] + self.weight_decay * params[name]
            if name not in self.m:
                self.m[name] = np.zeros_like(g)
                self.v[name] = np.zeros_like(g)
            self.m[name] = self.beta1 * self.m[name] + (1 - self.beta1) * g
            self.v[name] = self.beta2 * self.v[name] + (1 - self.beta2) * g * g
            update = (self.m[name] / b1c) / (np.sqrt(self.v[name] / b2c) + self.eps)
            params[name] -= self.lr[name] * update


@dataclass
class GradCheckResult:
    max_rel_error: float
    coords: list[tuple[str, tuple[int, ...]]]
    rel_errors: np.ndarray
    analytic: np.ndarray
    numeric: np.ndarray

    def worst(self) -> tuple[str, tuple[int, ...], float]:
        k = int(np.argmax(self.rel_errors))
        return self.coords[k][0], self.coords[k][1], float(self.rel_errors[k])


def relative_error(a: np.ndarray, n: np.ndarray, floor: float = 1e-6) -> np.ndarray:
    """``|a - n| / max(|a|, |n|, floor)``; the floor keeps near-zero gradients comparable."""
    return np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)


def check_gradients(loss_fn, params: dict[str, np.ndarray], analytic: dict[str, np.ndarray],
                    epsilon: float, n_coords: int = 100, seed: int = 0,
                    names: list[str] | None = None, floor: float = 1e-6) -> GradCheckResult:
    """Compare ``analytic`` against central differences of ``loss_fn()`` on sampled coordinates.

    ``loss_fn`` reads ``params`` in place; each probed entry is restored afterwards.
    Coordinates are drawn uniformly over all entries of the selected arrays.
    """
    if not 1e-6 <= epsilon <= 1e-3:
        raise ValueError(f"epsilon must lie in [1e-6, 1e-3], got {epsilon}")
    names = sorted(names or params)
    sizes = np.array([params[n].size for n in names])
    total = int(sizes.sum())
    rng = np.random.default_rng(seed)
    flat = rng.choice(total, size=min(n_coords, total), replace=False)
    offsets = np.concatenate([[0], np.cumsum(sizes)])
    coords, a_vals, n_vals = [], [], []
    for f in sorted(flat):
        k = int(np.searchsorted(offsets, f, side="right") - 1)
        name = names[k]
        idx = np.unravel_index(int(f - offsets[k]), params[name].shape)
        arr = params[name]
        orig = arr[idx]
        arr[idx] = orig + epsilon
        up = loss_fn()
        arr[idx] = orig - epsilon
        down = loss_fn()
        arr[idx] = orig
        coords.append((name, tuple(int(i) for i in idx)))
        n_vals.append((up - down) / (2 * epsilon))
        a_vals.append(analytic[name][idx])
    a = np.array(a_vals)
    n = np.array(n_vals)
    rel = relative_error(a, n, floor)
    return GradCheckResult(float(rel.max()), coords, rel, a, n)
