"""Comparison temporal heads: a two-layer LSTM and a small transformer encoder.

Both consume ``(B, T, d)`` sequences and emit per-step features, so they plug
into the same pooling/classifier tail as the TKAN head.
"""

import math

import numpy as np

from .errors import ContractError
from .numerics import (
    Linear,
    Module,
    init_normal,
    init_params,
    relu,
    sigmoid,
    softmax,
    softmax_backward,
)

# gate blocks inside W, U and b, in this order
LSTM_GATE_ORDER = ("i", "f", "c", "o")


class LstmLayer(Module):
    def __init__(self, in_width, hidden, rng, forget_bias=1.0):
        super().__init__()
        self.in_width = in_width
        self.hidden = hidden
        self.W = self.add_param("W", init_params((4 * hidden, in_width), "fan_avg", rng))
        self.U = self.add_param("U", init_params((4 * hidden, hidden), "fan_avg", rng))
        self.b = self.add_param("b", np.zeros(4 * hidden))
        self.b[hidden : 2 * hidden] = forget_bias

    def step(self, x_t, h_prev, c_prev):
        if x_t.shape[-1] != self.in_width or h_prev.shape[-1] != self.hidden:
            raise ContractError(
                f"LSTM step expects widths ({self.in_width}, {self.hidden}), "
                f"got ({x_t.shape[-1]}, {h_prev.shape[-1]})"
            )
        n = self.hidden
        a = x_t @ self.W.T + h_prev @ self.U.T + self.b
        i = sigmoid(a[:, :n])
        f = sigmoid(a[:, n : 2 * n])
        g = np.tanh(a[:, 2 * n : 3 * n])
        o = sigmoid(a[:, 3 * n :])
        c = f * c_prev + i * g
        tanh_c = np.tanh(c)
        h = o * tanh_c
        return h, c, (x_t, h_prev, c_prev, i, f, g, o, tanh_c)

    def step_backward(self, grad_h, grad_c, cache):
        x_t, h_prev, c_prev, i, f, g, o, tanh_c = cache
        grad_c = grad_c + grad_h * o * (1.0 - tanh_c**2)
        grad_a = np.concatenate(
            [
                grad_c * g * i * (1.0 - i),
                grad_c * c_prev * f * (1.0 - f),
                grad_c * i * (1.0 - g**2),
                grad_h * tanh_c * o * (1.0 - o),
            ],
            axis=-1,
        )
        self.grads["W"] += grad_a.T @ x_t
        self.grads["U"] += grad_a.T @ h_prev
        self.grads["b"] += grad_a.sum(axis=0)
        return grad_a @ self.W, grad_a @ self.U, grad_c * f

    def forward(self, X):
        if X.ndim != 3 or X.shape[1] == 0:
            raise ContractError(f"LSTM expects (B, T>=1, d), got {X.shape}")
        batch = X.shape[0]
        h = np.zeros((batch, self.hidden))
        c = np.zeros((batch, self.hidden))
        outputs, caches = [], []
        for t in range(X.shape[1]):
            h, c, cache = self.step(X[:, t], h, c)
            outputs.append(h)
            caches.append(cache)
        return np.stack(outputs, axis=1), caches

    def backward(self, grad_H, caches):
        batch, steps = grad_H.shape[:2]
        grad_h = np.zeros((batch, self.hidden))
        grad_c = np.zeros((batch, self.hidden))
        grad_X = np.zeros((batch, steps, self.in_width))
        for t in reversed(range(steps)):
            grad_X[:, t], grad_h, grad_c = self.step_backward(grad_H[:, t] + grad_h, grad_c, caches[t])
        return grad_X


class LstmHead(Module):
    kind = "lstm"

    def __init__(self, in_width, rng, widths=(256, 128), forget_bias=1.0):
        super().__init__()
        self.layers = []
        width = in_width
        for index, hidden in enumerate(widths):
            self.layers.append(self.add_child(f"lstm{index}", LstmLayer(width, hidden, rng, forget_bias)))
            width = hidden

    @property
    def out_width(self):
        return self.layers[-1].hidden

    def forward(self, X):
        caches = []
        for layer in self.layers:
            X, cache = layer.forward(X)
            caches.append(cache)
        return X, caches

    def backward(self, grad_H, caches):
        for layer, cache in zip(reversed(self.layers), reversed(caches)):
            grad_H = layer.backward(grad_H, cache)
        return grad_H


def attention(Q, K, V):
    """Scaled dot-product attention over the last two axes; returns ``(out, weights)``."""
    if Q.shape != K.shape or K.shape[:-1] != V.shape[:-1]:
        raise ContractError(f"attention shapes disagree: Q{Q.shape} K{K.shape} V{V.shape}")
    scale = 1.0 / math.sqrt(Q.shape[-1])
    weights = softmax(Q @ np.swapaxes(K, -1, -2) * scale, axis=-1)
    return weights @ V, weights


def attention_backward(Q, K, V, weights, grad_out):
    scale = 1.0 / math.sqrt(Q.shape[-1])
    grad_V = np.swapaxes(weights, -1, -2) @ grad_out
    grad_scores = softmax_backward(weights, grad_out @ np.swapaxes(V, -1, -2)) * scale
    return grad_scores @ K, np.swapaxes(grad_scores, -1, -2) @ Q, grad_V


class MultiHeadAttention(Module):
    def __init__(self, width, heads, rng):
        super().__init__()
        if width % heads:
            raise ContractError(f"model width {width} is not divisible by {heads} heads")
        self.width = width
        self.heads = heads
        self.head_width = width // heads
        self.query = self.add_child("query", Linear(width, width, rng))
        self.key = self.add_child("key", Linear(width, width, rng))
        self.value = self.add_child("value", Linear(width, width, rng))
        self.output = self.add_child("output", Linear(width, width, rng))

    def _split(self, x):
        batch, steps, _ = x.shape
        return x.reshape(batch, steps, self.heads, self.head_width).transpose(0, 2, 1, 3)

    def _merge(self, x):
        batch, _, steps, _ = x.shape
        return x.transpose(0, 2, 1, 3).reshape(batch, steps, self.width)

    def forward(self, x):
        q, q_cache = self.query.forward(x)
        k, k_cache = self.key.forward(x)
        v, v_cache = self.value.forward(x)
        Q, K, V = self._split(q), self._split(k), self._split(v)
        attended, weights = attention(Q, K, V)
        out, out_cache = self.output.forward(self._merge(attended))
        return out, (q_cache, k_cache, v_cache, Q, K, V, weights, out_cache)

    def backward(self, grad_out, cache):
        q_cache, k_cache, v_cache, Q, K, V, weights, out_cache = cache
        grad_attended = self._split(self.output.backward(grad_out, out_cache))
        grad_Q, grad_K, grad_V = attention_backward(Q, K, V, weights, grad_attended)
        return (
            self.query.backward(self._merge(grad_Q), q_cache)
            + self.key.backward(self._merge(grad_K), k_cache)
            + self.value.backward(self._merge(grad_V), v_cache)
        )


class LayerNorm(Module):
    def __init__(self, width, eps=1e-5):
        super().__init__()
        self.width = width
        self.eps = eps
        self.gamma = self.add_param("gamma", np.ones(width))
        self.beta = self.add_param("beta", np.zeros(width))

    def forward(self, x):
        mean = x.mean(axis=-1, keepdims=True)
        inv_std = 1.0 / np.sqrt(x.var(axis=-1, keepdims=True) + self.eps)
        xhat = (x - mean) * inv_std
        return xhat * self.gamma + self.beta, (xhat, inv_std)

    def backward(self, grad_out, cache):
        xhat, inv_std = cache
        lead = tuple(range(grad_out.ndim - 1))
        self.grads["gamma"] += np.sum(grad_out * xhat, axis=lead)
        self.grads["beta"] += np.sum(grad_out, axis=lead)
        dxhat = grad_out * self.gamma
        n = self.width
        return (inv_std / n) * (
            n * dxhat
            - dxhat.sum(axis=-1, keepdims=True)
            - xhat * np.sum(dxhat * xhat, axis=-1, keepdims=True)
        )


class FeedForward(Module):
    def __init__(self, width, hidden, rng):
        super().__init__()
        self.inner = self.add_child("inner", Linear(width, hidden, rng))
        self.outer = self.add_child("outer", Linear(hidden, width, rng))

    def forward(self, x):
        pre, inner_cache = self.inner.forward(x)
        out, outer_cache = self.outer.forward(relu(pre))
        return out, (pre, inner_cache, outer_cache)

    def backward(self, grad_out, cache):
        pre, inner_cache, outer_cache = cache
        grad_hidden = self.outer.backward(grad_out, outer_cache) * (pre > 0)
        return self.inner.backward(grad_hidden, inner_cache)


class EncoderLayer(Module):
    """Residual attention + feed-forward block, pre-norm by default."""

    def __init__(self, width, heads, ff_width, rng, norm_first=True):
        super().__init__()
        self.norm_first = norm_first
        self.attn = self.add_child("attn", MultiHeadAttention(width, heads, rng))
        self.ff = self.add_child("ff", FeedForward(width, ff_width, rng))
        self.norm1 = self.add_child("norm1", LayerNorm(width))
        self.norm2 = self.add_child("norm2", LayerNorm(width))

    def forward(self, x):
        if self.norm_first:
            n1, n1_cache = self.norm1.forward(x)
            a, a_cache = self.attn.forward(n1)
            x1 = x + a
            n2, n2_cache = self.norm2.forward(x1)
            f, f_cache = self.ff.forward(n2)
            return x1 + f, (n1_cache, a_cache, n2_cache, f_cache)
        a, a_cache = self.attn.forward(x)
        x1, n1_cache = self.norm1.forward(x + a)
        f, f_cache = self.ff.forward(x1)
        y, n2_cache = self.norm2.forward(x1 + f)
        return y, (n1_cache, a_cache, n2_cache, f_cache)

    def backward(self, grad_out, cache):
        n1_cache, a_cache, n2_cache, f_cache = cache
        if self.norm_first:
            grad_x1 = grad_out + self.norm2.backward(self.ff.backward(grad_out, f_cache), n2_cache)
            return grad_x1 + self.norm1.backward(self.attn.backward(grad_x1, a_cache), n1_cache)
        grad_s2 = self.norm2.backward(grad_out, n2_cache)
        grad_x1 = grad_s2 + self.ff.backward(grad_s2, f_cache)
        grad_s1 = self.norm1.backward(grad_x1, n1_cache)
        return grad_s1 + self.attn.backward(grad_s1, a_cache)


class TransformerHead(Module):
    kind = "transformer"

    def __init__(
        self,
        width,
        rng,
        heads=4,
        ff_width=1024,
        num_layers=2,
        max_length=50,
        norm_first=True,
    ):
        super().__init__()
        self.width = width
        self.max_length = max_length
        self.norm_first = norm_first
        self.positions = self.add_param("positions", init_normal((max_length, width), 0.02, rng))
        self.layers = [
            self.add_child(f"layer{index}", EncoderLayer(width, heads, ff_width, rng, norm_first))
            for index in range(num_layers)
        ]
        self.final_norm = self.add_child("final_norm", LayerNorm(width)) if norm_first else None

    @property
    def out_width(self):
        return self.width

    def forward(self, X):
        if X.ndim != 3 or X.shape[2] != self.width:
            raise ContractError(f"transformer expects (B, T, {self.width}), got {X.shape}")
        steps = X.shape[1]
        if not 1 <= steps <= self.max_length:
            raise ContractError(f"sequence length {steps} exceeds positional table of {self.max_length}")
        z = X + self.positions[:steps]
        caches = []
        for layer in self.layers:
            z, cache = layer.forward(z)
            caches.append(cache)
        norm_cache = None
        if self.final_norm is not None:
            z, norm_cache = self.final_norm.forward(z)
        return z, (steps, caches, norm_cache)

    def backward(self, grad_H, cache):
        steps, caches, norm_cache = cache
        if self.final_norm is not None:
            grad_H = self.final_norm.backward(grad_H, norm_cache)
        for layer, layer_cache in zip(reversed(self.layers), reversed(caches)):
            grad_H = layer.backward(grad_H, layer_cache)
        self.grads["positions"][:steps] += grad_H.sum(axis=0)
        return grad_H


def lstm_step(layer, x_t, h_prev, c_prev):
    x_t, h_prev, c_prev = (np.atleast_2d(np.asarray(a, dtype=np.float64)) for a in (x_t, h_prev, c_prev))
    h, c, _ = layer.step(x_t, h_prev, c_prev)
    return h, c


def lstm_head_forward(head, X):
    X = np.asarray(X, dtype=np.float64)
    return head.forward(X[None])[0][0] if X.ndim == 2 else head.forward(X)[0]


def transformer_head_forward(head, X):
    X = np.asarray(X, dtype=np.float64)
    return head.forward(X[None])[0][0] if X.ndim == 2 else head.forward(X)[0]
