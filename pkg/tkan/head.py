"""Temporal KAN head: parallel recurrent KAN sublayers feeding a gated memory.

Per step, each sublayer ``m`` computes

    s   = W_x x_t + W_h h~_{t-1} + b
    o~  = phi_m(s)
    h~_t = W_hh h~_{t-1} + W_hz o~

and the cell concatenates the sublayer responses into ``r_t``. Forget, input
and candidate gates read ``x_t`` and ``h_{t-1}``; only the output gate reads
``r_t``. All tensors are batch-first: ``x_t`` is ``(B, d)``, sequences are
``(B, T, d)``.
"""

import logging
from dataclasses import dataclass

import numpy as np

from .errors import ContractError
from .numerics import (
    Module,
    check_finite,
    dropout,
    dropout_backward,
    init_params,
    sigmoid,
    softmax,
)
from .spline import KanLayer

logger = logging.getLogger(__name__)

GATES = ("f", "i", "c")


@dataclass
class TkanState:
    c: np.ndarray
    h: np.ndarray
    h_sub: list

    @classmethod
    def zeros(cls, batch, width, sub_width, num_sublayers):
        return cls(
            c=np.zeros((batch, width)),
            h=np.zeros((batch, width)),
            h_sub=[np.zeros((batch, sub_width)) for _ in range(num_sublayers)],
        )


class RkanSublayer(Module):
    def __init__(self, in_width, sub_width, rng, grid=None, rho="identity"):
        super().__init__()
        self.in_width = in_width
        self.sub_width = sub_width
        self.W_x = self.add_param("W_x", init_params((sub_width, in_width), "fan_avg", rng))
        self.W_h = self.add_param("W_h", init_params((sub_width, sub_width), "fan_avg", rng))
        self.b = self.add_param("b", np.zeros(sub_width))
        self.phi = self.add_child("phi", KanLayer(sub_width, sub_width, rng, grid=grid, rho=rho))
        self.W_hh = self.add_param("W_hh", init_params((sub_width, sub_width), "fan_avg", rng))
        self.W_hz = self.add_param("W_hz", init_params((sub_width, sub_width), "fan_avg", rng))

    def step(self, x_t, h_prev):
        if x_t.shape[-1] != self.in_width or h_prev.shape[-1] != self.sub_width:
            raise ContractError(
                f"RKAN step expects widths ({self.in_width}, {self.sub_width}), "
                f"got ({x_t.shape[-1]}, {h_prev.shape[-1]})"
            )
        s = x_t @ self.W_x.T + h_prev @ self.W_h.T + self.b
        response, phi_cache = self.phi.forward(s)
        h_t = h_prev @ self.W_hh.T + response @ self.W_hz.T
        return response, h_t, (x_t, h_prev, response, phi_cache)

    def step_backward(self, grad_response, grad_h, cache):
        x_t, h_prev, response, phi_cache = cache
        self.grads["W_hz"] += grad_h.T @ response
        self.grads["W_hh"] += grad_h.T @ h_prev
        grad_response = grad_response + grad_h @ self.W_hz
        grad_h_prev = grad_h @ self.W_hh
        grad_s = self.phi.backward(grad_response, phi_cache)
        self.grads["W_x"] += grad_s.T @ x_t
        self.grads["W_h"] += grad_s.T @ h_prev
        self.grads["b"] += grad_s.sum(axis=0)
        return grad_s @ self.W_x, grad_h_prev + grad_s @ self.W_h


class TkanCell(Module):
    kind = "tkan"

    def __init__(
        self,
        width,
        rng,
        sub_width=None,
        num_sublayers=2,
        grid=None,
        rho="identity",
        forget_bias=1.0,
    ):
        super().__init__()
        self.width = width
        self.sub_width = sub_width or max(1, width // 2)
        self.num_sublayers = num_sublayers
        self.sublayers = [
            self.add_child(f"rkan{m}", RkanSublayer(width, self.sub_width, rng, grid=grid, rho=rho))
            for m in range(num_sublayers)
        ]
        for gate in GATES:
            self.add_param(f"W_{gate}", init_params((width, width), "fan_avg", rng))
            self.add_param(f"U_{gate}", init_params((width, width), "fan_avg", rng))
            self.add_param(f"b_{gate}", np.zeros(width))
        self.params["b_f"][...] = forget_bias
        self.add_param("W_o", init_params((width, num_sublayers * self.sub_width), "fan_avg", rng))
        self.add_param("b_o", np.zeros(width))

    @property
    def out_width(self):
        return self.width

    def initial_state(self, batch):
        return TkanState.zeros(batch, self.width, self.sub_width, self.num_sublayers)

    def _gate(self, gate, x_t, h_prev):
        p = self.params
        return x_t @ p[f"W_{gate}"].T + h_prev @ p[f"U_{gate}"].T + p[f"b_{gate}"]

    def step(self, x_t, state, t=None):
        if x_t.shape[-1] != self.width or state.c.shape[-1] != self.width:
            raise ContractError(f"TKAN step expects width {self.width}, got {x_t.shape[-1]}")
        responses, new_sub, sub_caches = [], [], []
        for sublayer, h_prev in zip(self.sublayers, state.h_sub):
            response, h_t, cache = sublayer.step(x_t, h_prev)
            responses.append(response)
            new_sub.append(h_t)
            sub_caches.append(cache)
        r = np.concatenate(responses, axis=-1)
        f = sigmoid(self._gate("f", x_t, state.h))
        i = sigmoid(self._gate("i", x_t, state.h))
        candidate = np.tanh(self._gate("c", x_t, state.h))
        o = sigmoid(r @ self.params["W_o"].T + self.params["b_o"])
        c = f * state.c + i * candidate
        tanh_c = np.tanh(c)
        h = o * tanh_c
        for name, value in (
            ("forget gate", f),
            ("input gate", i),
            ("candidate", candidate),
            ("output gate", o),
            ("cell state", c),
            ("sublayer responses", r),
        ):
            check_finite(name, value, step=t)
        new_state = TkanState(c=c, h=h, h_sub=new_sub)
        gates = {"f": f, "i": i, "c": candidate, "o": o}
        return h, new_state, (x_t, state, r, gates, tanh_c, sub_caches)

    def step_backward(self, grad_h, grad_c, grad_h_sub, cache):
        x_t, state, r, gates, tanh_c, sub_caches = cache
        f, i, candidate, o = gates["f"], gates["i"], gates["c"], gates["o"]
        grad_o = grad_h * tanh_c
        grad_c = grad_c + grad_h * o * (1.0 - tanh_c**2)
        pre = {
            "f": grad_c * state.c * f * (1.0 - f),
            "i": grad_c * candidate * i * (1.0 - i),
            "c": grad_c * i * (1.0 - candidate**2),
        }
        grad_x = np.zeros_like(x_t)
        grad_h_prev = np.zeros_like(state.h)
        for gate, grad_pre in pre.items():
            self.grads[f"W_{gate}"] += grad_pre.T @ x_t
            self.grads[f"U_{gate}"] += grad_pre.T @ state.h
            self.grads[f"b_{gate}"] += grad_pre.sum(axis=0)
            grad_x += grad_pre @ self.params[f"W_{gate}"]
            grad_h_prev += grad_pre @ self.params[f"U_{gate}"]
        grad_o_pre = grad_o * o * (1.0 - o)
        self.grads["W_o"] += grad_o_pre.T @ r
        self.grads["b_o"] += grad_o_pre.sum(axis=0)
        grad_r = grad_o_pre @ self.params["W_o"]
        grad_sub_prev = []
        for m, (sublayer, sub_cache) in enumerate(zip(self.sublayers, sub_caches)):
            block = grad_r[:, m * self.sub_width : (m + 1) * self.sub_width]
            dx, dh = sublayer.step_backward(block, grad_h_sub[m], sub_cache)
            grad_x += dx
            grad_sub_prev.append(dh)
        return grad_x, grad_h_prev, grad_c * f, grad_sub_prev

    def forward(self, X):
        if X.ndim != 3 or X.shape[1] == 0:
            raise ContractError(f"TKAN forward expects (B, T>=1, d), got {X.shape}")
        state = self.initial_state(X.shape[0])
        outputs, caches = [], []
        for t in range(X.shape[1]):
            h, state, cache = self.step(X[:, t], state, t=t)
            outputs.append(h)
            caches.append(cache)
        return np.stack(outputs, axis=1), caches

    def backward(self, grad_H, caches):
        batch = grad_H.shape[0]
        grad_h_next = np.zeros((batch, self.width))
        grad_c = np.zeros((batch, self.width))
        grad_sub = [np.zeros((batch, self.sub_width)) for _ in self.sublayers]
        grad_X = np.zeros(grad_H.shape[:2] + (self.width,))
        for t in reversed(range(grad_H.shape[1])):
            grad_X[:, t], grad_h_next, grad_c, grad_sub = self.step_backward(
                grad_H[:, t] + grad_h_next, grad_c, grad_sub, caches[t]
            )
        return grad_X


class ClassifierHead(Module):
    """Temporal mean pooling, dropout on the pooled vector, linear-softmax."""

    def __init__(self, width, num_classes, rng, rate=0.3):
        super().__init__()
        self.width = width
        self.num_classes = num_classes
        self.rate = rate
        self.W_y = self.add_param("W_y", init_params((num_classes, width), "fan_avg", rng))
        self.b_y = self.add_param("b_y", np.zeros(num_classes))

    def forward(self, H, training=False, rng=None):
        if H.ndim != 3 or H.shape[1] == 0 or H.shape[2] != self.width:
            raise ContractError(f"classifier expects (B, T>=1, {self.width}), got {H.shape}")
        pooled = H.mean(axis=1)
        dropped, mask = dropout(pooled, self.rate, rng, training)
        logits = dropped @ self.W_y.T + self.b_y
        probs = softmax(logits, axis=-1)
        return pooled, logits, probs, (dropped, mask, H.shape)

    def backward(self, grad_logits, cache):
        dropped, mask, shape = cache
        self.grads["W_y"] += grad_logits.T @ dropped
        self.grads["b_y"] += grad_logits.sum(axis=0)
        grad_pooled = dropout_backward(grad_logits @ self.W_y, mask)
        return np.repeat(grad_pooled[:, None, :] / shape[1], shape[1], axis=1)


def rkan_step(sublayer, x_t, h_prev):
    x_t = np.atleast_2d(np.asarray(x_t, dtype=np.float64))
    h_prev = np.atleast_2d(np.asarray(h_prev, dtype=np.float64))
    response, h_t, _ = sublayer.step(x_t, h_prev)
    return response[0], h_t[0]


def tkan_step(cell, x_t, state=None):
    x_t = np.atleast_2d(np.asarray(x_t, dtype=np.float64))
    state = state or cell.initial_state(x_t.shape[0])
    h, new_state, _ = cell.step(x_t, state)
    return h, new_state


def temporal_forward(temporal, X):
    """Run any temporal head on one clip ``(T, d)`` or a batch ``(B, T, d)``."""
    X = np.asarray(X, dtype=np.float64)
    if X.ndim == 2:
        return temporal.forward(X[None])[0][0]
    return temporal.forward(X)[0]


def tkan_forward(cell, X):
    return temporal_forward(cell, X)


def pool_and_classify(head, H, training=False, rng=None):
    H = np.asarray(H, dtype=np.float64)
    single = H.ndim == 2
    pooled, _, probs, _ = head.forward(H[None] if single else H, training=training, rng=rng)
    return (pooled[0], probs[0]) if single else (pooled, probs)


def embed(temporal, X):
    """Pooled descriptor with dropout off; the classifier is not involved."""
    return temporal_forward(temporal, X).mean(axis=-2)
