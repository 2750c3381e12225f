"""Dense float64 substrate shared by every model in the package.

Tensors are plain ``numpy.ndarray`` values in float64, row-major. Every layer
exposes ``forward(...) -> (output, cache)`` and ``backward(grad, cache)``;
backward passes accumulate into ``Module.grads`` so that recurrent steps and
batch rows sum naturally. Call ``zero_grad`` before each optimisation step.
"""

import logging
import math
import zlib
from collections import OrderedDict
from dataclasses import dataclass, field

import numpy as np
from scipy.special import expit

from .errors import ContractError, NumericalError

logger = logging.getLogger(__name__)

DTYPE = np.float64
INIT_SCHEMES = ("fan_avg", "zeros", "ones")


def make_rng(seed):
    # Philox is counter-based, so streams are identical on every platform.
    return np.random.Generator(np.random.Philox(int(seed)))


def split_rng(seed, stream):
    key = zlib.crc32(str(stream).encode("utf-8"))
    sequence = np.random.SeedSequence(int(seed), spawn_key=(key,))
    return np.random.Generator(np.random.Philox(sequence))


def check_finite(name, array, step=None):
    if not np.all(np.isfinite(array)):
        raise NumericalError(
            f"non-finite values in {name}" + (f" at step {step}" if step is not None else ""),
            where=name,
            step=step,
        )


def matmul(a, b):
    a = np.asarray(a, dtype=DTYPE)
    b = np.asarray(b, dtype=DTYPE)
    if a.ndim != 2 or b.ndim != 2:
        raise ContractError(f"matmul expects 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ContractError(f"matmul inner extents differ: {a.shape} x {b.shape}")
    check_finite("matmul lhs", a)
    check_finite("matmul rhs", b)
    return a @ b


def matmul_backward(a, b, grad_out):
    return grad_out @ b.T, a.T @ grad_out


def softmax(z, axis=-1):
    z = np.asarray(z, dtype=DTYPE)
    if z.ndim == 0 or z.shape[axis] == 0:
        raise ContractError("softmax of an empty vector")
    shifted = z - np.max(z, axis=axis, keepdims=True)
    exp = np.exp(shifted)
    return exp / np.sum(exp, axis=axis, keepdims=True)


def softmax_backward(probs, grad_out, axis=-1):
    inner = np.sum(grad_out * probs, axis=axis, keepdims=True)
    return probs * (grad_out - inner)


def sigmoid(z):
    return expit(z)


def tanh(z):
    return np.tanh(z)


def relu(z):
    return np.maximum(z, 0.0)


def silu(z):
    return z * expit(z)


def silu_grad(z):
    s = expit(z)
    return s + z * s * (1.0 - s)


def dropout(x, rate, rng, training):
    """Inverted dropout. Returns ``(output, mask)``; ``mask`` is None when inactive."""
    if not 0.0 <= rate < 1.0:
        raise ContractError(f"dropout rate must lie in [0, 1), got {rate}")
    if not training or rate == 0.0:
        return x, None
    mask = (rng.random(np.shape(x)) >= rate) / (1.0 - rate)
    return x * mask, mask


def dropout_backward(grad_out, mask):
    return grad_out if mask is None else grad_out * mask


def _fans(shape):
    if len(shape) == 0:
        return 0, 0
    if len(shape) == 1:
        return shape[0], shape[0]
    receptive = int(np.prod(shape[2:])) if len(shape) > 2 else 1
    return shape[1] * receptive, shape[0] * receptive


def init_params(shape, scheme, rng):
    shape = tuple(int(extent) for extent in shape)
    if scheme == "zeros":
        return np.zeros(shape, dtype=DTYPE)
    if scheme == "ones":
        return np.ones(shape, dtype=DTYPE)
    if scheme != "fan_avg":
        raise ContractError(f"unknown init scheme {scheme!r}; expected one of {INIT_SCHEMES}")
    fan_in, fan_out = _fans(shape)
    if fan_in == 0 or fan_out == 0:
        raise ContractError(f"fan-average init needs non-zero fans, got shape {shape}")
    limit = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape)


def init_normal(shape, std, rng):
    return rng.normal(0.0, std, size=tuple(shape))


class Module:
    """Named parameters, their gradient buffers, and non-trainable buffers."""

    def __init__(self):
        self.params = OrderedDict()
        self.grads = OrderedDict()
        self.buffers = OrderedDict()
        self.children = OrderedDict()

    def add_param(self, name, value):
        value = np.ascontiguousarray(value, dtype=DTYPE)
        self.params[name] = value
        self.grads[name] = np.zeros_like(value)
        return value

    def add_buffer(self, name, value):
        value = np.ascontiguousarray(value, dtype=DTYPE)
        self.buffers[name] = value
        return value

    def add_child(self, name, module):
        self.children[name] = module
        return module

    def named_parameters(self, prefix=""):
        for name, value in self.params.items():
            yield prefix + name, value, self.grads[name]
        for child_name, child in self.children.items():
            yield from child.named_parameters(f"{prefix}{child_name}.")

    def named_buffers(self, prefix=""):
        for name, value in self.buffers.items():
            yield prefix + name, value
        for child_name, child in self.children.items():
            yield from child.named_buffers(f"{prefix}{child_name}.")

    def parameter_dict(self):
        return OrderedDict((name, value) for name, value, _ in self.named_parameters())

    def gradient_dict(self):
        return OrderedDict((name, grad) for name, _, grad in self.named_parameters())

    def zero_grad(self):
        for _, _, grad in self.named_parameters():
            grad.fill(0.0)

    def num_parameters(self):
        return sum(value.size for _, value, _ in self.named_parameters())

    def state_dict(self):
        state = OrderedDict()
        for name, value, _ in self.named_parameters():
            state[name] = value.copy()
        for name, value in self.named_buffers():
            state[name] = value.copy()
        return state

    def load_state_dict(self, state):
        targets = OrderedDict((name, value) for name, value, _ in self.named_parameters())
        targets.update(self.named_buffers())
        missing = sorted(set(targets) - set(state))
        unexpected = sorted(set(state) - set(targets))
        if missing or unexpected:
            raise ContractError(f"state mismatch: missing={missing} unexpected={unexpected}")
        for name, target in targets.items():
            source = np.asarray(state[name], dtype=DTYPE)
            if source.shape != target.shape:
                raise ContractError(f"{name}: shape {source.shape} does not match {target.shape}")
            target[...] = source


class Linear(Module):
    def __init__(self, in_features, out_features, rng, bias=True):
        super().__init__()
        self.in_features = in_features
        self.out_features = out_features
        self.W = self.add_param("W", init_params((out_features, in_features), "fan_avg", rng))
        self.b = self.add_param("b", np.zeros(out_features)) if bias else None

    def forward(self, x):
        if x.shape[-1] != self.in_features:
            raise ContractError(f"Linear expects width {self.in_features}, got {x.shape[-1]}")
        y = x @ self.W.T
        if self.b is not None:
            y = y + self.b
        return y, x

    def backward(self, grad_out, cache):
        x = cache
        flat_grad = grad_out.reshape(-1, self.out_features)
        self.grads["W"] += flat_grad.T @ x.reshape(-1, self.in_features)
        if self.b is not None:
            self.grads["b"] += flat_grad.sum(axis=0)
        return grad_out @ self.W


class BatchNorm(Module):
    """Per-channel normalisation; statistics over every axis except ``axis``."""

    def __init__(self, channels, axis=-1, eps=1e-5, momentum=0.9):
        super().__init__()
        self.channels = channels
        self.axis = axis
        self.eps = eps
        self.momentum = momentum
        self.gamma = self.add_param("gamma", np.ones(channels))
        self.beta = self.add_param("beta", np.zeros(channels))
        self.running_mean = self.add_buffer("running_mean", np.zeros(channels))
        self.running_var = self.add_buffer("running_var", np.ones(channels))

    def forward(self, x, training):
        if x.shape[self.axis] != self.channels:
            raise ContractError(f"BatchNorm expects {self.channels} channels, got {x.shape}")
        moved = np.moveaxis(x, self.axis, -1)
        flat = moved.reshape(-1, self.channels)
        if training:
            if x.shape[0] < 2:
                raise ContractError("batch normalisation in training mode needs a batch of at least 2")
            mean = flat.mean(axis=0)
            var = flat.var(axis=0)
            self.running_mean[...] = self.momentum * self.running_mean + (1.0 - self.momentum) * mean
            self.running_var[...] = self.momentum * self.running_var + (1.0 - self.momentum) * var
        else:
            mean = self.running_mean
            var = self.running_var
        inv_std = 1.0 / np.sqrt(var + self.eps)
        xhat = (flat - mean) * inv_std
        y = (xhat * self.gamma + self.beta).reshape(moved.shape)
        return np.moveaxis(y, -1, self.axis), (xhat, inv_std, moved.shape, training)

    def backward(self, grad_out, cache):
        xhat, inv_std, moved_shape, training = cache
        grad = np.moveaxis(grad_out, self.axis, -1).reshape(-1, self.channels)
        self.grads["gamma"] += np.sum(grad * xhat, axis=0)
        self.grads["beta"] += np.sum(grad, axis=0)
        dxhat = grad * self.gamma
        if training:
            n = dxhat.shape[0]
            dx = (inv_std / n) * (
                n * dxhat - dxhat.sum(axis=0) - xhat * np.sum(dxhat * xhat, axis=0)
            )
        else:
            dx = dxhat * inv_std
        return np.moveaxis(dx.reshape(moved_shape), -1, self.axis)


@dataclass
class AdamState:
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(params, grads, state):
    """Bias-corrected Adam, applied in place to every array in ``params``."""
    step = state.t + 1
    for name, grad in grads.items():
        if params[name].shape != grad.shape:
            raise ContractError(f"{name}: gradient shape {grad.shape} != parameter shape {params[name].shape}")
        if not np.all(np.isfinite(grad)):
            raise NumericalError(
                f"non-finite gradient for parameter {name} at optimizer step {step}",
                where=name,
                step=step,
            )
    state.t = step
    correction1 = 1.0 - state.beta1**step
    correction2 = 1.0 - state.beta2**step
    for name, grad in grads.items():
        param = params[name]
        m = state.m.setdefault(name, np.zeros_like(param))
        v = state.v.setdefault(name, np.zeros_like(param))
        m *= state.beta1
        m += (1.0 - state.beta1) * grad
        v *= state.beta2
        v += (1.0 - state.beta2) * grad * grad
        param -= state.lr * (m / correction1) / (np.sqrt(v / correction2) + state.eps)
    return params, state


@dataclass
class SchedulerState:
    """Reduce-on-plateau plus early stopping, both driven by one improvement signal."""

    lr: float = 1e-4
    factor: float = 0.5
    plateau_patience: int = 5
    stop_patience: int = 10
    min_lr: float = 1e-7
    threshold: float = 1e-4
    best: float = math.inf
    plateau_wait: int = 0
    stop_wait: int = 0


def scheduler_step(state, val_loss):
    if not math.isfinite(val_loss):
        raise ContractError(f"scheduler needs a finite validation loss, got {val_loss}")
    if val_loss < state.best - state.threshold:
        state.best = val_loss
        state.plateau_wait = 0
        state.stop_wait = 0
    else:
        state.plateau_wait += 1
        state.stop_wait += 1
        if state.plateau_wait >= state.plateau_patience:
            new_lr = max(state.lr * state.factor, state.min_lr)
            if new_lr < state.lr:
                logger.info("reducing learning rate %.3g -> %.3g", state.lr, new_lr)
            state.lr = new_lr
            state.plateau_wait = 0
    return state.lr, state.stop_wait >= state.stop_patience
