"""Frame-wise CNN encoder: conv/BN/ReLU blocks, pooling, 256-unit projection.

Frames are ``(N, 1, S, S)`` with values in ``[0, 1]``. Blocks 1-3 end in a 2x2
max pool, the last block in global average pooling, so ``S`` must be divisible
by ``2 ** (blocks - 1)`` (64 -> 32 -> 16 -> 8 -> GAP with the default widths).
"""

import logging

import numpy as np

from .errors import ContractError
from .numerics import BatchNorm, Linear, Module, init_params, relu

logger = logging.getLogger(__name__)

DEFAULT_CHANNELS = (32, 64, 128, 256)


def _as_batch(x):
    x = np.asarray(x, dtype=np.float64)
    return (x[None], True) if x.ndim == 3 else (x, False)


def conv2d_3x3(x, kernel):
    """Same-padded, stride-1 3x3 cross-correlation of ``(N, C, H, W)`` or ``(C, H, W)``."""
    x, single = _as_batch(x)
    if kernel.ndim != 4 or kernel.shape[1:] != (x.shape[1], 3, 3):
        raise ContractError(f"kernel {kernel.shape} does not match input channels {x.shape[1]}")
    n, _, h, w = x.shape
    if h < 1 or w < 1:
        raise ContractError(f"empty spatial extent {x.shape}")
    padded = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
    out = np.zeros((n, kernel.shape[0], h, w))
    for di in range(3):
        for dj in range(3):
            window = padded[:, :, di : di + h, dj : dj + w]
            out += np.einsum("nchw,oc->nohw", window, kernel[:, :, di, dj], optimize=True)
    return out[0] if single else out


def conv2d_3x3_backward(x, kernel, grad_out):
    x, single = _as_batch(x)
    grad_out = grad_out[None] if single else grad_out
    _, _, h, w = x.shape
    padded = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
    grad_padded = np.zeros_like(padded)
    grad_kernel = np.zeros_like(kernel)
    for di in range(3):
        for dj in range(3):
            window = padded[:, :, di : di + h, dj : dj + w]
            grad_kernel[:, :, di, dj] = np.einsum("nohw,nchw->oc", grad_out, window, optimize=True)
            grad_padded[:, :, di : di + h, dj : dj + w] += np.einsum(
                "nohw,oc->nchw", grad_out, kernel[:, :, di, dj], optimize=True
            )
    grad_x = grad_padded[:, :, 1:-1, 1:-1]
    return (grad_x[0] if single else grad_x), grad_kernel


def maxpool_2x2(x):
    """Max over disjoint 2x2 windows; returns ``(out, argmax)`` for the backward pass."""
    n, c, h, w = x.shape
    if h % 2 or w % 2:
        raise ContractError(f"2x2 max pooling needs even spatial dims, got {h}x{w}")
    windows = (
        x.reshape(n, c, h // 2, 2, w // 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h // 2, w // 2, 4)
    )
    argmax = windows.argmax(axis=-1)
    out = np.take_along_axis(windows, argmax[..., None], axis=-1)[..., 0]
    return out, argmax


def maxpool_2x2_backward(grad_out, argmax):
    n, c, h2, w2 = grad_out.shape
    windows = np.zeros((n, c, h2, w2, 4))
    np.put_along_axis(windows, argmax[..., None], grad_out[..., None], axis=-1)
    return windows.reshape(n, c, h2, w2, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, 2 * h2, 2 * w2)


def global_avg_pool(x):
    return x.mean(axis=(-2, -1))


def global_avg_pool_backward(grad_out, shape):
    h, w = shape[-2:]
    return np.broadcast_to(grad_out[..., None, None] / (h * w), shape).copy()


class ConvBlock(Module):
    def __init__(self, in_channels, out_channels, rng, pool="max"):
        super().__init__()
        if pool not in ("max", "gap"):
            raise ContractError(f"unknown pooling mode {pool!r}")
        self.pool = pool
        self.kernel = self.add_param(
            "kernel", init_params((out_channels, in_channels, 3, 3), "fan_avg", rng)
        )
        self.bn = self.add_child("bn", BatchNorm(out_channels, axis=1))

    def forward(self, x, training):
        conv = conv2d_3x3(x, self.kernel)
        normed, bn_cache = self.bn.forward(conv, training)
        active = relu(normed)
        if self.pool == "max":
            out, pool_cache = maxpool_2x2(active)
        else:
            out, pool_cache = global_avg_pool(active), active.shape
        return out, (x, normed, bn_cache, pool_cache)

    def backward(self, grad_out, cache):
        x, normed, bn_cache, pool_cache = cache
        if self.pool == "max":
            grad_active = maxpool_2x2_backward(grad_out, pool_cache)
        else:
            grad_active = global_avg_pool_backward(grad_out, pool_cache)
        grad_conv = self.bn.backward(grad_active * (normed > 0), bn_cache)
        grad_x, grad_kernel = conv2d_3x3_backward(x, self.kernel, grad_conv)
        self.grads["kernel"] += grad_kernel
        return grad_x


class FrameEncoder(Module):
    def __init__(self, rng, channels=DEFAULT_CHANNELS, width=256, frame_size=64):
        super().__init__()
        channels = tuple(int(c) for c in channels)
        if not channels:
            raise ContractError("encoder needs at least one block")
        reductions = 2 ** (len(channels) - 1)
        if frame_size % reductions or frame_size < reductions:
            raise ContractError(
                f"frame size {frame_size} cannot be halved {len(channels) - 1} times"
            )
        self.channels = channels
        self.width = width
        self.frame_size = frame_size
        self.spatial_sizes = [frame_size // 2**index for index in range(len(channels))]
        self.blocks = []
        in_channels = 1
        for index, out_channels in enumerate(channels):
            pool = "gap" if index == len(channels) - 1 else "max"
            self.blocks.append(self.add_child(f"block{index}", ConvBlock(in_channels, out_channels, rng, pool)))
            in_channels = out_channels
        self.projection = self.add_child("projection", Linear(in_channels, width, rng))
        logger.debug("encoder spatial chain %s -> GAP, width %d", self.spatial_sizes, width)

    @property
    def out_width(self):
        return self.width

    def encode_frames(self, frames, training=False):
        frames = np.asarray(frames, dtype=np.float64)
        expected = (1, self.frame_size, self.frame_size)
        if frames.ndim != 4 or frames.shape[1:] != expected:
            raise ContractError(f"encoder expects frames of shape (N, {expected}), got {frames.shape}")
        if frames.size and (frames.min() < 0.0 or frames.max() > 1.0):
            raise ContractError("frame values must lie in [0, 1]")
        x = frames
        caches = []
        for block in self.blocks:
            x, cache = block.forward(x, training)
            caches.append(cache)
        pre, proj_cache = self.projection.forward(x)
        return relu(pre), (caches, pre, proj_cache)

    def backward(self, grad_out, cache):
        caches, pre, proj_cache = cache
        grad = self.projection.backward(grad_out * (pre > 0), proj_cache)
        for block, block_cache in zip(reversed(self.blocks), reversed(caches)):
            grad = block.backward(grad, block_cache)
        return grad


def encode_frame(encoder, frame):
    frame = np.asarray(frame, dtype=np.float64)
    return encoder.encode_frames(frame[None], training=False)[0][0]


def encode_clip(encoder, frames, training=False):
    """``(T, 1, S, S)`` -> ``(T, width)``; one row per frame."""
    frames = np.asarray(frames, dtype=np.float64)
    if frames.ndim != 4 or frames.shape[0] == 0:
        raise ContractError(f"clip must be (T>=1, 1, S, S), got {frames.shape}")
    return encoder.encode_frames(frames, training=training)[0]
