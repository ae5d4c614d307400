"""Dense tensor primitives with hand-written backward passes.

Tensors are plain ``numpy.ndarray`` objects in NCHW layout. Every forward
function here is pure; the matching ``*_backward`` takes whatever the
forward needs to recompute the local Jacobian and returns gradients for
each differentiable input.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ShapeError


def check_finite(x: np.ndarray, name: str = "tensor") -> np.ndarray:
    if not np.all(np.isfinite(x)):
        bad = int(np.size(x) - np.count_nonzero(np.isfinite(x)))
        raise FloatingPointError(f"{name} has {bad} non-finite entries")
    return x


@dataclass
class ConvParams:
    weight: np.ndarray  # (C_out, C_in, k, k)
    bias: np.ndarray    # (C_out,)

    def __post_init__(self):
        if self.weight.ndim != 4 or self.weight.shape[2] != self.weight.shape[3]:
            raise ShapeError(f"conv weight must be (C_out, C_in, k, k), got {self.weight.shape}")
        if self.weight.shape[2] % 2 == 0:
            raise ShapeError(f"kernel size must be odd, got {self.weight.shape[2]}")
        if self.bias.shape != (self.weight.shape[0],):
            raise ShapeError(f"bias shape {self.bias.shape} does not match {self.weight.shape[0]} outputs")

    @property
    def kernel_size(self) -> int:
        return self.weight.shape[2]

    @property
    def in_channels(self) -> int:
        return self.weight.shape[1]

    @property
    def out_channels(self) -> int:
        return self.weight.shape[0]

    @classmethod
    def init(cls, rng: np.random.Generator, c_in: int, c_out: int, k: int, dtype=np.float64):
        """He-normal weights, zero bias."""
        std = np.sqrt(2.0 / (c_in * k * k))
        w = rng.standard_normal((c_out, c_in, k, k)) * std
        return cls(w.astype(dtype), np.zeros(c_out, dtype=dtype))


@dataclass
class BatchNormState:
    gamma: np.ndarray
    beta: np.ndarray
    running_mean: np.ndarray
    running_var: np.ndarray
    eps: float = 1e-5
    momentum: float = 0.1

    def __post_init__(self):
        if self.eps <= 0:
            raise ValueError("eps must be positive")
        if not 0.0 < self.momentum < 1.0:
            raise ValueError("momentum must lie in (0, 1)")
        if np.any(self.running_var < 0):
            raise ValueError("running_var must be non-negative")

    @property
    def channels(self) -> int:
        return self.gamma.shape[0]

    @classmethod
    def init(cls, channels: int, momentum: float = 0.1, eps: float = 1e-5, dtype=np.float64):
        return cls(np.ones(channels, dtype), np.zeros(channels, dtype),
                   np.zeros(channels, dtype), np.ones(channels, dtype), eps, momentum)


# --------------------------------------------------------------------------
# convolution
# --------------------------------------------------------------------------

def _im2col(x: np.ndarray, k: int) -> np.ndarray:
    """(N, C, H, W) -> (N*H*W, C*k*k) patches under zero 'same' padding."""
    pad = k // 2
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    win = sliding_window_view(xp, (k, k), axis=(2, 3))  # N, C, H, W, k, k
    n, c, h, w = x.shape
    return win.transpose(0, 2, 3, 1, 4, 5).reshape(n * h * w, c * k * k)


def conv2d(x: np.ndarray, p: ConvParams) -> np.ndarray:
    """Stride-1 convolution with zero 'same' padding (cross-correlation)."""
    if x.ndim != 4 or x.shape[1] != p.in_channels:
        raise ShapeError(f"input {x.shape} does not match conv expecting {p.in_channels} channels")
    n, _, h, w = x.shape
    k = p.kernel_size
    if k == 1:
        y = np.tensordot(p.weight[:, :, 0, 0], x, axes=([1], [1])).transpose(1, 0, 2, 3)
    else:
        if min(h, w) < k:
            raise ShapeError(f"spatial dims {h}x{w} too small for a {k}x{k} kernel")
        cols = _im2col(x, k)
        y = (cols @ p.weight.reshape(p.out_channels, -1).T).reshape(n, h, w, -1).transpose(0, 3, 1, 2)
    return np.ascontiguousarray(y + p.bias[None, :, None, None])


def conv2d_backward(x: np.ndarray, p: ConvParams, grad_out: np.ndarray):
    """Return ``(grad_x, grad_weight, grad_bias)``."""
    n, c, h, w = x.shape
    if grad_out.shape != (n, p.out_channels, h, w):
        raise ShapeError(f"grad_out {grad_out.shape} does not match conv output {(n, p.out_channels, h, w)}")
    k = p.kernel_size
    grad_b = grad_out.sum(axis=(0, 2, 3))
    if k == 1:
        w2 = p.weight[:, :, 0, 0]
        grad_w = np.tensordot(grad_out, x, axes=([0, 2, 3], [0, 2, 3]))[:, :, None, None]
        grad_x = np.tensordot(w2, grad_out, axes=([0], [1])).transpose(1, 0, 2, 3)
        return np.ascontiguousarray(grad_x), grad_w, grad_b
    g2 = grad_out.transpose(0, 2, 3, 1).reshape(n * h * w, -1)
    grad_w = (g2.T @ _im2col(x, k)).reshape(p.weight.shape)
    # input gradient: correlate grad_out with the flipped, transposed kernel
    flipped = np.ascontiguousarray(p.weight[:, :, ::-1, ::-1].transpose(1, 0, 2, 3))
    grad_x = (_im2col(grad_out, k) @ flipped.reshape(c, -1).T).reshape(n, h, w, c).transpose(0, 3, 1, 2)
    return np.ascontiguousarray(grad_x), grad_w, grad_b


# --------------------------------------------------------------------------
# batch norm
# --------------------------------------------------------------------------

@dataclass
class BatchNormCache:
    xhat: np.ndarray
    invstd: np.ndarray
    gamma: np.ndarray
    training: bool
    batch_mean: np.ndarray | None = None
    batch_var: np.ndarray | None = None
    count: int = 0


def batchnorm2d(x: np.ndarray, s: BatchNormState, training: bool):
    """Per-channel normalisation over (N, H, W). Returns ``(y, cache)``.

    Running statistics are not touched; fold the batch statistics in with
    :func:`bn_update_running`.
    """
    if x.ndim != 4 or x.shape[1] != s.channels:
        raise ShapeError(f"input {x.shape} does not match batch norm over {s.channels} channels")
    if training:
        mean = x.mean(axis=(0, 2, 3))
        var = x.var(axis=(0, 2, 3))
    else:
        mean, var = s.running_mean, s.running_var
    invstd = 1.0 / np.sqrt(var + s.eps)
    xhat = (x - mean[None, :, None, None]) * invstd[None, :, None, None]
    y = s.gamma[None, :, None, None] * xhat + s.beta[None, :, None, None]
    count = x.shape[0] * x.shape[2] * x.shape[3]
    cache = BatchNormCache(xhat, invstd, s.gamma, training,
                           mean if training else None, var if training else None, count)
    return y, cache


def batchnorm2d_backward(cache: BatchNormCache, grad_out: np.ndarray):
    """Return ``(grad_x, grad_gamma, grad_beta)``."""
    grad_beta = grad_out.sum(axis=(0, 2, 3))
    grad_gamma = (grad_out * cache.xhat).sum(axis=(0, 2, 3))
    dxhat = grad_out * cache.gamma[None, :, None, None]
    invstd = cache.invstd[None, :, None, None]
    if not cache.training:
        return dxhat * invstd, grad_gamma, grad_beta
    mean_d = dxhat.mean(axis=(0, 2, 3), keepdims=True)
    mean_dx = (dxhat * cache.xhat).mean(axis=(0, 2, 3), keepdims=True)
    return invstd * (dxhat - mean_d - cache.xhat * mean_dx), grad_gamma, grad_beta


def bn_update_running(s: BatchNormState, cache: BatchNormCache) -> BatchNormState:
    """Exponential moving average of batch statistics (unbiased variance)."""
    if not cache.training:
        return s
    m = s.momentum
    unbiased = cache.batch_var * cache.count / max(cache.count - 1, 1)
    return replace(s,
                   running_mean=(1 - m) * s.running_mean + m * cache.batch_mean,
                   running_var=(1 - m) * s.running_var + m * unbiased)


# --------------------------------------------------------------------------
# elementwise and layout
# --------------------------------------------------------------------------

def relu(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0)


def relu_backward(x: np.ndarray, grad_out: np.ndarray) -> np.ndarray:
    return grad_out * (x > 0)


def space_to_depth(x: np.ndarray) -> np.ndarray:
    """(N, C, H, W) -> (N, 4C, H/2, W/2); each 2x2 block becomes channels TL, TR, BL, BR."""
    n, c, h, w = x.shape
    if h % 2 or w % 2:
        raise ShapeError(f"space_to_depth needs even spatial dims, got {h}x{w}")
    y = x.reshape(n, c, h // 2, 2, w // 2, 2).transpose(0, 1, 3, 5, 2, 4)
    return np.ascontiguousarray(y.reshape(n, 4 * c, h // 2, w // 2))


def depth_to_space(x: np.ndarray) -> np.ndarray:
    n, c4, h, w = x.shape
    if c4 % 4:
        raise ShapeError(f"depth_to_space needs channels divisible by 4, got {c4}")
    c = c4 // 4
    y = x.reshape(n, c, 2, 2, h, w).transpose(0, 1, 4, 2, 5, 3)
    return np.ascontiguousarray(y.reshape(n, c, 2 * h, 2 * w))


def concat_channels(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    if a.shape[0] != b.shape[0] or a.shape[2:] != b.shape[2:]:
        raise ShapeError(f"cannot concatenate {a.shape} and {b.shape} along channels")
    return np.concatenate([a, b], axis=1)


# --------------------------------------------------------------------------
# baseline resampling
# --------------------------------------------------------------------------

def maxpool2x2(x: np.ndarray):
    """2x2 max-pool, stride 2. Returns ``(y, argmax)``; ties go to the first index."""
    n, c, h, w = x.shape
    if h % 2 or w % 2:
        raise ShapeError(f"max-pool needs even spatial dims, got {h}x{w}")
    blocks = x.reshape(n, c, h // 2, 2, w // 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h // 2, w // 2, 4)
    idx = blocks.argmax(axis=-1)
    return np.take_along_axis(blocks, idx[..., None], axis=-1)[..., 0], idx


def maxpool2x2_backward(argmax: np.ndarray, grad_out: np.ndarray) -> np.ndarray:
    n, c, h, w = grad_out.shape
    blocks = np.zeros((n, c, h, w, 4), dtype=grad_out.dtype)
    np.put_along_axis(blocks, argmax[..., None], grad_out[..., None], axis=-1)
    return blocks.reshape(n, c, h, w, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, 2 * h, 2 * w)


def _bilinear_matrix(n: int) -> np.ndarray:
    """(2n, n) half-pixel-centre interpolation with edge clamping."""
    src = (np.arange(2 * n) + 0.5) / 2 - 0.5
    src = np.clip(src, 0, n - 1)
    lo = np.floor(src).astype(int)
    hi = np.minimum(lo + 1, n - 1)
    frac = src - lo
    mat = np.zeros((2 * n, n))
    rows = np.arange(2 * n)
    np.add.at(mat, (rows, lo), 1 - frac)
    np.add.at(mat, (rows, hi), frac)
    return mat


def upsample_bilinear2x(x: np.ndarray) -> np.ndarray:
    h, w = x.shape[-2:]
    mh = _bilinear_matrix(h).astype(x.dtype)
    mw = _bilinear_matrix(w).astype(x.dtype)
    return mh @ x @ mw.T


def upsample_bilinear2x_backward(grad_out: np.ndarray) -> np.ndarray:
    h, w = grad_out.shape[-2] // 2, grad_out.shape[-1] // 2
    mh = _bilinear_matrix(h).astype(grad_out.dtype)
    mw = _bilinear_matrix(w).astype(grad_out.dtype)
    return mh.T @ grad_out @ mw
