"""Wave-Block / iWave-Block resampling operators and their max-pool/bilinear baselines.

The spectral path is: wavelet decomposition, rearrangement of every
sub-band into channels at half resolution (lossless), then a learned
conv + BN + ReLU. The decoder runs the mirror image: a 1x1 conv produces
sub-band coefficients, they are rearranged back and inverted, and the
result is fused with the encoder skip.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ShapeError
from .tensor import (
    BatchNormCache,
    BatchNormState,
    ConvParams,
    batchnorm2d,
    batchnorm2d_backward,
    bn_update_running,
    concat_channels,
    conv2d,
    conv2d_backward,
    depth_to_space,
    maxpool2x2,
    maxpool2x2_backward,
    relu,
    relu_backward,
    space_to_depth,
    upsample_bilinear2x,
    upsample_bilinear2x_backward,
)
from .wavelets import (
    Subbands,
    WaveletKind,
    dtcwt_adjoint_backward,
    dtcwt_forward,
    dtcwt_inverse,
    dtcwt_inverse_backward,
    haar_forward,
    haar_inverse,
)

# channels produced per input channel by one decomposition level
SPECTRAL_FACTOR = {WaveletKind.DTCWT: 16, WaveletKind.HAAR: 4}


# --------------------------------------------------------------------------
# rearrangement
# --------------------------------------------------------------------------

def rearrange_forward(lowpass: np.ndarray, highpass: np.ndarray) -> np.ndarray:
    """Stack ``[space_to_depth(lowpass) | real 6C | imag 6C]`` at half resolution."""
    n, c, h, w = lowpass.shape
    if highpass.shape != (n, 2, 6, c, h // 2, w // 2) or h % 2 or w % 2:
        raise ShapeError(f"lowpass {lowpass.shape} and highpass {highpass.shape} are inconsistent")
    hp = highpass.reshape(n, 2, 6 * c, h // 2, w // 2)
    return np.concatenate([space_to_depth(lowpass), hp[:, 0], hp[:, 1]], axis=1)


def rearrange_inverse(x: np.ndarray):
    """Split ``(N, 16C, h, w)`` back into ``(lowpass (N,C,2h,2w), highpass (N,2,6,C,h,w))``."""
    n, c16, h, w = x.shape
    if c16 % 16:
        raise ShapeError(f"channel count {c16} is not divisible by 16")
    c = c16 // 16
    lowpass = depth_to_space(x[:, : 4 * c])
    highpass = x[:, 4 * c :].reshape(n, 2, 6, c, h, w)
    return lowpass, np.ascontiguousarray(highpass)


def spectral_split(x: np.ndarray, kind: WaveletKind) -> np.ndarray:
    """Lossless (N, C, H, W) -> (N, fC, H/2, W/2) with f = 16 (DTCWT) or 4 (Haar)."""
    if x.shape[-1] % 2 or x.shape[-2] % 2:
        raise ShapeError(f"spectral down-sampling needs even spatial dims, got {x.shape[-2:]}")
    if kind == WaveletKind.HAAR:
        return np.concatenate(haar_forward(x), axis=1)
    s = dtcwt_forward(x, levels=1)
    return rearrange_forward(s.lowpass, s.highpass)


def spectral_split_backward(g: np.ndarray, kind: WaveletKind) -> np.ndarray:
    if kind == WaveletKind.HAAR:
        # orthonormal: the adjoint is the inverse
        return haar_inverse(*np.split(g, 4, axis=1))
    lo, hi = rearrange_inverse(g)
    return dtcwt_adjoint_backward(Subbands(lo, [hi]))


def spectral_merge(s: np.ndarray, kind: WaveletKind) -> np.ndarray:
    """Inverse of :func:`spectral_split`."""
    if kind == WaveletKind.HAAR:
        if s.shape[1] % 4:
            raise ShapeError(f"channel count {s.shape[1]} is not divisible by 4")
        return haar_inverse(*np.split(s, 4, axis=1))
    lo, hi = rearrange_inverse(s)
    return dtcwt_inverse(Subbands(lo, [hi]))


def spectral_merge_backward(g: np.ndarray, kind: WaveletKind) -> np.ndarray:
    if kind == WaveletKind.HAAR:
        return np.concatenate(haar_forward(g), axis=1)
    sb = dtcwt_inverse_backward(g, levels=1)
    return rearrange_forward(sb.lowpass, sb.highpass)


# --------------------------------------------------------------------------
# parameter containers
# --------------------------------------------------------------------------

@dataclass
class WaveBlockParams:
    """``conv`` is either full (2C, fC, k, k) or group-shared (2C, 2C, k, k)."""
    conv: ConvParams
    bn: BatchNormState


@dataclass
class IWaveBlockParams:
    synth: ConvParams
    fuse: ConvParams
    bn_synth: BatchNormState | None
    bn_fuse: BatchNormState


@dataclass
class ConvBlockParams:
    conv: ConvParams
    bn: BatchNormState


@dataclass
class LinearUpParams:
    fuse: ConvParams
    bn_fuse: BatchNormState


def init_wave_block(rng, c: int, kind: WaveletKind, wave_conv: str = "full", k: int = 3,
                    bn_momentum: float = 0.1, dtype=np.float64) -> WaveBlockParams:
    if wave_conv == "full":
        c_in = SPECTRAL_FACTOR[kind] * c
    elif wave_conv == "grouped_shared":
        c_in = 2 * c
    else:
        raise ValueError(f"wave_conv must be 'full' or 'grouped_shared', got {wave_conv!r}")
    return WaveBlockParams(ConvParams.init(rng, c_in, 2 * c, k, dtype),
                           BatchNormState.init(2 * c, bn_momentum, dtype=dtype))


def init_iwave_block(rng, d: int, c: int, kind: WaveletKind, synth_bn: bool = True, k: int = 3,
                     bn_momentum: float = 0.1, dtype=np.float64) -> IWaveBlockParams:
    f = SPECTRAL_FACTOR[kind]
    return IWaveBlockParams(
        ConvParams.init(rng, d, f * c, 1, dtype),
        ConvParams.init(rng, 2 * c, c, k, dtype),
        BatchNormState.init(f * c, bn_momentum, dtype=dtype) if synth_bn else None,
        BatchNormState.init(c, bn_momentum, dtype=dtype),
    )


def init_conv_block(rng, c: int, k: int = 3, bn_momentum: float = 0.1, dtype=np.float64) -> ConvBlockParams:
    return ConvBlockParams(ConvParams.init(rng, c, 2 * c, k, dtype),
                           BatchNormState.init(2 * c, bn_momentum, dtype=dtype))


def init_linear_up(rng, d: int, c: int, k: int = 3, bn_momentum: float = 0.1, dtype=np.float64) -> LinearUpParams:
    return LinearUpParams(ConvParams.init(rng, d + c, c, k, dtype),
                          BatchNormState.init(c, bn_momentum, dtype=dtype))


# --------------------------------------------------------------------------
# shared pieces
# --------------------------------------------------------------------------

def _expand_shared(p: ConvParams, c_in: int) -> ConvParams:
    """Tile a group-shared kernel over ``c_in // p.in_channels`` groups."""
    if p.in_channels == c_in:
        return p
    if c_in % p.in_channels:
        raise ShapeError(f"conv expects {p.in_channels} channels, cannot tile over {c_in}")
    return ConvParams(np.tile(p.weight, (1, c_in // p.in_channels, 1, 1)), p.bias)


def _fold_shared(grad_w: np.ndarray, p: ConvParams) -> np.ndarray:
    if grad_w.shape == p.weight.shape:
        return grad_w
    o, ci, k, _ = p.weight.shape
    return grad_w.reshape(o, -1, ci, k, k).sum(axis=1)


@dataclass
class CBRCache:
    x: np.ndarray
    conv: ConvParams
    bn: BatchNormCache
    pre: np.ndarray


def cbr_forward(x, conv: ConvParams, bn: BatchNormState, training: bool):
    """conv -> BN -> ReLU."""
    z = conv2d(x, conv)
    b, bc = batchnorm2d(z, bn, training)
    return relu(b), CBRCache(x, conv, bc, b)


def cbr_backward(c: CBRCache, g):
    gb = relu_backward(c.pre, g)
    gz, ggamma, gbeta = batchnorm2d_backward(c.bn, gb)
    gx, gw, gbias = conv2d_backward(c.x, c.conv, gz)
    return gx, ConvParams(gw, gbias), (ggamma, gbeta)


def bn_grad(bn: BatchNormState, ggamma, gbeta) -> BatchNormState:
    # gradient container: only gamma/beta are meaningful
    return BatchNormState(ggamma, gbeta, np.zeros_like(ggamma), np.zeros_like(ggamma), bn.eps, bn.momentum)


# --------------------------------------------------------------------------
# Wave-Block
# --------------------------------------------------------------------------

@dataclass
class WaveBlockCache:
    kind: WaveletKind
    params: WaveBlockParams
    spectral: np.ndarray
    cbr: CBRCache


def wave_block_forward(x: np.ndarray, p: WaveBlockParams, training: bool,
                       kind: WaveletKind = WaveletKind.DTCWT):
    """(N, C, H, W) -> (N, 2C, H/2, W/2). Returns ``(y, cache)``."""
    x2 = spectral_split(x, kind)
    conv = _expand_shared(p.conv, x2.shape[1])
    y, cbr = cbr_forward(x2, conv, p.bn, training)
    return y, WaveBlockCache(kind, p, x2, cbr)


def wave_block_backward(cache: WaveBlockCache, grad_y: np.ndarray):
    """Return ``(grad_x, grad_params)``."""
    gx2, gconv, (ggamma, gbeta) = cbr_backward(cache.cbr, grad_y)
    gconv = ConvParams(_fold_shared(gconv.weight, cache.params.conv), gconv.bias)
    gx = spectral_split_backward(gx2, cache.kind)
    return gx, WaveBlockParams(gconv, bn_grad(cache.params.bn, ggamma, gbeta))


def wave_block_commit(p: WaveBlockParams, cache: WaveBlockCache) -> WaveBlockParams:
    return WaveBlockParams(p.conv, bn_update_running(p.bn, cache.cbr.bn))


# --------------------------------------------------------------------------
# iWave-Block
# --------------------------------------------------------------------------

@dataclass
class IWaveBlockCache:
    kind: WaveletKind
    params: IWaveBlockParams
    d: np.ndarray | None
    synth_bn: BatchNormCache | None
    y1: np.ndarray
    skip_channels: int
    fuse: CBRCache
    bypassed: bool = field(default=False)


def iwave_block_forward(d: np.ndarray, skip: np.ndarray, p: IWaveBlockParams, training: bool,
                        kind: WaveletKind = WaveletKind.DTCWT, bypass: np.ndarray | None = None):
    """Up-sample ``d`` (N, D, H/2, W/2) and fuse with ``skip`` (N, C, H, W).

    ``bypass`` replaces the synthesised sub-band tensor with the given one;
    it exists so tests can feed a Wave-Block's exact coefficients through.
    """
    c = p.fuse.out_channels
    if skip.shape[1] != c or skip.shape[2:] != (2 * d.shape[2], 2 * d.shape[3]):
        raise ShapeError(f"skip {skip.shape} does not pair with d {d.shape} for {c} output channels")
    synth_cache = None
    if bypass is None:
        s = conv2d(d, p.synth)
        if p.bn_synth is not None:
            s, synth_cache = batchnorm2d(s, p.bn_synth, training)
    else:
        s = bypass
    if s.shape[1] != SPECTRAL_FACTOR[kind] * c:
        raise ShapeError(f"sub-band tensor has {s.shape[1]} channels, expected {SPECTRAL_FACTOR[kind] * c}")
    y1 = spectral_merge(s, kind)
    y, fuse = cbr_forward(concat_channels(y1, skip), p.fuse, p.bn_fuse, training)
    return y, IWaveBlockCache(kind, p, d, synth_cache, y1, c, fuse, bypass is not None)


def iwave_block_backward(cache: IWaveBlockCache, grad_y: np.ndarray):
    """Return ``(grad_d, grad_skip, grad_params)``."""
    p = cache.params
    gcat, gfuse, (gg_f, gb_f) = cbr_backward(cache.fuse, grad_y)
    c = cache.skip_channels
    gy1, gskip = gcat[:, :c], np.ascontiguousarray(gcat[:, c:])
    gs = spectral_merge_backward(gy1, cache.kind)
    if cache.bypassed:
        raise ValueError("bypassed iWave-Block has no gradient w.r.t. its synth path")
    bn_synth_grad = None
    if cache.synth_bn is not None:
        gs, gg_s, gb_s = batchnorm2d_backward(cache.synth_bn, gs)
        bn_synth_grad = bn_grad(p.bn_synth, gg_s, gb_s)
    gd, gw, gb = conv2d_backward(cache.d, p.synth, gs)
    grads = IWaveBlockParams(ConvParams(gw, gb), gfuse, bn_synth_grad, bn_grad(p.bn_fuse, gg_f, gb_f))
    return gd, gskip, grads


def iwave_block_commit(p: IWaveBlockParams, cache: IWaveBlockCache) -> IWaveBlockParams:
    bn_synth = p.bn_synth
    if bn_synth is not None and cache.synth_bn is not None:
        bn_synth = bn_update_running(bn_synth, cache.synth_bn)
    return IWaveBlockParams(p.synth, p.fuse, bn_synth, bn_update_running(p.bn_fuse, cache.fuse.bn))


# --------------------------------------------------------------------------
# baselines: ConvBlock (max-pool) and Linear-I (bilinear)
# --------------------------------------------------------------------------

@dataclass
class ConvBlockCache:
    params: ConvBlockParams
    cbr: CBRCache
    argmax: np.ndarray


def conv_block_forward(x: np.ndarray, p: ConvBlockParams, training: bool):
    """conv (C -> 2C) + BN + ReLU, then 2x2 max-pool."""
    a, cbr = cbr_forward(x, p.conv, p.bn, training)
    y, idx = maxpool2x2(a)
    return y, ConvBlockCache(p, cbr, idx)


def conv_block_backward(cache: ConvBlockCache, grad_y: np.ndarray):
    ga = maxpool2x2_backward(cache.argmax, grad_y)
    gx, gconv, (ggamma, gbeta) = cbr_backward(cache.cbr, ga)
    return gx, ConvBlockParams(gconv, bn_grad(cache.params.bn, ggamma, gbeta))


def conv_block_commit(p: ConvBlockParams, cache: ConvBlockCache) -> ConvBlockParams:
    return ConvBlockParams(p.conv, bn_update_running(p.bn, cache.cbr.bn))


@dataclass
class LinearUpCache:
    params: LinearUpParams
    d_channels: int
    fuse: CBRCache


def linear_up_forward(d: np.ndarray, skip: np.ndarray, p: LinearUpParams, training: bool):
    """Bilinear x2 of ``d``, concatenated with ``skip``, then conv + BN + ReLU."""
    if skip.shape[2:] != (2 * d.shape[2], 2 * d.shape[3]):
        raise ShapeError(f"skip {skip.shape} does not pair with d {d.shape}")
    up = upsample_bilinear2x(d)
    y, fuse = cbr_forward(concat_channels(up, skip), p.fuse, p.bn_fuse, training)
    return y, LinearUpCache(p, d.shape[1], fuse)


def linear_up_backward(cache: LinearUpCache, grad_y: np.ndarray):
    gcat, gfuse, (ggamma, gbeta) = cbr_backward(cache.fuse, grad_y)
    k = cache.d_channels
    gd = upsample_bilinear2x_backward(gcat[:, :k])
    return gd, np.ascontiguousarray(gcat[:, k:]), LinearUpParams(gfuse, bn_grad(cache.params.bn_fuse, ggamma, gbeta))


def linear_up_commit(p: LinearUpParams, cache: LinearUpCache) -> LinearUpParams:
    return LinearUpParams(p.fuse, bn_update_running(p.bn_fuse, cache.fuse.bn))
