"""Spectral U-Net assembly, the ablation variant grid and cost accounting."""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from enum import Enum

import numpy as np

from . import blocks as B
from .errors import ShapeError
from .io import save_checkpoint, load_checkpoint
from .tensor import BatchNormState, ConvParams, bn_update_running, conv2d, conv2d_backward
from .wavelets import WaveletKind
from .wavelets.filters import default_filterbank


class DownKind(str, Enum):
    WAVE = "wave_block"
    CONV = "conv_block"


class UpKind(str, Enum):
    IWAVE = "iwave_block"
    LINEAR = "linear_i"


_DTYPES = {"f32": np.float32, "f64": np.float64}


@dataclass
class NetworkConfig:
    in_channels: int = 1
    num_classes: int = 2
    base_channels: int = 16
    depth: int = 3
    down_kind: DownKind = DownKind.WAVE
    up_kind: UpKind = UpKind.IWAVE
    wavelet: WaveletKind = WaveletKind.DTCWT
    wave_conv: str = "grouped_shared"
    bn_momentum: float = 0.1
    seed: int = 0
    skip: str = "after"  # take the skip after ("after") or before the stage conv
    synth_bn: bool = True
    dtype: str = "f64"

    def __post_init__(self):
        self.down_kind = DownKind(self.down_kind)
        self.up_kind = UpKind(self.up_kind)
        self.wavelet = WaveletKind(self.wavelet)
        if self.depth < 1:
            raise ValueError("depth must be at least 1")
        if min(self.in_channels, self.num_classes, self.base_channels) < 1:
            raise ValueError("channel counts must be positive")
        if self.wave_conv not in ("full", "grouped_shared"):
            raise ValueError(f"wave_conv must be 'full' or 'grouped_shared', got {self.wave_conv!r}")
        if self.skip not in ("after", "before"):
            raise ValueError(f"skip must be 'after' or 'before', got {self.skip!r}")
        if self.dtype not in _DTYPES:
            raise ValueError(f"dtype must be one of {sorted(_DTYPES)}")

    @property
    def np_dtype(self):
        return _DTYPES[self.dtype]

    def channels(self, stage: int) -> int:
        return self.base_channels * 2 ** stage

    def variant_name(self) -> str:
        return f"{self.wavelet.value}:{self.down_kind.value}+{self.up_kind.value}"

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        for k, v in d.items():
            if isinstance(v, Enum):
                d[k] = v.value
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "NetworkConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown network config fields: {sorted(unknown)}")
        return cls(**d)


def variant_grid(base: NetworkConfig) -> list[NetworkConfig]:
    """The eight down/up/wavelet combinations, Haar group first, rows in reporting order."""
    rows = [(DownKind.CONV, UpKind.LINEAR), (DownKind.WAVE, UpKind.LINEAR),
            (DownKind.CONV, UpKind.IWAVE), (DownKind.WAVE, UpKind.IWAVE)]
    return [dataclasses.replace(base, wavelet=w, down_kind=d, up_kind=u)
            for w in (WaveletKind.HAAR, WaveletKind.DTCWT) for d, u in rows]


# --------------------------------------------------------------------------
# parameters
# --------------------------------------------------------------------------

@dataclass
class EncoderStage:
    conv: ConvParams
    bn: BatchNormState
    down: B.WaveBlockParams | B.ConvBlockParams


@dataclass
class ModelParams:
    stem: ConvParams
    stem_bn: BatchNormState
    encoders: list[EncoderStage]
    bottleneck: ConvParams
    bottleneck_bn: BatchNormState
    decoders: list[B.IWaveBlockParams | B.LinearUpParams]  # decoders[i] restores stage i
    head: ConvParams


def init_params(cfg: NetworkConfig, rng: np.random.Generator | None = None) -> ModelParams:
    rng = rng if rng is not None else np.random.default_rng(cfg.seed)
    dt, mom = cfg.np_dtype, cfg.bn_momentum
    c0 = cfg.base_channels
    stem = ConvParams.init(rng, cfg.in_channels, c0, 3, dt)
    encoders = []
    for i in range(cfg.depth):
        c = cfg.channels(i)
        if cfg.down_kind == DownKind.WAVE:
            down = B.init_wave_block(rng, c, cfg.wavelet, cfg.wave_conv, bn_momentum=mom, dtype=dt)
        else:
            down = B.init_conv_block(rng, c, bn_momentum=mom, dtype=dt)
        encoders.append(EncoderStage(ConvParams.init(rng, c, c, 3, dt), BatchNormState.init(c, mom, dtype=dt), down))
    cl = cfg.channels(cfg.depth)
    bottleneck = ConvParams.init(rng, cl, cl, 3, dt)
    decoders = []
    for i in range(cfg.depth):
        c = cfg.channels(i)
        if cfg.up_kind == UpKind.IWAVE:
            decoders.append(B.init_iwave_block(rng, 2 * c, c, cfg.wavelet, cfg.synth_bn, bn_momentum=mom, dtype=dt))
        else:
            decoders.append(B.init_linear_up(rng, 2 * c, c, bn_momentum=mom, dtype=dt))
    head = ConvParams.init(rng, c0, cfg.num_classes, 1, dt)
    return ModelParams(stem, BatchNormState.init(c0, mom, dtype=dt), encoders, bottleneck,
                       BatchNormState.init(cl, mom, dtype=dt), decoders, head)


_BUFFERS = ("running_mean", "running_var")
_ARRAY_FIELDS = {ConvParams: ("weight", "bias"), BatchNormState: ("gamma", "beta") + _BUFFERS}


def named_tensors(obj, prefix: str = "") -> dict[str, np.ndarray]:
    """Flatten any parameter tree into ``{"encoders.0.down.conv.weight": array, ...}``."""
    out: dict[str, np.ndarray] = {}
    if obj is None:
        return out
    if type(obj) in _ARRAY_FIELDS:
        for f in _ARRAY_FIELDS[type(obj)]:
            out[prefix + f] = getattr(obj, f)
        return out
    if isinstance(obj, list):
        for i, item in enumerate(obj):
            out.update(named_tensors(item, f"{prefix}{i}."))
        return out
    for f in dataclasses.fields(obj):
        out.update(named_tensors(getattr(obj, f.name), f"{prefix}{f.name}."))
    return out


def is_buffer(name: str) -> bool:
    return name.rsplit(".", 1)[-1] in _BUFFERS


def trainable(obj) -> dict[str, np.ndarray]:
    return {k: v for k, v in named_tensors(obj).items() if not is_buffer(k)}


def replace_tensors(obj, values: dict[str, np.ndarray], prefix: str = ""):
    """Rebuild ``obj`` taking any tensor named in ``values`` from there."""
    if obj is None:
        return None
    if type(obj) in _ARRAY_FIELDS:
        changes = {f: values[prefix + f] for f in _ARRAY_FIELDS[type(obj)] if prefix + f in values}
        return dataclasses.replace(obj, **changes) if changes else obj
    if isinstance(obj, list):
        return [replace_tensors(item, values, f"{prefix}{i}.") for i, item in enumerate(obj)]
    changes = {f.name: replace_tensors(getattr(obj, f.name), values, f"{prefix}{f.name}.")
               for f in dataclasses.fields(obj)}
    return dataclasses.replace(obj, **changes)


# --------------------------------------------------------------------------
# forward / backward
# --------------------------------------------------------------------------

@dataclass
class ForwardCache:
    cfg: NetworkConfig
    params: ModelParams
    training: bool
    stem: B.CBRCache
    stages: list = field(default_factory=list)    # (stage-conv cache, down cache)
    bottleneck: B.CBRCache | None = None
    ups: list = field(default_factory=list)       # indexed by stage
    head_input: np.ndarray | None = None


def _check_input(x, cfg: NetworkConfig):
    if x.ndim != 4 or x.shape[1] != cfg.in_channels:
        raise ShapeError(f"expected input (N, {cfg.in_channels}, H, W), got {x.shape}")
    step = 2 ** cfg.depth
    if x.shape[2] % step or x.shape[3] % step:
        raise ShapeError(f"spatial dims {x.shape[2:]} must be divisible by 2**depth = {step}")


def forward(x: np.ndarray, m: ModelParams, cfg: NetworkConfig, training: bool):
    """Return ``(logits, cache)``; logits have shape (N, num_classes, H, W)."""
    _check_input(x, cfg)
    f, stem = B.cbr_forward(x, m.stem, m.stem_bn, training)
    cache = ForwardCache(cfg, m, training, stem)
    skips = []
    for enc in m.encoders:
        a, cc = B.cbr_forward(f, enc.conv, enc.bn, training)
        skips.append(f if cfg.skip == "before" else a)
        if cfg.down_kind == DownKind.WAVE:
            f, dc = B.wave_block_forward(a, enc.down, training, cfg.wavelet)
        else:
            f, dc = B.conv_block_forward(a, enc.down, training)
        cache.stages.append((cc, dc))
    g, cache.bottleneck = B.cbr_forward(f, m.bottleneck, m.bottleneck_bn, training)
    cache.ups = [None] * cfg.depth
    for i in reversed(range(cfg.depth)):
        if cfg.up_kind == UpKind.IWAVE:
            g, uc = B.iwave_block_forward(g, skips[i], m.decoders[i], training, cfg.wavelet)
        else:
            g, uc = B.linear_up_forward(g, skips[i], m.decoders[i], training)
        cache.ups[i] = uc
    cache.head_input = g
    return conv2d(g, m.head), cache


def backward(cache: ForwardCache, grad_logits: np.ndarray) -> ModelParams:
    """Gradients for every trainable tensor, as a :class:`ModelParams` tree."""
    cfg, m = cache.cfg, cache.params
    gg, gw, gb = conv2d_backward(cache.head_input, m.head, grad_logits)
    head = ConvParams(gw, gb)
    dec_grads = [None] * cfg.depth
    skip_grads = [None] * cfg.depth
    for i in range(cfg.depth):
        uc = cache.ups[i]
        if cfg.up_kind == UpKind.IWAVE:
            gg, gskip, dec_grads[i] = B.iwave_block_backward(uc, gg)
        else:
            gg, gskip, dec_grads[i] = B.linear_up_backward(uc, gg)
        skip_grads[i] = gskip
    gf, gbott, (g_gamma, g_beta) = B.cbr_backward(cache.bottleneck, gg)
    bott_bn = B.bn_grad(m.bottleneck_bn, g_gamma, g_beta)
    enc_grads = [None] * cfg.depth
    for i in reversed(range(cfg.depth)):
        cc, dc = cache.stages[i]
        enc = m.encoders[i]
        if cfg.down_kind == DownKind.WAVE:
            ga, gdown = B.wave_block_backward(dc, gf)
        else:
            ga, gdown = B.conv_block_backward(dc, gf)
        if cfg.skip == "after":
            ga = ga + skip_grads[i]
        gf, gconv, (g_gamma, g_beta) = B.cbr_backward(cc, ga)
        if cfg.skip == "before":
            gf = gf + skip_grads[i]
        enc_grads[i] = EncoderStage(gconv, B.bn_grad(enc.bn, g_gamma, g_beta), gdown)
    _, gstem, (g_gamma, g_beta) = B.cbr_backward(cache.stem, gf)
    return ModelParams(gstem, B.bn_grad(m.stem_bn, g_gamma, g_beta), enc_grads, gbott, bott_bn, dec_grads, head)


def commit_running_stats(m: ModelParams, cache: ForwardCache) -> ModelParams:
    """Fold the batch statistics recorded in a training forward into ``m``."""
    if not cache.training:
        return m
    cfg = cache.cfg
    encoders = []
    for enc, (cc, dc) in zip(m.encoders, cache.stages):
        down = (B.wave_block_commit(enc.down, dc) if cfg.down_kind == DownKind.WAVE
                else B.conv_block_commit(enc.down, dc))
        encoders.append(EncoderStage(enc.conv, bn_update_running(enc.bn, cc.bn), down))
    decoders = [B.iwave_block_commit(p, c) if cfg.up_kind == UpKind.IWAVE else B.linear_up_commit(p, c)
                for p, c in zip(m.decoders, cache.ups)]
    return dataclasses.replace(
        m,
        stem_bn=bn_update_running(m.stem_bn, cache.stem.bn),
        encoders=encoders,
        bottleneck_bn=bn_update_running(m.bottleneck_bn, cache.bottleneck.bn),
        decoders=decoders,
    )


def predict(x: np.ndarray, m: ModelParams, cfg: NetworkConfig) -> np.ndarray:
    logits, _ = forward(x, m, cfg, training=False)
    return logits.argmax(axis=1)


# --------------------------------------------------------------------------
# cost accounting
# --------------------------------------------------------------------------

def conv_cost(c_in, c_out, k, h, w):
    """``(params, MACs)`` of one stride-1 'same' convolution on an h x w map."""
    return c_out * c_in * k * k + c_out, h * w * c_out * c_in * k * k


def _pointwise(c, h, w, per_element=1):
    return c * h * w * per_element


def _transform_taps():
    fb = default_filterbank()
    return len(fb.h0o), len(fb.h1o), len(fb.g0o), len(fb.g1o)


def _dtcwt_cost(c, h, w, inverse=False):
    """Filter taps times output elements over both separable passes (one level)."""
    a_lo, a_hi, s_lo, s_hi = _transform_taps()
    lo, hi = (s_lo, s_hi) if inverse else (a_lo, a_hi)
    # column pass yields two full-size outputs, the row pass four
    return c * h * w * (lo + hi) * 3


def count_params_flops(cfg: NetworkConfig, input_shape: tuple[int, int]) -> dict:
    """Exact trainable-parameter count and per-image MAC count.

    Convolutions count ``H*W*C_out*C_in*k*k`` MACs. BN and ReLU cost one
    operation per element, max-pool and bilinear four per output element,
    wavelet transforms taps times output elements.
    """
    h, w = input_shape
    step = 2 ** cfg.depth
    if h % step or w % step:
        raise ShapeError(f"input {input_shape} must be divisible by 2**depth = {step}")
    params = 0
    flops = 0

    def conv(c_in, c_out, k, hh, ww, bn=True, act=True):
        nonlocal params, flops
        p, f = conv_cost(c_in, c_out, k, hh, ww)
        params += p
        flops += f
        if bn:
            params += 2 * c_out
            flops += _pointwise(c_out, hh, ww)
        if act:
            flops += _pointwise(c_out, hh, ww)

    factor = B.SPECTRAL_FACTOR[cfg.wavelet]
    conv(cfg.in_channels, cfg.base_channels, 3, h, w)
    for i in range(cfg.depth):
        c, hh, ww = cfg.channels(i), h >> i, w >> i
        conv(c, c, 3, hh, ww)
        if cfg.down_kind == DownKind.WAVE:
            if cfg.wavelet == WaveletKind.DTCWT:
                flops += _dtcwt_cost(c, hh, ww)
            else:
                flops += 4 * c * hh * ww
            c_in = factor * c
            if cfg.wave_conv == "grouped_shared":
                # shared kernel: 2C inputs stored, tiled over the groups at run time
                p, f = conv_cost(2 * c, 2 * c, 3, hh // 2, ww // 2)
                params += p
                flops += f * (c_in // (2 * c))
                params += 4 * c
                flops += 2 * _pointwise(2 * c, hh // 2, ww // 2)
            else:
                conv(c_in, 2 * c, 3, hh // 2, ww // 2)
        else:
            conv(c, 2 * c, 3, hh, ww)
            flops += 4 * _pointwise(2 * c, hh // 2, ww // 2)
    cl = cfg.channels(cfg.depth)
    conv(cl, cl, 3, h >> cfg.depth, w >> cfg.depth)
    for i in range(cfg.depth):
        c, hh, ww = cfg.channels(i), h >> i, w >> i
        if cfg.up_kind == UpKind.IWAVE:
            conv(2 * c, factor * c, 1, hh // 2, ww // 2, bn=cfg.synth_bn, act=False)
            if cfg.wavelet == WaveletKind.DTCWT:
                flops += _dtcwt_cost(c, hh, ww, inverse=True)
            else:
                flops += 4 * c * hh * ww
            conv(2 * c, c, 3, hh, ww)
        else:
            flops += 4 * _pointwise(2 * c, hh, ww)
            conv(3 * c, c, 3, hh, ww)
    conv(cfg.base_channels, cfg.num_classes, 1, h, w, bn=False, act=False)
    return {"params": int(params), "flops": int(flops)}


# --------------------------------------------------------------------------
# checkpoints
# --------------------------------------------------------------------------

def save_model(path, m: ModelParams, cfg: NetworkConfig, extra: dict | None = None) -> None:
    tensors = named_tensors(m)
    kinds = {k: ("buffer" if is_buffer(k) else "param") for k in tensors}
    meta = {"network": cfg.to_dict(), **(extra or {})}
    save_checkpoint(path, tensors, meta=meta, kinds=kinds)


def load_model(path) -> tuple[ModelParams, NetworkConfig, dict]:
    tensors, meta = load_checkpoint(path)
    cfg = NetworkConfig.from_dict(meta["network"])
    template = init_params(cfg)
    expected = named_tensors(template)
    missing = set(expected) - set(tensors)
    if missing:
        raise ValueError(f"checkpoint is missing tensors: {sorted(missing)[:5]}")
    for k, v in expected.items():
        if tensors[k].shape != v.shape:
            raise ShapeError(f"checkpoint tensor {k} has shape {tensors[k].shape}, expected {v.shape}")
    return replace_tensors(template, tensors), cfg, meta


def config_hash(*parts: dict) -> str:
    blob = json.dumps(parts, sort_keys=True, default=str).encode()
    return hashlib.sha256(blob).hexdigest()[:16]
