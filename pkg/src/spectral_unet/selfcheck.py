"""Fast invariant checks run by ``spectral-unet selfcheck``."""

from __future__ import annotations

import math
import tempfile
import time
from pathlib import Path

import numpy as np

from . import blocks as B
from . import network as net
from .data import SyntheticSpec, generate
from .io import read_checkpoint_manifest
from .metrics import boundary, dice, hd95, loss
from .tensor import BatchNormState, ConvParams, batchnorm2d, batchnorm2d_backward, conv2d, conv2d_backward
from .trainer import TrainConfig, poly_lr, sgd_momentum_step, split_dataset, train
from .wavelets import Subbands, WaveletKind, dtcwt_adjoint_backward, dtcwt_forward, dtcwt_inverse
from .wavelets import default_filterbank, haar_forward, haar_inverse, validate_filterbank


def _fd(f, x, coords, step=1e-5):
    flat = x.reshape(-1)
    out = np.empty(len(coords))
    for j, i in enumerate(coords):
        old = flat[i]
        flat[i] = old + step
        hi = f()
        flat[i] = old - step
        lo = f()
        flat[i] = old
        out[j] = (hi - lo) / (2 * step)
    return out


def _rel(a, b):
    return float(np.linalg.norm(a - b) / max(np.linalg.norm(a) + np.linalg.norm(b), 1e-300))


def check_filterbank():
    report = validate_filterbank(default_filterbank())
    return report.ok, "; ".join(report.failures()) or "all filter properties hold"


def check_reconstruction():
    worst = 0.0
    for size in (8, 16, 32):
        for seed in range(3):
            x = np.random.default_rng(seed).standard_normal((1, 3, size, size))
            worst = max(worst, float(np.max(np.abs(dtcwt_inverse(dtcwt_forward(x)) - x))))
    return worst < 1e-8, f"max abs error {worst:.2e}"


def check_haar():
    x = np.random.default_rng(0).standard_normal((2, 2, 8, 8))
    err = float(np.max(np.abs(haar_inverse(*haar_forward(x)) - x)))
    return err < 1e-12, f"max abs error {err:.2e}"


def check_adjoint():
    r = np.random.default_rng(1)
    x = r.standard_normal((1, 2, 16, 16))
    fx = dtcwt_forward(x, 2)
    y = Subbands(r.standard_normal(fx.lowpass.shape), [r.standard_normal(h.shape) for h in fx.highpasses])
    lhs = float(np.sum(fx.lowpass * y.lowpass) + sum(np.sum(a * b) for a, b in zip(fx.highpasses, y.highpasses)))
    rhs = float(np.sum(x * dtcwt_adjoint_backward(y)))
    return abs(lhs - rhs) < 1e-10 * max(1.0, abs(lhs)), f"|<Fx,y> - <x,F*y>| = {abs(lhs - rhs):.2e}"


def check_block_round_trip():
    r = np.random.default_rng(2)
    x = r.standard_normal((2, 3, 16, 16))
    worst = 0.0
    for kind in WaveletKind:
        _, enc = B.wave_block_forward(x, B.init_wave_block(r, 3, kind), True, kind)
        p = B.init_iwave_block(r, 6, 3, kind)
        _, dec = B.iwave_block_forward(np.zeros((2, 6, 8, 8)), x, p, True, kind, bypass=enc.spectral)
        worst = max(worst, float(np.max(np.abs(dec.y1 - x))))
    return worst < 1e-8, f"Wave-Block -> iWave-Block max abs error {worst:.2e}"


def check_gradients():
    r = np.random.default_rng(3)
    errs = []
    p = ConvParams.init(r, 2, 3, 3)
    x = r.standard_normal((2, 2, 5, 5))
    g = r.standard_normal((2, 3, 5, 5))
    gx, gw, _ = conv2d_backward(x, p, g)
    f = lambda: float(np.sum(conv2d(x, p) * g))
    errs.append(_rel(gx.reshape(-1)[:20], _fd(f, x, range(20))))
    errs.append(_rel(gw.reshape(-1)[:20], _fd(f, p.weight, range(20))))
    s = BatchNormState.init(3)
    s.gamma[:] = r.uniform(0.5, 1.5, 3)
    y, cache = batchnorm2d(g, s, True)
    gg = r.standard_normal(y.shape)
    gbx, _, _ = batchnorm2d_backward(cache, gg)
    f = lambda: float(np.sum(batchnorm2d(g, s, True)[0] * gg))
    errs.append(_rel(gbx.reshape(-1)[:20], _fd(f, g, range(20))))
    cfg = net.NetworkConfig(base_channels=2, depth=1)
    m = net.init_params(cfg, np.random.default_rng(4))
    xi = r.standard_normal((2, 1, 8, 8))
    logits, fc = net.forward(xi, m, cfg, True)
    gl = r.standard_normal(logits.shape)
    grads = net.trainable(net.backward(fc, gl))
    w = net.trainable(m)["encoders.0.down.conv.weight"]
    f = lambda: float(np.sum(net.forward(xi, m, cfg, True)[0] * gl))
    errs.append(_rel(grads["encoders.0.down.conv.weight"].reshape(-1)[:15], _fd(f, w, range(15))))
    worst = max(errs)
    return worst < 1e-5, f"worst relative error {worst:.2e}"


def check_metrics():
    r = np.random.default_rng(5)
    for _ in range(20):
        a = (r.random((12, 12)) < 0.3).astype(int)
        b = (r.random((12, 12)) < 0.3).astype(int)
        if not a.any() or not b.any():
            continue
        pa = np.argwhere(boundary(a == 1)).astype(float)
        pb = np.argwhere(boundary(b == 1)).astype(float)
        d = np.sqrt(((pa[:, None] - pb[None]) ** 2).sum(-1))
        pooled = np.sort(np.concatenate([d.min(1), d.min(0)]))
        if hd95(a, b) != pooled[math.ceil(0.95 * pooled.size) - 1]:
            return False, "hd95 disagrees with all-pairs distances"
    ok = dice(np.array([[1, 0, 0]]), np.array([[1, 1, 0]])) == 2 / 3
    return ok, "dice closed form and hd95 all-pairs agreement"


def check_loss():
    gt = np.random.default_rng(6).integers(0, 2, (2, 4, 4))
    from .metrics import loss_parts
    ce = loss_parts(np.zeros((2, 2, 4, 4)), gt)[0]
    return abs(ce - math.log(2)) < 1e-12 and loss(np.zeros((2, 2, 4, 4)), gt)[0] > 0, f"uniform CE {ce:.6f}"


def check_optimizer():
    cfg = TrainConfig(max_iters=1000)
    g = np.array([0.5, -2.0])
    p, v = {"w": np.zeros(2)}, {"w": np.zeros(2)}
    for _ in range(2):
        p, v = sgd_momentum_step(p, {"w": g}, v, 0.01, 0.99)
    ok = (poly_lr(0, cfg) == 0.01 and poly_lr(1000, cfg) == 0.0
          and np.allclose(-p["w"], 0.01 * g * 2.99, rtol=1e-12)
          and [len(s) for s in split_dataset(100)] == [70, 10, 20])
    return ok, "poly schedule, momentum two-step and 70/10/20 split"


def check_param_count():
    cfg = net.NetworkConfig(base_channels=4, depth=2)
    with tempfile.TemporaryDirectory() as tmp:
        path = Path(tmp) / "m.ckpt"
        net.save_model(path, net.init_params(cfg), cfg)
        stored = sum(int(np.prod(e["shape"])) for e in read_checkpoint_manifest(path)["tensors"]
                     if e["kind"] == "param")
    counted = net.count_params_flops(cfg, (16, 16))["params"]
    return stored == counted, f"{counted} counted, {stored} stored"


def check_determinism():
    ds = generate(SyntheticSpec(image_size=16, num_images=10, radius_range=(2, 4)))
    cfg = net.NetworkConfig(base_channels=2, depth=1)
    tcfg = TrainConfig(max_iters=3, batch_size=2, eval_every=3)
    with tempfile.TemporaryDirectory() as tmp:
        train(cfg, tcfg, ds, out_dir=Path(tmp) / "a")
        train(cfg, tcfg, ds, out_dir=Path(tmp) / "b")
        same = (Path(tmp) / "a" / "best.ckpt").read_bytes() == (Path(tmp) / "b" / "best.ckpt").read_bytes()
    return same, "two seeded runs give byte-identical checkpoints"


CHECKS = [
    ("filter bank", check_filterbank),
    ("dtcwt perfect reconstruction", check_reconstruction),
    ("haar perfect reconstruction", check_haar),
    ("dtcwt adjoint identity", check_adjoint),
    ("block round trip", check_block_round_trip),
    ("finite-difference gradients", check_gradients),
    ("dice and hd95", check_metrics),
    ("loss", check_loss),
    ("optimizer and split", check_optimizer),
    ("parameter count", check_param_count),
    ("training determinism", check_determinism),
]


def run_all(out=print) -> bool:
    all_ok = True
    for name, fn in CHECKS:
        t = time.perf_counter()
        try:
            ok, detail = fn()
        except Exception as exc:  # a crashing check is a failing check
            ok, detail = False, f"{type(exc).__name__}: {exc}"
        all_ok &= bool(ok)
        out(f"{'PASS' if ok else 'FAIL'} {name}: {detail} ({time.perf_counter() - t:.2f}s)")
    return all_ok
