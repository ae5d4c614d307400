"""End-to-end acceptance checks, one test per criterion.

Each test prints a ``PASS``/``FAIL`` line; the lines are repeated in the
pytest terminal summary under "acceptance criteria".
"""

import dataclasses
import json
import time

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from conftest import numeric_grad, rel_err
from oracles import brute_hd95, random_mask_pair
from spectral_unet import blocks as B
from spectral_unet import network as net
from spectral_unet.cli import main
from spectral_unet.data import SyntheticSpec, generate
from spectral_unet.metrics import dice, hd95
from spectral_unet.network import DownKind, NetworkConfig
from spectral_unet.tensor import (
    BatchNormState, ConvParams, batchnorm2d, batchnorm2d_backward, conv2d, conv2d_backward, maxpool2x2,
    relu, relu_backward, upsample_bilinear2x,
)
from spectral_unet.trainer import TrainConfig, directional_check, read_table, train
from spectral_unet.wavelets import Subbands, WaveletKind, analysis, dtcwt_forward, dtcwt_inverse

# small-object ablation, sized to finish well inside 30 minutes on one core
ABLATION_CONFIG = {
    "network": {"base_channels": 8, "depth": 2},
    "train": {"max_iters": 600, "batch_size": 4, "eval_every": 100},
    "data": {"image_size": 32, "num_images": 100, "object_count_range": [2, 6], "small_objects": True,
             "noise_sigma": 0.3},
}
BLOB_NET = NetworkConfig(base_channels=8, depth=3)
BLOB_TRAIN = TrainConfig(max_iters=200, batch_size=4, eval_every=50)  # the default recipe otherwise


def test_criterion_1_perfect_reconstruction(report):
    worst = 0.0
    for size in (8, 16, 32):
        for channels in (1, 3):
            for seed in (0, 1, 2):
                x = np.random.default_rng(seed).standard_normal((2, channels, size, size))
                worst = max(worst, float(np.max(np.abs(dtcwt_inverse(dtcwt_forward(x)) - x))))
    assert report(1, worst < 1e-8, f"DTCWT inverse(forward(x)) max abs error {worst:.2e} (< 1e-8)")


class TestCriterion2:
    worst_wave = 0.0
    best_pool = np.inf

    @settings(max_examples=40, deadline=None)
    @given(size=st.sampled_from([8, 16, 32]), channels=st.sampled_from([1, 3]), seed=st.integers(0, 2**31))
    def test_property(self, size, channels, seed):
        r = np.random.default_rng(seed)
        x = r.standard_normal((2, channels, size, size))
        _, cache = B.wave_block_forward(x, B.init_wave_block(r, channels, WaveletKind.DTCWT), True)
        lo, hi = B.rearrange_inverse(cache.spectral)
        err = float(np.max(np.abs(dtcwt_inverse(Subbands(lo, [hi])) - x)))
        pooled = upsample_bilinear2x(maxpool2x2(x)[0])
        loss = float(np.linalg.norm(pooled - x) / np.linalg.norm(x))
        TestCriterion2.worst_wave = max(TestCriterion2.worst_wave, err)
        TestCriterion2.best_pool = min(TestCriterion2.best_pool, loss)
        assert err < 1e-8 and loss > 0.1

    def test_summary(self, report):
        ok = self.worst_wave < 1e-8 and self.best_pool > 0.1
        assert report(2, ok, f"Wave-Block pre-conv reconstruction max abs {self.worst_wave:.2e} (< 1e-8); "
                             f"max-pool + Linear-I smallest relative L2 {self.best_pool:.3f} (> 0.1)")


def _fd_conv(seed):
    r = np.random.default_rng(seed)
    p = ConvParams.init(r, 2, 3, 3)
    p.bias[:] = r.standard_normal(3)
    x, g = r.standard_normal((2, 2, 6, 6)), r.standard_normal((2, 3, 6, 6))
    gx, gw, gb = conv2d_backward(x, p, g)
    f = lambda: np.sum(conv2d(x, p) * g)
    return max(rel_err(gx, numeric_grad(f, x)), rel_err(gw, numeric_grad(f, p.weight)),
               rel_err(gb, numeric_grad(f, p.bias)))


def _fd_bn(seed):
    r = np.random.default_rng(seed)
    s = BatchNormState.init(3)
    s.gamma[:], s.beta[:] = r.uniform(0.5, 1.5, 3), r.standard_normal(3)
    x, g = r.standard_normal((2, 3, 4, 4)), r.standard_normal((2, 3, 4, 4))
    _, cache = batchnorm2d(x, s, True)
    gx, gg, gb = batchnorm2d_backward(cache, g)
    f = lambda: np.sum(batchnorm2d(x, s, True)[0] * g)
    return max(rel_err(gx, numeric_grad(f, x)), rel_err(gg, numeric_grad(f, s.gamma)),
               rel_err(gb, numeric_grad(f, s.beta)))


def _fd_relu(seed):
    r = np.random.default_rng(seed)
    x = r.standard_normal((2, 2, 4, 4))
    x[np.abs(x) < 1e-3] = 0.5
    g = r.standard_normal(x.shape)
    return rel_err(relu_backward(x, g), numeric_grad(lambda: np.sum(relu(x) * g), x))


def _fd_blocks(seed):
    r = np.random.default_rng(seed)
    errs = []
    for kind in WaveletKind:
        p = B.init_wave_block(r, 2, kind)
        x = r.standard_normal((2, 2, 8, 8))
        y, cache = B.wave_block_forward(x, p, True, kind)
        g = r.standard_normal(y.shape)
        gx, gp = B.wave_block_backward(cache, g)
        f = lambda: np.sum(B.wave_block_forward(x, p, True, kind)[0] * g)
        errs += [rel_err(gx, numeric_grad(f, x)), rel_err(gp.conv.weight, numeric_grad(f, p.conv.weight))]

        q = B.init_iwave_block(r, 4, 2, kind)
        d, skip = r.standard_normal((2, 4, 4, 4)), r.standard_normal((2, 2, 8, 8))
        y, cache = B.iwave_block_forward(d, skip, q, True, kind)
        g = r.standard_normal(y.shape)
        gd, gs, gq = B.iwave_block_backward(cache, g)
        f = lambda: np.sum(B.iwave_block_forward(d, skip, q, True, kind)[0] * g)
        errs += [rel_err(gd, numeric_grad(f, d)), rel_err(gs, numeric_grad(f, skip)),
                 rel_err(gq.synth.weight, numeric_grad(f, q.synth.weight))]
    c = B.init_conv_block(r, 2)
    x = r.standard_normal((2, 2, 6, 6))
    y, cache = B.conv_block_forward(x, c, True)
    g = r.standard_normal(y.shape)
    gx, _ = B.conv_block_backward(cache, g)
    errs.append(rel_err(gx, numeric_grad(lambda: np.sum(B.conv_block_forward(x, c, True)[0] * g), x)))
    u = B.init_linear_up(r, 4, 2)
    d, skip = r.standard_normal((2, 4, 3, 3)), r.standard_normal((2, 2, 6, 6))
    y, cache = B.linear_up_forward(d, skip, u, True)
    g = r.standard_normal(y.shape)
    gd, _, _ = B.linear_up_backward(cache, g)
    errs.append(rel_err(gd, numeric_grad(lambda: np.sum(B.linear_up_forward(d, skip, u, True)[0] * g), d)))
    return max(errs)


def _fd_network(seed):
    cfg = NetworkConfig(base_channels=2, depth=1, seed=seed)
    m = net.init_params(cfg)
    r = np.random.default_rng(seed)
    x = r.standard_normal((2, 1, 8, 8))
    logits, cache = net.forward(x, m, cfg, True)
    g = r.standard_normal(logits.shape)
    grads = net.trainable(net.backward(cache, g))
    f = lambda: np.sum(net.forward(x, m, cfg, True)[0] * g)
    errs = [rel_err(grads["stem.weight"], numeric_grad(f, m.stem.weight)),
            rel_err(grads["head.weight"], numeric_grad(f, m.head.weight))]
    for name, p in net.trainable(m).items():
        if name.endswith("weight") or name.endswith("gamma"):
            coords = r.choice(p.size, min(p.size, 10), replace=False)
            errs.append(rel_err(grads[name].reshape(-1)[coords], numeric_grad(f, p, coords=coords)))
    return max(errs)


def test_criterion_3_gradients(report):
    start = time.perf_counter()
    parts = {"conv": _fd_conv, "bn": _fd_bn, "relu": _fd_relu, "blocks": _fd_blocks, "L=1 net": _fd_network}
    worst = {name: max(fn(seed) for seed in (0, 1, 2)) for name, fn in parts.items()}
    elapsed = time.perf_counter() - start
    ok = max(worst.values()) < 1e-5 and elapsed < 60
    detail = ", ".join(f"{k} {v:.1e}" for k, v in worst.items())
    assert report(3, ok, f"finite-difference relative errors {detail} (< 1e-5) in {elapsed:.1f}s")


def test_criterion_4_shift_invariance(report):
    s = analysis.shift_sensitivity(level=2)
    dt = max(float(v.max()) for v in s["dtcwt"].values())
    haar = min(float(v.max()) for v in s["haar"].values())
    ok = dt < 0.15 and haar > 0.40
    assert report(4, ok, f"1-px shift: DTCWT orientation energy change {100 * dt:.2f}% (< 15%), "
                         f"Haar sub-band change {100 * haar:.1f}% (> 40%)")


def test_criterion_5_metrics(report):
    rng = np.random.default_rng(2024)
    mismatches = 0
    for _ in range(200):
        a, b = random_mask_pair(rng, 32)
        mismatches += hd95(a, b) != brute_hd95(a, b)
    closed = (dice(np.array([[1, 0, 0]]), np.array([[1, 1, 0]])) == 2 / 3
              and dice(np.array([[1, 0]]), np.array([[0, 1]])) == 0.0
              and dice(np.array([[1, 1]]), np.array([[1, 1]])) == 1.0)
    ok = mismatches == 0 and closed
    assert report(5, ok, f"HD95 vs all-pairs oracle: {200 - mismatches}/200 exact; Dice closed forms "
                         f"{'exact' if closed else 'WRONG'}")


@pytest.mark.slow
def test_criterion_6_ablation(report, tmp_path):
    cfg_path = tmp_path / "ablation.json"
    cfg_path.write_text(json.dumps(ABLATION_CONFIG))
    start = time.perf_counter()
    code = main(["ablate", "--config", str(cfg_path), "--repeats", "3", "--threads", "1",
                 "--out", str(tmp_path / "ablation")])
    elapsed = time.perf_counter() - start
    table = read_table(tmp_path / "ablation" / "table.csv")
    structural = code == 0 and len(table) == 8 and all(r["runs"] == "3" for r in table) and elapsed <= 1800
    wins, n = directional_check(table)
    rows = {(r["wavelet"], r["down"], r["up"]): r["dice_c1_pm"] for r in table}
    spectral, base = rows[("dtcwt", "wave_block", "iwave_block")], rows[("dtcwt", "conv_block", "linear_i")]
    soft = wins >= 2
    report(6, structural and soft,
           f"8-row table in {elapsed:.0f}s (<= 1800s); soft check DTCWT Wave+iWave {spectral} vs "
           f"ConvBlock+Linear-I {base}, spectral >= baseline in {wins}/{n} repeats (need >= 2)")
    assert structural
    if not soft:
        pytest.xfail(f"soft directional check not met at desk scale ({wins}/{n})")


@pytest.mark.slow
def test_criterion_7_training(report):
    ds = generate(SyntheticSpec(image_size=64, num_images=200))
    start = time.perf_counter()
    _, rec = train(BLOB_NET, BLOB_TRAIN, ds)
    cfg = BLOB_TRAIN
    recipe = (cfg.initial_lr, cfg.momentum, cfg.lr_power) == (0.01, 0.99, 0.9)
    ok = recipe and rec.best_val_dice >= 0.90 and cfg.max_iters <= 2000
    assert report(7, ok, f"blob task val Dice {rec.best_val_dice:.3f} (>= 0.90) after {rec.best_iter} of "
                         f"{cfg.max_iters} iterations, lr 0.01 / momentum 0.99 / poly 0.9, "
                         f"{time.perf_counter() - start:.0f}s")


def test_criterion_8_cost(report, capsys):
    spectral = NetworkConfig()
    conv_down = dataclasses.replace(spectral, down_kind=DownKind.CONV)
    p_s = net.count_params_flops(spectral, (64, 64))["params"]
    p_c = net.count_params_flops(conv_down, (64, 64))["params"]
    overhead = (p_s - p_c) / p_c
    assert main(["bench", "--repeats", "1"]) == 0
    out = capsys.readouterr().out
    rows = "Spectral" in out and "ConvBlock+iWave" in out
    ok = rows and overhead < 0.25
    assert report(8, ok, f"bench rows printed; Spectral {p_s:,} vs ConvBlock-down {p_c:,} params, "
                         f"overhead {100 * overhead:.1f}% (< 25%)")


def test_criterion_9_determinism(report, tmp_path):
    cfg = {"network": {"base_channels": 4, "depth": 2},
           "train": {"max_iters": 20, "batch_size": 4, "eval_every": 10},
           "data": {"image_size": 32, "num_images": 20}}
    (tmp_path / "c.json").write_text(json.dumps(cfg))
    blobs = []
    for name in ("a", "b"):
        assert main(["train", "--config", str(tmp_path / "c.json"), "--seed", "11", "--threads", "1",
                     "--out", str(tmp_path / name)]) == 0
        blobs.append((tmp_path / name / "best.ckpt").read_bytes())
    logs = [(tmp_path / n / "train_log.csv").read_text() for n in ("a", "b")]
    ok = blobs[0] == blobs[1] and logs[0] == logs[1]
    assert report(9, ok, f"two seeded single-thread runs: checkpoints ({len(blobs[0])} bytes) and train logs "
                         f"{'byte-identical' if ok else 'DIFFER'}")
