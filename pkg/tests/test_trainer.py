import csv
import dataclasses

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from spectral_unet import network as net
from spectral_unet.data import SyntheticSpec, generate
from spectral_unet.errors import ShapeError
from spectral_unet.network import NetworkConfig
from spectral_unet.trainer import (
    TrainConfig,
    ablate,
    clip_by_global_norm,
    directional_check,
    evaluate,
    poly_lr,
    read_table,
    sgd_momentum_step,
    split_dataset,
    train,
)

SMOKE_NET = NetworkConfig(base_channels=4, depth=1)
SMOKE_TRAIN = TrainConfig(max_iters=50, batch_size=4, eval_every=25)


@pytest.fixture(scope="module")
def smoke_data():
    # 11 images split 8/1/2, so the model trains on 8
    return generate(SyntheticSpec(image_size=16, num_images=11, radius_range=(2, 5), seed=1))


class TestSchedule:
    def test_start(self):
        assert poly_lr(0, TrainConfig()) == 0.01

    def test_end(self):
        assert poly_lr(1000, TrainConfig(max_iters=1000)) == 0.0

    def test_midpoint(self):
        assert poly_lr(500, TrainConfig(max_iters=1000)) == pytest.approx(0.01 * 0.5**0.9, rel=1e-14)

    def test_out_of_range(self):
        with pytest.raises(ValueError):
            poly_lr(11, TrainConfig(max_iters=10))

    @settings(max_examples=30, deadline=None)
    @given(n=st.integers(2, 5000), data=st.data())
    def test_strictly_decreasing(self, n, data):
        cfg = TrainConfig(max_iters=n)
        i = data.draw(st.integers(0, n - 1))
        assert poly_lr(i + 1, cfg) < poly_lr(i, cfg)


class TestSGD:
    def test_zero_grad_zero_velocity(self, rng):
        p = {"w": rng.standard_normal(3)}
        new, _ = sgd_momentum_step(p, {"w": np.zeros(3)}, {"w": np.zeros(3)}, 0.1, 0.99)
        np.testing.assert_array_equal(new["w"], p["w"])

    def test_plain_sgd(self, rng):
        p, g = {"w": rng.standard_normal(3)}, {"w": rng.standard_normal(3)}
        new, _ = sgd_momentum_step(p, g, {"w": np.zeros(3)}, 0.1, 0.0)
        np.testing.assert_allclose(new["w"], p["w"] - 0.1 * g["w"], rtol=1e-15)

    @pytest.mark.parametrize("m", [0.0, 0.5, 0.99])
    def test_two_steps(self, rng, m):
        p0, g = rng.standard_normal(4), rng.standard_normal(4)
        p, v = {"w": p0}, {"w": np.zeros(4)}
        for _ in range(2):
            p, v = sgd_momentum_step(p, {"w": g}, v, 0.01, m)
        np.testing.assert_allclose(p0 - p["w"], 0.01 * g * (2 + m), rtol=1e-12)

    def test_shape_mismatch(self):
        with pytest.raises(ShapeError):
            sgd_momentum_step({"w": np.zeros(2)}, {"w": np.zeros(3)}, {"w": np.zeros(2)}, 0.1, 0.9)

    def test_clip(self):
        g = {"a": np.array([3.0]), "b": np.array([4.0])}
        out = clip_by_global_norm(g, 1.0)
        np.testing.assert_allclose([out["a"][0], out["b"][0]], [0.6, 0.8])
        assert clip_by_global_norm(g, 10.0) is g


class TestSplit:
    @pytest.mark.parametrize("n,sizes", [(100, (70, 10, 20)), (10, (7, 1, 2)), (37, (27, 3, 7))])
    def test_sizes(self, n, sizes):
        parts = split_dataset(n)
        assert tuple(len(p) for p in parts) == sizes

    @settings(max_examples=30, deadline=None)
    @given(n=st.integers(10, 500), seed=st.integers(0, 1000))
    def test_partition(self, n, seed):
        parts = split_dataset(n, seed=seed)
        joined = np.concatenate(parts)
        assert sorted(joined.tolist()) == list(range(n))

    def test_seeded(self):
        a, b = split_dataset(50, seed=3), split_dataset(50, seed=3)
        assert all(np.array_equal(x, y) for x, y in zip(a, b))
        assert not np.array_equal(a[0], split_dataset(50, seed=4)[0])

    def test_too_small(self):
        with pytest.raises(ValueError):
            split_dataset(9)


class TestConfig:
    def test_round_trip(self):
        cfg = TrainConfig(max_iters=5, split=(0.8, 0.1, 0.1))
        assert TrainConfig.from_dict(cfg.to_dict()) == cfg

    @pytest.mark.parametrize("bad", [dict(split=(0.5, 0.5, 0.5)), dict(momentum=1.0), dict(max_iters=0),
                                     dict(grad_clip=0.0)])
    def test_validation(self, bad):
        with pytest.raises(ValueError):
            TrainConfig(**bad)


class TestTrain:
    def test_smoke_loss_decreases(self, smoke_data, tmp_path):
        _, rec = train(SMOKE_NET, SMOKE_TRAIN, smoke_data, out_dir=tmp_path)
        assert len(rec.losses) == 50
        assert np.mean(rec.losses[-5:]) < np.mean(rec.losses[:5])
        for name in ("best.ckpt", "train_log.csv", "eval_log.csv", "summary.json"):
            assert (tmp_path / name).exists()
        with open(tmp_path / "eval_log.csv") as fh:
            assert next(csv.reader(fh)) == ["eval_iter", "class", "dice", "hd95"]

    def test_deterministic(self, smoke_data, tmp_path):
        _, a = train(SMOKE_NET, SMOKE_TRAIN, smoke_data, out_dir=tmp_path / "a")
        _, b = train(SMOKE_NET, SMOKE_TRAIN, smoke_data, out_dir=tmp_path / "b")
        assert a.comparable() == b.comparable()
        assert (tmp_path / "a" / "best.ckpt").read_bytes() == (tmp_path / "b" / "best.ckpt").read_bytes()

    def test_best_checkpoint_reloads(self, smoke_data, tmp_path):
        best, rec = train(SMOKE_NET, dataclasses.replace(SMOKE_TRAIN, max_iters=10, eval_every=5),
                          smoke_data, out_dir=tmp_path)
        m, cfg, meta = net.load_model(tmp_path / "best.ckpt")
        assert meta["best_iter"] == rec.best_iter
        ds = smoke_data.subset(range(4))
        assert evaluate(m, cfg, ds)["mean_dice"] == evaluate(best, SMOKE_NET, ds)["mean_dice"]

    def test_divergence_reported(self, smoke_data):
        from spectral_unet.errors import DivergenceError
        bad = net.init_params(SMOKE_NET)
        bad.head.bias[:] = np.nan
        with pytest.raises(DivergenceError, match="iteration 0"):
            train(SMOKE_NET, SMOKE_TRAIN, smoke_data, params=bad)


class TestAblate:
    def test_grid_table(self, tmp_path):
        spec = SyntheticSpec(image_size=16, num_images=10, radius_range=(2, 4))
        tcfg = TrainConfig(max_iters=2, batch_size=2, eval_every=2)
        table = ablate(NetworkConfig(base_channels=2, depth=1), tcfg, spec, repeats=3,
                       out_csv=tmp_path / "t.csv", runs_csv=tmp_path / "r.csv")
        rows = read_table(tmp_path / "t.csv")
        assert len(rows) == 8 and all(r["runs"] == "3" and r["failures"] == "0" for r in rows)
        assert {"dice_c1_mean", "dice_c1_std", "dice_c1_pm"} <= rows[0].keys()
        assert [(r["wavelet"], r["down"], r["up"]) for r in rows][:2] == [
            ("haar", "conv_block", "linear_i"), ("haar", "wave_block", "linear_i")]
        wins, n = directional_check(table)
        assert n == 3 and 0 <= wins <= 3

    def test_identical_reruns(self):
        spec = SyntheticSpec(image_size=16, num_images=10, radius_range=(2, 4))
        tcfg = TrainConfig(max_iters=2, batch_size=2, eval_every=2)
        cfg = NetworkConfig(base_channels=2, depth=1)
        assert ablate(cfg, tcfg, spec, repeats=1) == ablate(cfg, tcfg, spec, repeats=1)
