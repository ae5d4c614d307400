import dataclasses

import numpy as np
import pytest

from conftest import numeric_grad, rel_err
from spectral_unet import network as net
from spectral_unet.errors import ShapeError
from spectral_unet.io import read_checkpoint_manifest
from spectral_unet.network import DownKind, NetworkConfig, UpKind
from spectral_unet.wavelets import WaveletKind

GRID = net.variant_grid(NetworkConfig(base_channels=4, depth=2))


def zero_biases(m: net.ModelParams):
    for name, t in net.named_tensors(m).items():
        if name.endswith(".bias") or name.endswith(".beta"):
            t[:] = 0


def tiny(cfg_kwargs=None, seed=0):
    cfg = NetworkConfig(in_channels=1, num_classes=2, base_channels=2, depth=1, seed=seed, **(cfg_kwargs or {}))
    m = net.init_params(cfg)
    r = np.random.default_rng(seed + 100)
    for name, t in net.named_tensors(m).items():
        if name.endswith(".gamma"):
            t[:] = r.uniform(0.5, 1.5, t.shape)
        elif name.endswith(".beta"):
            t[:] = 0.3 * r.standard_normal(t.shape)
    return cfg, m


class TestConfig:
    def test_round_trip(self):
        cfg = NetworkConfig(down_kind="conv_block", wavelet="haar")
        assert NetworkConfig.from_dict(cfg.to_dict()) == cfg

    def test_unknown_field(self):
        with pytest.raises(ValueError, match="bogus"):
            NetworkConfig.from_dict({"bogus": 1})

    @pytest.mark.parametrize("bad", [{"depth": 0}, {"wave_conv": "x"}, {"skip": "x"}, {"dtype": "f16"},
                                     {"down_kind": "pool"}])
    def test_validation(self, bad):
        with pytest.raises(ValueError):
            NetworkConfig(**bad)

    def test_grid_layout(self):
        names = [c.variant_name() for c in GRID]
        assert names[0] == "haar:conv_block+linear_i" and names[-1] == "dtcwt:wave_block+iwave_block"
        assert len(set(names)) == 8


class TestForward:
    def test_shape_contract(self, rng):
        cfg = NetworkConfig(base_channels=8, depth=3)
        logits, _ = net.forward(rng.standard_normal((1, 1, 32, 32)), net.init_params(cfg), cfg, True)
        assert logits.shape == (1, 2, 32, 32)

    @pytest.mark.parametrize("cfg", GRID, ids=lambda c: c.variant_name())
    def test_grid_shapes_agree(self, rng, cfg):
        logits, _ = net.forward(rng.standard_normal((2, 1, 16, 16)), net.init_params(cfg), cfg, True)
        assert logits.shape == (2, 2, 16, 16)

    @pytest.mark.parametrize("cfg", GRID[4:], ids=lambda c: c.variant_name())
    def test_zero_input_gives_head_bias(self, cfg):
        m = net.init_params(cfg)
        zero_biases(m)
        m.head.bias[:] = [0.25, -1.5]
        logits, _ = net.forward(np.zeros((1, 1, 16, 16)), m, cfg, True)
        np.testing.assert_array_equal(logits[0, 0], 0.25)
        np.testing.assert_array_equal(logits[0, 1], -1.5)

    def test_indivisible_input(self, rng):
        cfg = NetworkConfig(base_channels=2, depth=2)
        with pytest.raises(ShapeError):
            net.forward(rng.standard_normal((1, 1, 12, 10)), net.init_params(cfg), cfg, True)

    def test_wrong_channels(self, rng):
        cfg = NetworkConfig(base_channels=2, depth=1)
        with pytest.raises(ShapeError):
            net.forward(rng.standard_normal((1, 3, 8, 8)), net.init_params(cfg), cfg, True)

    def test_init_deterministic(self):
        cfg = NetworkConfig(base_channels=4, depth=2, seed=5)
        a, b = net.named_tensors(net.init_params(cfg)), net.named_tensors(net.init_params(cfg))
        assert all(np.array_equal(a[k], b[k]) for k in a)

    def test_commit_updates_running_stats(self, rng):
        cfg = NetworkConfig(base_channels=2, depth=1)
        m = net.init_params(cfg)
        _, cache = net.forward(rng.standard_normal((2, 1, 8, 8)) + 3, m, cfg, True)
        m2 = net.commit_running_stats(m, cache)
        assert not np.array_equal(m2.stem_bn.running_mean, m.stem_bn.running_mean)
        assert not m.stem_bn.running_mean.any()

    def test_predict_labels(self, rng):
        cfg = NetworkConfig(base_channels=2, depth=1, num_classes=3)
        p = net.predict(rng.standard_normal((2, 1, 8, 8)), net.init_params(cfg), cfg)
        assert p.shape == (2, 8, 8) and p.max() < 3


class TestBackward:
    def test_zero_cotangent(self, rng):
        cfg = NetworkConfig(base_channels=2, depth=2)
        logits, cache = net.forward(rng.standard_normal((2, 1, 16, 16)), net.init_params(cfg), cfg, True)
        grads = net.trainable(net.backward(cache, np.zeros_like(logits)))
        assert not any(g.any() for g in grads.values())

    def test_repeatable(self, rng):
        cfg = NetworkConfig(base_channels=2, depth=2)
        logits, cache = net.forward(rng.standard_normal((2, 1, 16, 16)), net.init_params(cfg), cfg, True)
        g = rng.standard_normal(logits.shape)
        a, b = net.trainable(net.backward(cache, g)), net.trainable(net.backward(cache, g))
        assert all(np.array_equal(a[k], b[k]) for k in a)

    def test_grads_cover_trainables(self, rng):
        cfg = NetworkConfig(base_channels=2, depth=2)
        m = net.init_params(cfg)
        logits, cache = net.forward(rng.standard_normal((2, 1, 16, 16)), m, cfg, True)
        grads = net.trainable(net.backward(cache, rng.standard_normal(logits.shape)))
        params = net.trainable(m)
        assert grads.keys() == params.keys()
        assert all(grads[k].shape == params[k].shape for k in params)

    @pytest.mark.parametrize("variant", [
        {}, {"down_kind": "conv_block", "up_kind": "linear_i"}, {"wavelet": "haar"},
        {"wave_conv": "full"}, {"skip": "before"}, {"synth_bn": False},
    ], ids=str)
    @pytest.mark.parametrize("seed", [0, 1, 2])
    def test_end_to_end_finite_differences(self, variant, seed):
        cfg, m = tiny(variant, seed)
        r = np.random.default_rng(seed)
        x = r.standard_normal((2, 1, 8, 8))
        logits, cache = net.forward(x, m, cfg, True)
        g = r.standard_normal(logits.shape)
        grads = net.trainable(net.backward(cache, g))
        params = net.trainable(m)
        f = lambda: np.sum(net.forward(x, m, cfg, True)[0] * g)
        for name, p in params.items():
            feeds_bn = not name.startswith("head") and not (name.endswith("synth.bias") and not cfg.synth_bn)
            if name.endswith(".bias") and feeds_bn:
                # biases that feed batch-statistics BN have zero gradient
                assert np.max(np.abs(grads[name])) < 1e-9, name
                continue
            coords = r.choice(p.size, min(p.size, 12), replace=False)
            num = numeric_grad(f, p, coords=coords)
            assert rel_err(grads[name].reshape(-1)[coords], num) < 1e-4, name


class TestCost:
    def test_single_conv(self):
        assert net.conv_cost(1, 1, 3, 4, 4) == (10, 144)

    @pytest.mark.parametrize("cfg", GRID, ids=lambda c: c.variant_name())
    def test_params_match_checkpoint(self, tmp_path, cfg):
        net.save_model(tmp_path / "m.ckpt", net.init_params(cfg), cfg)
        entries = read_checkpoint_manifest(tmp_path / "m.ckpt")["tensors"]
        stored = sum(int(np.prod(e["shape"])) for e in entries if e["kind"] == "param")
        assert net.count_params_flops(cfg, (16, 16))["params"] == stored

    def test_spectral_overhead_under_quarter(self):
        spectral = NetworkConfig(base_channels=16, depth=3)
        conv_down = dataclasses.replace(spectral, down_kind=DownKind.CONV)
        p_s = net.count_params_flops(spectral, (64, 64))["params"]
        p_c = net.count_params_flops(conv_down, (64, 64))["params"]
        assert (p_s, p_c) == (665506, 568738)
        assert (p_s - p_c) / p_c < 0.25

    def test_full_wave_conv_is_larger(self):
        full = NetworkConfig(base_channels=16, depth=3, wave_conv="full")
        shared = dataclasses.replace(full, wave_conv="grouped_shared")
        assert net.count_params_flops(full, (64, 64))["params"] > net.count_params_flops(shared, (64, 64))["params"]

    def test_flops_scale_with_area(self):
        cfg = NetworkConfig(base_channels=4, depth=2, up_kind=UpKind.LINEAR, down_kind=DownKind.CONV)
        a = net.count_params_flops(cfg, (16, 16))["flops"]
        assert net.count_params_flops(cfg, (32, 32))["flops"] == 4 * a


class TestCheckpoint:
    def test_round_trip(self, tmp_path):
        cfg = NetworkConfig(base_channels=2, depth=2, wavelet=WaveletKind.HAAR)
        m = net.init_params(cfg)
        net.save_model(tmp_path / "m.ckpt", m, cfg, {"note": "x"})
        m2, cfg2, meta = net.load_model(tmp_path / "m.ckpt")
        assert cfg2 == cfg and meta["note"] == "x"
        a, b = net.named_tensors(m), net.named_tensors(m2)
        assert all(np.array_equal(a[k], b[k]) for k in a)

    def test_bytes_identical(self, tmp_path):
        cfg = NetworkConfig(base_channels=2, depth=1)
        net.save_model(tmp_path / "a", net.init_params(cfg), cfg)
        net.save_model(tmp_path / "b", net.init_params(cfg), cfg)
        assert (tmp_path / "a").read_bytes() == (tmp_path / "b").read_bytes()

    def test_config_hash_stable(self):
        assert net.config_hash({"a": 1, "b": 2}) == net.config_hash({"b": 2, "a": 1})
        assert len(net.config_hash({})) == 16
