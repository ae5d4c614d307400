"""Command-line entry point: ``spectral-unet <subcommand> ...``."""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import os
import sys
import time
import types
import typing
from enum import Enum
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from . import network as net
from .data import Dataset, SyntheticSpec, generate, load_dataset
from .errors import DivergenceError, ShapeError
from .io import FormatError, load_stnt, read_image, save_stnt, write_pnm
from .trainer import TrainConfig, ablate, directional_check, evaluate, split_dataset, train
from .wavelets import ORIENTATIONS, Subbands, WaveletKind, dtcwt_forward, dtcwt_inverse
from .wavelets import haar_forward, haar_inverse

log = logging.getLogger("spectral_unet")

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME, EXIT_SELFCHECK = 0, 1, 2, 3
LOG_LEVELS = {"error": logging.ERROR, "info": logging.INFO, "debug": logging.DEBUG}
HAAR_BANDS = ("lh", "hl", "hh")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


# --------------------------------------------------------------------------
# config files
# --------------------------------------------------------------------------

SECTIONS = {"network": net.NetworkConfig, "train": TrainConfig, "data": SyntheticSpec}


def _type_ok(value, hint) -> bool:
    origin = typing.get_origin(hint)
    if origin in (typing.Union, types.UnionType):
        return any(_type_ok(value, h) for h in typing.get_args(hint))
    if hint is type(None):
        return value is None
    if isinstance(hint, type) and issubclass(hint, Enum):
        return isinstance(value, str)
    if hint is float:
        return isinstance(value, (int, float)) and not isinstance(value, bool)
    if hint is int:
        return isinstance(value, int) and not isinstance(value, bool)
    if origin is tuple or hint is tuple:
        args = typing.get_args(hint)
        return isinstance(value, list) and (not args or len(value) == len(args)) and all(
            _type_ok(v, a) for v, a in zip(value, args))
    if isinstance(hint, type):
        return isinstance(value, hint)
    return True


def _build(cls, raw, path: str):
    """Instantiate dataclass ``cls`` from JSON, reporting problems with dotted field paths."""
    if not isinstance(raw, dict):
        raise UsageError(f"{path}: expected an object, got {type(raw).__name__}")
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls)}
    for key, value in raw.items():
        if key not in names:
            raise UsageError(f"{path}.{key}: unknown field")
        if not _type_ok(value, hints[key]):
            raise UsageError(f"{path}.{key}: expected {hints[key]}, got {json.dumps(value)}")
    try:
        return cls(**raw)
    except ValueError as exc:
        raise UsageError(f"{path}: {exc}") from None


def load_config(path, seed: int | None = None) -> dict:
    """Parse a JSON run config into its dataclass sections.

    Recognised keys are ``network``, ``train``, ``data`` (a synthetic
    dataset spec) and ``data_dir`` (a saved dataset directory).
    """
    raw = {}
    if path is not None:
        try:
            raw = json.loads(Path(path).read_text())
        except OSError as exc:
            raise UsageError(f"cannot read config {path}: {exc.strerror}") from None
        except json.JSONDecodeError as exc:
            raise UsageError(f"config {path} is not valid JSON: {exc}") from None
        if not isinstance(raw, dict):
            raise UsageError("config: expected a JSON object at the top level")
    unknown = set(raw) - set(SECTIONS) - {"data_dir"}
    if unknown:
        raise UsageError(f"config.{sorted(unknown)[0]}: unknown section")
    out = {name: _build(cls, raw.get(name, {}), f"config.{name}") for name, cls in SECTIONS.items()}
    if seed is not None:
        for name in SECTIONS:
            out[name] = dataclasses.replace(out[name], seed=seed)
    out["data_dir"] = raw.get("data_dir")
    return out


def _dataset(cfg: dict) -> Dataset:
    if cfg["data_dir"]:
        return load_dataset(cfg["data_dir"])[0]
    return generate(cfg["data"])


# --------------------------------------------------------------------------
# decompose / reconstruct
# --------------------------------------------------------------------------

def _preview(path, band: np.ndarray) -> None:
    peak = float(band.max())
    write_pnm(path, band / peak if peak > 0 else band)


def cmd_decompose(args) -> int:
    img = read_image(args.image)  # (C, H, W)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    kind = WaveletKind(args.wavelet)
    c, h, w = img.shape
    files = {"lowpass": "lowpass.stnt", "highpass": []}
    if kind == WaveletKind.DTCWT:
        step = 2 ** args.levels
        if h % step or w % step:
            print(f"note: {h}x{w} is padded to a multiple of {step}; reconstruction crops it back")
        s = dtcwt_forward(img[None], args.levels)
        lowpass = s.lowpass[0]
        for j, hp in enumerate(s.highpasses, start=1):
            hp = hp[0]  # (2, 6, C, h, w)
            name = f"highpass_l{j}.stnt"
            save_stnt(out / name, hp.astype(np.float32))
            files["highpass"].append(name)
            print(f"level {j} highpass {name} shape {hp.shape}")
            mag = np.sqrt(hp[0] ** 2 + hp[1] ** 2)
            for o, angle in enumerate(ORIENTATIONS):
                save_stnt(out / f"orient_l{j}_{angle:03d}.stnt", hp[:, o].astype(np.float32))
                _preview(out / f"orient_l{j}_{angle:03d}.pgm", mag[o, 0])
    else:
        if h % 2 ** args.levels or w % 2 ** args.levels:
            raise ShapeError(f"haar needs dims divisible by {2 ** args.levels}, got {h}x{w}")
        ll = img[None]
        for j in range(1, args.levels + 1):
            ll, *bands = haar_forward(ll)
            hp = np.stack([b[0] for b in bands])  # (3, C, h, w)
            name = f"highpass_l{j}.stnt"
            save_stnt(out / name, hp.astype(np.float32))
            files["highpass"].append(name)
            print(f"level {j} highpass {name} shape {hp.shape}")
            for b, band in zip(HAAR_BANDS, hp):
                _preview(out / f"band_l{j}_{b}.pgm", np.abs(band[0]))
        lowpass = ll[0]
    save_stnt(out / "lowpass.stnt", lowpass.astype(np.float32))
    _preview(out / "lowpass.pgm", np.abs(lowpass[0]))
    print(f"lowpass lowpass.stnt shape {lowpass.shape}")
    manifest = {"wavelet": kind.value, "levels": args.levels, "input_shape": [c, h, w], "files": files}
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2) + "\n")
    return EXIT_OK


def _load_band(path: Path) -> np.ndarray:
    if not path.exists():
        raise FileNotFoundError(f"missing sub-band file {path}")
    return load_stnt(path).astype(np.float64)


def cmd_reconstruct(args) -> int:
    src = Path(args.subbands)
    manifest_path = src / "manifest.json"
    if not manifest_path.exists():
        raise FileNotFoundError(f"{manifest_path} not found; is this a decompose output directory?")
    manifest = json.loads(manifest_path.read_text())
    c, h, w = manifest["input_shape"]
    lowpass = _load_band(src / manifest["files"]["lowpass"])
    highs = [_load_band(src / name) for name in manifest["files"]["highpass"]]
    if manifest["wavelet"] == WaveletKind.DTCWT.value:
        rec = dtcwt_inverse(Subbands(lowpass[None], [hp[None] for hp in highs], (h, w)))[0]
    else:
        ll = lowpass[None]
        for hp in reversed(highs):
            if hp.shape[0] != 3 or hp.shape[2:] != ll.shape[2:]:
                raise ShapeError(f"haar bands {hp.shape} do not match lowpass {ll.shape}")
            ll = haar_inverse(ll, hp[0][None], hp[1][None], hp[2][None])
        rec = ll[0]
    if rec.shape != (c, h, w):
        raise ShapeError(f"reconstruction has shape {rec.shape}, manifest says {(c, h, w)}")
    out = Path(args.out)
    if out.suffix.lower() in (".pgm", ".ppm", ".pnm"):
        write_pnm(out, np.clip(rec, 0.0, 1.0))
    else:
        save_stnt(out, rec.astype(np.float32))
    print(f"wrote {out} shape {rec.shape}")
    if args.original:
        err = float(np.max(np.abs(rec - read_image(args.original))))
        print(f"max abs error vs {args.original}: {err:.3e}")
    return EXIT_OK


# --------------------------------------------------------------------------
# train / eval / ablate
# --------------------------------------------------------------------------

def _require_out(args) -> Path:
    if not args.out:
        raise UsageError(f"{args.command} needs --out")
    return Path(args.out)


def cmd_train(args) -> int:
    cfg = load_config(args.config, args.seed)
    out = _require_out(args)
    ds = _dataset(cfg)
    _, rec = train(cfg["network"], cfg["train"], ds, out_dir=out)
    print(f"best val dice {rec.best_val_dice:.4f} at iter {rec.best_iter}; "
          f"test mean dice {rec.test['mean_dice']:.4f}; checkpoint {out / 'best.ckpt'}")
    return EXIT_OK


def cmd_eval(args) -> int:
    m, ncfg, meta = net.load_model(args.checkpoint)
    cfg = load_config(args.config, args.seed)
    ds = _dataset(cfg)
    if not args.all_images and "train" in meta:
        tcfg = TrainConfig.from_dict(meta["train"])
        ds = ds.subset(split_dataset(len(ds), tcfg.split, tcfg.seed)[2])
    result = evaluate(m, ncfg, ds)
    print(f"{'class':>5} {'dice':>8} {'hd95':>8}")
    for k in range(1, ncfg.num_classes):
        print(f"{k:>5} {result[k]['dice']:8.4f} {result[k]['hd95']:8.3f}")
    print(f"mean dice {result['mean_dice']:.4f} over {len(ds)} images")
    if args.out:
        Path(args.out).mkdir(parents=True, exist_ok=True)
        (Path(args.out) / "eval.json").write_text(json.dumps({str(k): v for k, v in result.items()}, indent=2))
    return EXIT_OK


def cmd_ablate(args) -> int:
    cfg = load_config(args.config, args.seed)
    out = _require_out(args)
    out.mkdir(parents=True, exist_ok=True)
    data = load_dataset(cfg["data_dir"])[0] if cfg["data_dir"] else cfg["data"]
    t = time.perf_counter()
    table = ablate(cfg["network"], cfg["train"], data, args.repeats or cfg["train"].num_repeats,
                   out_csv=out / "table.csv", runs_csv=out / "runs.csv")
    print(f"{'wavelet':<7} {'down':<11} {'up':<12} " + " ".join(
        f"{'dsc_c%d' % k:>14}" for k in range(1, cfg["network"].num_classes)))
    for e in table:
        cells = " ".join(f"{100 * e[f'dice_c{k}_mean']:6.2f}±{100 * e[f'dice_c{k}_std']:5.2f}  "
                         for k in range(1, cfg["network"].num_classes))
        print(f"{e['wavelet']:<7} {e['down']:<11} {e['up']:<12} {cells}")
    wins, n = directional_check(table)
    print(f"dtcwt wave+iwave >= conv+linear in {wins}/{n} repeats; {time.perf_counter() - t:.0f}s total")
    return EXIT_OK


# --------------------------------------------------------------------------
# bench / selfcheck
# --------------------------------------------------------------------------

BENCH_ROWS = [("Spectral", net.DownKind.WAVE, net.UpKind.IWAVE),
              ("ConvBlock+iWave", net.DownKind.CONV, net.UpKind.IWAVE),
              ("ConvBlock+Linear-I", net.DownKind.CONV, net.UpKind.LINEAR)]


def _time_forward(cfg, size, repeats) -> float:
    m = net.init_params(cfg)
    x = np.random.default_rng(0).standard_normal((1, cfg.in_channels, size, size)).astype(cfg.np_dtype)
    net.forward(x, m, cfg, training=False)
    t = time.perf_counter()
    for _ in range(repeats):
        net.forward(x, m, cfg, training=False)
    return (time.perf_counter() - t) / repeats


def cmd_bench(args) -> int:
    base = load_config(args.config, args.seed)["network"]
    rows = []
    for label, down, up in BENCH_ROWS:
        cfg = dataclasses.replace(base, down_kind=down, up_kind=up)
        cost = net.count_params_flops(cfg, (args.size, args.size))
        rows.append((label, cost["params"], cost["flops"], _time_forward(cfg, args.size, args.repeats)))
    print(f"input {args.size}x{args.size}, C0={base.base_channels}, L={base.depth}, "
          f"wavelet={base.wavelet.value}, wave_conv={base.wave_conv}")
    print(f"{'model':<20} {'# params':>10} {'MACs (M)':>10} {'ms/forward':>11} {'param overhead':>15}")
    spectral = rows[0][1]
    for label, p, f, sec in rows:
        over = "" if p == spectral else f"{100 * (spectral - p) / p:+.1f}%"
        print(f"{label:<20} {p:>10,} {f / 1e6:>10.2f} {1e3 * sec:>11.1f} {over:>15}")
    return EXIT_OK


def cmd_selfcheck(args) -> int:
    from .selfcheck import run_all
    return EXIT_OK if run_all() else EXIT_SELFCHECK


# --------------------------------------------------------------------------
# argument parsing
# --------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--config", help="JSON run config with network/train/data sections")
    common.add_argument("--seed", type=int, help="override every seed in the config")
    common.add_argument("--threads", type=int, default=1, help="BLAS threads (default 1, reproducible)")
    common.add_argument("--out", help="output directory or file")

    parser = _Parser(prog="spectral-unet", description="DTCWT spectral U-Net toolkit.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("decompose", parents=[common], help="write sub-band files and previews")
    p.add_argument("image", help="PGM/PPM or STNT image")
    p.add_argument("--levels", type=int, default=1)
    p.add_argument("--wavelet", choices=[k.value for k in WaveletKind], default="dtcwt")
    p.set_defaults(func=cmd_decompose, needs_out=True)

    p = sub.add_parser("reconstruct", parents=[common], help="invert a decompose directory")
    p.add_argument("subbands", help="directory written by decompose")
    p.add_argument("--original", help="image to compare against")
    p.set_defaults(func=cmd_reconstruct, needs_out=True)

    p = sub.add_parser("train", parents=[common], help="train one network")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", parents=[common], help="score a checkpoint")
    p.add_argument("checkpoint")
    p.add_argument("--all-images", action="store_true", help="score every image, not just the test split")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablate", parents=[common], help="run the 8-variant ablation grid")
    p.add_argument("--repeats", type=int)
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("bench", parents=[common], help="parameter, MAC and timing table")
    p.add_argument("--size", type=int, default=64)
    p.add_argument("--repeats", type=int, default=3)
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("selfcheck", parents=[common], help="run the invariant checks")
    p.set_defaults(func=cmd_selfcheck)
    return parser


def _setup_logging() -> None:
    level = os.environ.get("SPECTRAL_UNET_LOG", "info").lower()
    if level not in LOG_LEVELS:
        raise UsageError(f"SPECTRAL_UNET_LOG must be one of {sorted(LOG_LEVELS)}, got {level!r}")
    logging.basicConfig(level=LOG_LEVELS[level], format="%(asctime)s %(levelname)s %(message)s",
                        stream=sys.stderr, force=True)


def main(argv=None) -> int:
    try:
        _setup_logging()
        args = build_parser().parse_args(argv)
        if getattr(args, "needs_out", False) and not args.out:
            raise UsageError(f"{args.command} needs --out")
        if args.threads < 1:
            raise UsageError("--threads must be at least 1")
        with threadpool_limits(limits=args.threads):
            return args.func(args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (FormatError, ShapeError, DivergenceError, OSError, ValueError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
