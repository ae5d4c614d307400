"""Training loop, dataset splits, the ablation grid and run records."""

from __future__ import annotations

import csv
import dataclasses
import json
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import network as net
from .data import Dataset, SyntheticSpec, generate
from .errors import DivergenceError, HD95Undefined, ShapeError
from .metrics import dice, hd95, loss

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    initial_lr: float = 0.01
    momentum: float = 0.99
    lr_power: float = 0.9
    max_iters: int = 1000
    batch_size: int = 8
    split: tuple[float, float, float] = (0.7, 0.1, 0.2)
    eval_every: int = 100
    seed: int = 0
    num_repeats: int = 5
    nesterov: bool = False
    grad_clip: float | None = 12.0  # global L2 norm; None disables

    def __post_init__(self):
        self.split = tuple(float(s) for s in self.split)
        if len(self.split) != 3 or abs(sum(self.split) - 1.0) > 1e-9 or min(self.split) < 0:
            raise ValueError(f"split must be three non-negative fractions summing to 1, got {self.split}")
        if not 0.0 <= self.momentum < 1.0:
            raise ValueError("momentum must lie in [0, 1)")
        if self.max_iters < 1 or self.batch_size < 1 or self.eval_every < 1 or self.num_repeats < 1:
            raise ValueError("max_iters, batch_size, eval_every and num_repeats must be positive")
        if self.initial_lr <= 0 or self.lr_power <= 0:
            raise ValueError("initial_lr and lr_power must be positive")
        if self.grad_clip is not None and self.grad_clip <= 0:
            raise ValueError("grad_clip must be positive or null")

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["split"] = list(self.split)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown train config fields: {sorted(unknown)}")
        return cls(**d)


def poly_lr(it: int, cfg: TrainConfig) -> float:
    if not 0 <= it <= cfg.max_iters:
        raise ValueError(f"iteration {it} outside [0, {cfg.max_iters}]")
    return cfg.initial_lr * (1.0 - it / cfg.max_iters) ** cfg.lr_power


def sgd_momentum_step(params: dict, grads: dict, velocity: dict, lr: float, momentum: float,
                      nesterov: bool = False):
    """Heavy-ball update ``v <- m v + g; p <- p - lr v``. Returns new dicts."""
    if params.keys() != grads.keys() or params.keys() != velocity.keys():
        raise ShapeError("params, grads and velocity must share the same names")
    new_p, new_v = {}, {}
    for k, p in params.items():
        g = grads[k]
        if g.shape != p.shape or velocity[k].shape != p.shape:
            raise ShapeError(f"{k}: shapes {p.shape}, {g.shape}, {velocity[k].shape} disagree")
        v = momentum * velocity[k] + g
        step = g + momentum * v if nesterov else v
        new_p[k] = p - lr * step
        new_v[k] = v
    return new_p, new_v


def clip_by_global_norm(grads: dict, max_norm: float | None):
    if max_norm is None:
        return grads
    norm = math.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))
    if norm <= max_norm:
        return grads
    scale = max_norm / norm
    return {k: g * scale for k, g in grads.items()}


def split_dataset(n: int, split=(0.7, 0.1, 0.2), seed: int = 0):
    """Shuffled index arrays ``(train, val, test)``; val/test floor-rounded, remainder to train."""
    if n < 10:
        raise ValueError(f"need at least 10 samples to split, got {n}")
    n_val = int(math.floor(split[1] * n + 1e-9))
    n_test = int(math.floor(split[2] * n + 1e-9))
    n_train = n - n_val - n_test
    if min(n_train, n_val, n_test) < 1:
        raise ValueError(f"split {split} of {n} samples leaves an empty part")
    order = np.random.default_rng(seed).permutation(n)
    return np.sort(order[:n_train]), np.sort(order[n_train : n_train + n_val]), np.sort(order[n_train + n_val :])


# --------------------------------------------------------------------------
# evaluation
# --------------------------------------------------------------------------

def evaluate(m: net.ModelParams, cfg: net.NetworkConfig, ds: Dataset, batch_size: int = 16,
             spacing: float = 1.0) -> dict:
    """Per-class mean Dice and HD95 over images (HD95 averaged where defined)."""
    preds = np.concatenate([net.predict(ds.images[i : i + batch_size].astype(cfg.np_dtype), m, cfg)
                            for i in range(0, len(ds), batch_size)])
    out = {}
    for k in range(1, cfg.num_classes):
        dices, dists = [], []
        for p, g in zip(preds, ds.masks):
            dices.append(dice(p, g, k))
            try:
                dists.append(hd95(p, g, k, spacing))
            except HD95Undefined:
                pass
        out[k] = {"dice": float(np.mean(dices)), "hd95": float(np.mean(dists)) if dists else float("nan")}
    out["mean_dice"] = float(np.mean([out[k]["dice"] for k in range(1, cfg.num_classes)]))
    return out


# --------------------------------------------------------------------------
# training
# --------------------------------------------------------------------------

@dataclass
class RunRecord:
    config_hash: str
    iters: list[int] = field(default_factory=list)
    losses: list[float] = field(default_factory=list)
    lrs: list[float] = field(default_factory=list)
    evals: list[dict] = field(default_factory=list)   # {"iter", "class", "dice", "hd95"}
    test: dict = field(default_factory=dict)
    best_iter: int = -1
    best_val_dice: float = -1.0
    wall_clock: float = 0.0

    def comparable(self) -> dict:
        """Everything except timing, for determinism checks."""
        d = dataclasses.asdict(self)
        d.pop("wall_clock")
        return d

    def write_csvs(self, out_dir) -> None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        with open(out / "train_log.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["iter", "loss", "lr"])
            for row in zip(self.iters, self.losses, self.lrs):
                w.writerow([row[0], repr(row[1]), repr(row[2])])
        with open(out / "eval_log.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["eval_iter", "class", "dice", "hd95"])
            for e in self.evals:
                w.writerow([e["iter"], e["class"], repr(e["dice"]), repr(e["hd95"])])


def _eval_rows(it: int, result: dict, num_classes: int) -> list[dict]:
    return [{"iter": it, "class": k, "dice": result[k]["dice"], "hd95": result[k]["hd95"]}
            for k in range(1, num_classes)]


def train(net_cfg: net.NetworkConfig, train_cfg: TrainConfig, dataset: Dataset, out_dir=None,
          params: net.ModelParams | None = None):
    """Run the optimisation and return ``(best_params, RunRecord)``.

    The best parameters are those with the highest validation mean
    foreground Dice; they are evaluated on the test split at the end.
    """
    start = time.perf_counter()
    tr, va, te = split_dataset(len(dataset), train_cfg.split, train_cfg.seed)
    train_set, val_set, test_set = dataset.subset(tr), dataset.subset(va), dataset.subset(te)
    dt = net_cfg.np_dtype
    m = params if params is not None else net.init_params(net_cfg, np.random.default_rng(train_cfg.seed))
    record = RunRecord(net.config_hash(net_cfg.to_dict(), train_cfg.to_dict()))
    velocity = {k: np.zeros_like(v) for k, v in net.trainable(m).items()}
    rng = np.random.default_rng([train_cfg.seed, 1])
    order, cursor = rng.permutation(len(train_set)), 0
    best = m

    for it in range(train_cfg.max_iters):
        if cursor + train_cfg.batch_size > len(order):
            order, cursor = rng.permutation(len(train_set)), 0
        idx = order[cursor : cursor + train_cfg.batch_size]
        cursor += train_cfg.batch_size
        x, y = train_set.images[idx].astype(dt), train_set.masks[idx]

        logits, cache = net.forward(x, m, net_cfg, training=True)
        value, grad = loss(logits, y)
        if not np.isfinite(value):
            raise DivergenceError(f"loss became {value} at iteration {it} (lr {poly_lr(it, train_cfg):.3g})")
        grads = clip_by_global_norm(net.trainable(net.backward(cache, grad.astype(dt))), train_cfg.grad_clip)
        m = net.commit_running_stats(m, cache)
        lr = poly_lr(it, train_cfg)
        new_p, velocity = sgd_momentum_step(net.trainable(m), grads, velocity, lr,
                                            train_cfg.momentum, train_cfg.nesterov)
        m = net.replace_tensors(m, new_p)
        record.iters.append(it)
        record.losses.append(float(value))
        record.lrs.append(lr)

        last = it + 1 == train_cfg.max_iters
        if (it + 1) % train_cfg.eval_every == 0 or last:
            result = evaluate(m, net_cfg, val_set)
            record.evals.extend(_eval_rows(it + 1, result, net_cfg.num_classes))
            log.info("iter %d loss %.4f val dice %.4f", it + 1, value, result["mean_dice"])
            if result["mean_dice"] > record.best_val_dice:
                record.best_val_dice, record.best_iter, best = result["mean_dice"], it + 1, m

    test = evaluate(best, net_cfg, test_set)
    record.test = {str(k): v for k, v in test.items()}
    record.wall_clock = time.perf_counter() - start
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        net.save_model(out / "best.ckpt", best, net_cfg,
                       {"train": train_cfg.to_dict(), "best_iter": record.best_iter})
        record.write_csvs(out)
        summary = {"config_hash": record.config_hash, "best_iter": record.best_iter,
                   "best_val_dice": record.best_val_dice, "test": record.test,
                   "wall_clock_s": record.wall_clock}
        (out / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    return best, record


# --------------------------------------------------------------------------
# ablation
# --------------------------------------------------------------------------

TABLE_COLUMNS = ["wavelet", "down", "up", "runs", "failures"]


def ablate(base_cfg: net.NetworkConfig, train_cfg: TrainConfig, data: Dataset | SyntheticSpec,
           repeats: int | None = None, out_csv=None, runs_csv=None) -> list[dict]:
    """Train every ablation-grid variant ``repeats`` times; repeat ``r`` uses seed ``train_cfg.seed + r``.

    When ``data`` is a :class:`SyntheticSpec` the data noise is redrawn per
    repeat as well. Failed runs are recorded and the grid carries on.
    """
    repeats = repeats or train_cfg.num_repeats
    runs = []
    datasets = {}
    for r in range(repeats):
        seed = train_cfg.seed + r
        if isinstance(data, SyntheticSpec):
            datasets[r] = generate(dataclasses.replace(data, seed=data.seed + r))
        else:
            datasets[r] = data
    for cfg in net.variant_grid(base_cfg):
        for r in range(repeats):
            seed = train_cfg.seed + r
            tcfg = dataclasses.replace(train_cfg, seed=seed)
            vcfg = dataclasses.replace(cfg, seed=seed)
            try:
                _, rec = train(vcfg, tcfg, datasets[r])
                row = {"variant": cfg.variant_name(), "repeat": r, "seed": seed, "error": "",
                       "wall_clock_s": rec.wall_clock}
                for k in range(1, cfg.num_classes):
                    row[f"dice_c{k}"] = rec.test[str(k)]["dice"]
                    row[f"hd95_c{k}"] = rec.test[str(k)]["hd95"]
            except (DivergenceError, FloatingPointError, ValueError) as exc:
                row = {"variant": cfg.variant_name(), "repeat": r, "seed": seed, "error": str(exc),
                       "wall_clock_s": float("nan")}
            log.info("ablation %s repeat %d: %s", row["variant"], r, row.get("dice_c1", row["error"]))
            runs.append(row)

    table = summarize(runs, base_cfg)
    if out_csv is not None:
        write_table(out_csv, table, base_cfg.num_classes)
    if runs_csv is not None:
        keys = sorted({k for row in runs for k in row}, key=lambda k: (k not in ("variant", "repeat", "seed"), k))
        with open(runs_csv, "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=keys)
            w.writeheader()
            w.writerows(runs)
    return table


def summarize(runs: list[dict], base_cfg: net.NetworkConfig) -> list[dict]:
    table = []
    for cfg in net.variant_grid(base_cfg):
        rows = [r for r in runs if r["variant"] == cfg.variant_name()]
        ok = [r for r in rows if not r["error"]]
        entry = {"wavelet": cfg.wavelet.value, "down": cfg.down_kind.value, "up": cfg.up_kind.value,
                 "runs": len(rows), "failures": len(rows) - len(ok)}
        for k in range(1, base_cfg.num_classes):
            vals = np.array([r[f"dice_c{k}"] for r in ok])
            entry[f"dice_c{k}_mean"] = float(vals.mean()) if vals.size else float("nan")
            entry[f"dice_c{k}_std"] = float(vals.std()) if vals.size else float("nan")
            entry[f"dice_c{k}_per_repeat"] = [r.get(f"dice_c{k}", float("nan")) for r in rows]
        table.append(entry)
    return table


def write_table(path, table: list[dict], num_classes: int) -> None:
    cols = list(TABLE_COLUMNS)
    for k in range(1, num_classes):
        cols += [f"dice_c{k}_mean", f"dice_c{k}_std", f"dice_c{k}_pm", f"dice_c{k}_per_repeat"]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(cols)
        for e in table:
            row = [e[c] for c in TABLE_COLUMNS]
            for k in range(1, num_classes):
                mean, std = e[f"dice_c{k}_mean"], e[f"dice_c{k}_std"]
                per = ";".join(f"{v:.6f}" for v in e[f"dice_c{k}_per_repeat"])
                row += [f"{mean:.6f}", f"{std:.6f}", f"{100 * mean:.2f}±{100 * std:.2f}", per]
            w.writerow(row)


def read_table(path) -> list[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def directional_check(table: list[dict], cls: int = 1) -> tuple[int, int]:
    """Count repeats where DTCWT Wave+iWave Dice >= ConvBlock+Linear-I Dice."""
    def row(wavelet, down, up):
        return next(e for e in table if (e["wavelet"], e["down"], e["up"]) == (wavelet, down, up))
    def per_repeat(e):
        v = e[f"dice_c{cls}_per_repeat"]
        return [float(s) for s in v.split(";")] if isinstance(v, str) else v  # rows read back from CSV
    spectral = per_repeat(row("dtcwt", "wave_block", "iwave_block"))
    baseline = per_repeat(row("dtcwt", "conv_block", "linear_i"))
    wins = sum(1 for s, b in zip(spectral, baseline) if s >= b)
    return wins, len(spectral)
