"""Synthetic ellipse segmentation data and its on-disk directory format."""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .io import load_stnt, save_stnt

SMALL_OBJECT_RADIUS = (1.0, 3.0)


@dataclass
class SyntheticSpec:
    image_size: int = 64
    num_images: int = 200
    object_count_range: tuple[int, int] = (1, 3)
    radius_range: tuple[float, float] = (4.0, 12.0)
    small_objects: bool = False
    noise_sigma: float = 0.1
    num_classes: int = 2
    seed: int = 0
    background: float = 0.2

    def __post_init__(self):
        self.object_count_range = tuple(int(v) for v in self.object_count_range)
        self.radius_range = tuple(float(v) for v in self.radius_range)
        if self.small_objects:
            self.radius_range = SMALL_OBJECT_RADIUS
        lo, hi = self.radius_range
        if lo < 1 or hi < lo:
            raise ValueError(f"radius_range must satisfy 1 <= lo <= hi, got {self.radius_range}")
        if 2 * hi >= self.image_size:
            raise ValueError(f"radius {hi} does not fit in a {self.image_size}px image")
        c_lo, c_hi = self.object_count_range
        if c_lo < 0 or c_hi < c_lo:
            raise ValueError(f"object_count_range must satisfy 0 <= lo <= hi, got {self.object_count_range}")
        if self.num_classes < 2:
            raise ValueError("num_classes must be at least 2 (background + one object class)")
        if self.num_images < 1 or self.noise_sigma < 0:
            raise ValueError("num_images must be positive and noise_sigma non-negative")

    def class_intensity(self, k: int) -> float:
        if k == 0:
            return self.background
        return self.background + 0.6 * k / (self.num_classes - 1)

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["object_count_range"] = list(self.object_count_range)
        d["radius_range"] = list(self.radius_range)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "SyntheticSpec":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown dataset spec fields: {sorted(unknown)}")
        return cls(**d)


@dataclass
class Dataset:
    images: np.ndarray  # (N, 1, H, W) in [0, 1]
    masks: np.ndarray   # (N, H, W) integer labels
    spec: SyntheticSpec | None = None

    def __len__(self) -> int:
        return self.images.shape[0]

    def subset(self, idx) -> "Dataset":
        idx = np.asarray(idx, dtype=np.int64)
        return Dataset(self.images[idx], self.masks[idx], self.spec)


def ellipse_mask(size: int, cy: float, cx: float, ry: float, rx: float, angle: float) -> np.ndarray:
    """Pixels whose centres lie inside the rotated ellipse."""
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    dy, dx = yy - cy, xx - cx
    ca, sa = np.cos(angle), np.sin(angle)
    u = (dx * ca + dy * sa) / rx
    v = (-dx * sa + dy * ca) / ry
    return u * u + v * v <= 1.0


def _one_sample(spec: SyntheticSpec, rng: np.random.Generator):
    n = spec.image_size
    mask = np.zeros((n, n), dtype=np.int64)
    count = rng.integers(spec.object_count_range[0], spec.object_count_range[1] + 1)
    lo, hi = spec.radius_range
    for _ in range(count):
        ry, rx = rng.uniform(lo, hi, size=2)
        r = max(ry, rx)
        cy, cx = rng.uniform(r, n - 1 - r, size=2)
        angle = rng.uniform(0.0, np.pi)
        label = rng.integers(1, spec.num_classes)
        mask[ellipse_mask(n, cy, cx, ry, rx, angle)] = label
    image = np.full((n, n), spec.background)
    for k in range(1, spec.num_classes):
        image[mask == k] = spec.class_intensity(k)
    if spec.noise_sigma > 0:
        image = image + spec.noise_sigma * rng.standard_normal((n, n))
    return np.clip(image, 0.0, 1.0)[None], mask


def generate(spec: SyntheticSpec) -> Dataset:
    """Deterministic in ``spec.seed``; each image draws from its own spawned stream."""
    children = np.random.SeedSequence(spec.seed).spawn(spec.num_images)
    images = np.empty((spec.num_images, 1, spec.image_size, spec.image_size))
    masks = np.empty((spec.num_images, spec.image_size, spec.image_size), dtype=np.int64)
    for i, child in enumerate(children):
        images[i], masks[i] = _one_sample(spec, np.random.default_rng(child))
    return Dataset(images, masks, spec)


def save_dataset(path, ds: Dataset, splits: dict[str, list[int]] | None = None) -> None:
    root = Path(path)
    root.mkdir(parents=True, exist_ok=True)
    for i in range(len(ds)):
        save_stnt(root / f"img_{i:05d}.stnt", ds.images[i])
        save_stnt(root / f"msk_{i:05d}.stnt", ds.masks[i].astype(np.float32))
    manifest = {
        "count": len(ds),
        "spec": ds.spec.to_dict() if ds.spec is not None else None,
        "splits": splits or {},
    }
    (root / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")


def load_dataset(path) -> tuple[Dataset, dict]:
    root = Path(path)
    manifest = json.loads((root / "manifest.json").read_text())
    n = manifest["count"]
    images = np.stack([load_stnt(root / f"img_{i:05d}.stnt").astype(np.float64) for i in range(n)])
    masks = np.stack([load_stnt(root / f"msk_{i:05d}.stnt") for i in range(n)]).astype(np.int64)
    spec = SyntheticSpec.from_dict(manifest["spec"]) if manifest.get("spec") else None
    return Dataset(images, masks, spec), manifest.get("splits", {})
