"""Segmentation metrics (Dice, HD95) and the Dice + cross-entropy training loss."""

from __future__ import annotations

import math

import numpy as np
from scipy import ndimage
from scipy.spatial import cKDTree

from .errors import HD95Undefined, ShapeError

_CROSS = ndimage.generate_binary_structure(2, 1)


def dice(pred: np.ndarray, gt: np.ndarray, cls: int = 1) -> float:
    """2|A n B| / (|A| + |B|); 1.0 when the class is absent from both."""
    if pred.shape != gt.shape:
        raise ShapeError(f"mask shapes differ: {pred.shape} vs {gt.shape}")
    a, b = pred == cls, gt == cls
    total = int(a.sum()) + int(b.sum())
    if total == 0:
        return 1.0
    return 2.0 * int(np.logical_and(a, b).sum()) / total


def boundary(mask: np.ndarray) -> np.ndarray:
    """Foreground pixels with a 4-neighbour outside the mask (image exterior counts as outside)."""
    mask = mask.astype(bool)
    return mask & ~ndimage.binary_erosion(mask, structure=_CROSS, border_value=0)


def _nearest_rank(values: np.ndarray, q: float) -> float:
    v = np.sort(values)
    rank = max(1, math.ceil(q / 100.0 * v.size))
    return float(v[rank - 1])


def _directed(src: np.ndarray, dst: np.ndarray, spacing: np.ndarray) -> np.ndarray:
    _, idx = cKDTree(dst * spacing).query(src * spacing)
    diff = (src - dst[idx]) * spacing
    return np.sqrt(np.sum(diff * diff, axis=1))


def hd95(pred: np.ndarray, gt: np.ndarray, cls: int = 1, spacing=1.0) -> float:
    """95th percentile (nearest rank) of the pooled boundary-to-boundary nearest distances."""
    if pred.shape != gt.shape:
        raise ShapeError(f"mask shapes differ: {pred.shape} vs {gt.shape}")
    a, b = boundary(pred == cls), boundary(gt == cls)
    if not a.any() or not b.any():
        raise HD95Undefined(f"class {cls} is empty in {'prediction' if not a.any() else 'ground truth'}")
    spacing = np.broadcast_to(np.asarray(spacing, dtype=np.float64), (pred.ndim,))
    pa, pb = np.argwhere(a).astype(np.float64), np.argwhere(b).astype(np.float64)
    pooled = np.concatenate([_directed(pa, pb, spacing), _directed(pb, pa, spacing)])
    return _nearest_rank(pooled, 95.0)


# --------------------------------------------------------------------------
# loss
# --------------------------------------------------------------------------

def softmax(logits: np.ndarray, axis: int = 1) -> np.ndarray:
    z = logits - logits.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


def _one_hot(gt: np.ndarray, k: int, dtype) -> np.ndarray:
    return np.moveaxis(np.eye(k, dtype=dtype)[gt], -1, 1)


def loss_parts(logits: np.ndarray, gt: np.ndarray, smooth: float = 1e-5):
    """Return ``(ce, dice_loss, grad_ce, grad_dice)``, gradients w.r.t. logits.

    Soft Dice is computed per class over the whole batch and averaged over
    classes (background included).
    """
    n, k, h, w = logits.shape
    if gt.shape != (n, h, w):
        raise ShapeError(f"labels {gt.shape} do not match logits {logits.shape}")
    if gt.min() < 0 or gt.max() >= k:
        raise ValueError(f"labels must lie in [0, {k})")
    p = softmax(logits)
    y = _one_hot(gt, k, logits.dtype)
    count = n * h * w
    logp = logits - logits.max(axis=1, keepdims=True)
    logp = logp - np.log(np.exp(logp).sum(axis=1, keepdims=True))
    ce = -float(np.sum(y * logp)) / count
    grad_ce = (p - y) / count

    inter = (p * y).sum(axis=(0, 2, 3))
    denom = p.sum(axis=(0, 2, 3)) + y.sum(axis=(0, 2, 3))
    dice_k = (2 * inter + smooth) / (denom + smooth)
    dice_loss = 1.0 - float(dice_k.mean())
    ddice_dp = (2 * y * (denom + smooth)[None, :, None, None] - (2 * inter + smooth)[None, :, None, None]) \
        / ((denom + smooth) ** 2)[None, :, None, None]
    gp = -ddice_dp / k
    grad_dice = p * (gp - (gp * p).sum(axis=1, keepdims=True))
    return ce, dice_loss, grad_ce, grad_dice


def loss(logits: np.ndarray, gt: np.ndarray):
    """Mean of soft Dice loss and cross-entropy. Returns ``(value, grad_logits)``."""
    ce, dl, gce, gdl = loss_parts(logits, gt)
    return 0.5 * (ce + dl), 0.5 * (gce + gdl)
