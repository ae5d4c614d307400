"""Orthonormal single-level 2-D Haar transform (the ablation baseline)."""

from __future__ import annotations

import numpy as np

from ..errors import ShapeError


def _check_even(x):
    if x.shape[-1] % 2 or x.shape[-2] % 2:
        raise ShapeError(f"Haar transform needs even spatial dims, got {x.shape[-2:]}")


def haar_forward(x: np.ndarray):
    """Return ``(LL, LH, HL, HH)``, each half the spatial size of ``x``."""
    _check_even(x)
    a, b = x[..., 0::2, 0::2], x[..., 0::2, 1::2]
    c, d = x[..., 1::2, 0::2], x[..., 1::2, 1::2]
    ll = 0.5 * (a + b + c + d)
    lh = 0.5 * (a - b + c - d)
    hl = 0.5 * (a + b - c - d)
    hh = 0.5 * (a - b - c + d)
    return ll, lh, hl, hh


def haar_inverse(ll, lh, hl, hh) -> np.ndarray:
    shapes = {ll.shape, lh.shape, hl.shape, hh.shape}
    if len(shapes) != 1:
        raise ShapeError(f"Haar sub-bands disagree in shape: {sorted(shapes)}")
    out = np.empty(ll.shape[:-2] + (2 * ll.shape[-2], 2 * ll.shape[-1]), dtype=ll.dtype)
    out[..., 0::2, 0::2] = 0.5 * (ll + lh + hl + hh)
    out[..., 0::2, 1::2] = 0.5 * (ll - lh + hl - hh)
    out[..., 1::2, 0::2] = 0.5 * (ll + lh - hl - hh)
    out[..., 1::2, 1::2] = 0.5 * (ll - lh - hl + hh)
    return out
