"""Diagnostic measurements of the transform: shift sensitivity and orientation selectivity."""

from __future__ import annotations

import numpy as np

from .dtcwt import ORIENTATIONS, dtcwt_forward
from .haar import haar_forward


def gaussian_impulse(size: int = 32, center: tuple[float, float] = (16.0, 16.0), sigma: float = 1.0):
    """Band-limited impulse; a Kronecker delta aliases identically for Haar at every even shift."""
    r, c = np.mgrid[0:size, 0:size].astype(np.float64)
    g = np.exp(-((r - center[0]) ** 2 + (c - center[1]) ** 2) / (2 * sigma**2))
    return g[None, None]


def dtcwt_orientation_energy(x: np.ndarray, level: int) -> np.ndarray:
    """Magnitude energy of each of the six orientations at ``level`` (1-based)."""
    hp = dtcwt_forward(x, levels=level).highpasses[level - 1]
    mag2 = hp[:, 0] ** 2 + hp[:, 1] ** 2  # (N, 6, C, h, w)
    return mag2.sum(axis=(0, 2, 3, 4))


def haar_band_energy(x: np.ndarray, level: int) -> np.ndarray:
    """Energy of (LH, HL, HH) after ``level`` Haar steps on the lowpass."""
    ll = x
    for _ in range(level):
        ll, lh, hl, hh = haar_forward(ll)
    return np.array([np.sum(lh**2), np.sum(hl**2), np.sum(hh**2)])


def relative_change(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    return np.abs(b - a) / a


def shift_sensitivity(level: int = 2, size: int = 32, sigma: float = 1.0) -> dict:
    """Largest per-band relative energy change for 1-pixel x and diagonal shifts."""
    c = size / 2
    base = gaussian_impulse(size, (c, c), sigma)
    shifts = {"x": gaussian_impulse(size, (c, c + 1), sigma),
              "xy": gaussian_impulse(size, (c + 1, c + 1), sigma)}
    out = {"dtcwt": {}, "haar": {}}
    e_d, e_h = dtcwt_orientation_energy(base, level), haar_band_energy(base, level)
    for name, img in shifts.items():
        out["dtcwt"][name] = relative_change(e_d, dtcwt_orientation_energy(img, level))
        out["haar"][name] = relative_change(e_h, haar_band_energy(img, level))
    return out


def band_centre_frequency(angle_deg: float, level: int) -> float:
    """Radial frequency (rad/sample) at the centre of an oriented sub-band."""
    diagonal = angle_deg % 90 == 45
    radius = np.hypot(3, 3) if diagonal else np.hypot(3, 1)
    return radius * np.pi / 4 / 2 ** (level - 1)


def grating(size: int, angle_deg: float, omega: float) -> np.ndarray:
    """cos(omega (c cos t + r sin t)) with c the column and r the (downward) row index."""
    r, c = np.mgrid[0:size, 0:size].astype(np.float64)
    t = np.deg2rad(angle_deg)
    return np.cos(omega * (c * np.cos(t) + r * np.sin(t)))[None, None]


def orientation_fractions(angle_deg: float, level: int, size: int = 64, levels: int = 3) -> np.ndarray:
    """Share of the level's highpass energy in each orientation, border coefficients excluded."""
    x = grating(size, angle_deg, band_centre_frequency(angle_deg, level))
    hp = dtcwt_forward(x, levels=levels).highpasses[level - 1]
    crop = 2 ** (levels - level)
    mag2 = (hp[:, 0] ** 2 + hp[:, 1] ** 2)[..., crop:-crop, crop:-crop]
    e = mag2.sum(axis=(0, 2, 3, 4))
    return e / e.sum()


def directional_selectivity(level: int, size: int = 64) -> dict[int, float]:
    """Energy fraction landing in the matching sub-band for each orientation."""
    return {a: float(orientation_fractions(a, level, size)[i]) for i, a in enumerate(ORIENTATIONS)}
