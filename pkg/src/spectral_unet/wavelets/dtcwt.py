"""2-D dual-tree complex wavelet transform.

Every 1-D stage is materialised as a dense operator matrix for the axis
length at hand, so the forward map, its inverse and both adjoints are
plain matrix products applied along the last two axes.

Level 1 is undecimated: the lowpass keeps full resolution and each of the
three real highpass images is split into its four 2x2 polyphase lattices
(the four tree combinations), which :func:`quad_to_complex` turns into two
complex orientation sub-bands. Levels >= 2 run the quarter-shift filters on
the previous lowpass; with symmetric extension, the two trees of one axis
together form a single orthonormal periodic DWT of the mirrored signal,
so those levels are exactly orthonormal.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np

from ..errors import ShapeError
from .filters import FilterBank, default_filterbank

ORIENTATIONS = (15, 45, 75, 105, 135, 165)
MAX_LEVELS = 3
_S = np.sqrt(0.5)

# (band, which of the complex pair) -> orientation index
_ORIENT_SLOTS = {"h": (0, 5), "d": (1, 4), "v": (2, 3)}


@dataclass
class Subbands:
    """Output of :func:`dtcwt_forward`.

    ``highpasses[m]`` has shape ``(N, 2, 6, C, h_m, w_m)``: axis 1 is
    (real, imag), axis 2 the orientations in :data:`ORIENTATIONS`. Level 0
    is the finest. ``lowpass`` is the coarsest-scale lowpass; at one level
    it keeps the input resolution.
    """

    lowpass: np.ndarray
    highpasses: list[np.ndarray]
    input_shape: tuple[int, int] | None = field(default=None)

    @property
    def levels(self) -> int:
        return len(self.highpasses)

    @property
    def highpass(self) -> np.ndarray:
        return self.highpasses[0]

    def size(self) -> int:
        return self.lowpass.size + sum(h.size for h in self.highpasses)

    def zeros_like(self) -> "Subbands":
        return Subbands(np.zeros_like(self.lowpass), [np.zeros_like(h) for h in self.highpasses],
                        self.input_shape)


# --------------------------------------------------------------------------
# 1-D operators
# --------------------------------------------------------------------------

def _fold(i: np.ndarray, n: int) -> np.ndarray:
    """Index into a half-sample symmetric extension of a length-n signal."""
    r = np.mod(i, 2 * n)
    return np.where(r < n, r, 2 * n - 1 - r)


@lru_cache(maxsize=256)
def _symmetric_filter_matrix(taps: bytes, n: int) -> np.ndarray:
    h = np.frombuffer(taps, dtype=np.float64)
    half = len(h) // 2
    mat = np.zeros((n, n))
    rows = np.arange(n)
    for k in range(-half, half + 1):
        np.add.at(mat, (rows, _fold(rows - k, n)), h[k + half])
    mat.setflags(write=False)
    return mat


def level1_matrix(h: np.ndarray, n: int) -> np.ndarray:
    """Zero-phase filtering of a length-n signal with symmetric extension."""
    return _symmetric_filter_matrix(np.ascontiguousarray(h, dtype=np.float64).tobytes(), n)


@lru_cache(maxsize=256)
def _qshift_matrices(h0: bytes, h1: bytes, n: int) -> tuple[np.ndarray, np.ndarray]:
    if n % 4:
        raise ShapeError(f"quarter-shift level needs a length divisible by 4, got {n}")
    lo = np.frombuffer(h0, dtype=np.float64)
    hi = np.frombuffer(h1, dtype=np.float64)
    taps = len(lo)
    half = n // 2

    # tree-a signal over one period of the mirrored input: odd samples,
    # then the even samples in reverse order (tree b's support)
    source = _fold(2 * np.arange(n) + 1, n)
    # decimation phase 1 keeps every co-located highpass pair inside the
    # signal instead of straddling the mirror point
    phase = 1

    def analysis(h, delay):
        mat = np.zeros((half, n))
        for k in range(half):
            for m in range(taps):
                mat[k, source[(2 * k + phase - m) % n]] += h[m]
        # centre of each output in input-sample units, then order by position
        centre = np.mod(2 * np.arange(half) + phase - delay + 0.5, n) - 0.5
        first = centre < half - 0.5
        pos = np.where(first, 2 * centre + 1, 2 * n - 2 - 2 * centre)
        # co-located highpass pairs: tree a (odd source) then tree b
        order = np.lexsort((~first, pos))
        return mat[order]

    nominal = (taps - 1) / 2
    mats = analysis(lo, nominal - 0.25), analysis(hi, nominal + 0.25)
    for m in mats:
        m.setflags(write=False)
    return mats


def qshift_matrices(fb: FilterBank, n: int) -> tuple[np.ndarray, np.ndarray]:
    """(lowpass, highpass) analysis operators, each ``(n/2, n)``; jointly orthonormal."""
    return _qshift_matrices(fb.h0a.tobytes(), fb.h1a.tobytes(), n)


# --------------------------------------------------------------------------
# quad <-> complex
# --------------------------------------------------------------------------

def quad_to_complex(p, q, r, s):
    """Combine the four co-located tree lattices into two complex sub-bands.

    ``p, q, r, s`` are the (a,a), (a,b), (b,a), (b,b) tree combinations,
    i.e. the top-left, top-right, bottom-left and bottom-right polyphase
    lattices. The map is orthogonal.
    """
    z1 = _S * (p - s) + 1j * _S * (q + r)
    z2 = _S * (p + s) + 1j * _S * (q - r)
    return z1, z2


def complex_to_quad(z1, z2):
    z1, z2 = np.asarray(z1), np.asarray(z2)
    p = _S * (z1.real + z2.real)
    s = _S * (z2.real - z1.real)
    q = _S * (z1.imag + z2.imag)
    r = _S * (z1.imag - z2.imag)
    return p, q, r, s


def _band_to_orient(band, out, slots):
    """Split a real (…, h, w) band into two complex orientations written into ``out``."""
    p, q = band[..., 0::2, 0::2], band[..., 0::2, 1::2]
    r, s = band[..., 1::2, 0::2], band[..., 1::2, 1::2]
    i, j = slots
    out[:, 0, i] = _S * (p - s)
    out[:, 1, i] = _S * (q + r)
    out[:, 0, j] = _S * (p + s)
    out[:, 1, j] = _S * (q - r)


def _orient_to_band(hp, slots):
    i, j = slots
    re1, im1, re2, im2 = hp[:, 0, i], hp[:, 1, i], hp[:, 0, j], hp[:, 1, j]
    n, c, h, w = re1.shape
    band = np.empty((n, c, 2 * h, 2 * w), dtype=hp.dtype)
    band[..., 0::2, 0::2] = _S * (re1 + re2)
    band[..., 1::2, 1::2] = _S * (re2 - re1)
    band[..., 0::2, 1::2] = _S * (im1 + im2)
    band[..., 1::2, 0::2] = _S * (im1 - im2)
    return band


def _pack(bands: dict[str, np.ndarray]) -> np.ndarray:
    sample = bands["h"]
    n, c, h, w = sample.shape
    hp = np.empty((n, 2, 6, c, h // 2, w // 2), dtype=sample.dtype)
    for key, slots in _ORIENT_SLOTS.items():
        _band_to_orient(bands[key], hp, slots)
    return hp


def _unpack(hp: np.ndarray) -> dict[str, np.ndarray]:
    return {key: _orient_to_band(hp, slots) for key, slots in _ORIENT_SLOTS.items()}


# --------------------------------------------------------------------------
# one level, separable
# --------------------------------------------------------------------------

def _analysis_ops(fb, level, h, w, dtype):
    """Column operators (lo, hi) for height h and row operators for width w."""
    if level == 0:
        cols = level1_matrix(fb.h0o, h), level1_matrix(fb.h1o, h)
        rows = level1_matrix(fb.h0o, w), level1_matrix(fb.h1o, w)
    else:
        cols = qshift_matrices(fb, h)
        rows = qshift_matrices(fb, w)
    return tuple(m.astype(dtype, copy=False) for m in cols), tuple(m.astype(dtype, copy=False) for m in rows)


def _synthesis_ops(fb, level, h, w, dtype):
    """Operators rebuilding an ``h x w`` level input."""
    if level == 0:
        cols = level1_matrix(fb.g0o, h), level1_matrix(fb.g1o, h)
        rows = level1_matrix(fb.g0o, w), level1_matrix(fb.g1o, w)
    else:
        # orthonormal: synthesis is the transpose of analysis
        cl, ch = qshift_matrices(fb, h)
        rl, rh = qshift_matrices(fb, w)
        cols, rows = (cl.T, ch.T), (rl.T, rh.T)
    return tuple(m.astype(dtype, copy=False) for m in cols), tuple(m.astype(dtype, copy=False) for m in rows)


def _apply_analysis(x, cols, rows):
    c0, c1 = cols
    r0, r1 = rows
    lo_rows = x @ r0.T
    hi_rows = x @ r1.T
    return c0 @ lo_rows, {"h": c0 @ hi_rows, "d": c1 @ hi_rows, "v": c1 @ lo_rows}


def _apply_synthesis(lo, bands, cols, rows):
    c0, c1 = cols
    r0, r1 = rows
    return (c0 @ (lo @ r0.T + bands["h"] @ r1.T)
            + c1 @ (bands["d"] @ r1.T + bands["v"] @ r0.T))


def _apply_analysis_adjoint(glo, gbands, cols, rows):
    c0, c1 = cols
    r0, r1 = rows
    return (c0.T @ (glo @ r0 + gbands["h"] @ r1)
            + c1.T @ (gbands["d"] @ r1 + gbands["v"] @ r0))


def _apply_synthesis_adjoint(g, cols, rows):
    c0, c1 = cols
    r0, r1 = rows
    lo_rows = g @ r0
    hi_rows = g @ r1
    return c0.T @ lo_rows, {"h": c0.T @ hi_rows, "d": c1.T @ hi_rows, "v": c1.T @ lo_rows}


# --------------------------------------------------------------------------
# public transform
# --------------------------------------------------------------------------

def _check_levels(levels, h, w):
    if not 1 <= levels <= MAX_LEVELS:
        raise ValueError(f"levels must be in 1..{MAX_LEVELS}, got {levels}")
    if min(h, w) < 2 ** levels:
        raise ValueError(f"{levels} levels too many for a {h}x{w} input")


def _padded_size(n, levels):
    step = 2 ** levels
    return -(-n // step) * step


def dtcwt_forward(x: np.ndarray, levels: int = 1, fb: FilterBank | None = None) -> Subbands:
    """Decompose ``x`` of shape (N, C, H, W) into lowpass and oriented highpasses.

    Sizes that are not multiples of ``2**levels`` are symmetrically padded
    at the bottom/right; the original size is kept for :func:`dtcwt_inverse`.
    """
    fb = fb or default_filterbank()
    if x.ndim != 4:
        raise ShapeError(f"expected (N, C, H, W), got shape {x.shape}")
    h, w = x.shape[-2:]
    _check_levels(levels, h, w)
    ph, pw = _padded_size(h, levels), _padded_size(w, levels)
    original = None
    if (ph, pw) != (h, w):
        original = (h, w)
        x = np.pad(x, ((0, 0), (0, 0), (0, ph - h), (0, pw - w)), mode="symmetric")

    lo = x
    highs = []
    for level in range(levels):
        cols, rows = _analysis_ops(fb, level, *lo.shape[-2:], lo.dtype)
        lo, bands = _apply_analysis(lo, cols, rows)
        highs.append(_pack(bands))
    return Subbands(lo, highs, original)


def _check_subbands(s: Subbands):
    if not s.highpasses:
        raise ShapeError("subbands carry no highpass levels")
    if s.lowpass.ndim != 4:
        raise ShapeError(f"lowpass must be (N, C, H, W), got {s.lowpass.shape}")
    n, c, h, w = s.lowpass.shape
    # the first level keeps full resolution, every later one halves it
    full_h, full_w = h << (s.levels - 1), w << (s.levels - 1)
    for m, hp in enumerate(s.highpasses):
        want = (n, 2, 6, c, full_h >> (m + 1), full_w >> (m + 1))
        if hp.shape != want:
            raise ShapeError(f"highpass level {m} has shape {hp.shape}, expected {want}")


def _level_size(level, band_h, band_w):
    """Input size of a level whose real bands are ``band_h x band_w``."""
    return (band_h, band_w) if level == 0 else (2 * band_h, 2 * band_w)


def dtcwt_inverse(s: Subbands, fb: FilterBank | None = None) -> np.ndarray:
    """Reconstruct the input of :func:`dtcwt_forward` from its sub-bands."""
    fb = fb or default_filterbank()
    _check_subbands(s)
    lo = s.lowpass
    for level in reversed(range(s.levels)):
        bands = _unpack(s.highpasses[level])
        cols, rows = _synthesis_ops(fb, level, *_level_size(level, *bands["h"].shape[-2:]), lo.dtype)
        lo = _apply_synthesis(lo, bands, cols, rows)
    if s.input_shape is not None:
        lo = lo[..., : s.input_shape[0], : s.input_shape[1]]
    return lo


def _fold_padding(g: np.ndarray, shape: tuple[int, int]) -> np.ndarray:
    """Adjoint of bottom/right symmetric padding back to ``shape``."""
    h, w = shape
    ph, pw = g.shape[-2:]
    g = g.copy()
    for extra in range(ph - h):
        g[..., h - 1 - extra, :] += g[..., h + extra, :]
    g = g[..., :h, :]
    for extra in range(pw - w):
        g[..., :, w - 1 - extra] += g[..., :, w + extra]
    return g[..., :, :w]


def dtcwt_adjoint_backward(grad: Subbands, fb: FilterBank | None = None) -> np.ndarray:
    """Gradient w.r.t. the input of :func:`dtcwt_forward` (its transpose)."""
    fb = fb or default_filterbank()
    _check_subbands(grad)
    g = grad.lowpass
    for level in reversed(range(grad.levels)):
        gbands = _unpack(grad.highpasses[level])
        cols, rows = _analysis_ops(fb, level, *_level_size(level, *gbands["h"].shape[-2:]), g.dtype)
        g = _apply_analysis_adjoint(g, gbands, cols, rows)
    if grad.input_shape is not None:
        g = _fold_padding(g, grad.input_shape)
    return g


def dtcwt_inverse_backward(grad: np.ndarray, levels: int, fb: FilterBank | None = None,
                           input_shape: tuple[int, int] | None = None) -> Subbands:
    """Gradient w.r.t. the sub-bands of :func:`dtcwt_inverse` (its transpose)."""
    fb = fb or default_filterbank()
    g = grad
    if input_shape is not None:
        h, w = input_shape
        ph, pw = _padded_size(h, levels), _padded_size(w, levels)
        full = np.zeros(g.shape[:-2] + (ph, pw), dtype=g.dtype)
        full[..., :h, :w] = g
        g = full
    highs = []
    for level in range(levels):
        cols, rows = _synthesis_ops(fb, level, *g.shape[-2:], g.dtype)
        g, gbands = _apply_synthesis_adjoint(g, cols, rows)
        highs.append(_pack(gbands))
    return Subbands(g, highs, input_shape)
