"""Construction of the DTCWT filter coefficients.

The shipped coefficients live in ``filters.json``; this module is the
recipe that produced them, kept so the numbers can be regenerated and
audited.

Level 1 uses a symmetric biorthogonal (13, 19)-tap pair obtained by
splitting the zeros of the degree-8 maximally flat half-band polynomial.
Levels >= 2 use a 14-tap orthonormal quarter-shift filter found by
minimising the high-frequency energy of the filter interleaved with its
own time reverse.
"""

from __future__ import annotations

import json
from math import comb
from pathlib import Path

import numpy as np
from scipy.optimize import minimize

HALFBAND_ORDER = 8
QSHIFT_TAPS = 14

# cos^2(w/2) and sin^2(w/2) as zero-phase 3-tap filters
_ONE_MINUS_Y = np.array([0.25, 0.5, 0.25])
_Y = np.array([-0.25, 0.5, -0.25])


def _product(factors):
    taps = np.array([1.0])
    for f in factors:
        taps = np.convolve(taps, f)
    return taps


def _quadratic_factor(root):
    """Zero-phase taps of (1 - y/r)(1 - y/conj(r))."""
    inv = 1.0 / root
    yy = np.convolve(_Y, _Y)
    return (np.array([0.0, 0.0, 1.0, 0.0, 0.0])
            - 2.0 * inv.real * np.pad(_Y, 1)
            + abs(inv) ** 2 * yy)


def _linear_factor(root):
    return np.array([0.0, 1.0, 0.0]) - _Y / root


def design_level1(order: int = HALFBAND_ORDER):
    """Return zero-phase ``(h0, g0, h1, g1)`` for the undecimated first level.

    ``h0 * g0 + h1 * g1`` is a unit impulse, and ``h1``/``g1`` have zero DC
    gain. The complex root pair handed to ``h0`` is the one that leaves the
    two lowpass filters with the closest norms (nearest to orthogonal).
    """
    q = [comb(order - 1 + j, j) for j in range(order)]
    roots = np.roots(q[::-1])
    pairs = sorted((r for r in roots if r.imag > 1e-12), key=lambda r: (r.real, r.imag))
    reals = [r.real for r in roots if abs(r.imag) <= 1e-12]
    half = order // 2

    best = None
    for chosen in pairs:
        h0 = _product([_ONE_MINUS_Y] * half + [_quadratic_factor(chosen)])
        rest = [_quadratic_factor(r) for r in pairs if r is not chosen]
        rest += [_linear_factor(r) for r in reals]
        g0 = _product([_ONE_MINUS_Y] * (order - half) + rest)
        imbalance = abs(np.log(np.linalg.norm(h0) / np.linalg.norm(g0)))
        if best is None or imbalance < best[0]:
            best = (imbalance, h0, g0)
    _, h0, g0 = best

    # enforce exact symmetry lost to rounding in the root products
    h0 = 0.5 * (h0 + h0[::-1])
    g0 = 0.5 * (g0 + g0[::-1])
    h0 /= h0.sum()
    g0 /= g0.sum()
    sign_h = (-1.0) ** (np.arange(len(g0)) - len(g0) // 2)
    sign_g = (-1.0) ** (np.arange(len(h0)) - len(h0) // 2)
    h1 = sign_h * g0
    g1 = sign_g * h0
    return h0, g0, h1, g1


def _interleave_with_reverse(h):
    out = np.empty(2 * len(h))
    out[0::2] = h[::-1]
    out[1::2] = h
    return out


def _qshift_constraints(h):
    n = len(h)
    cons = [h @ h - 1.0]
    cons += [h[:-2 * m] @ h[2 * m:] for m in range(1, n // 2)]
    cons.append(h.sum() - np.sqrt(2.0))
    return np.array(cons)


def _polish_constraints(h):
    # H(pi) = 0 is implied by the others but only to sqrt(eps); pin it directly
    return np.append(_qshift_constraints(h), np.sum(h[0::2]) - np.sum(h[1::2]))


def design_qshift(taps: int = QSHIFT_TAPS, stop_edge: float = 0.36, seeds: int = 20):
    """Return the tree-a orthonormal lowpass ``h0a`` with a quarter-sample lag.

    The filter interleaved with its reverse samples one smooth symmetric
    lowpass at half-sample spacing; its energy above ``stop_edge * pi`` is
    minimised subject to double-shift orthonormality and sum sqrt(2).
    """
    w = np.linspace(stop_edge * np.pi, np.pi, 600)
    basis = np.exp(-1j * np.outer(w, np.arange(2 * taps)))
    dw = w[1] - w[0]

    def energy(h):
        return float(np.sum(np.abs(basis @ _interleave_with_reverse(h)) ** 2) * dw)

    t = np.arange(taps) - (taps - 1) / 2 + 0.25
    start = np.sinc(t / 2) * np.hamming(taps)
    start *= np.sqrt(2.0) / start.sum()

    best = None
    for seed in range(seeds):
        rng = np.random.default_rng(seed)
        x0 = start + (0.02 * rng.standard_normal(taps) if seed else 0.0)
        res = minimize(energy, x0, method="SLSQP",
                       constraints=[{"type": "eq", "fun": _qshift_constraints}],
                       options={"maxiter": 2000, "ftol": 1e-16})
        if res.success and (best is None or res.fun < best.fun):
            best = res
    h = best.x

    # Gauss-Newton polish so orthonormality holds to rounding
    eye = np.eye(taps)
    for _ in range(10):
        c = _polish_constraints(h)
        jac = np.array([(_polish_constraints(h + 1e-7 * e) - _polish_constraints(h - 1e-7 * e)) / 2e-7
                        for e in eye]).T
        h = h - np.linalg.lstsq(jac, c, rcond=None)[0]
    return h


def qshift_bank(h0a):
    """Expand a tree-a lowpass into the eight Q-shift filters."""
    n = len(h0a)
    h1a = (-1.0) ** np.arange(n) * h0a[::-1]
    h0b = h0a[::-1].copy()
    h1b = h1a[::-1].copy()
    return {
        "h0a": h0a, "h1a": h1a, "g0a": h0a[::-1].copy(), "g1a": h1a[::-1].copy(),
        "h0b": h0b, "h1b": h1b, "g0b": h0b[::-1].copy(), "g1b": h1b[::-1].copy(),
    }


def build_coefficients():
    h0o, g0o, h1o, g1o = design_level1()
    h0a = design_qshift()
    coeffs = {"h0o": h0o, "g0o": g0o, "h1o": h1o, "g1o": g1o}
    coeffs.update(qshift_bank(h0a))
    return coeffs


def write_coefficients(path: Path) -> None:
    coeffs = build_coefficients()
    payload = {
        "level1": "near_sym_13_19",
        "qshift": "qshift_14",
        "filters": {k: [float(v) for v in arr] for k, arr in coeffs.items()},
    }
    path.write_text(json.dumps(payload, indent=1) + "\n")


if __name__ == "__main__":
    write_coefficients(Path(__file__).with_name("filters.json"))
