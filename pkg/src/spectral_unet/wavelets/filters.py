"""Filter bank container and its self-checks."""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from functools import lru_cache
from pathlib import Path

import numpy as np

_DATA = Path(__file__).with_name("filters.json")


@dataclass(frozen=True)
class FilterBank:
    """Analysis/synthesis filters for both trees.

    Level-1 filters are odd length and zero phase (centre tap is the
    origin). Tree b at level 1 is tree a delayed by one sample, which in the
    undecimated first stage amounts to taking the odd polyphase lattice.
    Q-shift filters are even length and causal; tree b is the time reverse
    of tree a.
    """

    h0o: np.ndarray
    g0o: np.ndarray
    h1o: np.ndarray
    g1o: np.ndarray
    h0a: np.ndarray
    h1a: np.ndarray
    g0a: np.ndarray
    g1a: np.ndarray
    h0b: np.ndarray
    h1b: np.ndarray
    g0b: np.ndarray
    g1b: np.ndarray
    name: str = "near_sym_13_19+qshift_14"

    @property
    def level1_tree_b(self) -> dict[str, np.ndarray]:
        """Tree-b level-1 filters: tree a translated by one sample."""
        return {k: np.concatenate([[0.0], getattr(self, k)])
                for k in ("h0o", "g0o", "h1o", "g1o")}

    def scaled(self, **factors: float) -> "FilterBank":
        return replace(self, **{k: getattr(self, k) * v for k, v in factors.items()})

    def with_filters(self, **arrays) -> "FilterBank":
        return replace(self, **{k: np.asarray(v, dtype=np.float64) for k, v in arrays.items()})


@lru_cache(maxsize=1)
def default_filterbank() -> FilterBank:
    payload = json.loads(_DATA.read_text())
    arrays = {k: np.asarray(v, dtype=np.float64) for k, v in payload["filters"].items()}
    for arr in arrays.values():
        arr.setflags(write=False)
    return FilterBank(**arrays, name=f"{payload['level1']}+{payload['qshift']}")


@dataclass
class FilterReport:
    """Outcome of :func:`validate_filterbank`; ``checks`` maps name to (passed, value)."""

    checks: dict[str, tuple[bool, float]] = field(default_factory=dict)

    @property
    def ok(self) -> bool:
        return all(passed for passed, _ in self.checks.values())

    def failures(self) -> list[str]:
        return [k for k, (passed, _) in self.checks.items() if not passed]

    def lines(self) -> list[str]:
        return [f"{'PASS' if p else 'FAIL'}  {k:<28s} {v:.3e}" for k, (p, v) in self.checks.items()]


def _impulse(n, at):
    x = np.zeros(n)
    x[at] = 1.0
    return x


def _level1_pr_error(fb: FilterBank) -> float:
    total = np.convolve(fb.h0o, fb.g0o) + np.convolve(fb.h1o, fb.g1o)
    return float(np.abs(total - _impulse(len(total), len(total) // 2)).max())


def _qshift_pr_error(h0, h1, g0, g1) -> float:
    """Two-channel decimated bank on a delta: output must be a delayed delta."""
    n = len(h0)
    x = _impulse(4 * n, n)
    worst = 0.0
    for phase in (0, 1):
        y = np.zeros(len(x) + 2 * n - 2)
        for h, g in ((h0, g0), (h1, g1)):
            sub = np.convolve(x, h)
            up = np.zeros_like(sub)
            up[phase::2] = sub[phase::2]
            y += np.convolve(up, g)
        expect = _impulse(len(y), n + n - 1)
        worst = max(worst, float(np.abs(y - expect).max()))
    return worst


def _group_delay(h, upto=0.25 * np.pi, points=64):
    w = np.linspace(1e-3, upto, points)
    resp = np.exp(-1j * np.outer(w, np.arange(len(h)))) @ h
    phase = np.unwrap(np.angle(resp))
    return float(np.mean(-np.gradient(phase, w)))


def validate_filterbank(fb: FilterBank, tol: float = 1e-10) -> FilterReport:
    """Check perfect reconstruction, zero-DC highpass and the tree relations."""
    report = FilterReport()
    err = _level1_pr_error(fb)
    report.checks["level1_perfect_recon"] = (err < tol, err)
    for tree in "ab":
        h0, h1, g0, g1 = (getattr(fb, f"{k}{tree}") for k in ("h0", "h1", "g0", "g1"))
        err = _qshift_pr_error(h0, h1, g0, g1)
        report.checks[f"qshift_{tree}_perfect_recon"] = (err < tol, err)
    for name in ("h1o", "g1o", "h1a", "h1b", "g1a", "g1b"):
        dc = abs(float(np.sum(getattr(fb, name))))
        report.checks[f"dc_gain_{name}"] = (dc < tol, dc)

    tb = fb.level1_tree_b
    shift_err = max(float(np.abs(tb[k][1:] - getattr(fb, k)).max()) + abs(float(tb[k][0]))
                    for k in tb)
    report.checks["level1_tree_b_translate"] = (shift_err == 0.0, shift_err)

    lag = _group_delay(fb.h0b) - _group_delay(fb.h0a)
    report.checks["qshift_half_sample_delay"] = (abs(lag - 0.5) < 0.05, lag)
    rev = max(float(np.abs(fb.h0b - fb.h0a[::-1]).max()), float(np.abs(fb.h1b - fb.h1a[::-1]).max()))
    report.checks["qshift_tree_b_reverse"] = (rev < tol, rev)
    return report
