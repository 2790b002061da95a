"""Independent reference implementations used to check the library.

Nothing here imports the code under test except ``Tensor`` plumbing needed to
evaluate a forward pass in float64.
"""
from __future__ import annotations

import itertools
from fractions import Fraction

import numpy as np

H = 1e-3


def central_difference(f, x: np.ndarray, h: float = H) -> np.ndarray:
    """d f / d x by central differences, evaluated entirely in float64."""
    x = np.array(x, dtype=np.float64)
    g = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        orig = x[i]
        x[i] = orig + h
        fp = f(x)
        x[i] = orig - h
        fm = f(x)
        x[i] = orig
        g[i] = (fp - fm) / (2 * h)
    return g


def rel_err(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """max |a - n| scaled by the largest numeric entry (per tensor)."""
    scale = max(float(np.abs(numeric).max()), 1e-6)
    return float(np.abs(np.asarray(analytic, np.float64) - numeric).max()) / scale


def simplex_grid(k: int = 3, step: Fraction = Fraction(1, 20)) -> list[tuple[Fraction, ...]]:
    """All k-vectors of non-negative multiples of ``step`` summing to exactly 1."""
    n = int(1 / step)
    out = []
    for parts in itertools.product(range(n + 1), repeat=k - 1):
        last = n - sum(parts)
        if last >= 0:
            out.append(tuple(Fraction(p, n) for p in (*parts, last)))
    return out


def pseudo_label_oracle(probs, tau):
    """Brute force: scan for the first maximum, then compare with tau."""
    best_i, best = 0, probs[0]
    for i, p in enumerate(probs):
        if p > best:
            best_i, best = i, p
    return (best_i, best) if best >= tau else None


def topk_oracle(probs: np.ndarray, labels: np.ndarray, k: int) -> float:
    """Sort each row by (-prob, class index) and check membership of the label."""
    hits = 0
    for row, y in zip(probs, labels):
        order = sorted(range(len(row)), key=lambda c: (-row[c], c))
        hits += int(y) in order[:k]
    return hits / len(labels)


def adam_first_step(w: float, g: float, lr: float, b1: float, b2: float, eps: float, wd: float) -> float:
    """Decoupled-decay Adam at step 1, written out term by term."""
    m = (1 - b1) * g
    v = (1 - b2) * g * g
    mhat = m / (1 - b1)
    vhat = v / (1 - b2)
    w = w - lr * wd * w
    return w - lr * mhat / (vhat ** 0.5 + eps)


def challenge_score_oracle(top1: float, top3: float, runtime: float, c: float) -> float:
    return float(Fraction(2) * (Fraction(top1) + Fraction(top3)) / (Fraction(c) * Fraction(runtime)))
