"""Brute-force reference implementations used only by the tests.

Each one is written from the definition with plain Python loops and
exact arithmetic where it matters, sharing no code with the package.
"""

from __future__ import annotations

import math
from fractions import Fraction
from itertools import combinations

import numpy as np


def alpha_oracle(C, n_plus_1, k, M) -> int:
    """floor(C (N+1) k / M) in exact rational arithmetic, clamped to 1."""
    val = Fraction(str(C)) * n_plus_1 * k / M
    return max(1, math.floor(val))


def route_oracle(w: np.ndarray, k: int, alpha: int) -> np.ndarray:
    """Row top-k then column top-alpha by sorting (value desc, index asc)."""
    r, M = w.shape
    rowf = np.zeros_like(w)
    for i in range(r):
        order = sorted(range(M), key=lambda j: (-w[i, j], j))
        for j in order[:k]:
            rowf[i, j] = w[i, j]
    out = np.zeros_like(w)
    for j in range(M):
        order = sorted(range(r), key=lambda i: (-rowf[i, j], i))
        for i in order[:alpha]:
            out[i, j] = rowf[i, j]
    return out


def pairwise_auc(scores, labels) -> Fraction:
    """O(n^2) count of correctly ordered positive/negative pairs, ties 1/2."""
    pos = [s for s, y in zip(scores, labels) if y == 1]
    neg = [s for s, y in zip(scores, labels) if y == 0]
    total = Fraction(0)
    for p in pos:
        for n in neg:
            if p > n:
                total += 1
            elif p == n:
                total += Fraction(1, 2)
    return total / (len(pos) * len(neg))


def exact_ot_1d(u, v) -> float:
    """Squared-distance OT between equal-size uniform samples: sorted matching."""
    u, v = sorted(u), sorted(v)
    assert len(u) == len(v)
    return sum((a - b) ** 2 for a, b in zip(u, v)) / len(u)


def rate(preds, sel) -> Fraction | None:
    idx = [i for i, s in enumerate(sel) if s]
    if not idx:
        return None
    return Fraction(sum(preds[i] for i in idx), len(idx))


def dpd_oracle(preds, labels, groups, mode="standard") -> Fraction:
    rates = []
    for g in sorted(set(groups)):
        sel = [gg == g and (mode == "standard" or y == 1) for gg, y in zip(groups, labels)]
        r = rate(preds, sel)
        if r is not None:
            rates.append(r)
    return max(rates) - min(rates)


def eod_oracle(preds, labels, groups) -> Fraction:
    gaps = []
    tab = {}
    for g in sorted(set(groups)):
        tpr = rate(preds, [gg == g and y == 1 for gg, y in zip(groups, labels)])
        fpr = rate(preds, [gg == g and y == 0 for gg, y in zip(groups, labels)])
        if tpr is not None and fpr is not None:
            tab[g] = (tpr, fpr)
    for a, b in combinations(tab, 2):
        gaps.append(max(abs(tab[a][0] - tab[b][0]), abs(tab[a][1] - tab[b][1])))
    return max(gaps)


def es_auc_formula(overall: float, per_group) -> float:
    return overall / (1 + sum(abs(overall - a) for a in per_group))
