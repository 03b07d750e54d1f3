"""Two-sided Wilcoxon signed-rank test for paired per-case scores."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.stats import norm, rankdata

from useg.errors import LengthMismatch, TooFewPairs

EXACT_MAX_N = 25
MIN_PAIRS = 6


@dataclass(frozen=True)
class WilcoxonResult:
    statistic: float  # W+, sum of ranks of positive differences
    p: float
    n: int  # pairs left after dropping zero differences
    method: str  # "exact", "normal" or "all-zero"

    @property
    def all_zero(self) -> bool:
        return self.method == "all-zero"


def signed_rank_null_counts(doubled_ranks) -> np.ndarray:
    """counts[k] = number of sign assignments whose doubled W+ equals k."""
    total = int(sum(doubled_ranks))
    counts = np.zeros(total + 1, dtype=np.int64)
    counts[0] = 1
    for r in doubled_ranks:
        r = int(r)
        shifted = np.zeros_like(counts)
        shifted[r:] = counts[: total + 1 - r]
        counts = counts + shifted
    return counts


def paired_test(a, b) -> WilcoxonResult:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 1:
        raise LengthMismatch(f"paired samples must be equal-length vectors, got {a.shape} and {b.shape}")
    if a.size < MIN_PAIRS:
        raise TooFewPairs(f"need at least {MIN_PAIRS} pairs, got {a.size}")
    d = a - b
    d = d[d != 0]
    n = d.size
    if n == 0:
        return WilcoxonResult(0.0, 1.0, 0, "all-zero")
    ranks = rankdata(np.abs(d))  # mid-ranks for ties
    w_plus = float(ranks[d > 0].sum())

    if n <= EXACT_MAX_N:
        doubled = np.rint(2 * ranks).astype(np.int64)
        counts = signed_rank_null_counts(doubled)
        w2 = int(round(2 * w_plus))
        total = float(2**n)
        lower = counts[: w2 + 1].sum() / total
        upper = counts[w2:].sum() / total
        return WilcoxonResult(w_plus, float(min(1.0, 2 * min(lower, upper))), n, "exact")

    _, tie_counts = np.unique(ranks, return_counts=True)
    mean = n * (n + 1) / 4.0
    var = n * (n + 1) * (2 * n + 1) / 24.0 - float(np.sum(tie_counts**3 - tie_counts)) / 48.0
    z = (w_plus - mean) / math.sqrt(var)
    return WilcoxonResult(w_plus, float(min(1.0, 2 * norm.sf(abs(z)))), n, "normal")
