"""Brute-force reference implementations used as test oracles."""
from __future__ import annotations

import itertools

import numpy as np


def exhaustive_sse(X: np.ndarray, K: int) -> tuple[float, np.ndarray]:
    """Optimal k-means SSE over every labeling of the rows with exactly K non-empty groups."""
    T = len(X)
    labelings = np.array(list(itertools.product(range(K), repeat=T)))
    onehot = labelings[:, :, None] == np.arange(K)[None, None, :]          # [P, T, K]
    counts = onehot.sum(1)                                                 # [P, K]
    valid = (counts > 0).all(1)
    sums = np.einsum("ptk,td->pkd", onehot.astype(float), X)               # [P, K, d]
    sq = (X * X).sum()
    within = sq - ((sums ** 2).sum(2) / np.maximum(counts, 1)).sum(1)
    within[~valid] = np.inf
    best = int(np.argmin(within))
    return float(within[best]), labelings[best]


def pair_counting_ari(a, b) -> float:
    """ARI from explicit pair enumeration (agreement counts over all task pairs)."""
    a, b = list(a), list(b)
    n = len(a)
    same_a = same_b = both = 0
    pairs = 0
    for i, j in itertools.combinations(range(n), 2):
        pairs += 1
        sa, sb = a[i] == a[j], b[i] == b[j]
        same_a += sa
        same_b += sb
        both += sa and sb
    expected = same_a * same_b / pairs
    maximum = (same_a + same_b) / 2
    if maximum == expected:
        return 1.0
    return (both - expected) / (maximum - expected)


def overlap_labels(bin_starts: np.ndarray, bin_size: int, peaks: list[tuple[int, int]], min_overlap: int) -> np.ndarray:
    """Per-bin positivity by walking every base of every bin against the peak union."""
    covered = set()
    for s, e in peaks:
        covered.update(range(s, e))
    out = np.zeros(len(bin_starts), dtype=bool)
    for i, b in enumerate(bin_starts):
        out[i] = sum((p in covered) for p in range(b, b + bin_size)) >= min_overlap
    return out
