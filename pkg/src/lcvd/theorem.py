"""How many distinct classes end up in a mix of M samples.

Two models are provided side by side:

* the partition model: ``d(M, k)`` counts partitions of ``M`` into exactly
  ``k`` positive parts, and each partition is weighted equally;
* the occupancy model: ``M`` labels drawn uniformly from ``K`` classes, giving
  ``P(k) = C(K, k) * S(M, k) * k! / K**M`` with Stirling numbers ``S``.

They are different distributions; reports label which one produced a curve.
A Monte Carlo sampler of the occupancy process backs both up.
"""

from __future__ import annotations

import math
from fractions import Fraction

import numpy as np

from .numerics import InvalidArgument, Rng


class PartitionTable:
    """Exact table ``d[m][k]`` for ``0 <= m <= max_m``, ``0 <= k <= max_k``."""

    def __init__(self, max_m: int, max_k: int):
        if max_m < 0 or max_k < 0:
            raise InvalidArgument("table bounds must be nonnegative")
        self.max_m = max_m
        self.max_k = max_k
        d = [[0] * (max_k + 1) for _ in range(max_m + 1)]
        # prefix[m][k] = sum of d[m][i] for i <= k, so each cell of the
        # sum-recurrence costs O(1).
        prefix = [[0] * (max_k + 1) for _ in range(max_m + 1)]
        for m in range(1, max_m + 1):
            for k in range(1, max_k + 1):
                if k <= m:
                    if k == 1 or k == m:
                        d[m][k] = 1
                    else:
                        # Remove one from each of the k parts; at most k parts remain.
                        d[m][k] = prefix[m - k][k]
                prefix[m][k] = prefix[m][k - 1] + d[m][k]
        self.d = d

    def __call__(self, m: int, k: int) -> int:
        if m > self.max_m or k > self.max_k:
            raise InvalidArgument(f"({m}, {k}) outside table bounds ({self.max_m}, {self.max_k})")
        return self.d[m][k]


_CACHE: list[PartitionTable] = []


def _table(m: int, k: int) -> PartitionTable:
    # A table with at least k columns and m rows answers the query.
    cols = max(k, 1)
    tab = _CACHE[0] if _CACHE else None
    if tab is None or tab.max_m < m or tab.max_k < cols:
        # Grow geometrically so sweeps over m or k rebuild only O(log) times.
        rows, width = m, cols
        if tab is not None:
            rows = tab.max_m if m <= tab.max_m else max(m, 2 * tab.max_m)
            width = tab.max_k if cols <= tab.max_k else max(cols, 2 * tab.max_k)
        tab = PartitionTable(rows, width)
        _CACHE[:] = [tab]
    return tab


def partition_count(M: int, K_C: int) -> int:
    if M < 1 or K_C < 1:
        raise InvalidArgument("M and K_C must be >= 1")
    if K_C > M:
        return 0
    return _table(M, K_C)(M, K_C)


def class_count_fractions(M: int, K: int) -> list[Fraction]:
    """Exact partition-model probabilities for ``K_C = 1..K``."""
    if M < 1 or K < 1:
        raise InvalidArgument("M and K must be >= 1")
    tab = _table(M, K)
    counts = [tab(M, k) if k <= M else 0 for k in range(1, K + 1)]
    total = sum(counts)
    return [Fraction(c, total) for c in counts]


def class_count_distribution(M: int, K: int) -> np.ndarray:
    """Partition-model ``P(K_C)``; index ``i`` holds ``K_C = i + 1``."""
    return np.array([float(f) for f in class_count_fractions(M, K)])


def prob_all_classes(M: int, K: int) -> float:
    return float(class_count_fractions(M, K)[K - 1])


def stirling2(n: int, k: int) -> int:
    """Stirling numbers of the second kind by the standard recurrence."""
    if n < 0 or k < 0:
        raise InvalidArgument("arguments must be nonnegative")
    row = [1] + [0] * k
    for i in range(1, n + 1):
        new = [0] * (k + 1)
        for j in range(1, min(i, k) + 1):
            new[j] = j * row[j] + row[j - 1]
        row = new
    return row[k]


def occupancy_fractions(M: int, K: int) -> list[Fraction]:
    if M < 1 or K < 1:
        raise InvalidArgument("M and K must be >= 1")
    denom = K**M
    return [Fraction(math.comb(K, j) * stirling2(M, j) * math.factorial(j), denom) for j in range(1, K + 1)]


def occupancy_distribution(M: int, K: int) -> np.ndarray:
    return np.array([float(f) for f in occupancy_fractions(M, K)])


def monte_carlo_class_count(M: int, K: int, trials: int, rng: Rng, chunk: int = 200_000) -> np.ndarray:
    """Empirical distribution of distinct labels among ``M`` uniform draws from ``K`` classes."""
    if trials < 1 or M < 1 or K < 1:
        raise InvalidArgument("M, K and trials must be >= 1")
    hist = np.zeros(K + 1, dtype=np.int64)
    done = 0
    while done < trials:
        n = min(chunk, trials - done)
        labels = np.sort(rng.integers(0, K, size=(n, M)), axis=1)
        distinct = 1 + np.count_nonzero(np.diff(labels, axis=1), axis=1)
        hist += np.bincount(distinct, minlength=K + 1)
        done += n
    return hist[1:] / trials
