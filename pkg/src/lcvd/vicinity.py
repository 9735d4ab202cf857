"""Dirac and cross-class vicinity sampling, and the half-ID/half-OOD batch builder.

An OOD example mixes an anchor with ``M - 1`` companions by plain averaging.
Its label is *complementary*: drawn uniformly from the set of classes present
among the constituents, i.e. a class the mixture should not be assigned to.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .data import COMPLEMENTARY, GROUND_TRUTH, Dataset, LabeledExample
from .numerics import InvalidArgument, Rng

ANY_SAMPLE = "any-sample"
DISTINCT_CLASS = "distinct-class"
UNIFORM_OVER_SET = "uniform-over-set"
MAX_M = 1000


@dataclass(frozen=True)
class VicinityConfig:
    M: int = 10
    companion_policy: str = ANY_SAMPLE
    label_policy: str = UNIFORM_OVER_SET

    def __post_init__(self):
        if not 1 <= self.M <= MAX_M:
            raise InvalidArgument(f"M must be in [1, {MAX_M}], got {self.M}")
        if self.companion_policy not in (ANY_SAMPLE, DISTINCT_CLASS):
            raise InvalidArgument(f"unknown companion policy {self.companion_policy!r}")
        if self.label_policy != UNIFORM_OVER_SET:
            raise InvalidArgument(f"unknown label policy {self.label_policy!r}")

    def validate_for(self, dataset: Dataset):
        if self.M > len(dataset):
            raise InvalidArgument(f"M={self.M} exceeds dataset size {len(dataset)}")
        if self.companion_policy == DISTINCT_CLASS:
            present = int(np.count_nonzero(dataset.class_counts()))
            if self.M > present:
                raise InvalidArgument(f"distinct-class policy needs M <= {present} represented classes")


@dataclass(frozen=True)
class OodExample:
    input: np.ndarray
    complementary_label: int
    constituent_label_set: frozenset
    constituent_indices: tuple
    label_kind: str = COMPLEMENTARY

    @property
    def num_classes_mixed(self) -> int:
        return len(self.constituent_label_set)


def sample_dirac(dataset: Dataset, index: int) -> LabeledExample:
    if not 0 <= index < len(dataset):
        raise InvalidArgument(f"index {index} outside [0, {len(dataset)})")
    return LabeledExample(dataset.inputs[index].copy(), int(dataset.labels[index]), GROUND_TRUTH)


def mix_inputs(constituents) -> np.ndarray:
    xs = [np.asarray(c, dtype=np.float64) for c in constituents]
    if not xs:
        raise InvalidArgument("need at least one constituent")
    if any(x.shape != xs[0].shape for x in xs):
        raise InvalidArgument("constituents must share one dimension")
    if len(xs) == 1:
        return xs[0].copy()
    return np.mean(np.stack(xs), axis=0)


def _companions_any(n: int, anchors: np.ndarray, m1: int, rng: Rng) -> np.ndarray:
    """Rows of ``m1`` distinct indices drawn uniformly from ``[0, n)`` minus each row's anchor."""
    rows = len(anchors)
    # Rejecting whole rows with repeats leaves exactly the uniform ordered sample
    # without replacement; fall back to per-row draws when rejection gets costly.
    if m1 * m1 <= 2 * (n - 1):
        out = rng.integers(0, n - 1, size=(rows, m1))
        while True:
            s = np.sort(out, axis=1)
            bad = np.flatnonzero(np.any(s[:, 1:] == s[:, :-1], axis=1))
            if bad.size == 0:
                break
            out[bad] = rng.integers(0, n - 1, size=(bad.size, m1))
    else:
        out = np.stack([rng.choice(n - 1, m1, replace=False) for _ in range(rows)])
    return out + (out >= anchors[:, None])


def _companions_distinct(dataset: Dataset, anchor: int, m1: int, rng: Rng) -> list[int]:
    used = {int(dataset.labels[anchor])}
    chosen = []
    for _ in range(m1):
        pool = np.flatnonzero(~np.isin(dataset.labels, list(used)))
        idx = int(pool[rng.integers(len(pool))])
        chosen.append(idx)
        used.add(int(dataset.labels[idx]))
    return chosen


@dataclass(frozen=True)
class OodArrays:
    """Column form of a batch of OOD examples; row ``i`` is one example."""

    inputs: np.ndarray
    complementary_labels: np.ndarray
    constituent_indices: np.ndarray
    constituent_labels: np.ndarray

    def __len__(self):
        return len(self.complementary_labels)

    def examples(self) -> list[OodExample]:
        return [
            OodExample(self.inputs[i], int(self.complementary_labels[i]),
                       frozenset(int(c) for c in self.constituent_labels[i]),
                       tuple(int(j) for j in self.constituent_indices[i]))
            for i in range(len(self))
        ]


def draw_ood_arrays(dataset: Dataset, anchors, config: VicinityConfig, rng: Rng) -> OodArrays:
    """Vectorized OOD generation for a sequence of anchors."""
    anchors = np.asarray(anchors, dtype=np.int64)
    n = len(dataset)
    if anchors.size and (anchors.min() < 0 or anchors.max() >= n):
        raise InvalidArgument(f"anchor outside [0, {n})")
    config.validate_for(dataset)
    m1 = config.M - 1
    if m1 == 0:
        comp = np.empty((len(anchors), 0), dtype=np.int64)
    elif config.companion_policy == ANY_SAMPLE:
        comp = _companions_any(n, anchors, m1, rng)
    else:
        comp = np.array([_companions_distinct(dataset, int(a), m1, rng) for a in anchors], dtype=np.int64)
    idx = np.concatenate([anchors[:, None], comp], axis=1)
    x = dataset.inputs[idx].mean(axis=1) if config.M > 1 else dataset.inputs[anchors].copy()
    labels = dataset.labels[idx]
    s = np.sort(labels, axis=1)
    first = np.ones_like(s, dtype=bool)
    first[:, 1:] = s[:, 1:] != s[:, :-1]
    n_distinct = first.sum(axis=1)
    pick = rng.integers(0, n_distinct)
    rank = np.cumsum(first, axis=1) - 1
    hit = first & (rank == pick[:, None])
    y = s[hit]
    return OodArrays(x, y, idx, labels)


def draw_ood_sample(dataset: Dataset, anchor_index: int, config: VicinityConfig, rng: Rng) -> OodExample:
    if not 0 <= anchor_index < len(dataset):
        raise InvalidArgument(f"anchor {anchor_index} outside [0, {len(dataset)})")
    return draw_ood_arrays(dataset, [anchor_index], config, rng).examples()[0]


def draw_finetune_arrays(dataset: Dataset, b: int, config: VicinityConfig, rng: Rng,
                         pool: OodArrays | None = None):
    """Array form of :func:`build_finetune_batch`: ``(id_indices, OodArrays)``."""
    if b < 2 or b % 2:
        raise InvalidArgument(f"batch size must be even and >= 2, got {b}")
    half = b // 2
    if half > len(dataset):
        raise InvalidArgument(f"b/2={half} exceeds dataset size {len(dataset)}")
    id_idx = rng.choice(len(dataset), half, replace=False)
    if pool is not None:
        pick = rng.integers(len(pool), size=half)
        ood = OodArrays(pool.inputs[pick], pool.complementary_labels[pick],
                        pool.constituent_indices[pick], pool.constituent_labels[pick])
    else:
        ood = draw_ood_arrays(dataset, rng.integers(len(dataset), size=half), config, rng)
    return id_idx, ood


def build_finetune_batch(dataset: Dataset, b: int, config: VicinityConfig, rng: Rng,
                         pool: OodArrays | None = None):
    """Half Dirac-drawn ID examples, half OOD examples with fresh anchors.

    With ``pool`` given, the OOD half is drawn uniformly from that fixed set
    instead of being generated.
    """
    id_idx, ood = draw_finetune_arrays(dataset, b, config, rng, pool)
    return [sample_dirac(dataset, int(i)) for i in id_idx], ood.examples()


def make_ood_pool(dataset: Dataset, size: int, config: VicinityConfig, rng: Rng) -> OodArrays:
    return draw_ood_arrays(dataset, rng.integers(len(dataset), size=size), config, rng)
