"""Threshold-free detection metrics. ID scores are positives; higher means more ID.

A score equal to the threshold counts as predicted-ID throughout.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .numerics import InvalidArgument

ID = "ID"
OOD = "OOD"


@dataclass(frozen=True)
class ScoreSet:
    id_scores: np.ndarray
    ood_scores: np.ndarray

    def __post_init__(self):
        a = np.asarray(self.id_scores, dtype=np.float64).ravel()
        b = np.asarray(self.ood_scores, dtype=np.float64).ravel()
        if a.size == 0 or b.size == 0:
            raise InvalidArgument("both score lists must be nonempty")
        if not (np.all(np.isfinite(a)) and np.all(np.isfinite(b))):
            raise InvalidArgument("scores must be finite")
        object.__setattr__(self, "id_scores", a)
        object.__setattr__(self, "ood_scores", b)

    def swapped(self) -> "ScoreSet":
        return ScoreSet(self.ood_scores, self.id_scores)


def auroc(s: ScoreSet) -> float:
    """P(ID score > OOD score) + 0.5 P(tie), via midranks."""
    n_pos, n_neg = s.id_scores.size, s.ood_scores.size
    allv = np.concatenate([s.id_scores, s.ood_scores])
    order = np.argsort(allv, kind="mergesort")
    sorted_v = allv[order]
    # Midranks (1-based) for tied runs.
    starts = np.flatnonzero(np.r_[True, sorted_v[1:] != sorted_v[:-1]])
    ends = np.r_[starts[1:], sorted_v.size]
    mid = (starts + ends + 1) / 2.0
    ranks = np.empty(allv.size)
    ranks[order] = np.repeat(mid, ends - starts)
    u = ranks[:n_pos].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def _operating_points(pos, neg):
    """Cumulative TP/FP counts at each distinct threshold, descending."""
    allv = np.concatenate([pos, neg])
    is_pos = np.r_[np.ones(pos.size), np.zeros(neg.size)]
    order = np.argsort(-allv, kind="mergesort")
    v = allv[order]
    tp = np.cumsum(is_pos[order])
    fp = np.cumsum(1 - is_pos[order])
    # Last index of each tied run: threshold t = v admits every score >= t.
    last = np.r_[np.flatnonzero(v[1:] != v[:-1]), v.size - 1]
    return v[last], tp[last], fp[last]


def aupr(s: ScoreSet, positive: str = ID) -> float:
    """Step-wise average precision: sum over thresholds of precision * recall increment."""
    if positive == ID:
        pos, neg = s.id_scores, s.ood_scores
    elif positive == OOD:
        pos, neg = -s.ood_scores, -s.id_scores
    else:
        raise InvalidArgument(f"positive must be {ID!r} or {OOD!r}")
    _, tp, fp = _operating_points(pos, neg)
    precision = tp / (tp + fp)
    recall = tp / pos.size
    d_recall = np.diff(np.r_[0.0, recall])
    # Correctly rounded sum: independent of summation order.
    return math.fsum((precision * d_recall).tolist())


def _threshold_at_tpr(s: ScoreSet, level: float):
    if not 0 < level <= 1:
        raise InvalidArgument("level must be in (0, 1]")
    thr, tp, fp = _operating_points(s.id_scores, s.ood_scores)
    tpr = tp / s.id_scores.size
    # Thresholds run high to low, so the first hit is the largest qualifying threshold.
    i = int(np.argmax(tpr >= level - 1e-12))
    return thr[i], tpr[i], fp[i] / s.ood_scores.size


def fpr_at_tpr(s: ScoreSet, level: float = 0.95) -> float:
    return float(_threshold_at_tpr(s, level)[2])


def detection_error(s: ScoreSet, level: float = 0.95) -> float:
    _, tpr, fpr = _threshold_at_tpr(s, level)
    return float(0.5 * (1 - tpr) + 0.5 * fpr)


def all_metrics(s: ScoreSet) -> dict:
    return {
        "auroc": auroc(s),
        "auprin": aupr(s, ID),
        "auprout": aupr(s, OOD),
        "fpr95": fpr_at_tpr(s, 0.95),
        "deterr": detection_error(s, 0.95),
    }
