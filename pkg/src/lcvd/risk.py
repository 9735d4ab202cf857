"""Training losses for both phases and mutual-information bound diagnostics.

Losses return the value together with its gradient w.r.t. the logits so the
trainer never differentiates numerically. Batch risks are plain sums over
samples; callers that want a per-sample figure divide afterwards.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .data import COMPLEMENTARY, GROUND_TRUTH, LabeledExample
from .model import Gradients, MlpClassifier, backward, forward
from .numerics import InvalidArgument, softmax

NLL_EPS = 1e-12
REJECT_EPS = 1e-7
BOUND_EPS = 1e-12


@dataclass(frozen=True)
class LossResult:
    loss: float
    dloss_dlogits: np.ndarray


def _check_probs(p, label):
    p = np.asarray(p, dtype=np.float64)
    if p.ndim != 1 or not np.all(np.isfinite(p)) or np.any(p < 0) or abs(p.sum() - 1.0) > 1e-9:
        raise InvalidArgument("probabilities must be a valid distribution")
    if not 0 <= label < p.size:
        raise InvalidArgument(f"label {label} outside [0, {p.size})")
    return p


def nll_loss(probabilities, label: int) -> LossResult:
    p = _check_probs(probabilities, label)
    grad = p.copy()
    grad[label] -= 1.0
    return LossResult(-math.log(max(p[label], NLL_EPS)), grad)


def rejection_loss(probabilities, complementary_label: int) -> LossResult:
    """``-log(1 - p_y)`` with ``1 - p_y`` floored at ``REJECT_EPS``.

    ``1 - p_y`` is taken as the sum of the other probabilities to avoid
    cancellation. The gradient keeps the analytic form with the same floored
    denominator, so saturated predictions still receive a bounded push.
    """
    p = _check_probs(probabilities, complementary_label)
    losses, grads = rejection_terms(p[None, :], np.array([complementary_label]))
    return LossResult(float(losses[0]), grads[0])


def nll_terms(probs: np.ndarray, labels: np.ndarray):
    """Row-wise NLL losses and logit gradients for a batch."""
    rows = np.arange(len(labels))
    losses = -np.log(np.maximum(probs[rows, labels], NLL_EPS))
    grads = probs.copy()
    grads[rows, labels] -= 1.0
    return losses, grads


def rejection_terms(probs: np.ndarray, labels: np.ndarray):
    """Row-wise rejection losses and logit gradients for a batch."""
    rows = np.arange(len(labels))
    p_y = probs[rows, labels]
    rest = probs.sum(axis=1) - p_y
    denom = np.maximum(rest, REJECT_EPS)
    losses = -np.log(denom)
    onehot = np.zeros_like(probs)
    onehot[rows, labels] = 1.0
    grads = (p_y / denom)[:, None] * (onehot - probs)
    return losses, grads


def _stack(examples, kind):
    if not examples:
        raise InvalidArgument("batch must be nonempty")
    xs, ys = [], []
    for ex in examples:
        ex_kind = getattr(ex, "label_kind", None)
        if ex_kind != kind:
            raise InvalidArgument(f"expected {kind} examples, got {ex_kind}")
        if kind == COMPLEMENTARY:
            xs.append(ex.input)
            ys.append(ex.complementary_label)
        else:
            xs.append(ex.input)
            ys.append(ex.label)
    return np.stack(xs), np.asarray(ys, dtype=np.int64)


def risk_and_gradients(model: MlpClassifier, id_x, id_y, ood_x=None, ood_y=None,
                       need_grad: bool = True) -> tuple[float, Gradients | None]:
    """Summed NLL over the ID rows plus summed rejection loss over the OOD rows.

    With ``ood_x`` omitted this is the pretraining risk. Both training phases
    and :func:`generic_empirical_risk` go through here.
    """
    has_ood = ood_x is not None and len(ood_x) > 0
    x = np.concatenate([id_x, ood_x]) if has_ood else np.asarray(id_x)
    trace = forward(model, x)
    n_id = len(id_y)
    loss_id, g_id = nll_terms(trace.probabilities[:n_id], np.asarray(id_y))
    total = float(loss_id.sum())
    grads = [g_id]
    if has_ood:
        loss_o, g_o = rejection_terms(trace.probabilities[n_id:], np.asarray(ood_y))
        total += float(loss_o.sum())
        grads.append(g_o)
    if not need_grad:
        return total, None
    return total, backward(model, trace, np.concatenate(grads))


def generic_empirical_risk(model: MlpClassifier, id_batch, ood_batch) -> float:
    """Sum of NLL over ``id_batch`` and rejection loss over ``ood_batch``."""
    if not ood_batch:
        raise InvalidArgument("OOD batch is empty; use pretrain_risk for ID-only batches")
    id_x, id_y = _stack(id_batch, GROUND_TRUTH)
    ood_x, ood_y = _stack(ood_batch, COMPLEMENTARY)
    return risk_and_gradients(model, id_x, id_y, ood_x, ood_y, need_grad=False)[0]


def pretrain_risk(model: MlpClassifier, id_batch: list[LabeledExample]) -> float:
    id_x, id_y = _stack(id_batch, GROUND_TRUTH)
    return risk_and_gradients(model, id_x, id_y, need_grad=False)[0]


# --------------------------------------------------------------------------
# Mutual-information diagnostics on small discrete joints
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class DiscreteJoint:
    table: np.ndarray

    def __post_init__(self):
        t = np.asarray(self.table, dtype=np.float64)
        if t.ndim != 2 or np.any(t < 0) or not np.all(np.isfinite(t)):
            raise InvalidArgument("joint table must be a nonnegative |X| x K matrix")
        if abs(t.sum() - 1.0) > 1e-12:
            raise InvalidArgument(f"joint table sums to {t.sum()!r}, not 1")
        object.__setattr__(self, "table", t)

    @property
    def marginal_x(self) -> np.ndarray:
        return self.table.sum(axis=1)

    @property
    def marginal_y(self) -> np.ndarray:
        return self.table.sum(axis=0)

    def conditional(self) -> np.ndarray:
        """P(y|x); rows with zero mass are filled uniformly."""
        px = self.marginal_x[:, None]
        k = self.table.shape[1]
        with np.errstate(invalid="ignore", divide="ignore"):
            return np.where(px > 0, self.table / np.where(px > 0, px, 1.0), 1.0 / k)


def _check_conditional(q, shape):
    q = np.asarray(q, dtype=np.float64)
    if q.shape != shape or np.any(q < 0) or not np.allclose(q.sum(axis=1), 1.0, atol=1e-9):
        raise InvalidArgument("q must hold one valid distribution per x")
    return q


def exact_mutual_information(joint: DiscreteJoint) -> float:
    t = joint.table
    outer = joint.marginal_x[:, None] * joint.marginal_y[None, :]
    mask = t > 0
    return max(float(np.sum(t[mask] * np.log(t[mask] / outer[mask]))), 0.0)


def entropy(p) -> float:
    p = np.asarray(p, dtype=np.float64)
    p = p[p > 0]
    return float(-np.sum(p * np.log(p)))


def mi_lower_bound_id(joint: DiscreteJoint, q) -> float:
    """``E_P[log q(y|x)] + H(P(y))``."""
    q = _check_conditional(q, joint.table.shape)
    t = joint.table
    mask = t > 0
    return float(np.sum(t[mask] * np.log(np.maximum(q[mask], BOUND_EPS)))) + entropy(joint.marginal_y)


def mi_upper_bound_ood(joint_ood: DiscreteJoint, marginal_id_y, q) -> float:
    """``-E_PO[log(1 - q(y|x))] + sum_y PO(y) / PI(y)``."""
    pi = np.asarray(marginal_id_y, dtype=np.float64)
    if pi.shape != (joint_ood.table.shape[1],) or np.any(pi <= 0):
        raise InvalidArgument("ID label marginal must be strictly positive on every class")
    q = _check_conditional(q, joint_ood.table.shape)
    t = joint_ood.table
    mask = t > 0
    reject = -float(np.sum(t[mask] * np.log(np.maximum(1.0 - q[mask], BOUND_EPS))))
    return reject + float(np.sum(joint_ood.marginal_y / pi))
