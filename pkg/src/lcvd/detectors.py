"""Post-hoc OOD scores for a trained classifier. Higher score = more in-distribution.

Every scorer accepts a single input vector (returns a float) or an N x D
batch (returns an N-vector).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .data import Dataset
from .model import MlpClassifier, backward, forward
from .numerics import InvalidArgument, log_softmax, log_sum_exp, softmax

MSP = "msp"
ODIN = "odin"
ENERGY = "energy"
MAHALANOBIS = "maha"
RECTIFIED = "ra"
GRADNORM = "gradnorm"
DETECTORS = (MSP, ODIN, ENERGY, MAHALANOBIS, RECTIFIED, GRADNORM)

KL_OUTPUT_UNIFORM = "output-uniform"
KL_UNIFORM_OUTPUT = "uniform-output"


def _out(values, x):
    return float(values[0]) if np.asarray(x).ndim == 1 else values


def _batch(x):
    a = np.asarray(x, dtype=np.float64)
    return a[None, :] if a.ndim == 1 else a


@dataclass(frozen=True)
class DetectorConfig:
    kind: str = MSP
    temperature: float = 1.0
    epsilon: float = 0.0014
    percentile: float = 90.0
    ridge: float = 1e-3
    gradnorm_order: float = 1.0
    gradnorm_kl: str = KL_OUTPUT_UNIFORM

    def __post_init__(self):
        if self.kind not in DETECTORS:
            raise InvalidArgument(f"unknown detector {self.kind!r}")
        if not self.temperature > 0:
            raise InvalidArgument("temperature must be positive")
        if self.epsilon < 0:
            raise InvalidArgument("perturbation magnitude must be nonnegative")
        if not 0 < self.percentile <= 100:
            raise InvalidArgument("percentile must be in (0, 100]")
        if not self.ridge > 0:
            raise InvalidArgument("ridge must be positive")


def score_max_softmax(model: MlpClassifier, x):
    tr = forward(model, _batch(x))
    return _out(tr.probabilities.max(axis=1), x)


def score_odin(model: MlpClassifier, x, T: float = 1000.0, eps: float = 0.0014, input_std=None):
    """Temperature-scaled max softmax after a signed-gradient step toward higher confidence.

    ``input_std`` rescales the sign step per feature, as is customary for
    inputs that were standardized after the fact.
    """
    if not T > 0 or eps < 0:
        raise InvalidArgument("need T > 0 and eps >= 0")
    xb = _batch(x)
    if eps > 0:
        tr = forward(model, xb)
        p_t = softmax(tr.logits, T)
        pred = p_t.argmax(axis=1)
        # d/dlogits of -log softmax_T(logits)[pred]
        g = p_t.copy()
        g[np.arange(len(pred)), pred] -= 1.0
        gx = backward(model, tr, g / T).input_gradient
        step = np.sign(gx)
        if input_std is not None:
            step = step / np.asarray(input_std, dtype=np.float64)
        xb = xb - eps * step
    logits = forward(model, xb).logits
    return _out(softmax(logits, T).max(axis=1), x)


def score_energy(model: MlpClassifier, x, T: float = 1.0):
    """Negative energy, ``T * logsumexp(logits / T)``."""
    logits = forward(model, _batch(x)).logits
    return _out(np.atleast_1d(log_sum_exp(logits, T)), x)


@dataclass(frozen=True)
class MahalanobisStats:
    class_means: np.ndarray
    covariance: np.ndarray
    precision: np.ndarray
    ridge: float


def fit_mahalanobis_features(features, labels, num_classes: int, ridge: float = 1e-3) -> MahalanobisStats:
    f = np.asarray(features, dtype=np.float64)
    y = np.asarray(labels)
    if not ridge > 0:
        raise InvalidArgument("ridge must be positive")
    counts = np.bincount(y, minlength=num_classes)
    if np.any(counts == 0):
        raise InvalidArgument(f"classes {np.flatnonzero(counts == 0).tolist()} absent from training data")
    means = np.stack([f[y == k].mean(axis=0) for k in range(num_classes)])
    centered = f - means[y]
    cov = centered.T @ centered / len(f)
    cov = 0.5 * (cov + cov.T) + ridge * np.eye(f.shape[1])
    try:
        prec = np.linalg.inv(cov)
    except np.linalg.LinAlgError as exc:
        raise ArithmeticError(f"covariance is singular after ridge {ridge}") from exc
    if not np.all(np.isfinite(prec)):
        raise ArithmeticError("non-finite precision matrix")
    return MahalanobisStats(means, cov, 0.5 * (prec + prec.T), ridge)


def fit_mahalanobis(model: MlpClassifier, train: Dataset, ridge: float = 1e-3) -> MahalanobisStats:
    feats = forward(model, train.inputs).penultimate_features
    return fit_mahalanobis_features(feats, train.labels, model.num_classes, ridge)


def mahalanobis_from_features(stats: MahalanobisStats, features):
    f = np.asarray(features, dtype=np.float64)
    diffs = f[:, None, :] - stats.class_means[None, :, :]
    d2 = np.einsum("nkd,de,nke->nk", diffs, stats.precision, diffs)
    return -d2.min(axis=1)


def score_mahalanobis(model: MlpClassifier, stats: MahalanobisStats, x):
    feats = forward(model, _batch(x)).penultimate_features
    return _out(mahalanobis_from_features(stats, feats), x)


def rectification_threshold(model: MlpClassifier, train: Dataset, percentile: float = 90.0) -> float:
    if not 0 < percentile <= 100:
        raise InvalidArgument("percentile must be in (0, 100]")
    feats = forward(model, train.inputs).penultimate_features
    return float(np.percentile(feats, percentile))


def score_rectified(model: MlpClassifier, x, threshold: float, T: float = 1.0):
    """Energy score with penultimate activations clipped from above at ``threshold``."""
    feats = forward(model, _batch(x)).penultimate_features
    clipped = np.minimum(feats, threshold)
    logits = clipped @ model.weights[-1].T + model.biases[-1]
    return _out(np.atleast_1d(log_sum_exp(logits, T)), x)


def kl_logit_gradient(logits, T: float = 1.0, orientation: str = KL_OUTPUT_UNIFORM):
    """Gradient of the KL divergence between softmax_T(logits) and uniform w.r.t. the logits.

    ``output-uniform`` differentiates ``KL(p || u) = sum p log p + log K``;
    ``uniform-output`` differentiates ``KL(u || p) = -mean(log p) - log K``.
    """
    z = np.atleast_2d(np.asarray(logits, dtype=np.float64))
    k = z.shape[1]
    p = softmax(z, T)
    if orientation == KL_OUTPUT_UNIFORM:
        logp = log_softmax(z, T)
        neg_h = np.sum(p * logp, axis=1, keepdims=True)
        return p * (logp - neg_h) / T
    if orientation == KL_UNIFORM_OUTPUT:
        return (p - 1.0 / k) / T
    raise InvalidArgument(f"unknown KL orientation {orientation!r}")


def kl_to_uniform(logits, T: float = 1.0, orientation: str = KL_OUTPUT_UNIFORM):
    z = np.atleast_2d(np.asarray(logits, dtype=np.float64))
    k = z.shape[1]
    p = softmax(z, T)
    logp = log_softmax(z, T)
    if orientation == KL_OUTPUT_UNIFORM:
        return np.sum(p * logp, axis=1) + np.log(k)
    return -logp.mean(axis=1) - np.log(k)


def score_gradnorm(model: MlpClassifier, x, T: float = 1.0, order: float = 1.0,
                   orientation: str = KL_OUTPUT_UNIFORM):
    """Entrywise ``order``-norm of d KL / d (final-layer weights).

    The final-layer weight gradient of sample n is ``outer(g_n, h_n)``, so its
    entrywise p-norm factorizes into ``|g_n|_p * |h_n|_p``.
    """
    tr = forward(model, _batch(x))
    g = kl_logit_gradient(tr.logits, T, orientation)
    h = tr.penultimate_features
    scores = np.linalg.norm(g, ord=order, axis=1) * np.linalg.norm(h, ord=order, axis=1)
    return _out(scores, x)


class FittedDetector:
    """A detector kind bound to its hyperparameters and any training-set statistics."""

    def __init__(self, config: DetectorConfig, model: MlpClassifier, train: Dataset | None = None,
                 input_std=None):
        self.config = config
        self.model = model
        self.input_std = input_std
        self.stats = None
        self.threshold = None
        if config.kind == MAHALANOBIS:
            self.stats = fit_mahalanobis(model, train, config.ridge)
        elif config.kind == RECTIFIED:
            self.threshold = rectification_threshold(model, train, config.percentile)

    def score(self, x):
        c, m = self.config, self.model
        if c.kind == MSP:
            return score_max_softmax(m, x)
        if c.kind == ODIN:
            return score_odin(m, x, c.temperature, c.epsilon, self.input_std)
        if c.kind == ENERGY:
            return score_energy(m, x, c.temperature)
        if c.kind == MAHALANOBIS:
            return score_mahalanobis(m, self.stats, x)
        if c.kind == RECTIFIED:
            return score_rectified(m, x, self.threshold, c.temperature)
        return score_gradnorm(m, x, c.temperature, c.gradnorm_order, c.gradnorm_kl)
