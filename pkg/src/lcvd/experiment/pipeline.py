"""Training, finetuning and evaluation building blocks used by the CLI commands."""

from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass, field

import numpy as np

from ..data import (Dataset, NormStats, circle_means, gen_gaussian_mixture, gen_ood_ring, gen_ood_shifted,
                    gen_ood_uniform, load_csv, normalize_apply, normalize_fit)
from ..detectors import FittedDetector
from ..metrics import ScoreSet, all_metrics
from ..model import MlpClassifier, TrainingDiverged, backward, forward, lr_at_epoch, sgd_step
from ..numerics import InvalidArgument, Rng, softmax
from ..risk import nll_terms, rejection_terms, risk_and_gradients
from ..vicinity import OodArrays, VicinityConfig, draw_finetune_arrays, make_ood_pool
from .config import ConfigError, ExperimentConfig

log = logging.getLogger(__name__)

# Fixed substream ids; changing one changes every downstream number.
STREAM_TRAIN_DATA = 1
STREAM_TEST_DATA = 2
STREAM_RING = 3
STREAM_UNIFORM = 4
STREAM_INIT = 10
STREAM_PRETRAIN = 11
STREAM_FINETUNE = 12
STREAM_RETRAIN_INIT = 13
STREAM_RETRAIN = 14
STREAM_POOL = 15
STREAM_THEOREM = 16

ABLATION_VARIANTS = ("lcvd", "input-gaussian", "input-rotation", "label-groundtruth",
                     "label-smooth", "label-temperature", "label-uniform")
SMOOTH_EPS = 0.1
LABEL_TEMPERATURE = 2.0


@dataclass
class Benchmark:
    train: Dataset
    test: Dataset
    ood: dict
    norm: NormStats
    raw_train: Dataset


def build_benchmark(cfg: ExperimentConfig) -> Benchmark:
    """ID train/test and the requested OOD sets, all normalized with train statistics."""
    rng = Rng(cfg.seed)
    if cfg.train_csv:
        raw_train = load_csv(cfg.train_csv)
        if not cfg.test_csv:
            raise ConfigError("test_csv is required alongside train_csv")
        raw_test = load_csv(cfg.test_csv, num_classes=raw_train.num_classes)
    else:
        means = _class_means(cfg)
        raw_train = gen_gaussian_mixture(cfg.num_classes, cfg.dim, cfg.n_train_per_class, means, cfg.sigma,
                                         rng.substream(STREAM_TRAIN_DATA), name="train")
        raw_test = gen_gaussian_mixture(cfg.num_classes, cfg.dim, cfg.n_test_per_class, means, cfg.sigma,
                                        rng.substream(STREAM_TEST_DATA), name="test")
    ood = {}
    for name in cfg.ood_sets:
        if name == "ring":
            ood[name] = gen_ood_ring(cfg.n_ring, cfg.ring_inner, cfg.ring_outer, rng.substream(STREAM_RING),
                                     dim=raw_train.dim, num_classes=raw_train.num_classes)
        elif name == "shifted":
            ood[name] = gen_ood_shifted(raw_test, cfg.shift_offset)
        elif name == "uniform":
            ood[name] = gen_ood_uniform(cfg.n_uniform, raw_train.dim, cfg.uniform_low, cfg.uniform_high,
                                        rng.substream(STREAM_UNIFORM), num_classes=raw_train.num_classes)
    norm = normalize_fit(raw_train)
    return Benchmark(normalize_apply(norm, raw_train), normalize_apply(norm, raw_test),
                     {k: normalize_apply(norm, v) for k, v in ood.items()}, norm, raw_train)


def _class_means(cfg: ExperimentConfig) -> np.ndarray:
    if cfg.dim == 2:
        return circle_means(cfg.num_classes, cfg.class_radius)
    # Higher dims: class k sits on axis (k mod dim), alternating sign.
    means = np.zeros((cfg.num_classes, cfg.dim))
    for k in range(cfg.num_classes):
        means[k, k % cfg.dim] = cfg.class_radius * (1 if (k // cfg.dim) % 2 == 0 else -1)
    return means


def layer_dims(cfg: ExperimentConfig, bench: Benchmark) -> list[int]:
    return [bench.train.dim, *cfg.hidden, bench.train.num_classes]


def accuracy(model: MlpClassifier, d: Dataset) -> float:
    return float(np.mean(forward(model, d.inputs).logits.argmax(axis=1) == d.labels))


def _guard(value: float, what: str) -> float:
    if not math.isfinite(value):
        raise TrainingDiverged(f"non-finite {what}")
    return value


def _risk(model, *args):
    try:
        return risk_and_gradients(model, *args)
    except (InvalidArgument, FloatingPointError) as exc:
        raise TrainingDiverged(str(exc)) from None


def pretrain(model: MlpClassifier, train: Dataset, cfg: ExperimentConfig, rng: Rng,
             test: Dataset | None = None) -> list[dict]:
    """Minibatch SGD on the ID negative log-likelihood.

    Steps use the batch-mean gradient; the curve's first row is the untrained
    model. Returns the training curve.
    """
    tcfg = cfg.train_config()
    n = len(train)
    curve = [_curve_row(0, _risk(model, train.inputs, train.labels, None, None, False)[0] / n,
                        model, train, test)]
    for epoch in range(tcfg.epochs):
        lr = lr_at_epoch(tcfg, epoch)
        perm = rng.permutation(n)
        total = 0.0
        for start in range(0, n, tcfg.batch_size):
            idx = perm[start:start + tcfg.batch_size]
            loss, grads = _risk(model, train.inputs[idx], train.labels[idx])
            total += _guard(loss, "pretraining loss")
            sgd_step(model, grads.scaled(1.0 / len(idx)), lr)
        curve.append(_curve_row(epoch + 1, total / n, model, train, test))
    return curve


def _curve_row(epoch, loss, model, train, test):
    try:
        row = {"epoch": epoch, "loss": loss, "train_acc": accuracy(model, train)}
        row["test_acc"] = accuracy(model, test) if test is not None else float("nan")
    except FloatingPointError as exc:
        raise TrainingDiverged(str(exc)) from None
    return row


def _soft_target_terms(probs, targets):
    losses = -np.sum(targets * np.log(np.maximum(probs, 1e-12)), axis=1)
    return losses, probs - targets


def _ablation_batch(variant: str, ood: OodArrays, train: Dataset, rng: Rng):
    """Replace inputs or labels of the OOD half per ablation variant.

    Returns ``(inputs, complementary_labels, soft_targets)``; exactly one of
    the last two is None.
    """
    k = train.num_classes
    anchors = ood.constituent_indices[:, 0]
    if variant == "lcvd":
        return ood.inputs, ood.complementary_labels, None
    if variant == "input-gaussian":
        # Matched per-feature moments of the training inputs.
        mu, sd = train.inputs.mean(axis=0), train.inputs.std(axis=0)
        return mu + sd * rng.normal(ood.inputs.shape), ood.complementary_labels, None
    if variant == "input-rotation":
        if train.dim != 2:
            raise ConfigError("input-rotation ablation needs 2-D inputs")
        x = train.inputs[anchors]
        return np.stack([-x[:, 1], x[:, 0]], axis=1), ood.complementary_labels, None
    onehot = np.eye(k)[train.labels[anchors]]
    if variant == "label-groundtruth":
        return ood.inputs, None, onehot
    if variant == "label-smooth":
        return ood.inputs, None, (1 - SMOOTH_EPS) * onehot + SMOOTH_EPS / k
    if variant == "label-temperature":
        return ood.inputs, None, softmax(onehot, LABEL_TEMPERATURE)
    if variant == "label-uniform":
        return ood.inputs, None, np.full((len(ood), k), 1.0 / k)
    raise ConfigError(f"unknown ablation variant {variant!r}; choose from {list(ABLATION_VARIANTS)}")


def _mixed_risk(model, id_x, id_y, x, comp, soft):
    """Risk and gradients for one finetuning batch of any variant."""
    if soft is None:
        return _risk(model, id_x, id_y, x, comp)
    tr = forward(model, np.concatenate([id_x, x]))
    n_id = len(id_y)
    l_id, g_id = nll_terms(tr.probabilities[:n_id], id_y)
    l_o, g_o = _soft_target_terms(tr.probabilities[n_id:], soft)
    return float(l_id.sum() + l_o.sum()), backward(model, tr, np.concatenate([g_id, g_o]))


@dataclass
class FinetuneResult:
    curve: list = field(default_factory=list)
    epochs_run: int = 0
    converged: bool = False


def finetune(model: MlpClassifier, train: Dataset, cfg: ExperimentConfig, rng: Rng, *,
             vicinity: VicinityConfig | None = None, variant: str = "lcvd", epochs: int | None = None,
             lr: float | None = None, lr_schedule=None, mean_gradient: bool = False,
             use_plateau: bool = True, test: Dataset | None = None, batch_hook=None) -> FinetuneResult:
    """Half-ID/half-OOD SGD on the summed generic risk until the plateau rule fires.

    One epoch is ``ceil(N / (b/2))`` batches, so each epoch draws about N ID
    samples. ``batch_hook(id_idx, ood, risk)`` sees every batch as trained on.
    """
    vic = vicinity or cfg.vicinity_config()
    vic.validate_for(train)
    b = cfg.batch_size
    epochs = cfg.finetune_epochs if epochs is None else epochs
    base_lr = cfg.effective_finetune_lr if lr is None else lr
    n_batches = math.ceil(len(train) / (b // 2))
    pool = make_ood_pool(train, cfg.ood_pool_size, vic, rng.substream(STREAM_POOL)) if cfg.ood_pool_size else None
    result = FinetuneResult()
    prev, stalls = None, 0
    for epoch in range(epochs):
        step = lr_schedule(epoch) if lr_schedule else base_lr
        total = 0.0
        for _ in range(n_batches):
            id_idx, ood = draw_finetune_arrays(train, b, vic, rng, pool)
            x, comp, soft = _ablation_batch(variant, ood, train, rng)
            risk, grads = _mixed_risk(model, train.inputs[id_idx], train.labels[id_idx], x, comp, soft)
            _guard(risk, "finetuning risk")
            if batch_hook is not None:
                batch_hook(id_idx, ood, risk)
            total += risk
            sgd_step(model, grads.scaled(1.0 / b) if mean_gradient else grads, step)
        # Per-sample figure for reporting and the plateau rule only.
        mean_risk = total / (n_batches * b)
        result.curve.append(_curve_row(epoch + 1, mean_risk, model, train, test))
        result.epochs_run = epoch + 1
        if prev is not None and prev - mean_risk < cfg.plateau_tol:
            stalls += 1
        else:
            stalls = 0
        prev = mean_risk
        if use_plateau and stalls >= cfg.plateau_patience:
            result.converged = True
            break
    return result


def fresh_model(cfg: ExperimentConfig, bench: Benchmark, stream: int = STREAM_INIT) -> MlpClassifier:
    # Zero output layer: training starts from uniform predictions (loss ln K).
    return MlpClassifier.init(layer_dims(cfg, bench), Rng(cfg.seed).substream(stream), output_gain=0.0)


def run_pretrain(cfg: ExperimentConfig, bench: Benchmark):
    model = fresh_model(cfg, bench)
    curve = pretrain(model, bench.train, cfg, Rng(cfg.seed).substream(STREAM_PRETRAIN), bench.test)
    return model, curve


def run_finetune(cfg: ExperimentConfig, bench: Benchmark, pretrained: MlpClassifier, *,
                 M: int | None = None, variant: str = "lcvd", batch_hook=None):
    model = pretrained.copy()
    res = finetune(model, bench.train, cfg, Rng(cfg.seed).substream(STREAM_FINETUNE),
                   vicinity=cfg.vicinity_config(M), variant=variant, test=bench.test, batch_hook=batch_hook)
    return model, res


def run_retrain(cfg: ExperimentConfig, bench: Benchmark):
    """Generic risk from a fresh initialization over the full pretraining schedule."""
    model = fresh_model(cfg, bench, STREAM_RETRAIN_INIT)
    tcfg = cfg.train_config()
    res = finetune(model, bench.train, cfg, Rng(cfg.seed).substream(STREAM_RETRAIN), epochs=tcfg.epochs,
                   lr_schedule=lambda e: lr_at_epoch(tcfg, e), mean_gradient=True, use_plateau=False,
                   test=bench.test)
    return model, res


METRIC_KEYS = ("auroc", "auprin", "auprout", "fpr95", "deterr")


def evaluate(model: MlpClassifier, cfg: ExperimentConfig, bench: Benchmark) -> list[dict]:
    """One row per detector x OOD set, then one ``average`` row per detector."""
    rows = []
    for kind in cfg.detectors:
        det = FittedDetector(cfg.detector_config(kind), model, bench.train)
        id_scores = det.score(bench.test.inputs)
        per_set = []
        for name, ood in bench.ood.items():
            m = all_metrics(ScoreSet(id_scores, det.score(ood.inputs)))
            per_set.append(m)
            rows.append({"detector": kind, "ood_set": name, **m})
        avg = {k: float(np.mean([m[k] for m in per_set])) for k in METRIC_KEYS}
        rows.append({"detector": kind, "ood_set": "average", **avg})
    return rows


def metric_lookup(rows, detector="msp", ood_set="average", key="auroc") -> float:
    for r in rows:
        if r["detector"] == detector and r["ood_set"] == ood_set:
            return r[key]
    raise KeyError((detector, ood_set))


class Timer:
    def __init__(self):
        self.timings = {}

    def __call__(self, name):
        timer = self

        class _Ctx:
            def __enter__(self):
                self.t0 = time.perf_counter()

            def __exit__(self, *exc):
                timer.timings[name] = time.perf_counter() - self.t0
                log.info("%s took %.2fs", name, timer.timings[name])

        return _Ctx()
