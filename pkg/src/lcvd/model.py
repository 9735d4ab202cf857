"""Fully connected ReLU classifier with explicit forward trace and backprop.

Weights are stored per layer as ``(out, in)`` matrices so that a layer maps
``a -> W @ a + b``. All batch operations take inputs as rows.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .data import FormatError
from .numerics import InvalidArgument, Rng, softmax

CHECKPOINT_MAGIC = b"LCVD1"


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class MlpClassifier:
    layer_dims: list[int]
    weights: list[np.ndarray]
    biases: list[np.ndarray]

    def __post_init__(self):
        self.layer_dims = [int(d) for d in self.layer_dims]
        if len(self.layer_dims) < 2:
            raise InvalidArgument("need at least input and output dims")
        n = len(self.layer_dims) - 1
        if len(self.weights) != n or len(self.biases) != n:
            raise InvalidArgument("one weight matrix and bias per layer")
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            shape = (self.layer_dims[i + 1], self.layer_dims[i])
            if w.shape != shape or b.shape != (shape[0],):
                raise InvalidArgument(f"layer {i}: expected weight {shape}, got {w.shape}")

    @classmethod
    def init(cls, layer_dims, rng: Rng, output_gain: float = 1.0) -> "MlpClassifier":
        """He-normal weights, zero biases; the output layer is scaled by ``output_gain``.

        ``output_gain=0`` starts from exactly uniform predictions.
        """
        ws, bs = [], []
        for fan_in, fan_out in zip(layer_dims[:-1], layer_dims[1:]):
            ws.append(rng.normal((fan_out, fan_in)) * np.sqrt(2.0 / fan_in))
            bs.append(np.zeros(fan_out))
        ws[-1] = ws[-1] * output_gain
        return cls(list(layer_dims), ws, bs)

    @classmethod
    def zeros(cls, layer_dims) -> "MlpClassifier":
        ws = [np.zeros((o, i)) for i, o in zip(layer_dims[:-1], layer_dims[1:])]
        return cls(list(layer_dims), ws, [np.zeros(o) for o in layer_dims[1:]])

    @property
    def input_dim(self) -> int:
        return self.layer_dims[0]

    @property
    def num_classes(self) -> int:
        return self.layer_dims[-1]

    @property
    def num_layers(self) -> int:
        return len(self.weights)

    def copy(self) -> "MlpClassifier":
        return MlpClassifier(list(self.layer_dims), [w.copy() for w in self.weights],
                             [b.copy() for b in self.biases])

    def parameters(self) -> list[np.ndarray]:
        out = []
        for w, b in zip(self.weights, self.biases):
            out += [w, b]
        return out

    def logits(self, x) -> np.ndarray:
        return forward(self, x).logits


@dataclass
class ForwardTrace:
    inputs: np.ndarray
    pre_activations: list[np.ndarray]
    activations: list[np.ndarray]
    logits: np.ndarray
    probabilities: np.ndarray
    layer_dims: tuple = field(default=())
    single: bool = False

    @property
    def penultimate_features(self) -> np.ndarray:
        return self.activations[-1]


@dataclass
class Gradients:
    weights: list[np.ndarray]
    biases: list[np.ndarray]
    input_gradient: np.ndarray

    def scaled(self, c: float) -> "Gradients":
        return Gradients([c * w for w in self.weights], [c * b for b in self.biases], c * self.input_gradient)


def forward(model: MlpClassifier, x) -> ForwardTrace:
    """Run ``x`` (a D-vector or an N x D batch) through the network.

    ``activations[0]`` is the input; ``activations[-1]`` is the penultimate
    (last hidden) layer, or the input itself for a single-layer model.
    """
    a = np.asarray(x, dtype=np.float64)
    single = a.ndim == 1
    if single:
        a = a[None, :]
    if a.ndim != 2 or a.shape[1] != model.input_dim:
        raise InvalidArgument(f"input dim {a.shape[-1]} does not match model dim {model.input_dim}")
    if not np.all(np.isfinite(a)):
        raise InvalidArgument("input must be finite")
    pre, acts = [], [a]
    with np.errstate(over="ignore", invalid="ignore"):
        for i, (w, b) in enumerate(zip(model.weights, model.biases)):
            z = acts[-1] @ w.T + b
            pre.append(z)
            if i < model.num_layers - 1:
                acts.append(np.maximum(z, 0.0))
    logits = pre[-1]
    if not np.all(np.isfinite(logits)):
        raise FloatingPointError("logits overflowed")
    probs = softmax(logits)
    if single:
        return ForwardTrace(a[0], [p[0] for p in pre], [h[0] for h in acts], logits[0], probs[0],
                            tuple(model.layer_dims), True)
    return ForwardTrace(a, pre, acts, logits, probs, tuple(model.layer_dims), False)


def backward(model: MlpClassifier, trace: ForwardTrace, dloss_dlogits) -> Gradients:
    """Chain rule from logits back to every parameter and the input.

    For a batched trace the parameter gradients are summed over rows and the
    input gradient keeps one row per sample.
    """
    if trace.layer_dims != tuple(model.layer_dims):
        raise InvalidArgument("trace was produced by a model with different layer dims")
    g = np.asarray(dloss_dlogits, dtype=np.float64)
    acts = trace.activations
    pre = trace.pre_activations
    if trace.single:
        g = g[None, :]
        acts = [a[None, :] for a in acts]
        pre = [p[None, :] for p in pre]
    if g.shape != pre[-1].shape:
        raise InvalidArgument(f"dloss_dlogits shape {g.shape} does not match logits {pre[-1].shape}")
    gw = [None] * model.num_layers
    gb = [None] * model.num_layers
    for i in range(model.num_layers - 1, -1, -1):
        gw[i] = g.T @ acts[i]
        gb[i] = g.sum(axis=0)
        g = g @ model.weights[i]
        if i > 0:
            # ReLU subgradient is 0 at exactly 0.
            g = g * (pre[i - 1] > 0)
    gx = g[0] if trace.single else g
    return Gradients(gw, gb, gx)


def sgd_step(model: MlpClassifier, grads: Gradients, lr: float) -> MlpClassifier:
    """Descend in place: ``theta <- theta - lr * grad``; returns the model."""
    if not lr > 0:
        raise InvalidArgument("learning rate must be positive")
    with np.errstate(over="ignore", invalid="ignore"):
        new_w = [w - lr * g for w, g in zip(model.weights, grads.weights)]
        new_b = [b - lr * g for b, g in zip(model.biases, grads.biases)]
    if not all(np.all(np.isfinite(p)) for p in new_w + new_b):
        raise TrainingDiverged("non-finite parameters after SGD step")
    model.weights, model.biases = new_w, new_b
    return model


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 128
    lr: float = 0.1
    epochs: int = 40
    milestones: tuple = (20, 30)
    decay: float = 0.1
    seed: int = 0

    def __post_init__(self):
        if self.batch_size < 2 or self.batch_size % 2:
            raise InvalidArgument("batch size must be even and >= 2")
        if not self.lr > 0:
            raise InvalidArgument("learning rate must be positive")

    @classmethod
    def paper_schedule(cls, seed=0):
        return cls(batch_size=128, lr=0.1, epochs=200, milestones=(100, 150), decay=0.1, seed=seed)

    @property
    def final_lr(self) -> float:
        return _decayed(self.lr, self.decay, sum(m < self.epochs for m in self.milestones))


def lr_at_epoch(config: TrainConfig, epoch: int) -> float:
    if not 0 <= epoch < config.epochs:
        raise InvalidArgument(f"epoch {epoch} outside [0, {config.epochs})")
    return _decayed(config.lr, config.decay, sum(epoch >= m for m in config.milestones))


def _decayed(lr, decay, n):
    # Dividing by the integral factor keeps 0.1 / 10**2 == 0.001 exact.
    factor = 1.0 / decay
    if factor == round(factor):
        return lr / factor**n
    return lr * decay**n


def save_checkpoint(model: MlpClassifier, path) -> None:
    """Write ``LCVD1 | u32 n_dims | u32 dims... | f64 LE weights, biases per layer``."""
    parts = [CHECKPOINT_MAGIC, struct.pack("<I", len(model.layer_dims))]
    parts.append(struct.pack(f"<{len(model.layer_dims)}I", *model.layer_dims))
    for w, b in zip(model.weights, model.biases):
        parts.append(np.ascontiguousarray(w, dtype="<f8").tobytes())
        parts.append(np.ascontiguousarray(b, dtype="<f8").tobytes())
    Path(path).write_bytes(b"".join(parts))


def load_checkpoint(path) -> MlpClassifier:
    raw = Path(path).read_bytes()
    if raw[:5] != CHECKPOINT_MAGIC:
        raise FormatError(f"{path}: bad checkpoint magic at byte 0")
    if len(raw) < 9:
        raise FormatError(f"{path}: truncated header")
    (n,) = struct.unpack_from("<I", raw, 5)
    off = 9 + 4 * n
    if n < 2 or len(raw) < off:
        raise FormatError(f"{path}: truncated or invalid layer dims")
    dims = list(struct.unpack_from(f"<{n}I", raw, 9))
    expected = off + 8 * sum(o * i + o for i, o in zip(dims[:-1], dims[1:]))
    if len(raw) != expected:
        raise FormatError(f"{path}: expected {expected} bytes, found {len(raw)}")
    ws, bs = [], []
    for i, o in zip(dims[:-1], dims[1:]):
        ws.append(np.frombuffer(raw, dtype="<f8", count=o * i, offset=off).reshape(o, i).astype(np.float64))
        off += 8 * o * i
        bs.append(np.frombuffer(raw, dtype="<f8", count=o, offset=off).astype(np.float64))
        off += 8 * o
    return MlpClassifier(dims, ws, bs)
