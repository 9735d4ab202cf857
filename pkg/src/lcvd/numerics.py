"""Random streams and stable softmax primitives shared by every module.

The generator is numpy's Philox4x64 counter-based bit generator keyed by
``(seed, stream_id)``. Distinct keys give disjoint streams, so substreams can
be handed to independent consumers without coordination.
"""

from __future__ import annotations

import numpy as np

GENERATOR_NAME = "philox4x64-10"
GENERATOR_VERSION = 1

_U64 = (1 << 64) - 1


class InvalidArgument(ValueError):
    """Raised when an operation receives arguments outside its contract."""


class Rng:
    """Deterministic random stream identified by ``(seed, stream_id)``.

    Instances are not meant to be shared between concurrent users; call
    :meth:`substream` to derive an independent stream instead.
    """

    def __init__(self, seed: int, stream_id: int = 0):
        if seed < 0 or stream_id < 0:
            raise InvalidArgument("seed and stream_id must be nonnegative")
        self.seed = int(seed) & _U64
        self.stream_id = int(stream_id) & _U64
        bitgen = np.random.Philox(key=np.array([self.seed, self.stream_id], dtype=np.uint64))
        self.gen = np.random.Generator(bitgen)

    def substream(self, stream_id: int) -> "Rng":
        # Mix the parent stream id in so nested derivations do not collide.
        mixed = (self.stream_id * 0x9E3779B97F4A7C15 + stream_id + 1) & _U64
        return Rng(self.seed, mixed)

    def normal(self, size=None) -> np.ndarray:
        return self.gen.standard_normal(size)

    def uniform(self, low=0.0, high=1.0, size=None):
        return self.gen.uniform(low, high, size)

    def integers(self, low, high=None, size=None):
        return self.gen.integers(low, high, size)

    def choice(self, n: int, size: int, replace: bool = False) -> np.ndarray:
        return self.gen.choice(n, size=size, replace=replace)

    def permutation(self, n: int) -> np.ndarray:
        return self.gen.permutation(n)

    def __repr__(self):
        return f"Rng(seed={self.seed}, stream_id={self.stream_id})"


def _check_logits(logits, temperature):
    z = np.asarray(logits, dtype=np.float64)
    if z.size == 0:
        raise InvalidArgument("logits must be nonempty")
    if not np.all(np.isfinite(z)):
        raise InvalidArgument("logits must be finite")
    if not (np.isfinite(temperature) and temperature > 0):
        raise InvalidArgument(f"temperature must be positive, got {temperature}")
    return z


def softmax(logits, temperature: float = 1.0) -> np.ndarray:
    """Softmax over the last axis of ``logits / temperature``.

    Accepts a single vector or a batch (rows are samples).
    """
    z = _check_logits(logits, temperature) / temperature
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def log_softmax(logits, temperature: float = 1.0) -> np.ndarray:
    z = _check_logits(logits, temperature) / temperature
    z = z - z.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def log_sum_exp(logits, temperature: float = 1.0):
    """``T * log(sum_k exp(l_k / T))`` over the last axis, max-shifted."""
    z = _check_logits(logits, temperature)
    m = z.max(axis=-1, keepdims=True)
    s = np.exp((z - m) / temperature).sum(axis=-1, keepdims=True)
    out = (m + temperature * np.log(s))[..., 0]
    return float(out) if out.ndim == 0 else out


def require_finite(arr, what: str = "array") -> np.ndarray:
    arr = np.asarray(arr, dtype=np.float64)
    if not np.all(np.isfinite(arr)):
        raise InvalidArgument(f"{what} contains non-finite values")
    return arr
