"""Synthetic ID/OOD datasets, IDX/CSV ingestion, and feature normalization."""

from __future__ import annotations

import csv
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .numerics import InvalidArgument, Rng

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801

GROUND_TRUTH = "ground-truth"
COMPLEMENTARY = "complementary"


class FormatError(ValueError):
    """A data or checkpoint file does not match its declared format."""


@dataclass(frozen=True)
class Dataset:
    inputs: np.ndarray
    labels: np.ndarray
    num_classes: int
    name: str
    # OOD sets carry placeholder labels that must not be used for classification.
    labels_usable: bool = True

    def __post_init__(self):
        x = np.asarray(self.inputs, dtype=np.float64)
        if x.ndim == 1:
            x = x[:, None]
        y = np.asarray(self.labels, dtype=np.int64)
        if x.ndim != 2 or x.shape[0] < 1:
            raise InvalidArgument("dataset needs a nonempty N x D input matrix")
        if y.shape != (x.shape[0],):
            raise InvalidArgument("labels must have one entry per input row")
        if self.num_classes < 1:
            raise InvalidArgument("num_classes must be >= 1")
        if y.min() < 0 or y.max() >= self.num_classes:
            raise InvalidArgument("label outside [0, K)")
        if not np.all(np.isfinite(x)):
            raise InvalidArgument("inputs must be finite")
        x.setflags(write=False)
        y.setflags(write=False)
        object.__setattr__(self, "inputs", x)
        object.__setattr__(self, "labels", y)

    def __len__(self):
        return self.inputs.shape[0]

    @property
    def dim(self) -> int:
        return self.inputs.shape[1]

    def class_counts(self) -> np.ndarray:
        return np.bincount(self.labels, minlength=self.num_classes)


@dataclass(frozen=True)
class LabeledExample:
    input: np.ndarray
    label: int
    label_kind: str = GROUND_TRUTH


@dataclass(frozen=True)
class NormStats:
    mean: np.ndarray
    std: np.ndarray
    std_floor: float = field(default=1e-8)


def circle_means(num_classes: int, radius: float = 2.0) -> np.ndarray:
    angles = 2 * np.pi * np.arange(num_classes) / num_classes
    return radius * np.stack([np.cos(angles), np.sin(angles)], axis=1)


def gen_gaussian_mixture(K, dim, n_per_class, class_means, sigma, rng: Rng, name="gaussian-mixture"):
    means = np.asarray(class_means, dtype=np.float64)
    if K < 2 or dim < 1 or n_per_class < 1:
        raise InvalidArgument("need K >= 2, dim >= 1, n_per_class >= 1")
    if means.shape != (K, dim):
        raise InvalidArgument(f"class_means must be {K}x{dim}, got {means.shape}")
    if not sigma > 0:
        raise InvalidArgument("sigma must be positive")
    labels = np.repeat(np.arange(K), n_per_class)
    noise = rng.normal((K * n_per_class, dim))
    return Dataset(means[labels] + sigma * noise, labels, K, name)


def _ood(inputs, num_classes, name):
    return Dataset(inputs, np.zeros(len(inputs), dtype=np.int64), num_classes, name, labels_usable=False)


def gen_ood_uniform(n, dim, low, high, rng: Rng, num_classes=1):
    if n < 1 or dim < 1 or not low < high:
        raise InvalidArgument("need n >= 1, dim >= 1, low < high")
    return _ood(rng.uniform(low, high, (n, dim)), num_classes, f"uniform[{low},{high}]")


def gen_ood_ring(n, inner_radius, outer_radius, rng: Rng, dim=2, num_classes=1):
    """Points uniform in area on the annulus ``inner <= |x| <= outer``."""
    if dim != 2:
        raise InvalidArgument("ring OOD set is only defined in 2-D")
    if n < 1 or not 0 < inner_radius < outer_radius:
        raise InvalidArgument("need n >= 1 and 0 < inner < outer")
    u = rng.uniform(0.0, 1.0, n)
    r = np.sqrt(inner_radius**2 + u * (outer_radius**2 - inner_radius**2))
    # Guard the closed interval against rounding in sqrt.
    r = np.clip(r, inner_radius, outer_radius)
    theta = rng.uniform(0.0, 2 * np.pi, n)
    pts = np.stack([r * np.cos(theta), r * np.sin(theta)], axis=1)
    return _ood(pts, num_classes, f"ring[{inner_radius},{outer_radius}]")


def gen_ood_shifted(source: Dataset, offset, rng: Rng | None = None):
    # rng is accepted for a uniform generator signature; the shift is deterministic.
    offset = np.asarray(offset, dtype=np.float64)
    if offset.shape != (source.dim,):
        raise InvalidArgument(f"offset must have length {source.dim}")
    return _ood(source.inputs + offset, source.num_classes, f"shifted({source.name})")


def load_idx(images_path, labels_path, num_classes: int | None = None) -> Dataset:
    images = Path(images_path).read_bytes()
    labels = Path(labels_path).read_bytes()
    if len(images) < 16:
        raise FormatError(f"{images_path}: truncated header at byte {len(images)}")
    magic, n, rows, cols = struct.unpack(">IIII", images[:16])
    if magic != IDX_IMAGES_MAGIC:
        raise FormatError(f"{images_path}: bad magic 0x{magic:08x} at byte 0")
    need = 16 + n * rows * cols
    if len(images) < need:
        raise FormatError(f"{images_path}: truncated pixel data at byte {len(images)}, expected {need}")
    if len(labels) < 8:
        raise FormatError(f"{labels_path}: truncated header at byte {len(labels)}")
    lmagic, ln = struct.unpack(">II", labels[:8])
    if lmagic != IDX_LABELS_MAGIC:
        raise FormatError(f"{labels_path}: bad magic 0x{lmagic:08x} at byte 0")
    if ln != n:
        raise FormatError(f"{labels_path}: {ln} labels for {n} images (byte 4)")
    if len(labels) < 8 + n:
        raise FormatError(f"{labels_path}: truncated label data at byte {len(labels)}, expected {8 + n}")
    pixels = np.frombuffer(images, dtype=np.uint8, count=n * rows * cols, offset=16)
    y = np.frombuffer(labels, dtype=np.uint8, count=n, offset=8).astype(np.int64)
    k = num_classes if num_classes is not None else int(y.max()) + 1
    bad = np.flatnonzero(y >= k)
    if bad.size:
        raise FormatError(f"{labels_path}: label {y[bad[0]]} >= K={k} at byte {8 + bad[0]}")
    x = pixels.reshape(n, rows * cols).astype(np.float64) / 255.0
    return Dataset(x, y, k, Path(images_path).stem)


def load_csv(path, num_classes: int | None = None) -> Dataset:
    path = Path(path)
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if not header or header[0] != "label" or any(h != f"f{i}" for i, h in enumerate(header[1:])):
            raise FormatError(f"{path}: line 1: header must be label,f0,f1,...")
        rows, labels = [], []
        for lineno, rec in enumerate(reader, start=2):
            if not rec:
                continue
            if len(rec) != len(header):
                raise FormatError(f"{path}: line {lineno}: expected {len(header)} fields, got {len(rec)}")
            try:
                labels.append(int(rec[0]))
                rows.append([float(v) for v in rec[1:]])
            except ValueError as exc:
                raise FormatError(f"{path}: line {lineno}: {exc}") from None
    if not rows:
        raise FormatError(f"{path}: no samples")
    y = np.array(labels, dtype=np.int64)
    k = num_classes if num_classes is not None else int(y.max()) + 1
    bad = np.flatnonzero((y >= k) | (y < 0))
    if bad.size:
        raise FormatError(f"{path}: line {bad[0] + 2}: label {y[bad[0]]} outside [0, {k})")
    return Dataset(np.array(rows, dtype=np.float64), y, k, path.stem)


def write_csv(dataset: Dataset, path) -> None:
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["label"] + [f"f{i}" for i in range(dataset.dim)])
        for label, row in zip(dataset.labels, dataset.inputs):
            w.writerow([int(label)] + [repr(float(v)) for v in row])


def normalize_fit(train: Dataset, std_floor: float = 1e-8) -> NormStats:
    mean = train.inputs.mean(axis=0)
    # Summation can round the mean of a constant column away from the constant.
    const = np.ptp(train.inputs, axis=0) == 0
    mean = np.where(const, train.inputs[0], mean)
    std = np.maximum(train.inputs.std(axis=0), std_floor)
    return NormStats(mean, std, std_floor)


def normalize_apply(stats: NormStats, d: Dataset) -> Dataset:
    x = (d.inputs - stats.mean) / stats.std
    return Dataset(x, d.labels, d.num_classes, d.name, d.labels_usable)
