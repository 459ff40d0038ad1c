"""Datasets: CIFAR binary reader, synthetic Gaussian blobs, normalization and batching."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

CIFAR_PIXELS = 3 * 32 * 32
CIFAR_FILES = {
    10: {"train": [f"data_batch_{i}.bin" for i in range(1, 6)], "test": ["test_batch.bin"]},
    100: {"train": ["train.bin"], "test": ["test.bin"]},
}

# sub-stream tags for seeded generators
STREAM_INIT, STREAM_SHUFFLE, STREAM_AUGMENT, STREAM_DATA = 1, 2, 3, 4


class DatasetError(ValueError):
    pass


def stream(seed: int, tag: int, *keys: int) -> np.random.Generator:
    return np.random.default_rng([int(seed), tag, *map(int, keys)])


@dataclass
class Dataset:
    images: np.ndarray
    labels: np.ndarray
    classes: int
    mean: np.ndarray
    std: np.ndarray

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.labels.shape != (self.images.shape[0],):
            raise DatasetError("one label per image required")
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= self.classes):
            raise DatasetError(f"labels must lie in [0, {self.classes})")

    def __len__(self) -> int:
        return self.images.shape[0]

    def _stat_shape(self):
        return (1, -1) + (1,) * (self.images.ndim - 2)

    def denormalize(self) -> np.ndarray:
        shape = self._stat_shape()
        return self.images * self.std.reshape(shape) + self.mean.reshape(shape)

    def subset(self, count: int) -> "Dataset":
        return Dataset(self.images[:count], self.labels[:count], self.classes, self.mean, self.std)


def channel_stats(raw: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    axes = (0,) + tuple(range(2, raw.ndim))
    return raw.mean(axis=axes), raw.std(axis=axes)


def normalize(raw, labels, classes, mean=None, std=None) -> Dataset:
    """Standardize per channel; statistics default to those of ``raw`` itself."""
    raw = np.asarray(raw, dtype=np.float64)
    if mean is None or std is None:
        mean, std = channel_stats(raw)
    std = np.where(std > 0, std, 1.0)
    shape = (1, -1) + (1,) * (raw.ndim - 2)
    images = (raw - mean.reshape(shape)) / std.reshape(shape)
    return Dataset(images, labels, classes, np.asarray(mean), np.asarray(std))


def read_cifar_binary(path, variant: int = 10) -> tuple[np.ndarray, np.ndarray]:
    """Read one CIFAR binary file into raw uint8 images ``(N, 3, 32, 32)`` and labels."""
    if variant not in CIFAR_FILES:
        raise DatasetError(f"CIFAR variant must be 10 or 100, got {variant}")
    label_bytes = 1 if variant == 10 else 2
    record = label_bytes + CIFAR_PIXELS
    buf = np.fromfile(path, dtype=np.uint8)
    if buf.size == 0 or buf.size % record:
        raise DatasetError(f"{path}: size {buf.size} is not a multiple of the {record}-byte record")
    recs = buf.reshape(-1, record)
    # CIFAR-100 records hold (coarse, fine); the fine label is used
    labels = recs[:, label_bytes - 1].astype(np.int64)
    if labels.max() >= variant:
        raise DatasetError(f"{path}: label {labels.max()} out of range for CIFAR-{variant}")
    images = recs[:, label_bytes:].reshape(-1, 3, 32, 32)
    return images, labels


def write_cifar_binary(path, images, labels, variant: int = 10, coarse=None) -> None:
    images = np.asarray(images, dtype=np.uint8).reshape(len(labels), CIFAR_PIXELS)
    label_cols = [np.asarray(labels, dtype=np.uint8)[:, None]]
    if variant == 100:
        coarse = np.zeros(len(labels), np.uint8) if coarse is None else np.asarray(coarse, np.uint8)
        label_cols.insert(0, coarse[:, None])
    np.concatenate(label_cols + [images], axis=1).tofile(path)


def load_cifar_raw(path, variant: int = 10, split: str = "train"):
    root = Path(path)
    parts = []
    for name in CIFAR_FILES[variant][split]:
        f = root / name
        if not f.exists():
            raise FileNotFoundError(f"missing CIFAR-{variant} file {f}")
        parts.append(read_cifar_binary(f, variant))
    return np.concatenate([p[0] for p in parts]), np.concatenate([p[1] for p in parts])


def load_cifar(path, variant: int = 10, split: str = "train", stats=None) -> Dataset:
    """Load a CIFAR split, scale pixels to [0, 1] and standardize per channel.

    Standardization uses the training split's statistics unless ``stats``
    (``(mean, std)``) is given.
    """
    images, labels = load_cifar_raw(path, variant, split)
    raw = images.astype(np.float64) / 255.0
    if stats is None:
        stats = channel_stats(raw) if split == "train" else channel_stats(
            load_cifar_raw(path, variant, "train")[0].astype(np.float64) / 255.0
        )
    return normalize(raw, labels, variant, *stats)


def synthetic_classification(classes: int, count: int, shape, seed: int,
                             separation: float = 8.0, split: str = "train") -> Dataset:
    """Gaussian blobs with unit noise and class means ``separation`` apart.

    Class means lie along orthonormal directions (or on a circle when the
    dimension is smaller than the class count), so every pair of means is
    at least ``separation`` noise standard deviations apart. The mean
    directions depend only on ``seed``; ``split`` selects an independent
    noise/label stream.
    """
    if classes < 2:
        raise DatasetError("need at least two classes")
    shape = (int(shape),) if np.isscalar(shape) else tuple(int(d) for d in shape)
    dim = int(np.prod(shape))
    rng_means = stream(seed, STREAM_DATA, 0)
    if dim >= classes:
        q, _ = np.linalg.qr(rng_means.standard_normal((dim, classes)))
        means = q.T * (separation / np.sqrt(2.0))
    elif dim >= 2:
        angles = 2 * np.pi * np.arange(classes) / classes
        radius = separation / (2 * np.sin(np.pi / classes))
        means = np.zeros((classes, dim))
        means[:, 0], means[:, 1] = radius * np.cos(angles), radius * np.sin(angles)
    else:
        means = (np.arange(classes) * separation)[:, None]
    rng = stream(seed, STREAM_DATA, 1 if split == "train" else 2)
    labels = rng.integers(0, classes, size=count)
    samples = means[labels] + rng.standard_normal((count, dim))
    images = samples.reshape((count, *shape))
    channels = shape[0] if len(shape) > 1 else dim
    return Dataset(images, labels, classes, np.zeros(channels), np.ones(channels))


def flip_horizontal(images: np.ndarray) -> np.ndarray:
    return images[..., ::-1]


@dataclass
class BatchPlan:
    batch_size: int = 128
    seed: int = 0
    shuffle: bool = True
    flip_prob: float = 0.0

    def __post_init__(self):
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")


def batches(dataset: Dataset, plan: BatchPlan, epoch: int):
    """Yield ``(images, labels)`` for one epoch; deterministic in ``(seed, epoch)``."""
    n = len(dataset)
    order = stream(plan.seed, STREAM_SHUFFLE, epoch).permutation(n) if plan.shuffle else np.arange(n)
    flips = None
    if plan.flip_prob > 0:
        # one draw per source index, so a sample's flip does not depend on batch order
        flips = stream(plan.seed, STREAM_AUGMENT, epoch).random(n) < plan.flip_prob
    for start in range(0, n, plan.batch_size):
        idx = order[start : start + plan.batch_size]
        images = dataset.images[idx]
        if flips is not None:
            f = flips[idx]
            if f.any():
                images = images.copy()
                images[f] = flip_horizontal(images[f])
        yield images, dataset.labels[idx]
