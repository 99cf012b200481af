"""Datasets: IDX loading, feature scaling to the unit ball, synthetic data, batching.

Scaling follows ``x_ij -> (x_ij - lo_j) / ((hi_j - lo_j) * sqrt(d))`` so every
feature lies in ``[0, 1/sqrt(d)]`` and every row has L2 norm at most 1.
"""
import gzip
import os
import struct
from dataclasses import dataclass

import numpy as np

IMAGES_MAGIC = 0x00000803
LABELS_MAGIC = 0x00000801

MNIST_FILES = {
    "train": ("train-images-idx3-ubyte", "train-labels-idx1-ubyte"),
    "test": ("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"),
}


class DataLoadError(ValueError):
    pass


class Dataset:
    """Features, one-hot labels and per-feature bounds.

    Reads of ``features`` and ``labels`` go through properties that bump
    ``access_count``; the private trainer snapshots the counter after
    preprocessing and checks that the training loop never moves it.
    """

    def __init__(self, features, labels, feature_bounds=None, image_shape=None, scaled=False):
        features = np.asarray(features, dtype=np.float64)
        labels = np.asarray(labels, dtype=np.float64)
        if features.ndim != 2 or labels.ndim != 2 or features.shape[0] != labels.shape[0]:
            raise ValueError("features must be (n, d) and labels (n, M) with matching n")
        if not np.all(labels.sum(axis=1) == 1) or not np.all((labels == 0) | (labels == 1)):
            raise ValueError("labels must be one-hot rows")
        self._features = features
        self._labels = labels
        self._features.setflags(write=False)
        self._labels.setflags(write=False)
        self.feature_bounds = feature_bounds
        self.image_shape = tuple(image_shape) if image_shape is not None else None
        self.scaled = scaled
        self.access_count = 0

    @property
    def features(self):
        self.access_count += 1
        return self._features

    @property
    def labels(self):
        self.access_count += 1
        return self._labels

    @property
    def n(self):
        return self._features.shape[0]

    @property
    def d(self):
        return self._features.shape[1]

    @property
    def n_classes(self):
        return self._labels.shape[1]

    @property
    def class_index(self):
        return self.labels.argmax(axis=1)

    def subset(self, idx):
        idx = np.asarray(idx)
        return Dataset(self._features[idx], self._labels[idx], self.feature_bounds, self.image_shape, self.scaled)

    def __len__(self):
        return self.n

    def __repr__(self):
        return f"Dataset(n={self.n}, d={self.d}, M={self.n_classes}, scaled={self.scaled})"


def one_hot(labels, n_classes):
    labels = np.asarray(labels, dtype=np.int64)
    out = np.zeros((labels.size, n_classes))
    out[np.arange(labels.size), labels] = 1.0
    return out


def _open(path):
    path = os.fspath(path)
    with open(path, "rb") as fh:
        head = fh.read(2)
    if head == b"\x1f\x8b":
        with gzip.open(path, "rb") as fh:
            return fh.read()
    with open(path, "rb") as fh:
        return fh.read()


def _read_idx(path, expected_magic):
    data = _open(path)
    if len(data) < 8:
        raise DataLoadError(f"{path}: truncated at offset 0 (need 8 header bytes, have {len(data)})")
    magic, = struct.unpack_from(">I", data, 0)
    if magic != expected_magic:
        raise DataLoadError(f"{path}: bad magic 0x{magic:08x} at offset 0, expected 0x{expected_magic:08x}")
    ndim = magic & 0xFF
    header = 4 + 4 * ndim
    if len(data) < header:
        raise DataLoadError(f"{path}: truncated dimension header at offset 4")
    dims = struct.unpack_from(">" + "I" * ndim, data, 4)
    count = int(np.prod(dims))
    if len(data) < header + count:
        raise DataLoadError(f"{path}: truncated payload at offset {len(data)}, "
                            f"expected {header + count} bytes")
    arr = np.frombuffer(data, dtype=np.uint8, count=count, offset=header).reshape(dims)
    return arr


def write_idx(path, array, gz=None):
    """Write a uint8 array in IDX format (gzip when the name ends in ``.gz``)."""
    array = np.asarray(array)
    if array.dtype != np.uint8:
        raise ValueError("IDX writer only supports uint8")
    magic = 0x00000800 | array.ndim
    raw = struct.pack(">I", magic) + struct.pack(">" + "I" * array.ndim, *array.shape) + array.tobytes()
    path = os.fspath(path)
    if gz is None:
        gz = path.endswith(".gz")
    if gz:
        raw = gzip.compress(raw, mtime=0)
    with open(path, "wb") as fh:
        fh.write(raw)


def load_idx(images_path, labels_path, n_classes=10):
    """Load an IDX image/label pair into an unscaled Dataset (raw 0..255 values)."""
    images = _read_idx(images_path, IMAGES_MAGIC)
    labels = _read_idx(labels_path, LABELS_MAGIC)
    if images.shape[0] != labels.shape[0]:
        raise DataLoadError(f"{labels_path}: {labels.shape[0]} labels at offset 4 but "
                            f"{images_path} has {images.shape[0]} images")
    if labels.size and labels.max() >= n_classes:
        raise DataLoadError(f"{labels_path}: label {labels.max()} out of range for {n_classes} classes")
    n = images.shape[0]
    return Dataset(images.reshape(n, -1).astype(np.float64), one_hot(labels, n_classes),
                   image_shape=images.shape[1:])


def find_split(data_dir, split):
    """Locate the image/label files for ``split`` ('train' or 'test'), gz or not."""
    out = []
    for stem in MNIST_FILES[split]:
        for name in (stem, stem + ".gz"):
            p = os.path.join(data_dir, name)
            if os.path.exists(p):
                out.append(p)
                break
        else:
            raise FileNotFoundError(os.path.join(data_dir, stem))
    return tuple(out)


def load_mnist(data_dir, split):
    return load_idx(*find_split(data_dir, split))


def fit_bounds(dataset):
    """Per-feature ``(lo, hi)`` estimated from ``dataset`` (the training split)."""
    x = dataset.features
    return np.stack([x.min(axis=0), x.max(axis=0)])


def scale_features(dataset, bounds=None):
    """Scale features into ``[0, 1/sqrt(d)]``.

    ``bounds`` defaults to the dataset's own min/max; pass the training bounds
    when scaling a test split. Values outside the bounds are clipped first, and
    constant features map to 0.
    """
    x = dataset.features
    if bounds is None:
        bounds = np.stack([x.min(axis=0), x.max(axis=0)])
    lo, hi = np.asarray(bounds[0], dtype=np.float64), np.asarray(bounds[1], dtype=np.float64)
    if np.any(hi < lo):
        raise ValueError("feature bounds need hi >= lo")
    d = x.shape[1]
    span = hi - lo
    live = span > 0
    xc = np.clip(x, lo, hi)
    scaled = np.where(live, (xc - lo) / (np.where(live, span, 1.0) * np.sqrt(d)), 0.0)
    return Dataset(scaled, dataset.labels, np.stack([lo, hi]), dataset.image_shape, scaled=True)


def synthetic_dataset(n, d, n_classes, seed, separation=1.0):
    """Class-structured Gaussian blobs, already scaled into ``[0, 1/sqrt(d)]``.

    Each class has its own random mean; labels are balanced round-robin before
    a seeded shuffle.
    """
    if min(n, d, n_classes) < 1:
        raise ValueError("n, d and n_classes must be >= 1")
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), 0x5EED]))
    labels = np.arange(n) % n_classes
    rng.shuffle(labels)
    means = rng.normal(0.0, separation, size=(n_classes, d))
    raw = means[labels] + rng.normal(0.0, 1.0, size=(n, d))
    base = Dataset(raw, one_hot(labels, n_classes))
    return scale_features(base)


@dataclass(frozen=True)
class BatchPlan:
    """Seeded shuffling into fixed-size batches; the remainder is dropped each epoch."""

    n: int
    batch_size: int
    epochs: int

    def __post_init__(self):
        if self.batch_size < 1 or self.batch_size > self.n:
            raise ValueError(f"batch size {self.batch_size} must be in [1, {self.n}]")

    @property
    def steps_per_epoch(self):
        return self.n // self.batch_size

    @property
    def total_steps(self):
        return self.steps_per_epoch * self.epochs

    def epoch_batches(self, rng):
        """Index arrays for one epoch, drawn from ``rng``."""
        order = rng.permutation(self.n)
        k = self.steps_per_epoch * self.batch_size
        return order[:k].reshape(self.steps_per_epoch, self.batch_size)
