"""Dataset loading (IDX, CIFAR-10 binary, synthetic), standardisation,
splitting and batching."""

import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import DatasetFormatError

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801
CIFAR_RECORD = 3073


@dataclass
class Dataset:
    images: np.ndarray  # [N,C,H,W] float32
    labels: np.ndarray  # [N] int64
    class_count: int
    stats: dict = field(default_factory=dict)  # {"mean": [...], "std": [...]} when standardised

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.images.ndim != 4:
            raise DatasetFormatError(f"images must be [N,C,H,W], got {self.images.shape}")
        if len(self.images) != len(self.labels):
            raise DatasetFormatError(f"{len(self.images)} images but {len(self.labels)} labels")
        if len(self.labels) < 1:
            raise DatasetFormatError("dataset is empty")
        if self.labels.min() < 0 or self.labels.max() >= self.class_count:
            raise DatasetFormatError(f"labels must lie in [0, {self.class_count})")

    def __len__(self):
        return len(self.labels)

    @property
    def sample_shape(self):
        return tuple(self.images.shape[1:])

    def subset(self, indices):
        idx = np.asarray(indices)
        return Dataset(self.images[idx], self.labels[idx], self.class_count, dict(self.stats))

    def head(self, n):
        return self if n is None or n >= len(self) else self.subset(np.arange(n))


def channel_stats(images):
    mean = images.mean(axis=(0, 2, 3), dtype=np.float64)
    std = images.std(axis=(0, 2, 3), dtype=np.float64)
    return {"mean": mean.tolist(), "std": np.where(std > 0, std, 1.0).tolist()}


def standardize(dataset, stats=None):
    """Per-channel standardisation with ``stats`` (computed from ``dataset`` when omitted)."""
    stats = stats or channel_stats(dataset.images)
    mean = np.asarray(stats["mean"], dtype=np.float64).reshape(1, -1, 1, 1)
    std = np.asarray(stats["std"], dtype=np.float64).reshape(1, -1, 1, 1)
    images = ((dataset.images - mean) / std).astype(np.float32)
    return Dataset(images, dataset.labels, dataset.class_count, {"mean": list(stats["mean"]), "std": list(stats["std"])})


def fit_standardize(train, *others):
    """Standardise ``train`` with its own statistics and apply them to ``others``."""
    stats = channel_stats(train.images)
    return (standardize(train, stats),) + tuple(standardize(d, stats) for d in others)


def _read_idx(path, magic, ndims):
    with open(path, "rb") as f:
        raw = f.read()
    if len(raw) < 4 + 4 * ndims:
        raise DatasetFormatError(f"{path}: file too short for an IDX header ({len(raw)} bytes)")
    got = struct.unpack(">I", raw[:4])[0]
    if got != magic:
        raise DatasetFormatError(f"{path}: bad IDX magic 0x{got:08x}, expected 0x{magic:08x}")
    dims = struct.unpack(f">{ndims}I", raw[4 : 4 + 4 * ndims])
    body = raw[4 + 4 * ndims :]
    if len(body) != int(np.prod(dims)):
        raise DatasetFormatError(f"{path}: header declares {dims} but payload has {len(body)} bytes")
    return np.frombuffer(body, dtype=np.uint8).reshape(dims)


def load_idx(images_path, labels_path, class_count=None, standardize_data=True):
    """MNIST-style IDX pair (unsigned-byte images, big-endian dims)."""
    images = _read_idx(images_path, IDX_IMAGES_MAGIC, 3)
    labels = _read_idx(labels_path, IDX_LABELS_MAGIC, 1)
    if len(images) != len(labels):
        raise DatasetFormatError(f"{len(images)} images but {len(labels)} labels")
    if len(images) == 0:
        raise DatasetFormatError("IDX files hold no samples")
    x = (images.astype(np.float32) / 255.0)[:, None]
    ds = Dataset(x, labels.astype(np.int64), class_count or max(int(labels.max()) + 1, 2))
    return standardize(ds) if standardize_data else ds


def load_cifar10_binary(paths, standardize_data=True):
    """CIFAR-10 binary batches: records of 1 label byte + 3072 pixel bytes (R, G, B planes)."""
    if isinstance(paths, (str, bytes)) or hasattr(paths, "__fspath__"):
        paths = [paths]
    chunks = []
    for p in paths:
        with open(p, "rb") as f:
            raw = f.read()
        if len(raw) == 0 or len(raw) % CIFAR_RECORD:
            raise DatasetFormatError(f"{p}: {len(raw)} bytes is not a whole number of {CIFAR_RECORD}-byte records")
        chunks.append(np.frombuffer(raw, dtype=np.uint8).reshape(-1, CIFAR_RECORD))
    rec = np.concatenate(chunks)
    labels = rec[:, 0].astype(np.int64)
    if labels.max() > 9:
        bad = int(np.argmax(labels > 9))
        raise DatasetFormatError(f"record {bad} has label byte {labels[bad]} > 9")
    x = rec[:, 1:].reshape(-1, 3, 32, 32).astype(np.float32) / 255.0
    ds = Dataset(x, labels, 10)
    return standardize(ds) if standardize_data else ds


def synth_dataset(seed, n, classes, shape=(3, 16, 16), noise=1.0, standardize_data=True):
    """Class-conditional textures plus Gaussian noise.

    Each class owns a random plane-wave pattern per channel (frequency,
    orientation, phase) and a per-channel offset; samples add i.i.d. noise of
    standard deviation ``noise``.  Labels cycle through the classes so the
    split is balanced, then get shuffled.
    """
    if n < classes:
        raise DatasetFormatError(f"need n >= classes, got n={n}, classes={classes}")
    rng = np.random.default_rng(seed)
    c, h, w = shape
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    centroids = np.empty((classes, c, h, w))
    for k in range(classes):
        for ch in range(c):
            freq = rng.uniform(0.08, 0.35)
            theta = rng.uniform(0, np.pi)
            phase = rng.uniform(0, 2 * np.pi)
            wave = np.sin(2 * np.pi * freq * (xx * np.cos(theta) + yy * np.sin(theta)) + phase)
            centroids[k, ch] = wave + rng.normal(0, 0.5)
    labels = rng.permutation(np.arange(n) % classes)
    images = centroids[labels] + rng.normal(0, noise, size=(n, c, h, w))
    ds = Dataset(images.astype(np.float32), labels, classes)
    return standardize(ds) if standardize_data else ds


def split(dataset, val_fraction, seed):
    """Disjoint train/validation split, deterministic for a given seed."""
    if not 0 < val_fraction < 1:
        raise ValueError(f"val_fraction must be in (0, 1), got {val_fraction}")
    n = len(dataset)
    n_val = int(round(n * val_fraction))
    if n_val < 1 or n_val >= n:
        raise ValueError(f"val_fraction {val_fraction} leaves an empty split for N={n}")
    perm = np.random.default_rng(seed).permutation(n)
    return dataset.subset(np.sort(perm[n_val:])), dataset.subset(np.sort(perm[:n_val]))


class BatchIterator:
    """Yields ``(images, labels)`` batches; the order is a seeded permutation.

    Iterating again advances the epoch counter, so each epoch gets a fresh
    but reproducible order.  ``shuffle_seed=None`` keeps dataset order.
    """

    def __init__(self, dataset, batch_size, shuffle_seed=None, flip=False):
        if batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        self.dataset = dataset
        self.batch_size = batch_size
        self.shuffle_seed = shuffle_seed
        self.flip = flip
        self.epoch = 0

    def order(self, epoch):
        if self.shuffle_seed is None:
            return np.arange(len(self.dataset))
        return np.random.default_rng([self.shuffle_seed, epoch]).permutation(len(self.dataset))

    def __len__(self):
        return -(-len(self.dataset) // self.batch_size)

    def __iter__(self):
        idx = self.order(self.epoch)
        rng = np.random.default_rng([self.shuffle_seed or 0, self.epoch, 1])
        self.epoch += 1
        for i in range(0, len(idx), self.batch_size):
            b = idx[i : i + self.batch_size]
            x = self.dataset.images[b]
            if self.flip:
                sel = rng.random(len(b)) < 0.5
                x = x.copy()
                x[sel] = x[sel, :, :, ::-1]
            yield x, self.dataset.labels[b]
