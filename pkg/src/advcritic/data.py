"""Datasets: MNIST IDX files, synthetic toy problems, and splits."""

import gzip
import hashlib
import struct
from dataclasses import dataclass

import numpy as np

IMAGE_MAGIC = 0x00000803
LABEL_MAGIC = 0x00000801


class DataError(Exception):
    pass


@dataclass(frozen=True, eq=False)
class Dataset:
    images: np.ndarray  # float64 in [0, 1], shape (n, ...)
    labels: np.ndarray  # int64 in [0, k)
    k: int
    split: str = "all"
    fingerprint: str = ""

    def __post_init__(self):
        if len(self.images) != len(self.labels):
            raise DataError("image/label count mismatch")
        if self.images.size and (self.images.min() < 0 or self.images.max() > 1):
            raise DataError("pixel values must lie in [0, 1]")
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= self.k):
            raise DataError("label out of range")
        if not self.fingerprint:
            object.__setattr__(self, "fingerprint", fingerprint_arrays(self.images, self.labels))

    def __len__(self):
        return len(self.labels)

    def subset(self, index, split=None):
        index = np.asarray(index, dtype=np.int64)
        return Dataset(
            self.images[index], self.labels[index], self.k, split or self.split
        )

    def head(self, n):
        return self.subset(np.arange(min(n, len(self))))


def fingerprint_arrays(images, labels):
    h = hashlib.sha256()
    h.update(np.ascontiguousarray(images, dtype="<f8").tobytes())
    h.update(np.ascontiguousarray(labels, dtype="<i8").tobytes())
    return h.hexdigest()


def _read(path):
    with open(path, "rb") as fh:
        raw = fh.read()
    if raw[:2] == b"\x1f\x8b":
        raw = gzip.decompress(raw)
    return raw


def parse_idx(raw, magic):
    """Parse a big-endian unsigned-byte IDX buffer, returning a uint8 array."""
    if len(raw) < 4:
        raise DataError("IDX buffer truncated")
    (found,) = struct.unpack(">I", raw[:4])
    if found != magic:
        raise DataError(f"bad IDX magic 0x{found:08x}, expected 0x{magic:08x}")
    ndim = found & 0xFF
    header = 4 + 4 * ndim
    if len(raw) < header:
        raise DataError("IDX header truncated")
    dims = struct.unpack(f">{ndim}I", raw[4:header])
    size = int(np.prod(dims))
    if len(raw) - header < size:
        raise DataError(f"IDX payload truncated: {len(raw) - header} < {size} bytes")
    return np.frombuffer(raw, dtype=np.uint8, count=size, offset=header).reshape(dims)


def load_idx(images_path, labels_path, k=10, split="all"):
    """Load an IDX image/label pair (optionally gzipped) into a :class:`Dataset`."""
    raw_images = _read(images_path)
    raw_labels = _read(labels_path)
    images = parse_idx(raw_images, IMAGE_MAGIC)
    labels = parse_idx(raw_labels, LABEL_MAGIC)
    if images.shape[0] != labels.shape[0]:
        raise DataError(f"{images.shape[0]} images but {labels.shape[0]} labels")
    h = hashlib.sha256(raw_images)
    h.update(raw_labels)
    return Dataset(
        images.astype(np.float64) / 255.0,
        labels.astype(np.int64),
        k,
        split,
        h.hexdigest(),
    )


def write_idx(path, array):
    """Write a uint8 array as IDX (gzipped if ``path`` ends with .gz)."""
    array = np.asarray(array, dtype=np.uint8)
    magic = 0x00000800 | array.ndim
    raw = struct.pack(f">I{array.ndim}I", magic, *array.shape) + array.tobytes()
    if str(path).endswith(".gz"):
        raw = gzip.compress(raw, mtime=0)
    with open(path, "wb") as fh:
        fh.write(raw)


def make_synthetic(kind, n, k, seed=0, dim=2, separation=4.0):
    """Low-dimensional toy data rescaled into [0, 1].

    ``blobs``: isotropic Gaussians on a circle of radius ``separation``
    (linearly separable when well separated). ``rings``: concentric rings,
    class j at radius j + 1.
    """
    if kind not in ("blobs", "rings"):
        raise DataError(f"unknown synthetic kind {kind!r}")
    if not n >= k >= 2:
        raise DataError("need n >= k >= 2")
    if dim < 2:
        raise DataError("need dim >= 2")
    rng = np.random.default_rng(seed)
    labels = np.arange(n) % k
    rng.shuffle(labels)
    if kind == "blobs":
        angles = 2 * np.pi * np.arange(k) / k
        centers = np.zeros((k, dim))
        centers[:, 0] = separation * np.cos(angles)
        centers[:, 1] = separation * np.sin(angles)
        points = centers[labels] + rng.standard_normal((n, dim))
    else:
        theta = rng.uniform(0, 2 * np.pi, n)
        radius = labels + 1 + 0.1 * rng.standard_normal(n)
        points = np.zeros((n, dim))
        points[:, 0] = radius * np.cos(theta)
        points[:, 1] = radius * np.sin(theta)
    lo, hi = points.min(axis=0), points.max(axis=0)
    span = np.where(hi > lo, hi - lo, 1.0)
    images = (points - lo) / span
    return Dataset(images, labels.astype(np.int64), k, kind)


def split(dataset, fractions, seed=0):
    """Seeded disjoint train/val/test split with sizes floor(f * n), remainder to train.

    Each part keeps the shuffled order, so ``part.head(m)`` is a random sample.
    """
    fractions = tuple(float(f) for f in fractions)
    if len(fractions) != 3 or min(fractions) < 0 or abs(sum(fractions) - 1.0) > 1e-9:
        raise DataError(f"fractions must be three non-negatives summing to 1, got {fractions}")
    n = len(dataset)
    order = np.random.default_rng(seed).permutation(n)
    n_val = int(np.floor(fractions[1] * n + 1e-9))
    n_test = int(np.floor(fractions[2] * n + 1e-9))
    n_train = n - n_val - n_test
    parts = np.split(order, [n_train, n_train + n_val])
    return tuple(
        dataset.subset(idx, name) for idx, name in zip(parts, ("train", "val", "test"))
    )


def batches(n, batch_size, rng):
    """Shuffled mini-batch index arrays covering range(n) once."""
    order = rng.permutation(n)
    for start in range(0, n, batch_size):
        yield order[start : start + batch_size]
