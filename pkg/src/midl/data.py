"""Datasets and the perturbation protocols applied to them."""
import gzip
import os
import struct
from dataclasses import dataclass

import numpy as np

from .checkpoint import MAGIC_DATA, load_tensors, save_tensors

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801

MNIST_FILES = {
    "train": ("train-images-idx3-ubyte", "train-labels-idx1-ubyte"),
    "test": ("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"),
}


class DataError(ValueError):
    pass


class ParseError(DataError):
    pass


@dataclass(frozen=True)
class Dataset:
    features: np.ndarray
    labels: np.ndarray
    num_classes: int
    name: str = "dataset"

    def __post_init__(self):
        if self.features.ndim != 2:
            raise DataError(f"features must be (N, d), got {self.features.shape}")
        if self.labels.shape != (self.features.shape[0],):
            raise DataError(
                f"{self.features.shape[0]} feature rows but labels have shape {self.labels.shape}"
            )
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise DataError(f"labels must lie in [0, {self.num_classes})")

    def __len__(self):
        return self.features.shape[0]

    @property
    def dim(self):
        return self.features.shape[1]

    def take(self, idx, name=None):
        idx = np.asarray(idx)
        return Dataset(self.features[idx], self.labels[idx], self.num_classes, name or self.name)

    def class_counts(self):
        return np.bincount(self.labels, minlength=self.num_classes)


@dataclass(frozen=True)
class NoiseSpec:
    rate: float
    seed: int = 0
    kind: str = "symmetric"

    def __post_init__(self):
        if not 0.0 <= self.rate < 1.0:
            raise DataError(f"noise rate must be in [0, 1), got {self.rate}")
        if self.kind != "symmetric":
            raise DataError(f"unsupported noise kind {self.kind!r}")


# ---------------------------------------------------------------- IDX


def _read_bytes(path):
    with open(path, "rb") as f:
        raw = f.read()
    if raw[:2] == b"\x1f\x8b":
        raw = gzip.decompress(raw)
    return raw


def parse_idx(buf, expected_magic=None, source="<bytes>"):
    """Decode an unsigned-byte IDX buffer into a uint8 array."""
    if len(buf) < 4:
        raise ParseError(f"{source}: truncated header at byte offset 0")
    (magic,) = struct.unpack_from(">I", buf, 0)
    if expected_magic is not None and magic != expected_magic:
        raise ParseError(
            f"{source}: bad magic 0x{magic:08x} at byte offset 0, expected 0x{expected_magic:08x}"
        )
    if magic >> 8 != 0x08:
        raise ParseError(f"{source}: unsupported IDX type 0x{magic:08x} at byte offset 0")
    ndim = magic & 0xFF
    if ndim == 0:
        raise ParseError(f"{source}: zero-dimensional IDX at byte offset 3")
    header = 4 + 4 * ndim
    if len(buf) < header:
        raise ParseError(f"{source}: truncated dimension header at byte offset {len(buf)}")
    dims = struct.unpack_from(f">{ndim}I", buf, 4)
    count = int(np.prod(dims, dtype=np.int64))
    have = len(buf) - header
    if have < count:
        raise ParseError(
            f"{source}: truncated payload at byte offset {len(buf)}: "
            f"header declares {count} bytes, found {have}"
        )
    if have > count:
        raise ParseError(
            f"{source}: {have - count} trailing bytes at byte offset {header + count}"
        )
    return np.frombuffer(buf, dtype=np.uint8, count=count, offset=header).reshape(dims)


def write_idx(path, array):
    """Write a uint8 array as IDX (gzip-compressed when ``path`` ends in .gz)."""
    a = np.asarray(array)
    if a.dtype != np.uint8:
        raise DataError(f"only uint8 IDX is supported, got {a.dtype}")
    payload = struct.pack(">I", 0x0800 | a.ndim) + struct.pack(f">{a.ndim}I", *a.shape) + a.tobytes()
    opener = gzip.open if str(path).endswith(".gz") else open
    with opener(path, "wb") as f:
        f.write(payload)


def load_mnist_idx(images_path, labels_path, name="mnist", num_classes=10):
    """Parse an MNIST image/label IDX pair; features are pixels / 255."""
    images = parse_idx(_read_bytes(images_path), IDX_IMAGES_MAGIC, str(images_path))
    labels = parse_idx(_read_bytes(labels_path), IDX_LABELS_MAGIC, str(labels_path))
    if images.ndim != 3:
        raise ParseError(f"{images_path}: expected 3 dimensions at byte offset 3, got {images.ndim}")
    if images.shape[0] != labels.shape[0]:
        raise ParseError(
            f"count mismatch at byte offset 4: {images.shape[0]} images vs {labels.shape[0]} labels"
        )
    bad = np.flatnonzero(labels >= num_classes)
    if bad.size:
        raise ParseError(
            f"{labels_path}: label {labels[bad[0]]} out of range at byte offset {8 + bad[0]}"
        )
    feats = images.reshape(images.shape[0], -1).astype(np.float64) / 255.0
    return Dataset(feats, labels.astype(np.int64), num_classes, name)


def find_idx_file(directory, stem):
    for candidate in (stem, stem + ".gz"):
        path = os.path.join(directory, candidate)
        if os.path.exists(path):
            return path
    raise DataError(f"missing {stem}[.gz] in {directory}")


def load_mnist(directory, split="train"):
    """Load ``split`` ("train" or "test") from a directory of canonical MNIST files."""
    if split not in MNIST_FILES:
        raise DataError(f"unknown split {split!r}")
    img, lab = MNIST_FILES[split]
    return load_mnist_idx(find_idx_file(directory, img), find_idx_file(directory, lab), f"mnist-{split}")


# ---------------------------------------------------------------- generators and protocols


def synthetic_two_gaussians(n, d, separation, seed):
    """Balanced two-class data with means at +-separation/2 along a random unit direction."""
    if n < 2 or d < 1:
        raise DataError(f"need n >= 2 and d >= 1, got n={n}, d={d}")
    rng = np.random.default_rng(seed)
    direction = rng.standard_normal(d)
    direction /= np.linalg.norm(direction)
    labels = np.arange(n) % 2
    rng.shuffle(labels)
    signs = np.where(labels == 1, 0.5, -0.5)
    feats = rng.standard_normal((n, d)) + signs[:, None] * separation * direction
    return Dataset(feats, labels.astype(np.int64), 2, f"two-gaussians-sep{separation}")


def inject_symmetric_noise(ds, spec):
    """Flip each label with probability ``spec.rate`` to a uniformly chosen different class."""
    if ds.num_classes < 2:
        raise DataError("symmetric noise needs at least two classes")
    rng = np.random.default_rng(spec.seed)
    flip = rng.random(len(ds)) < spec.rate
    shift = rng.integers(1, ds.num_classes, size=len(ds))
    noisy = np.where(flip, (ds.labels + shift) % ds.num_classes, ds.labels)
    return Dataset(ds.features, noisy.astype(np.int64), ds.num_classes, f"{ds.name}-noise{spec.rate:g}")


def overfit_stress_subset(ds, per_class, seed):
    """Exactly ``per_class`` samples of every class, shuffled."""
    rng = np.random.default_rng(seed)
    chosen = []
    for c in range(ds.num_classes):
        idx = np.flatnonzero(ds.labels == c)
        if idx.size < per_class:
            raise DataError(f"class {c} has {idx.size} samples, need {per_class}")
        chosen.append(rng.choice(idx, size=per_class, replace=False))
    order = np.concatenate(chosen)
    rng.shuffle(order)
    return ds.take(order, f"{ds.name}-stress{per_class}")


def random_subset(ds, n, seed):
    if n >= len(ds):
        return ds
    idx = np.random.default_rng(seed).choice(len(ds), size=n, replace=False)
    return ds.take(np.sort(idx), f"{ds.name}-{n}")


def batch_iterator(ds, batch_size, shuffle_seed=None, epoch=0):
    """Yield ``(features, labels)`` batches over one epoch; the last may be short."""
    if batch_size < 1:
        raise DataError(f"batch_size must be >= 1, got {batch_size}")
    n = len(ds)
    if shuffle_seed is None:
        order = np.arange(n)
    else:
        order = np.random.default_rng([shuffle_seed, epoch]).permutation(n)
    for start in range(0, n, batch_size):
        idx = order[start:start + batch_size]
        yield ds.features[idx], ds.labels[idx]


# ---------------------------------------------------------------- cache


def save_dataset(path, ds):
    save_tensors(
        path,
        {
            "features": ds.features,
            "labels": ds.labels.astype(np.float64),
            "num_classes": np.asarray(float(ds.num_classes)),
        },
        magic=MAGIC_DATA,
    )


def load_dataset(path, name=None):
    t = load_tensors(path, magic=MAGIC_DATA)
    name = name or os.path.splitext(os.path.basename(path))[0]
    return Dataset(t["features"], t["labels"].astype(np.int64), int(t["num_classes"]), name)
