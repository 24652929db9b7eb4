"""Synthetic dataset generation, IDX loading, and heterogeneity-controlled partitioning."""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, FormatError

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801


@dataclass
class Dataset:
    features: np.ndarray  # (n, d) float64
    labels: np.ndarray  # (n,) int64
    num_classes: int

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise ValueError("labels out of range")

    def __len__(self) -> int:
        return self.features.shape[0]


@dataclass
class Partition:
    client_shards: list[np.ndarray]  # index arrays, disjoint, covering the set
    alpha: float | None  # None means iid


def synth_classification(
    num_classes: int, dim: int, per_class: int, spread: float, seed: int
) -> Dataset:
    """Gaussian blobs around seeded class means on the unit sphere scaled by ``spread``."""
    if per_class <= 0:
        raise ConfigError("per_class must be positive")
    if spread <= 0:
        raise ConfigError("spread must be positive")
    rng = np.random.default_rng(np.random.SeedSequence((seed, num_classes, dim)))
    means = rng.standard_normal((num_classes, dim))
    means /= np.linalg.norm(means, axis=1, keepdims=True)
    means *= spread
    feats = np.empty((num_classes * per_class, dim))
    labels = np.empty(num_classes * per_class, dtype=np.int64)
    for c in range(num_classes):
        sl = slice(c * per_class, (c + 1) * per_class)
        feats[sl] = means[c] + rng.standard_normal((per_class, dim))
        labels[sl] = c
    perm = rng.permutation(len(labels))
    return Dataset(feats[perm], labels[perm], num_classes)


def split_holdout(data: Dataset, holdout_per_class: int) -> tuple[Dataset, Dataset]:
    """Hold out the last ``holdout_per_class`` samples of each class as a test set.

    Both halves come from one generated dataset, so they share class means.
    """
    if holdout_per_class <= 0:
        raise ConfigError("holdout_per_class must be positive")
    test_mask = np.zeros(len(data), dtype=bool)
    for c in range(data.num_classes):
        idx = np.flatnonzero(data.labels == c)
        if idx.size <= holdout_per_class:
            raise ConfigError(
                f"class {c} has {idx.size} samples, cannot hold out {holdout_per_class}"
            )
        test_mask[idx[-holdout_per_class:]] = True
    train = Dataset(data.features[~test_mask], data.labels[~test_mask], data.num_classes)
    test = Dataset(data.features[test_mask], data.labels[test_mask], data.num_classes)
    return train, test


def dirichlet_partition(
    labels: np.ndarray, num_clients: int, alpha: float, seed: int
) -> Partition:
    """Split sample indices across clients with Dirichlet(alpha) label proportions.

    Per class, client proportions are drawn from Dirichlet(alpha * 1) and that
    class's shuffled indices are sliced proportionally. If any client ends up
    empty the whole assignment is redrawn (up to 100 attempts).
    """
    labels = np.asarray(labels, dtype=np.int64)
    if alpha <= 0:
        raise ConfigError("alpha must be positive")
    if num_clients < 1:
        raise ConfigError("num_clients must be >= 1")
    if num_clients > labels.size:
        raise ConfigError(f"cannot give {num_clients} clients at least one of {labels.size} samples")
    rng = np.random.default_rng(np.random.SeedSequence((seed, num_clients)))
    classes = np.unique(labels)
    for _ in range(100):
        shards: list[list[np.ndarray]] = [[] for _ in range(num_clients)]
        for c in classes:
            idx = np.flatnonzero(labels == c)
            idx = rng.permutation(idx)
            props = rng.dirichlet(np.full(num_clients, alpha))
            cuts = np.round(np.cumsum(props) * idx.size).astype(np.int64)[:-1]
            for k, part in enumerate(np.split(idx, cuts)):
                shards[k].append(part)
        merged = [np.sort(np.concatenate(s)) for s in shards]
        if min(m.size for m in merged) >= 1:
            return Partition(merged, alpha)
    raise ConfigError("Dirichlet partition left a client empty after 100 redraws")


def iid_partition(n: int, num_clients: int, seed: int) -> Partition:
    """Uniformly random, near-equal-size disjoint shards."""
    if num_clients < 1 or num_clients > n:
        raise ConfigError("num_clients must be in [1, n]")
    rng = np.random.default_rng(np.random.SeedSequence((seed, num_clients, 0x11D)))
    perm = rng.permutation(n)
    return Partition([np.sort(s) for s in np.array_split(perm, num_clients)], None)


def label_entropy(labels: np.ndarray, num_classes: int) -> float:
    """Shannon entropy (nats) of a label histogram."""
    counts = np.bincount(np.asarray(labels), minlength=num_classes).astype(np.float64)
    p = counts / counts.sum()
    p = p[p > 0]
    return float(-np.sum(p * np.log(p)))


def mean_client_entropy(labels: np.ndarray, part: Partition, num_classes: int) -> float:
    return float(
        np.mean([label_entropy(labels[s], num_classes) for s in part.client_shards])
    )


def _read_idx_header(data: bytes, path: str, expect_magic: int, dims: int):
    if len(data) < 4 * (1 + dims):
        raise FormatError(f"{path}: truncated header at offset {len(data)}")
    magic = struct.unpack_from(">I", data, 0)[0]
    if magic != expect_magic:
        raise FormatError(f"{path}: bad magic 0x{magic:08x} at offset 0")
    return struct.unpack_from(f">{dims}I", data, 4)


def load_idx(images_path: str, labels_path: str) -> Dataset:
    """Load an IDX image/label pair (big-endian, MNIST-family format).

    Pixels are scaled to [0, 1] as float64; image and label counts must match.
    """
    with open(images_path, "rb") as f:
        img_data = f.read()
    with open(labels_path, "rb") as f:
        lab_data = f.read()
    n, rows, cols = _read_idx_header(img_data, images_path, IDX_IMAGES_MAGIC, 3)
    (n_lab,) = _read_idx_header(lab_data, labels_path, IDX_LABELS_MAGIC, 1)
    if n != n_lab:
        raise FormatError(f"image count {n} != label count {n_lab}")
    need = 16 + n * rows * cols
    if len(img_data) < need:
        raise FormatError(f"{images_path}: truncated pixel data at offset {len(img_data)}")
    if len(lab_data) < 8 + n:
        raise FormatError(f"{labels_path}: truncated label data at offset {len(lab_data)}")
    pixels = np.frombuffer(img_data, dtype=np.uint8, count=n * rows * cols, offset=16)
    labels = np.frombuffer(lab_data, dtype=np.uint8, count=n, offset=8).astype(np.int64)
    feats = pixels.reshape(n, rows * cols).astype(np.float64) / 255.0
    num_classes = int(labels.max()) + 1 if n else 0
    return Dataset(feats, labels, num_classes)
