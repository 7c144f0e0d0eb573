"""Class-imbalanced dataset synthesis, subsampling, and IDX ingestion.

The imbalance profile follows the usual exponential convention: class c of
K receives round(n_max * p^(-c/(K-1))) samples, so the largest class keeps
n_max samples and the smallest about n_max/p. Class weights are the ratio
N_max / N_c, giving the largest class weight exactly 1.
"""

from __future__ import annotations

import gzip
import struct
from dataclasses import dataclass

import numpy as np

from .errors import FormatError, InputError

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801


def class_weights(counts) -> np.ndarray:
    """Per-class weight N_max / N_c; minority classes weigh more."""
    counts = np.asarray(counts, dtype=np.int64)
    if counts.size == 0 or np.any(counts < 1):
        raise InputError(f"class counts must all be >= 1, got {counts.tolist()}")
    return counts.max() / counts.astype(np.float64)


@dataclass(frozen=True)
class ClassProfile:
    """Per-class sample counts and the weights they induce."""
    counts: np.ndarray

    def __post_init__(self):
        counts = np.asarray(self.counts, dtype=np.int64)
        if counts.size == 0 or np.any(counts < 1):
            raise InputError(f"class counts must all be >= 1, got {counts.tolist()}")
        counts.setflags(write=False)
        object.__setattr__(self, "counts", counts)

    @property
    def num_classes(self) -> int:
        return int(self.counts.size)

    @property
    def n_max(self) -> int:
        return int(self.counts.max())

    @property
    def weights(self) -> np.ndarray:
        return class_weights(self.counts)


@dataclass(frozen=True)
class LabeledDataset:
    """Immutable feature/label pair for one split."""
    features: np.ndarray
    labels: np.ndarray
    num_classes: int
    split: str = "train"
    profile: ClassProfile | None = None

    def __post_init__(self):
        labels = np.asarray(self.labels, dtype=np.int64)
        features = np.asarray(self.features, dtype=np.float64)
        if features.shape[0] != labels.shape[0]:
            raise InputError(f"{features.shape[0]} feature rows vs {labels.shape[0]} labels")
        if labels.size and (labels.min() < 0 or labels.max() >= self.num_classes):
            raise InputError(f"labels must lie in [0, {self.num_classes})")
        if self.profile is not None:
            hist = np.bincount(labels, minlength=self.num_classes)
            if not np.array_equal(hist, self.profile.counts):
                raise InputError("profile counts do not match the label histogram")
        features.setflags(write=False)
        labels.setflags(write=False)
        object.__setattr__(self, "features", features)
        object.__setattr__(self, "labels", labels)

    def __len__(self) -> int:
        return int(self.labels.shape[0])


def exponential_imbalance_counts(n_max: int, num_classes: int, p: float) -> np.ndarray:
    """Exponentially decaying per-class counts with head/tail ratio p.

    Rounds to nearest (half away from zero) and clamps every class to at
    least one sample.
    """
    if p < 1:
        raise InputError(f"imbalance factor p must be >= 1, got {p}")
    if num_classes < 1 or n_max < num_classes:
        raise InputError(f"need n_max >= num_classes >= 1, got {n_max}, {num_classes}")
    if num_classes == 1:
        return np.array([n_max], dtype=np.int64)
    c = np.arange(num_classes, dtype=np.float64)
    raw = n_max * p ** (-c / (num_classes - 1))
    counts = np.floor(raw + 0.5).astype(np.int64)
    return np.maximum(counts, 1)


def subsample_to_profile(dataset: LabeledDataset, counts,
                         seed: int | np.random.Generator = 0) -> LabeledDataset:
    """Seeded uniform subsample without replacement matching `counts`.

    Used on the train split only; test splits stay balanced so the mean
    per-class accuracy equals plain accuracy there.
    """
    counts = np.asarray(counts, dtype=np.int64)
    if counts.size != dataset.num_classes:
        raise InputError(f"{counts.size} counts for {dataset.num_classes} classes")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    picked = []
    for c in range(dataset.num_classes):
        idx = np.flatnonzero(dataset.labels == c)
        if idx.size < counts[c]:
            raise InputError(f"class {c} has {idx.size} samples, need {counts[c]}")
        picked.append(rng.choice(idx, size=counts[c], replace=False))
    order = np.concatenate(picked)
    return LabeledDataset(dataset.features[order], dataset.labels[order],
                          dataset.num_classes, split=dataset.split,
                          profile=ClassProfile(counts))


def synth_gaussian_mixture(num_classes: int, dim: int, separation: float,
                           counts, seed: int = 0,
                           test_per_class: int = 100
                           ) -> tuple[LabeledDataset, LabeledDataset]:
    """Isotropic Gaussian blobs at seeded random unit directions.

    Class c is N(separation * u_c, I) for a random unit vector u_c. The
    train split follows `counts`; the test split is balanced with
    `test_per_class` samples per class. separation=0 collapses all classes
    onto one blob (chance-level task).
    """
    if separation < 0:
        raise InputError(f"separation must be >= 0, got {separation}")
    counts = np.asarray(counts, dtype=np.int64)
    if counts.size != num_classes:
        raise InputError(f"{counts.size} counts for {num_classes} classes")
    rng = np.random.default_rng(seed)
    dirs = rng.standard_normal((num_classes, dim))
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    means = separation * dirs

    def draw(per_class) -> tuple[np.ndarray, np.ndarray]:
        xs, ys = [], []
        for c in range(num_classes):
            xs.append(means[c] + rng.standard_normal((per_class[c], dim)))
            ys.append(np.full(per_class[c], c, dtype=np.int64))
        return np.concatenate(xs), np.concatenate(ys)

    train_x, train_y = draw(counts)
    test_x, test_y = draw(np.full(num_classes, test_per_class, dtype=np.int64))
    train = LabeledDataset(train_x, train_y, num_classes, split="train",
                           profile=ClassProfile(counts))
    test = LabeledDataset(test_x, test_y, num_classes, split="test")
    return train, test


def _open_maybe_gzip(path):
    with open(path, "rb") as fh:
        head = fh.read(2)
    if head == b"\x1f\x8b":
        return gzip.open(path, "rb")
    return open(path, "rb")


def _read_exact(fh, count: int, offset: int, path) -> bytes:
    buf = fh.read(count)
    if len(buf) != count:
        raise FormatError(f"{path}: truncated, wanted {count} bytes", offset + len(buf))
    return buf


def ingest_idx(images_path, labels_path) -> LabeledDataset:
    """Load an IDX image/label file pair (MNIST-style, optionally gzipped).

    Pixels are scaled to [0, 1] and shaped [N, 1, H, W].
    """
    with _open_maybe_gzip(images_path) as fh:
        magic, = struct.unpack(">I", _read_exact(fh, 4, 0, images_path))
        if magic != IDX_IMAGES_MAGIC:
            raise FormatError(f"{images_path}: bad magic 0x{magic:08x}", 0)
        n, h, w = struct.unpack(">III", _read_exact(fh, 12, 4, images_path))
        raw = _read_exact(fh, n * h * w, 16, images_path)
    images = np.frombuffer(raw, dtype=np.uint8).reshape(n, 1, h, w)

    with _open_maybe_gzip(labels_path) as fh:
        magic, = struct.unpack(">I", _read_exact(fh, 4, 0, labels_path))
        if magic != IDX_LABELS_MAGIC:
            raise FormatError(f"{labels_path}: bad magic 0x{magic:08x}", 0)
        n_labels, = struct.unpack(">I", _read_exact(fh, 4, 4, labels_path))
        raw = _read_exact(fh, n_labels, 8, labels_path)
    labels = np.frombuffer(raw, dtype=np.uint8).astype(np.int64)

    if n_labels != n:
        raise FormatError(f"{labels_path}: {n_labels} labels for {n} images", 8)
    num_classes = int(labels.max()) + 1 if labels.size else 1
    hist = np.bincount(labels, minlength=num_classes)
    profile = ClassProfile(hist) if np.all(hist >= 1) else None
    return LabeledDataset(images.astype(np.float64) / 255.0, labels,
                          num_classes, split="train", profile=profile)
