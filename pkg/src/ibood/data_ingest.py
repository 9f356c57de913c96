"""IDX-format image loading and leave-one-class-out task construction.

Images are kept as float32 grids normalized to [-1, 1] so that real images
share the value range of the generator's tanh output. The raw byte value v
maps to 2*v/255 - 1; `write_idx` inverts this map exactly, so a parse/write
round trip is bit-identical.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

IMAGES_MAGIC = 0x00000803
LABELS_MAGIC = 0x00000801


class IdxFormatError(ValueError):
    """Raised when a file does not follow the IDX binary layout."""


class DataConsistencyError(ValueError):
    """Raised when image and label files disagree with each other."""


class InsufficientDataError(ValueError):
    """Raised when a class has too few examples for the requested sampling."""


class EmptyInputError(ValueError):
    """Raised when an operation requires a nonempty dataset."""


@dataclass(frozen=True)
class ImageDataset:
    """Immutable set of H×W×C images in [-1, 1] with aligned integer labels."""

    images: np.ndarray  # (N, H, W, C) float32 in [-1, 1]
    labels: np.ndarray  # (N,) int64
    split: str  # "train" or "test"

    def __post_init__(self):
        if self.images.shape[0] != self.labels.shape[0]:
            raise DataConsistencyError(
                f"{self.images.shape[0]} images but {self.labels.shape[0]} labels"
            )
        if self.images.ndim != 4:
            raise IdxFormatError(f"expected (N, H, W, C) images, got shape {self.images.shape}")
        self.images.setflags(write=False)
        self.labels.setflags(write=False)

    def __len__(self) -> int:
        return self.images.shape[0]

    def subset(self, indices: np.ndarray) -> "ImageDataset":
        indices = np.asarray(indices)
        return ImageDataset(
            images=self.images[indices].copy(),
            labels=self.labels[indices].copy(),
            split=self.split,
        )

    def class_counts(self) -> dict[int, int]:
        values, counts = np.unique(self.labels, return_counts=True)
        return dict(zip(values.tolist(), counts.tolist()))


@dataclass(frozen=True)
class OodTask:
    """One leave-one-class-out experiment.

    `pretrain_pool` is consumed as unlabeled data by adversarial pre-training;
    its labels are retained only so the no-leakage audit can count how many
    OOD-labeled samples ever reach a training step (must be zero).
    """

    ood_class: int
    in_dist_classes: tuple[int, ...]
    pretrain_pool: ImageDataset
    support_set: ImageDataset
    support_indices: np.ndarray  # indices into the source train split
    test_set: ImageDataset
    n_support: int
    seed: int

    def __post_init__(self):
        if self.ood_class in self.in_dist_classes:
            raise DataConsistencyError("ood_class listed among in-distribution classes")
        if np.any(self.pretrain_pool.labels == self.ood_class):
            raise DataConsistencyError("pretrain pool contains OOD-labeled samples")
        if np.any(self.support_set.labels == self.ood_class):
            raise DataConsistencyError("support set contains OOD-labeled samples")
        self.support_indices.setflags(write=False)

    def support_class_index(self, label: int) -> int:
        """Position of `label` in the ordered in-distribution class list."""
        return self.in_dist_classes.index(label)


@dataclass(frozen=True)
class BatchPlan:
    """Deterministic batching policy; reshuffles per epoch from (seed, epoch)."""

    batch_size: int
    shuffle_seed: int = 0
    drop_last: bool = False

    def __post_init__(self):
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be positive, got {self.batch_size}")


def parse_idx(images_path, labels_path, split: str = "train") -> ImageDataset:
    """Parse a big-endian IDX image/label file pair into an ImageDataset."""
    with open(labels_path, "rb") as f:
        header = f.read(8)
        if len(header) < 8:
            raise IdxFormatError(f"truncated header in {labels_path}")
        magic, n_labels = struct.unpack(">II", header)
        if magic != LABELS_MAGIC:
            raise IdxFormatError(f"bad magic 0x{magic:08x} in labels file {labels_path}")
        raw = f.read(n_labels)
        if len(raw) < n_labels:
            raise IdxFormatError(f"truncated label payload in {labels_path}")
        labels = np.frombuffer(raw, dtype=np.uint8).astype(np.int64)

    with open(images_path, "rb") as f:
        header = f.read(16)
        if len(header) < 16:
            raise IdxFormatError(f"truncated header in {images_path}")
        magic, n_images, rows, cols = struct.unpack(">IIII", header)
        if magic != IMAGES_MAGIC:
            raise IdxFormatError(f"bad magic 0x{magic:08x} in images file {images_path}")
        raw = f.read(n_images * rows * cols)
        if len(raw) < n_images * rows * cols:
            raise IdxFormatError(f"truncated image payload in {images_path}")
        pixels = np.frombuffer(raw, dtype=np.uint8)

    if n_images != n_labels:
        raise DataConsistencyError(
            f"{n_images} images in {images_path} but {n_labels} labels in {labels_path}"
        )

    images = pixels.reshape(n_images, rows, cols, 1).astype(np.float32)
    images = images * np.float32(2.0 / 255.0) - np.float32(1.0)
    return ImageDataset(images=images, labels=labels, split=split)


def write_idx(dataset: ImageDataset, images_path, labels_path) -> None:
    """Serialize a dataset back to IDX bytes (inverse of `parse_idx`)."""
    n, rows, cols, channels = dataset.images.shape
    if channels != 1:
        raise ValueError("IDX writer handles single-channel images only")
    bytes_img = np.rint((dataset.images.astype(np.float64) + 1.0) * 127.5)
    bytes_img = np.clip(bytes_img, 0, 255).astype(np.uint8)

    with open(images_path, "wb") as f:
        f.write(struct.pack(">IIII", IMAGES_MAGIC, n, rows, cols))
        f.write(bytes_img.tobytes())
    with open(labels_path, "wb") as f:
        f.write(struct.pack(">II", LABELS_MAGIC, n))
        f.write(dataset.labels.astype(np.uint8).tobytes())


def build_task(
    train: ImageDataset,
    test: ImageDataset,
    ood_class: int,
    n_support: int,
    seed: int,
) -> OodTask:
    """Build a leave-one-class-out task with an n-per-class support set.

    The pre-training pool is every train image not labeled `ood_class`; the
    support set is sampled uniformly without replacement from the train split,
    reproducibly from `seed`. The test split is passed through untouched.
    """
    train_classes = set(np.unique(train.labels).tolist())
    if ood_class not in train_classes:
        raise DataConsistencyError(f"ood_class {ood_class} absent from train split")
    if ood_class not in set(np.unique(test.labels).tolist()):
        raise DataConsistencyError(f"ood_class {ood_class} absent from test split")

    in_dist = tuple(sorted(train_classes - {ood_class}))
    pool_mask = train.labels != ood_class
    pretrain_pool = train.subset(np.flatnonzero(pool_mask))

    rng = np.random.default_rng(seed)
    support_indices = []
    for k in in_dist:
        candidates = np.flatnonzero(train.labels == k)
        if candidates.size < n_support:
            raise InsufficientDataError(
                f"class {k} has {candidates.size} train examples, need {n_support}"
            )
        chosen = rng.choice(candidates, size=n_support, replace=False)
        support_indices.append(np.sort(chosen))
    support_indices = np.concatenate(support_indices)

    return OodTask(
        ood_class=ood_class,
        in_dist_classes=in_dist,
        pretrain_pool=pretrain_pool,
        support_set=train.subset(support_indices),
        support_indices=support_indices,
        test_set=test,
        n_support=n_support,
        seed=seed,
    )


def iterate_batches(dataset: ImageDataset, plan: BatchPlan, epoch: int = 0):
    """Yield (images, labels) batches in a deterministic shuffled order.

    The permutation is a pure function of (plan.shuffle_seed, epoch); each
    epoch reshuffles. With drop_last the trailing remainder is discarded.
    """
    n = len(dataset)
    if n == 0:
        raise EmptyInputError("cannot batch an empty dataset")
    order = np.random.default_rng([plan.shuffle_seed, epoch]).permutation(n)
    stop = n - n % plan.batch_size if plan.drop_last else n
    for start in range(0, stop, plan.batch_size):
        idx = order[start : start + plan.batch_size]
        yield dataset.images[idx], dataset.labels[idx]
