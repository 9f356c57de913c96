import struct

import numpy as np
import pytest
import torch

from ibood.data_ingest import IMAGES_MAGIC, LABELS_MAGIC, ImageDataset

torch.set_num_threads(1)


def make_idx_files(tmp_path, pixels, labels, name="fixture"):
    """Write raw IDX image/label files from a uint8 (N, H, W) array."""
    pixels = np.asarray(pixels, dtype=np.uint8)
    labels = np.asarray(labels, dtype=np.uint8)
    n, rows, cols = pixels.shape
    images_path = tmp_path / f"{name}-images-idx3-ubyte"
    labels_path = tmp_path / f"{name}-labels-idx1-ubyte"
    with open(images_path, "wb") as f:
        f.write(struct.pack(">IIII", IMAGES_MAGIC, n, rows, cols))
        f.write(pixels.tobytes())
    with open(labels_path, "wb") as f:
        f.write(struct.pack(">II", LABELS_MAGIC, n))
        f.write(labels.tobytes())
    return images_path, labels_path


def make_dataset(n_per_class, n_classes=10, side=28, seed=0, split="train"):
    """Synthetic dataset: per-class blob patterns with pixel noise."""
    rng = np.random.default_rng(seed)
    images = []
    labels = []
    for k in range(n_classes):
        base = np.full((side, side, 1), -1.0, dtype=np.float32)
        r0, c0 = 2 + (k % 5) * 4, 2 + (k // 5) * 10
        base[r0 : r0 + 6, c0 : c0 + 6, 0] = 0.8
        for _ in range(n_per_class):
            noisy = base + rng.normal(0, 0.05, base.shape).astype(np.float32)
            images.append(np.clip(noisy, -1, 1))
            labels.append(k)
    order = rng.permutation(len(images))
    return ImageDataset(
        images=np.stack(images)[order],
        labels=np.array(labels, dtype=np.int64)[order],
        split=split,
    )


@pytest.fixture
def small_train():
    return make_dataset(n_per_class=20, seed=1, split="train")


@pytest.fixture
def small_test():
    return make_dataset(n_per_class=8, seed=2, split="test")
