"""CIFAR-100 ingestion, deterministic splits, fraction subsetting, and
augmentation.

Binary layout per record: one coarse label byte (discarded), one fine label
byte, then 3072 pixel bytes as channel-planar R,G,B row-major planes.
``train.bin`` holds 50000 records and ``test.bin`` 10000. Normalization
statistics are computed from the training pool once and carried in the split
objects rather than hard-coded.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field

import numpy as np

from .errors import FractionOutOfRange, LabelOutOfRange, MissingFile, TruncatedRecord

__all__ = [
    "RECORD_BYTES",
    "NUM_CLASSES",
    "DatasetSplit",
    "load_cifar100",
    "compute_channel_stats",
    "make_splits",
    "normalize_images",
    "materialize_test_split",
    "augment",
    "write_synthetic_cifar100",
]

RECORD_BYTES = 3074          # coarse byte + fine byte + 3 * 1024 pixels
NUM_CLASSES = 100
IMAGE_SHAPE = (3, 32, 32)


@dataclass
class DatasetSplit:
    """Normalized images plus labels for one split."""

    images: np.ndarray           # (N, 3, 32, 32) float32, normalized
    labels: np.ndarray           # (N,) int64 fine labels
    split_kind: str              # "train" | "val" | "test"
    fraction: float = 1.0
    channel_mean: np.ndarray = field(default_factory=lambda: np.zeros(3))
    channel_std: np.ndarray = field(default_factory=lambda: np.ones(3))

    def __len__(self) -> int:
        return len(self.labels)


def _read_records(path: str | os.PathLike) -> tuple[np.ndarray, np.ndarray]:
    if not os.path.exists(path):
        raise MissingFile(f"dataset file not found: {path}")
    raw = np.fromfile(path, dtype=np.uint8)
    if raw.size % RECORD_BYTES:
        offset = raw.size - raw.size % RECORD_BYTES
        raise TruncatedRecord(
            f"{path}: {raw.size} bytes is not a whole number of {RECORD_BYTES}-byte "
            f"records (truncated at byte offset {offset})")
    records = raw.reshape(-1, RECORD_BYTES)
    fine = records[:, 1].astype(np.int64)
    if fine.size and fine.max() >= NUM_CLASSES:
        raise LabelOutOfRange(f"{path}: fine label {fine.max()} >= {NUM_CLASSES}")
    images = records[:, 2:].reshape(-1, *IMAGE_SHAPE)
    return images, fine


def load_cifar100(dir_path: str | os.PathLike):
    """Load train.bin/test.bin; returns ((images, labels), (images, labels))
    with uint8 images. The standard files hold 50000 and 10000 records."""
    train = _read_records(os.path.join(dir_path, "train.bin"))
    test = _read_records(os.path.join(dir_path, "test.bin"))
    return train, test


def compute_channel_stats(images_u8: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Per-channel mean/std of images scaled to [0, 1]."""
    scaled = images_u8.astype(np.float64) / 255.0
    return scaled.mean(axis=(0, 2, 3)), scaled.std(axis=(0, 2, 3))


def normalize_images(images_u8: np.ndarray, mean: np.ndarray, std: np.ndarray) -> np.ndarray:
    x = images_u8.astype(np.float32) / np.float32(255.0)
    x -= mean.reshape(1, 3, 1, 1).astype(np.float32)
    x /= std.reshape(1, 3, 1, 1).astype(np.float32)
    return x


def make_splits(train_raw, val_count: int = 5000, fraction: float = 1.0,
                seed: int = 0) -> tuple[DatasetSplit, DatasetSplit]:
    """Deterministic class-stratified validation carve-out plus nested
    fraction subsetting of the remaining pool.

    Per class: a seeded permutation supplies ``val_count / 100`` validation
    images, and the training subset is the first round(fraction * pool)
    entries of the rest, so smaller fractions are prefixes of larger ones.
    """
    if not 0.0 < fraction <= 1.0:
        raise FractionOutOfRange(f"fraction must be in (0, 1], got {fraction}")
    images, labels = train_raw
    rng = np.random.default_rng(seed)
    val_per_class = val_count // NUM_CLASSES

    val_idx, train_idx = [], []
    for c in range(NUM_CLASSES):
        pool = rng.permutation(np.flatnonzero(labels == c))
        val_idx.append(pool[:val_per_class])
        rest = pool[val_per_class:]
        take = int(round(len(rest) * fraction))
        train_idx.append(rest[:take])
    val_idx = np.concatenate(val_idx)
    train_idx = np.concatenate(train_idx)

    # stats come from the full post-validation pool, independent of fraction
    pool_mask = np.ones(len(labels), dtype=bool)
    pool_mask[val_idx] = False
    mean, std = compute_channel_stats(images[pool_mask])

    def build(idx, kind, frac):
        return DatasetSplit(images=normalize_images(images[idx], mean, std),
                            labels=labels[idx].copy(), split_kind=kind, fraction=frac,
                            channel_mean=mean, channel_std=std)

    return build(train_idx, "train", fraction), build(val_idx, "val", 1.0)


def materialize_test_split(test_raw, reference: DatasetSplit) -> DatasetSplit:
    """Normalize the test set with the training statistics carried by any
    existing split."""
    images, labels = test_raw
    return DatasetSplit(
        images=normalize_images(images, reference.channel_mean, reference.channel_std),
        labels=labels.copy(), split_kind="test", fraction=1.0,
        channel_mean=reference.channel_mean, channel_std=reference.channel_std)


def augment(batch: np.ndarray, rng: np.random.Generator,
            pad: int = 4, flip_prob: float = 0.5) -> np.ndarray:
    """Pad-and-crop plus horizontal flip, drawn from the supplied generator.

    Training-time only; padding is zeros, which is the per-channel mean in
    normalized coordinates.
    """
    b, c, h, w = batch.shape
    padded = np.pad(batch, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    offsets = rng.integers(0, 2 * pad + 1, size=(b, 2))
    flips = rng.random(b) < flip_prob
    out = np.empty_like(batch)
    for i in range(b):
        oy, ox = offsets[i]
        crop = padded[i, :, oy:oy + h, ox:ox + w]
        out[i] = crop[:, :, ::-1] if flips[i] else crop
    return out


def write_synthetic_cifar100(dir_path: str | os.PathLike, seed: int = 0,
                             n_train: int = 50000, n_test: int = 10000) -> None:
    """Write a deterministic stand-in dataset in the exact binary format.

    Each class gets a fixed low-frequency template; records are the template
    plus pixel noise, so the classes are learnable at desk scale. Useful when
    the real CIFAR-100 binaries are not on disk.
    """
    os.makedirs(dir_path, exist_ok=True)
    rng = np.random.default_rng(seed)
    base = rng.integers(40, 216, size=(NUM_CLASSES, 3, 4, 4))
    templates = np.kron(base, np.ones((1, 1, 8, 8))).astype(np.int16)

    def write(path, n, label_rng):
        labels = label_rng.permutation(np.arange(n) % NUM_CLASSES).astype(np.uint8)
        with open(path, "wb") as fh:
            for start in range(0, n, 10000):
                stop = min(start + 10000, n)
                lab = labels[start:stop]
                noise = label_rng.integers(-60, 61, size=(stop - start, *IMAGE_SHAPE),
                                           dtype=np.int16)
                pix = np.clip(templates[lab] + noise, 0, 255).astype(np.uint8)
                rec = np.empty((stop - start, RECORD_BYTES), dtype=np.uint8)
                rec[:, 0] = lab // 5          # coarse label byte (discarded on load)
                rec[:, 1] = lab
                rec[:, 2:] = pix.reshape(stop - start, -1)
                fh.write(rec.tobytes())

    write(os.path.join(dir_path, "train.bin"), n_train, np.random.default_rng(seed + 1))
    write(os.path.join(dir_path, "test.bin"), n_test, np.random.default_rng(seed + 2))
