"""MNIST IDX and CIFAR-10 binary readers/writers, resizing, splitting and batching."""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass
from os import PathLike
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

from .errors import ConfigError, FormatError, InputError, LengthError

IDX_LABELS_MAGIC = 0x00000801
IDX_IMAGES_MAGIC = 0x00000803
CIFAR_RECORD = 1 + 3 * 32 * 32


@dataclass(frozen=True)
class Dataset:
    images: np.ndarray  # [N, C, H, W] in [0, 1]
    labels: np.ndarray  # [N] int64
    class_count: int

    def __post_init__(self):
        if self.images.ndim != 4:
            raise FormatError(f"images must be [N, C, H, W], got {self.images.shape}")
        if len(self.images) != len(self.labels):
            raise FormatError(f"{len(self.images)} images but {len(self.labels)} labels")
        if len(self.labels) and (self.labels.min() < 0 or self.labels.max() >= self.class_count):
            raise InputError(f"labels outside [0, {self.class_count})")

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def sample_shape(self) -> tuple[int, int, int]:
        return tuple(self.images.shape[1:])

    def subset(self, idx) -> "Dataset":
        idx = np.asarray(idx, dtype=np.int64)
        return Dataset(self.images[idx], self.labels[idx], self.class_count)

    def astype(self, dtype) -> "Dataset":
        return Dataset(self.images.astype(dtype), self.labels, self.class_count)


@dataclass(frozen=True)
class SplitConfig:
    validation_fraction: float = 0.05
    seed: int = 0

    def __post_init__(self):
        if not 0 <= self.validation_fraction < 1:
            raise ConfigError(f"validation fraction must be in [0, 1), got {self.validation_fraction}")


def _read_idx(path, expected_magic: int, ndim: int) -> np.ndarray:
    raw = Path(path).read_bytes()
    header = 4 + 4 * ndim
    if len(raw) < 4:
        raise LengthError(f"{path}: file too short for an IDX header")
    (magic,) = struct.unpack(">I", raw[:4])
    if magic != expected_magic:
        raise FormatError(f"{path}: magic 0x{magic:08x}, expected 0x{expected_magic:08x}")
    if len(raw) < header:
        raise LengthError(f"{path}: truncated IDX header")
    dims = struct.unpack(f">{ndim}I", raw[4:header])
    count = int(np.prod(dims, dtype=np.int64))
    if len(raw) - header != count:
        raise LengthError(f"{path}: header promises {count} bytes of data, found {len(raw) - header}")
    return np.frombuffer(raw, dtype=np.uint8, offset=header).reshape(dims)


def load_idx(images_path, labels_path, class_count: int = 10) -> Dataset:
    """Read an IDX image/label pair (unsigned-byte data) and scale pixels to [0, 1]."""
    pixels = _read_idx(images_path, IDX_IMAGES_MAGIC, 3)
    labels = _read_idx(labels_path, IDX_LABELS_MAGIC, 1)
    images = (pixels.astype(np.float64) / 255.0)[:, None, :, :]
    return Dataset(images, labels.astype(np.int64), class_count)


def write_idx(dataset: Dataset, images_path, labels_path) -> None:
    """Inverse of :func:`load_idx` for single-channel datasets."""
    n, c, h, w = dataset.images.shape
    if c != 1:
        raise FormatError("IDX images are single-channel")
    pixels = np.rint(dataset.images[:, 0] * 255).astype(np.uint8)
    Path(images_path).write_bytes(struct.pack(">4I", IDX_IMAGES_MAGIC, n, h, w) + pixels.tobytes())
    Path(labels_path).write_bytes(
        struct.pack(">2I", IDX_LABELS_MAGIC, n) + dataset.labels.astype(np.uint8).tobytes())


def load_cifar10(paths: Sequence[str | PathLike] | str | PathLike) -> Dataset:
    """Concatenate CIFAR-10 binary batches (3073-byte records, planar RGB)."""
    if isinstance(paths, (str, PathLike)):
        paths = [paths]
    chunks = []
    for p in paths:
        raw = Path(p).read_bytes()
        if len(raw) % CIFAR_RECORD:
            raise FormatError(f"{p}: length {len(raw)} is not a multiple of {CIFAR_RECORD}")
        chunks.append(np.frombuffer(raw, dtype=np.uint8).reshape(-1, CIFAR_RECORD))
    records = np.concatenate(chunks) if chunks else np.zeros((0, CIFAR_RECORD), np.uint8)
    labels = records[:, 0].astype(np.int64)
    images = records[:, 1:].reshape(-1, 3, 32, 32).astype(np.float64) / 255.0
    return Dataset(images, labels, 10)


def write_cifar10(dataset: Dataset, path) -> None:
    if dataset.sample_shape != (3, 32, 32):
        raise FormatError(f"CIFAR-10 records hold 3x32x32 images, got {dataset.sample_shape}")
    pixels = np.rint(dataset.images * 255).astype(np.uint8).reshape(len(dataset), -1)
    records = np.concatenate([dataset.labels.astype(np.uint8)[:, None], pixels], axis=1)
    Path(path).write_bytes(records.tobytes())


def resize_nearest(d: Dataset, height: int, width: int) -> Dataset:
    """Nearest-neighbour resize; source index for target row y is floor(y * H / height)."""
    if height < 1 or width < 1:
        raise ConfigError("target extents must be positive")
    h, w = d.images.shape[2:]
    if (h, w) == (height, width):
        return d
    rows = (np.arange(height) * h) // height
    cols = (np.arange(width) * w) // width
    return Dataset(d.images[:, :, rows][:, :, :, cols], d.labels, d.class_count)


def split(d: Dataset, cfg: SplitConfig) -> tuple[Dataset, Dataset]:
    """Seeded permutation; the last ceil(fraction * N) permuted samples become validation."""
    n = len(d)
    perm = np.random.default_rng(cfg.seed).permutation(n)
    n_val = math.ceil(cfg.validation_fraction * n)
    return d.subset(perm[:n - n_val]), d.subset(perm[n - n_val:])


def epoch_order(n: int, seed: int, shuffle: bool) -> np.ndarray:
    return np.random.default_rng(seed).permutation(n) if shuffle else np.arange(n)


def batches(d: Dataset, batch_size: int, seed: int = 0, shuffle: bool = True) -> Iterator[tuple[np.ndarray, np.ndarray]]:
    """Every sample exactly once, final partial batch included."""
    if batch_size < 1:
        raise ConfigError(f"batch size must be >= 1, got {batch_size}")
    order = epoch_order(len(d), seed, shuffle)
    for start in range(0, len(d), batch_size):
        idx = order[start:start + batch_size]
        yield d.images[idx], d.labels[idx]
