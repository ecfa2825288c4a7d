"""MNIST IDX ingestion, synthetic matrices, and deterministic batch streams."""

from __future__ import annotations

import gzip
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator

import numpy as np

from .errors import FormatError, ParameterError
from .tensor import RngStream, Tensor

IDX_IMAGE_MAGIC = 0x00000803
IDX_LABEL_MAGIC = 0x00000801


@dataclass
class Dataset:
    """Images scaled to [0, 1] as (n, 1, 28, 28) float64 plus integer labels."""

    images: Tensor
    labels: np.ndarray

    def __len__(self) -> int:
        return self.images.shape[0]


def _read_bytes(path) -> bytes:
    # .gz suffix means the IDX payload is gzip-compressed on disk.
    if str(path).endswith(".gz"):
        with gzip.open(path, "rb") as f:
            return f.read()
    with open(path, "rb") as f:
        return f.read()


def _parse_idx_images(blob: bytes, path) -> np.ndarray:
    if len(blob) < 16:
        raise FormatError(f"{path}: truncated image header ({len(blob)} bytes, need 16)")
    magic, n, rows, cols = struct.unpack_from(">IIII", blob, 0)
    if magic != IDX_IMAGE_MAGIC:
        raise FormatError(f"{path}: bad image magic 0x{magic:08x} at offset 0")
    expected = 16 + n * rows * cols
    if len(blob) != expected:
        raise FormatError(
            f"{path}: image payload is {len(blob) - 16} bytes, expected {n * rows * cols}"
            f" (offset 16)"
        )
    pixels = np.frombuffer(blob, dtype=np.uint8, count=n * rows * cols, offset=16)
    return pixels.reshape(n, 1, rows, cols)


def _parse_idx_labels(blob: bytes, path) -> np.ndarray:
    if len(blob) < 8:
        raise FormatError(f"{path}: truncated label header ({len(blob)} bytes, need 8)")
    magic, n = struct.unpack_from(">II", blob, 0)
    if magic != IDX_LABEL_MAGIC:
        raise FormatError(f"{path}: bad label magic 0x{magic:08x} at offset 0")
    if len(blob) != 8 + n:
        raise FormatError(
            f"{path}: label payload is {len(blob) - 8} bytes, expected {n} (offset 8)"
        )
    return np.frombuffer(blob, dtype=np.uint8, count=n, offset=8).astype(np.int64)


def load_mnist(images_path, labels_path) -> Dataset:
    """Load an MNIST-style IDX image/label file pair.

    Pixel bytes are scaled by 1/255. Image and label counts are
    cross-checked; any malformed header or truncation raises
    :class:`FormatError` before a partial dataset can escape.
    """
    images_path, labels_path = Path(images_path), Path(labels_path)
    for p in (images_path, labels_path):
        if not p.exists():
            raise FormatError(f"{p}: file not found")
    raw_images = _parse_idx_images(_read_bytes(images_path), images_path)
    labels = _parse_idx_labels(_read_bytes(labels_path), labels_path)
    if raw_images.shape[0] != labels.shape[0]:
        raise FormatError(
            f"count mismatch: {raw_images.shape[0]} images vs {labels.shape[0]} labels"
        )
    images = raw_images.astype(np.float64) / 255.0
    return Dataset(images=images, labels=labels)


def synthetic_gaussian(rng: RngStream, m: int, n: int) -> Tensor:
    """m x n matrix of i.i.d. standard normal entries."""
    if m < 1 or n < 1:
        raise ParameterError(f"matrix extents must be >= 1, got {m}x{n}")
    return rng.standard_normal((m, n))


def batches(
    dataset: Dataset, batch_size: int, rng: RngStream
) -> Iterator[tuple[Tensor, np.ndarray]]:
    """Endless stream of shuffled mini-batches.

    Each epoch is a fresh permutation drawn from a child stream derived from
    the epoch index, so the sequence depends only on the master seed. The
    ragged final batch of an epoch is dropped to keep step counts exact.
    """
    n = len(dataset)
    if batch_size > n:
        raise ParameterError(f"batch_size {batch_size} exceeds dataset size {n}")
    epoch = 0
    while True:
        order = rng.derive(epoch).permutation(n)
        for start in range(0, n - batch_size + 1, batch_size):
            idx = order[start : start + batch_size]
            yield dataset.images[idx], dataset.labels[idx]
        epoch += 1
