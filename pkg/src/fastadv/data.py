"""Desk-scale datasets: synthetic blobs, IDX (MNIST family) and CIFAR-10 binary files."""
from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator, Optional

import numpy as np

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801
CIFAR_RECORD = 1 + 3 * 32 * 32


class DataFormatError(ValueError):
    """Base class for malformed dataset files."""


class MagicError(DataFormatError):
    pass


class TruncatedError(DataFormatError):
    pass


class CountMismatchError(DataFormatError):
    pass


class RecordLengthError(DataFormatError):
    pass


class LabelRangeError(DataFormatError):
    pass


@dataclass
class Dataset:
    x: np.ndarray  # (N, *input_shape), values in [0, 1]
    y: np.ndarray  # (N,) int64
    name: str
    num_classes: int

    def __post_init__(self):
        if len(self.x) != len(self.y):
            raise ValueError(f"{self.name}: {len(self.x)} examples but {len(self.y)} labels")
        if self.y.size and (self.y.min() < 0 or self.y.max() >= self.num_classes):
            raise LabelRangeError(f"{self.name}: labels outside [0, {self.num_classes})")
        if self.x.size and (self.x.min() < 0 or self.x.max() > 1):
            raise ValueError(f"{self.name}: values outside [0, 1]")

    def __len__(self) -> int:
        return len(self.y)

    @property
    def input_shape(self) -> tuple:
        return tuple(self.x.shape[1:])

    def subset(self, n: Optional[int], name: Optional[str] = None) -> "Dataset":
        """First ``n`` examples (all when n is None)."""
        if n is None:
            return self
        return Dataset(self.x[:n], self.y[:n], name or f"{self.name}[:{n}]", self.num_classes)

    def astype(self, dtype) -> "Dataset":
        return Dataset(self.x.astype(dtype), self.y, self.name, self.num_classes)


@dataclass(frozen=True)
class Batch:
    indices: np.ndarray
    x: np.ndarray
    y: np.ndarray


def gen_synthetic_blobs(classes: int, dim: int, n_per_class: int, spread: float,
                        seed: int, dtype=np.float32) -> Dataset:
    """Gaussian clusters around scaled simplex vertices ``0.25 + 0.5 * e_k``.

    Points are clipped into [0, 1]; examples are ordered class by class.
    """
    if classes < 2:
        raise ValueError("need at least 2 classes")
    if dim < classes:
        raise ValueError(f"dim ({dim}) must be >= classes ({classes}) for simplex means")
    rng = np.random.default_rng(seed)
    means = blob_means(classes, dim)
    x = np.repeat(means, n_per_class, axis=0)
    x = x + spread * rng.standard_normal(x.shape)
    y = np.repeat(np.arange(classes), n_per_class)
    return Dataset(np.clip(x, 0.0, 1.0).astype(dtype), y.astype(np.int64),
                   f"blobs(c={classes},d={dim},seed={seed})", classes)


def blob_means(classes: int, dim: int) -> np.ndarray:
    means = np.full((classes, dim), 0.25)
    means[np.arange(classes), np.arange(classes)] = 0.75
    return means


def _read_header(raw: bytes, path, expected_magic: int) -> tuple[int, tuple]:
    if len(raw) < 4:
        raise TruncatedError(f"{path}: file too short for an IDX header")
    (magic,) = struct.unpack(">I", raw[:4])
    if magic != expected_magic:
        raise MagicError(f"{path}: magic 0x{magic:08x}, expected 0x{expected_magic:08x}")
    ndim = magic & 0xFF
    if len(raw) < 4 + 4 * ndim:
        raise TruncatedError(f"{path}: truncated IDX dimension header")
    dims = struct.unpack(f">{ndim}I", raw[4:4 + 4 * ndim])
    return 4 + 4 * ndim, dims


def _read_payload(raw: bytes, path, offset: int, dims: tuple) -> np.ndarray:
    n = int(np.prod(dims))
    if len(raw) - offset < n:
        raise TruncatedError(f"{path}: expected {n} data bytes, found {len(raw) - offset}")
    if len(raw) - offset > n:
        raise DataFormatError(f"{path}: {len(raw) - offset - n} trailing bytes")
    return np.frombuffer(raw, dtype=np.uint8, count=n, offset=offset).reshape(dims)


def load_idx(images_path, labels_path, num_classes: int = 10, dtype=np.float32,
             name: Optional[str] = None) -> Dataset:
    """Read an IDX image/label pair; pixels become ``byte / 255`` with a channel axis."""
    raw_x = Path(images_path).read_bytes()
    raw_y = Path(labels_path).read_bytes()
    off_x, dims_x = _read_header(raw_x, images_path, IDX_IMAGES_MAGIC)
    off_y, dims_y = _read_header(raw_y, labels_path, IDX_LABELS_MAGIC)
    if dims_x[0] != dims_y[0]:
        raise CountMismatchError(f"{images_path} has {dims_x[0]} images but "
                                 f"{labels_path} has {dims_y[0]} labels")
    images = _read_payload(raw_x, images_path, off_x, dims_x)
    labels = _read_payload(raw_y, labels_path, off_y, dims_y).astype(np.int64)
    if labels.size and labels.max() >= num_classes:
        raise LabelRangeError(f"{labels_path}: label {labels.max()} >= {num_classes}")
    x = (images.astype(np.float64) / 255.0).astype(dtype)[:, None, :, :]
    return Dataset(x, labels, name or Path(images_path).name, num_classes)


def write_idx(images: np.ndarray, labels: np.ndarray, images_path, labels_path) -> None:
    """Write uint8 images (N, H, W) and labels (N,) as an IDX pair."""
    images = np.asarray(images, dtype=np.uint8)
    labels = np.asarray(labels, dtype=np.uint8)
    Path(images_path).write_bytes(struct.pack(">IIII", IDX_IMAGES_MAGIC, *images.shape)
                                  + images.tobytes())
    Path(labels_path).write_bytes(struct.pack(">II", IDX_LABELS_MAGIC, len(labels))
                                  + labels.tobytes())


def load_cifar10_binary(path, dtype=np.float32, name: Optional[str] = None) -> Dataset:
    """Read CIFAR-10 binary records: 1 label byte then 3x32x32 channel-major pixels."""
    raw = Path(path).read_bytes()
    if len(raw) % CIFAR_RECORD:
        raise RecordLengthError(f"{path}: length {len(raw)} is not a multiple of {CIFAR_RECORD}")
    rec = np.frombuffer(raw, dtype=np.uint8).reshape(-1, CIFAR_RECORD)
    labels = rec[:, 0].astype(np.int64)
    if labels.size and labels.max() >= 10:
        bad = int(np.argmax(labels >= 10))
        raise LabelRangeError(f"{path}: record {bad} has label {labels[bad]} >= 10")
    x = (rec[:, 1:].astype(np.float64) / 255.0).astype(dtype).reshape(-1, 3, 32, 32)
    return Dataset(x, labels, name or Path(path).name, 10)


def write_cifar10_binary(images: np.ndarray, labels: np.ndarray, path) -> None:
    images = np.asarray(images, dtype=np.uint8).reshape(len(labels), -1)
    rec = np.concatenate([np.asarray(labels, dtype=np.uint8)[:, None], images], axis=1)
    Path(path).write_bytes(rec.tobytes())


def epoch_permutation(n: int, epoch: int, seed: int) -> np.ndarray:
    return np.random.default_rng([seed, epoch]).permutation(n)


def batch_iter(dataset: Dataset, batch_size: int, epoch: int, seed: int) -> Iterator[Batch]:
    """Shuffled mini-batches; the order depends only on ``(seed, epoch)``."""
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    perm = epoch_permutation(len(dataset), epoch, seed)
    for start in range(0, len(perm), batch_size):
        idx = perm[start:start + batch_size]
        yield Batch(idx, dataset.x[idx], dataset.y[idx])
