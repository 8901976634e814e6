"""Dataset loading (IDX, CSV), synthetic blobs and seeded batching."""

from __future__ import annotations

import csv
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import FormatError, InputError

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801


@dataclass
class Dataset:
    inputs: np.ndarray
    labels: np.ndarray
    num_classes: int

    def __post_init__(self):
        self.inputs = np.asarray(self.inputs, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        n = self.labels.shape[0]
        if n < 1:
            raise InputError("dataset is empty")
        if self.labels.ndim != 1 or self.inputs.shape[0] != n:
            raise InputError(
                f"inputs {self.inputs.shape} and labels {self.labels.shape} disagree on N"
            )
        if self.labels.min() < 0 or self.labels.max() >= self.num_classes:
            raise InputError(f"labels must lie in [0, {self.num_classes})")

    def __len__(self):
        return self.labels.shape[0]

    def subset(self, idx) -> "Dataset":
        return Dataset(self.inputs[idx], self.labels[idx], self.num_classes)


def _read_idx(path, expected_magic: int, ndim: int) -> np.ndarray:
    raw = Path(path).read_bytes()
    header = 4 + 4 * ndim
    if len(raw) < header:
        raise FormatError(f"{path}: truncated IDX header")
    magic = struct.unpack(">I", raw[:4])[0]
    if magic != expected_magic:
        raise FormatError(f"{path}: bad IDX magic 0x{magic:08x}, expected 0x{expected_magic:08x}")
    dims = struct.unpack(f">{ndim}I", raw[4:header])
    count = int(np.prod(dims))
    body = raw[header:]
    if len(body) != count:
        raise FormatError(f"{path}: expected {count} data bytes for dims {dims}, found {len(body)}")
    return np.frombuffer(body, dtype=np.uint8).reshape(dims)


def load_idx(images_path, labels_path, num_classes: int | None = None) -> Dataset:
    """Read an IDX image/label pair; pixels are scaled to [0, 1], shape N x 1 x H x W."""
    images = _read_idx(images_path, IDX_IMAGES_MAGIC, 3)
    labels = _read_idx(labels_path, IDX_LABELS_MAGIC, 1)
    if images.shape[0] != labels.shape[0]:
        raise FormatError(f"{images.shape[0]} images but {labels.shape[0]} labels")
    n, h, w = images.shape
    inputs = images.reshape(n, 1, h, w).astype(np.float64) / 255.0
    labels = labels.astype(np.int64)
    if num_classes is None:
        num_classes = int(labels.max()) + 1
    return Dataset(inputs, labels, num_classes)


def write_idx(images: np.ndarray, labels, images_path, labels_path) -> None:
    """Write uint8 images (N x H x W) and labels in IDX format."""
    images = np.asarray(images, dtype=np.uint8)
    labels = np.asarray(labels, dtype=np.uint8)
    with open(images_path, "wb") as f:
        f.write(struct.pack(">4I", IDX_IMAGES_MAGIC, *images.shape))
        f.write(images.tobytes())
    with open(labels_path, "wb") as f:
        f.write(struct.pack(">2I", IDX_LABELS_MAGIC, labels.shape[0]))
        f.write(labels.tobytes())


def load_csv(path, num_classes: int | None = None) -> Dataset:
    """Rows are ``label,feature,feature,...``; features are not normalized."""
    labels, rows, width = [], [], None
    with open(path, newline="") as f:
        for lineno, row in enumerate(csv.reader(f), start=1):
            if not row or all(not c.strip() for c in row):
                continue
            if width is None:
                width = len(row)
                if width < 2:
                    raise FormatError(f"{path}:{lineno}: need a label and at least one feature")
            elif len(row) != width:
                raise FormatError(f"{path}:{lineno}: expected {width} columns, got {len(row)}")
            try:
                label = float(row[0])
                feats = [float(c) for c in row[1:]]
            except ValueError:
                raise FormatError(f"{path}:{lineno}: non-numeric cell in {row!r}") from None
            if label != int(label):
                raise FormatError(f"{path}:{lineno}: label {row[0]!r} is not an integer")
            labels.append(int(label))
            rows.append(feats)
    if not rows:
        raise InputError(f"{path}: no data rows")
    labels = np.array(labels, dtype=np.int64)
    if num_classes is None:
        num_classes = int(labels.max()) + 1
    return Dataset(np.array(rows, dtype=np.float64), labels, num_classes)


def gen_blobs(n_per_class: int, num_classes: int, dim: int, spread: float, seed: int) -> Dataset:
    """Gaussian blobs around ``4 * e_c`` (scaled unit-simplex vertices)."""
    if min(n_per_class, num_classes, dim) < 1 or spread < 0:
        raise InputError("gen_blobs needs positive sizes and non-negative spread")
    if num_classes > dim:
        raise InputError(f"need dim >= num_classes for distinct simplex centers ({dim} < {num_classes})")
    rng = np.random.default_rng(seed)
    centers = 4.0 * np.eye(dim)[:num_classes]
    labels = np.repeat(np.arange(num_classes), n_per_class)
    inputs = centers[labels] + spread * rng.standard_normal((labels.shape[0], dim))
    return Dataset(inputs, labels, num_classes)


def gen_blob_images(n_per_class: int, num_classes: int, side: int, spread: float, seed: int) -> Dataset:
    """Blobs in ``side * side`` dimensions reshaped to N x 1 x side x side."""
    ds = gen_blobs(n_per_class, num_classes, side * side, spread, seed)
    return Dataset(ds.inputs.reshape(-1, 1, side, side), ds.labels, num_classes)


def split(ds: Dataset, test_fraction: float, seed: int) -> tuple[Dataset, Dataset]:
    """Deterministic shuffled train/test split."""
    if not 0.0 < test_fraction < 1.0:
        raise InputError(f"test_fraction must be in (0, 1), got {test_fraction}")
    perm = np.random.default_rng(seed).permutation(len(ds))
    n_test = max(1, int(round(test_fraction * len(ds))))
    if n_test >= len(ds):
        raise InputError("dataset too small to split")
    return ds.subset(np.sort(perm[n_test:])), ds.subset(np.sort(perm[:n_test]))


def batches(ds: Dataset, batch_size: int, epoch: int, seed: int):
    """Yield ``(inputs, labels)`` over a permutation derived from ``(seed, epoch)``."""
    if batch_size < 1:
        raise InputError(f"batch_size must be >= 1, got {batch_size}")
    perm = np.random.default_rng([seed, epoch]).permutation(len(ds))
    for start in range(0, len(ds), batch_size):
        idx = perm[start:start + batch_size]
        yield ds.inputs[idx], ds.labels[idx]
