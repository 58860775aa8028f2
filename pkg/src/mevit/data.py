"""Dataset ingestion: IDX parsing, synthetic tasks, splits and batching."""

from __future__ import annotations

import gzip
import os
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator

import numpy as np

from .tensor import Tensor, make_rng

__all__ = [
    "LabeledImageSet",
    "IdxError",
    "BadMagicError",
    "TruncatedFileError",
    "CountMismatchError",
    "IMAGES_MAGIC",
    "LABELS_MAGIC",
    "load_idx",
    "write_idx_images",
    "write_idx_labels",
    "load_fashion_mnist",
    "gen_count_regression",
    "gen_two_class_images",
    "train_val_split",
    "batches",
    "data_dir",
]

IMAGES_MAGIC = 0x00000803
LABELS_MAGIC = 0x00000801

DATA_DIR_ENV = "MEVIT_DATA_DIR"


class IdxError(ValueError):
    """Malformed IDX input; no partially constructed set escapes."""


class BadMagicError(IdxError):
    pass


class TruncatedFileError(IdxError):
    pass


class CountMismatchError(IdxError):
    pass


@dataclass
class LabeledImageSet:
    """Images normalized to [0, 1] with class indices or real-valued counts."""

    images: np.ndarray  # [n, h, w, c] float64
    targets: np.ndarray  # [n] int64 (classes) or float64 (regression)
    split: str = "train"

    def __post_init__(self):
        if self.images.ndim != 4:
            raise ValueError(f"images must be [n, h, w, c], got shape {self.images.shape}")
        if len(self.images) != len(self.targets):
            raise CountMismatchError(
                f"{len(self.images)} images vs {len(self.targets)} targets"
            )

    def __len__(self) -> int:
        return len(self.images)

    def subset(self, idx, split: str | None = None) -> "LabeledImageSet":
        return LabeledImageSet(self.images[idx], self.targets[idx], split or self.split)


def data_dir(override: str | None = None) -> Path:
    """Data directory: explicit argument, else $MEVIT_DATA_DIR, else ./data."""
    return Path(override or os.environ.get(DATA_DIR_ENV, "data"))


def _read_all(path) -> bytes:
    opener = gzip.open if str(path).endswith(".gz") else open
    with opener(path, "rb") as f:
        return f.read()


def _parse_idx(raw: bytes, expected_magic: int, path) -> np.ndarray:
    if len(raw) < 4:
        raise TruncatedFileError(f"{path}: shorter than the 4-byte magic")
    (magic,) = struct.unpack(">I", raw[:4])
    if magic != expected_magic:
        raise BadMagicError(f"{path}: magic 0x{magic:08x}, expected 0x{expected_magic:08x}")
    ndim = magic & 0xFF
    header_len = 4 + 4 * ndim
    if len(raw) < header_len:
        raise TruncatedFileError(f"{path}: truncated dimension header")
    dims = struct.unpack(f">{ndim}I", raw[4:header_len])
    payload = raw[header_len:]
    expected = int(np.prod(dims))
    if len(payload) < expected:
        raise TruncatedFileError(f"{path}: payload {len(payload)} bytes, expected {expected}")
    if len(payload) > expected:
        raise IdxError(f"{path}: {len(payload) - expected} trailing bytes")
    return np.frombuffer(payload, dtype=np.uint8).reshape(dims)


def load_idx(images_path, labels_path, split: str = "train") -> LabeledImageSet:
    """Load a big-endian IDX image/label file pair (.gz transparently)."""
    images = _parse_idx(_read_all(images_path), IMAGES_MAGIC, images_path)
    labels = _parse_idx(_read_all(labels_path), LABELS_MAGIC, labels_path)
    if images.shape[0] != labels.shape[0]:
        raise CountMismatchError(
            f"{images.shape[0]} images in {images_path} vs {labels.shape[0]} labels in {labels_path}"
        )
    scaled = images.astype(np.float64)[..., None] / 255.0
    return LabeledImageSet(scaled, labels.astype(np.int64), split)


def write_idx_images(path, images: np.ndarray) -> None:
    """Write uint8 [n, h, w] images in IDX format (.gz by suffix)."""
    images = np.ascontiguousarray(images, dtype=np.uint8)
    n, h, w = images.shape
    opener = gzip.open if str(path).endswith(".gz") else open
    with opener(path, "wb") as f:
        f.write(struct.pack(">IIII", IMAGES_MAGIC, n, h, w))
        f.write(images.tobytes())


def write_idx_labels(path, labels: np.ndarray) -> None:
    labels = np.ascontiguousarray(labels, dtype=np.uint8)
    opener = gzip.open if str(path).endswith(".gz") else open
    with opener(path, "wb") as f:
        f.write(struct.pack(">II", LABELS_MAGIC, len(labels)))
        f.write(labels.tobytes())


_FASHION_FILES = {
    "train": ("train-images-idx3-ubyte", "train-labels-idx1-ubyte"),
    "test": ("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"),
}


def load_fashion_mnist(directory=None, split: str = "train", limit: int | None = None) -> LabeledImageSet:
    """Load Fashion-MNIST IDX files (plain or .gz) from a data directory."""
    if split not in _FASHION_FILES:
        raise ValueError(f"split must be 'train' or 'test', got {split!r}")
    base = data_dir(directory)
    paths = []
    for stem in _FASHION_FILES[split]:
        plain, gz = base / stem, base / (stem + ".gz")
        if plain.exists():
            paths.append(plain)
        elif gz.exists():
            paths.append(gz)
        else:
            raise FileNotFoundError(f"missing {stem}[.gz] under {base}")
    ds = load_idx(paths[0], paths[1], split)
    if limit is not None:
        ds = ds.subset(slice(0, limit))
    return ds


def gen_count_regression(
    n: int, seed: int, image_size: int = 28, max_count: int = 20, split: str = "train"
) -> LabeledImageSet:
    """Synthetic count-the-blobs regression: k Gaussian bumps at random
    positions, target is k. Deterministic per seed."""
    if n <= 0:
        raise ValueError("n must be positive")
    rng = make_rng(seed)
    yy, xx = np.mgrid[0:image_size, 0:image_size]
    images = np.zeros((n, image_size, image_size, 1))
    targets = np.zeros(n)
    sigma = 1.3
    margin = 2
    for i in range(n):
        k = int(rng.integers(0, max_count + 1))
        targets[i] = k
        canvas = np.zeros((image_size, image_size))
        for _ in range(k):
            cy, cx = rng.uniform(margin, image_size - margin, size=2)
            canvas += np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * sigma**2))
        images[i, :, :, 0] = np.clip(canvas, 0.0, 1.0)
    return LabeledImageSet(images, targets, split)


def gen_two_class_images(n: int, seed: int, image_size: int = 28, split: str = "train") -> LabeledImageSet:
    """Linearly separable two-class images: a bright block in the top-left
    quadrant (class 0) or the bottom-right quadrant (class 1), plus noise."""
    if n <= 0:
        raise ValueError("n must be positive")
    rng = make_rng(seed)
    half = image_size // 2
    images = rng.uniform(0.0, 0.3, size=(n, image_size, image_size, 1))
    targets = rng.integers(0, 2, size=n).astype(np.int64)
    for i in range(n):
        if targets[i] == 0:
            images[i, :half, :half, 0] += 0.6
        else:
            images[i, half:, half:, 0] += 0.6
    return LabeledImageSet(np.clip(images, 0.0, 1.0), targets, split)


def train_val_split(ds: LabeledImageSet, fraction: float = 0.1, seed: int = 0):
    """Deterministic shuffled split; ``fraction`` of samples go to validation."""
    if not 0.0 < fraction < 1.0:
        raise ValueError("fraction must be in (0, 1)")
    perm = make_rng(seed).permutation(len(ds))
    n_val = max(1, int(round(len(ds) * fraction)))
    return ds.subset(perm[n_val:], "train"), ds.subset(perm[:n_val], "val")


def batches(
    ds: LabeledImageSet, batch_size: int, rng: np.random.Generator | None = None
) -> Iterator[tuple[Tensor, np.ndarray]]:
    """Minibatches as (images Tensor, raw targets); shuffled when given an rng."""
    order = rng.permutation(len(ds)) if rng is not None else np.arange(len(ds))
    for start in range(0, len(ds), batch_size):
        idx = order[start : start + batch_size]
        yield Tensor(ds.images[idx]), ds.targets[idx]
