"""Dataset loading (IDX, CIFAR-10 binary, synthetic blobs) and batching."""

from __future__ import annotations

import gzip
import struct
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterator, Optional, Sequence

import numpy as np

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801
CIFAR_RECORD = 3073
SPLITS = ("train", "val", "test")


class DataFormatError(ValueError):
    pass


@dataclass(frozen=True)
class Dataset:
    images: np.ndarray  # [n, c, h, w]
    labels: np.ndarray  # int64 [n]
    split: str
    name: str
    class_count: int
    normalization: Optional[tuple] = field(default=None, compare=False)

    def __post_init__(self):
        if self.images.ndim != 4:
            raise DataFormatError(f"images must be [n, c, h, w], got {self.images.shape}")
        if len(self.images) == 0 or len(self.images) != len(self.labels):
            raise DataFormatError(f"{len(self.images)} images vs {len(self.labels)} labels")
        if self.split not in SPLITS:
            raise DataFormatError(f"unknown split {self.split!r}")
        if self.labels.min() < 0 or self.labels.max() >= self.class_count:
            raise DataFormatError(f"labels outside [0, {self.class_count})")
        self.images.setflags(write=False)
        self.labels.setflags(write=False)

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def input_shape(self) -> tuple[int, int, int]:
        return tuple(self.images.shape[1:])

    def subset(self, index, split: Optional[str] = None) -> "Dataset":
        return replace(self, images=self.images[index].copy(), labels=self.labels[index].copy(), split=split or self.split)


def _read(path) -> bytes:
    path = Path(path)
    raw = path.read_bytes()
    if raw[:2] == b"\x1f\x8b":
        raw = gzip.decompress(raw)
    return raw


def _scale(raw: np.ndarray, dtype) -> np.ndarray:
    dtype = np.dtype(dtype)
    return raw.astype(dtype) / dtype.type(255)


def load_idx(images_path, labels_path, split: str = "train", name: str = "mnist", dtype=np.float32, class_count: int = 10) -> Dataset:
    """Parse an IDX image/label file pair (gzip accepted)."""
    img = _read(images_path)
    lab = _read(labels_path)
    if len(img) < 16 or len(lab) < 8:
        raise DataFormatError("IDX header truncated")
    magic, n, rows, cols = struct.unpack(">IIII", img[:16])
    if magic != IDX_IMAGES_MAGIC:
        raise DataFormatError(f"{images_path}: bad image magic 0x{magic:08x}, expected 0x{IDX_IMAGES_MAGIC:08x}")
    lmagic, ln = struct.unpack(">II", lab[:8])
    if lmagic != IDX_LABELS_MAGIC:
        raise DataFormatError(f"{labels_path}: bad label magic 0x{lmagic:08x}, expected 0x{IDX_LABELS_MAGIC:08x}")
    if len(img) != 16 + n * rows * cols:
        raise DataFormatError(f"{images_path}: header says {n}x{rows}x{cols} but payload has {len(img) - 16} bytes")
    if len(lab) != 8 + ln:
        raise DataFormatError(f"{labels_path}: header says {ln} labels but payload has {len(lab) - 8} bytes")
    if ln != n:
        raise DataFormatError(f"{n} images but {ln} labels")
    pixels = np.frombuffer(img, dtype=np.uint8, offset=16).reshape(n, 1, rows, cols)
    labels = np.frombuffer(lab, dtype=np.uint8, offset=8).astype(np.int64)
    return Dataset(_scale(pixels, dtype), labels, split, name, class_count)


def load_cifar10(batch_files: Sequence, split: str = "train", name: str = "cifar10", dtype=np.float32) -> Dataset:
    """Concatenate CIFAR-10 binary batches (1 label byte + 3072 planar RGB bytes per record)."""
    images, labels = [], []
    for f in batch_files:
        raw = _read(f)
        if len(raw) % CIFAR_RECORD:
            raise DataFormatError(f"{f}: size {len(raw)} is not a multiple of {CIFAR_RECORD}")
        rec = np.frombuffer(raw, dtype=np.uint8).reshape(-1, CIFAR_RECORD)
        labels.append(rec[:, 0].astype(np.int64))
        images.append(rec[:, 1:].reshape(-1, 3, 32, 32))
    if not images:
        raise DataFormatError("no CIFAR-10 batch files given")
    return Dataset(_scale(np.concatenate(images), dtype), np.concatenate(labels), split, name, 10)


def synth_blobs(class_count: int, n_per_class: int, dim: int, seed: int, separation: float = 4.0, split: str = "train", dtype=np.float32) -> Dataset:
    """Isotropic unit-variance Gaussian clusters, one per class.

    Class means sit on scaled coordinate axes so that every pair of means is
    ``separation`` standard deviations apart.  Rows are shuffled so that a
    tail split still contains every class.  Images come out as [n, 1, 1, dim].
    """
    if class_count < 2:
        raise ValueError("synth_blobs needs class_count >= 2")
    if dim < class_count:
        raise ValueError("synth_blobs needs dim >= class_count")
    rng = np.random.Generator(np.random.PCG64(seed))
    means = np.zeros((class_count, dim))
    means[np.arange(class_count), np.arange(class_count)] = separation / np.sqrt(2.0)
    labels = np.repeat(np.arange(class_count), n_per_class)
    x = means[labels] + rng.standard_normal((len(labels), dim))
    order = rng.permutation(len(labels))
    x, labels = x[order], labels[order]
    return Dataset(x.reshape(-1, 1, 1, dim).astype(dtype), labels.astype(np.int64), split, "synth_blobs", class_count)


def split_validation(train: Dataset, fraction: float = 0.1) -> tuple[Dataset, Dataset]:
    """Hold out the last ``fraction`` of the training set, in file order."""
    n_val = int(round(len(train) * fraction))
    if n_val <= 0 or n_val >= len(train):
        raise ValueError(f"validation fraction {fraction} leaves an empty split for n={len(train)}")
    cut = len(train) - n_val
    return train.subset(slice(0, cut), "train"), train.subset(slice(cut, None), "val")


def channel_stats(ds: Dataset) -> tuple[np.ndarray, np.ndarray]:
    mean = ds.images.mean(axis=(0, 2, 3), dtype=np.float64)
    std = ds.images.std(axis=(0, 2, 3), dtype=np.float64)
    return mean, np.where(std > 0, std, 1.0)


def normalize(ds: Dataset, mean: np.ndarray, std: np.ndarray) -> Dataset:
    dt = ds.images.dtype
    m = mean.astype(dt).reshape(1, -1, 1, 1)
    s = std.astype(dt).reshape(1, -1, 1, 1)
    return replace(ds, images=(ds.images - m) / s, normalization=(tuple(mean), tuple(std)))


class BatchStream:
    """Shuffled minibatches; each epoch is a fresh permutation from one generator."""

    def __init__(self, dataset: Dataset, batch_size: int, seed: int):
        if batch_size <= 0:
            raise ValueError("batch_size must be positive")
        self.dataset = dataset
        self.batch_size = batch_size
        self.rng = np.random.Generator(np.random.PCG64(seed))
        self.order = np.arange(len(dataset))
        self.position = len(dataset)
        self.epoch = 0

    def _reshuffle(self):
        self.order = self.rng.permutation(len(self.dataset))
        self.position = 0
        self.epoch += 1

    def epoch_batches(self) -> Iterator[tuple[np.ndarray, np.ndarray]]:
        """Yield every example exactly once, in batches."""
        self._reshuffle()
        n = len(self.dataset)
        while self.position < n:
            idx = self.order[self.position : self.position + self.batch_size]
            self.position += len(idx)
            yield self.dataset.images[idx], self.dataset.labels[idx]

    def next_batch(self) -> tuple[np.ndarray, np.ndarray]:
        if self.position >= len(self.dataset):
            self._reshuffle()
        idx = self.order[self.position : self.position + self.batch_size]
        self.position += len(idx)
        return self.dataset.images[idx], self.dataset.labels[idx]


MNIST_FILES = {
    "train": ("train-images-idx3-ubyte", "train-labels-idx1-ubyte"),
    "test": ("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"),
}


def find_file(root, stem: str) -> Path:
    root = Path(root)
    for candidate in (root / stem, root / f"{stem}.gz", root / stem.replace("-idx", ".idx")):
        if candidate.exists():
            return candidate
    raise FileNotFoundError(f"{stem}(.gz) not found under {root}")


def load_mnist(root, split: str = "train", dtype=np.float32) -> Dataset:
    images, labels = MNIST_FILES["test" if split == "test" else "train"]
    return load_idx(find_file(root, images), find_file(root, labels), split=split, dtype=dtype)
