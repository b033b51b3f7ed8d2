"""Dataset ingestion: MNIST IDX, CIFAR-10 binary, synthetic XOR, batching."""
from __future__ import annotations

import gzip
import os
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

MNIST_IMAGE_MAGIC = 2051
MNIST_LABEL_MAGIC = 2049
MNIST_MEAN, MNIST_STD = 0.1307, 0.3081
CIFAR_MEAN = (0.4914, 0.4822, 0.4465)
CIFAR_STD = (0.2470, 0.2435, 0.2616)
CIFAR_RECORD = 1 + 3 * 32 * 32

MNIST_FILES = {
    "train": ("train-images-idx3-ubyte", "train-labels-idx1-ubyte"),
    "test": ("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"),
}
CIFAR_FILES = {
    "train": tuple(f"data_batch_{i}.bin" for i in range(1, 6)),
    "test": ("test_batch.bin",),
}


class DatasetFormatError(ValueError):
    """A dataset file does not match its declared binary format."""


@dataclass
class LabeledDataset:
    inputs: np.ndarray
    labels: np.ndarray
    classes: int
    mean: np.ndarray
    std: np.ndarray

    def __post_init__(self):
        if len(self.inputs) != len(self.labels):
            raise ValueError(f"{len(self.inputs)} inputs but {len(self.labels)} labels")
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= self.classes):
            raise ValueError(f"labels outside [0, {self.classes})")

    def __len__(self):
        return len(self.labels)

    @property
    def sample_shape(self) -> tuple:
        return self.inputs.shape[1:]

    def subset(self, idx) -> "LabeledDataset":
        return LabeledDataset(self.inputs[idx], self.labels[idx], self.classes, self.mean, self.std)

    def split_last(self, k: int) -> tuple["LabeledDataset", "LabeledDataset"]:
        """Hold out the last ``k`` samples: ``(head, tail)``."""
        if not 0 <= k <= len(self):
            raise ValueError(f"cannot hold out {k} of {len(self)} samples")
        cut = len(self) - k
        return self.subset(slice(0, cut)), self.subset(slice(cut, None))

    def denormalize(self) -> np.ndarray:
        """Inputs mapped back to the unit interval (raw byte / 255)."""
        return self.inputs * _channel(self.std, self.inputs) + _channel(self.mean, self.inputs)


def _channel(v: np.ndarray, x: np.ndarray) -> np.ndarray:
    v = np.asarray(v, dtype=np.float64)
    if v.ndim == 0 or x.ndim < 4:
        return v
    return v.reshape(1, -1, 1, 1)


def normalize(raw: np.ndarray, mean, std) -> np.ndarray:
    """Bytes -> ``(raw/255 - mean) / std`` (per channel for 4-d image arrays)."""
    unit = raw.astype(np.float64) / 255.0
    return (unit - _channel(mean, unit)) / _channel(std, unit)


def _read(path: str | os.PathLike) -> bytes:
    path = Path(path)
    opener = gzip.open if path.suffix == ".gz" else open
    with opener(path, "rb") as fh:
        return fh.read()


def parse_idx(blob: bytes, expected_magic: int, what: str = "IDX") -> np.ndarray:
    """Parse an unsigned-byte IDX blob into an array shaped by its header."""
    if len(blob) < 8:
        raise DatasetFormatError(f"{what}: {len(blob)} bytes is too short for an IDX header")
    (magic,) = struct.unpack(">i", blob[:4])
    if magic != expected_magic:
        raise DatasetFormatError(f"{what}: magic {magic} does not match expected {expected_magic}")
    ndim = magic & 0xFF
    header = 4 + 4 * ndim
    if len(blob) < header:
        raise DatasetFormatError(f"{what}: truncated header ({len(blob)} < {header} bytes)")
    dims = struct.unpack(f">{ndim}I", blob[4:header])
    if any(d == 0 for d in dims[1:]):
        raise DatasetFormatError(f"{what}: zero extent in dims {dims}")
    expected = header + int(np.prod(dims, dtype=np.int64))
    if len(blob) != expected:
        raise DatasetFormatError(
            f"{what}: header dims {dims} need {expected} bytes, file has {len(blob)}"
        )
    return np.frombuffer(blob, dtype=np.uint8, offset=header).reshape(dims)


def load_mnist(images_path, labels_path, mean: float = MNIST_MEAN, std: float = MNIST_STD) -> LabeledDataset:
    images = parse_idx(_read(images_path), MNIST_IMAGE_MAGIC, f"images {images_path}")
    labels = parse_idx(_read(labels_path), MNIST_LABEL_MAGIC, f"labels {labels_path}")
    if len(images) != len(labels):
        raise DatasetFormatError(f"{len(images)} images but {len(labels)} labels")
    if labels.size and labels.max() > 9:
        raise DatasetFormatError(f"label value {labels.max()} outside 0..9")
    n, rows, cols = images.shape
    x = normalize(images.reshape(n, 1, rows, cols), mean, std)
    return LabeledDataset(x, labels.astype(np.int64), 10, np.asarray(mean), np.asarray(std))


def parse_cifar10(blob: bytes, what: str = "CIFAR-10") -> tuple[np.ndarray, np.ndarray]:
    if not blob or len(blob) % CIFAR_RECORD:
        raise DatasetFormatError(f"{what}: length {len(blob)} is not a positive multiple of {CIFAR_RECORD}")
    records = np.frombuffer(blob, dtype=np.uint8).reshape(-1, CIFAR_RECORD)
    labels = records[:, 0]
    if labels.max() > 9:
        raise DatasetFormatError(f"{what}: label byte {labels.max()} outside 0..9")
    return records[:, 1:].reshape(-1, 3, 32, 32), labels.astype(np.int64)


def load_cifar10(batch_paths: Sequence, mean=CIFAR_MEAN, std=CIFAR_STD) -> LabeledDataset:
    if isinstance(batch_paths, (str, os.PathLike)):
        batch_paths = [batch_paths]
    parts = [parse_cifar10(_read(p), f"CIFAR-10 {p}") for p in batch_paths]
    if not parts:
        raise ValueError("no CIFAR-10 batch files given")
    images = np.concatenate([p[0] for p in parts])
    labels = np.concatenate([p[1] for p in parts])
    return LabeledDataset(normalize(images, mean, std), labels, 10, np.asarray(mean), np.asarray(std))


def _first_existing(directory: Path, name: str) -> Path:
    candidates = [name, name + ".gz", name.replace("-idx", ".idx"), name.replace("-idx", ".idx") + ".gz"]
    for c in candidates:
        if (directory / c).exists():
            return directory / c
    raise FileNotFoundError(f"{name} not found in {directory}")


def mnist_paths(directory, split: str) -> tuple[Path, Path]:
    directory = Path(directory)
    images, labels = MNIST_FILES[split]
    return _first_existing(directory, images), _first_existing(directory, labels)


def cifar_paths(directory, split: str) -> list[Path]:
    directory = Path(directory)
    if (directory / "cifar-10-batches-bin").is_dir():
        directory = directory / "cifar-10-batches-bin"
    paths = [directory / f for f in CIFAR_FILES[split]]
    missing = [str(p) for p in paths if not p.exists()]
    if missing:
        raise FileNotFoundError(f"missing CIFAR-10 files: {', '.join(missing)}")
    return paths


def make_xor(n_per_quadrant: int, noise_std: float = 0.0, seed: int = 0) -> LabeledDataset:
    """Points around the four corners ``(+-1, +-1)``; label 1 where the signs differ."""
    rng = np.random.default_rng(seed)
    corners = np.array([[1, 1], [-1, -1], [1, -1], [-1, 1]], dtype=np.float64)
    x = np.repeat(corners, n_per_quadrant, axis=0)
    if noise_std:
        x = x + rng.normal(0.0, noise_std, size=x.shape)
    labels = np.repeat(np.array([0, 0, 1, 1]), n_per_quadrant)
    return LabeledDataset(x, labels, 2, np.asarray(0.0), np.asarray(1.0))


@dataclass(frozen=True)
class BatchPlan:
    seed: int = 0
    batch_size: int = 128
    drop_last: bool = False

    def order(self, n: int, epoch: int = 0) -> list[np.ndarray]:
        perm = np.random.default_rng([self.seed, epoch]).permutation(n)
        stop = n - n % self.batch_size if self.drop_last else n
        return [perm[i:i + self.batch_size] for i in range(0, stop, self.batch_size)]


def batches(dataset: LabeledDataset, plan: BatchPlan, epoch: int = 0) -> Iterator[tuple[np.ndarray, np.ndarray]]:
    for idx in plan.order(len(dataset), epoch):
        yield dataset.inputs[idx], dataset.labels[idx]
