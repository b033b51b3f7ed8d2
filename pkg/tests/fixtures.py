"""Writers for tiny self-authored dataset files in the official binary layouts."""
import struct
from pathlib import Path

import numpy as np

from quadnet import data as D


def idx_bytes(array: np.ndarray, magic: int) -> bytes:
    array = np.asarray(array, dtype=np.uint8)
    return struct.pack(">i", magic) + struct.pack(f">{array.ndim}I", *array.shape) + array.tobytes()


def write_mnist(directory: Path, n_train=60, n_test=20, seed=0) -> Path:
    rng = np.random.default_rng(seed)
    directory.mkdir(parents=True, exist_ok=True)
    for split, n in (("train", n_train), ("test", n_test)):
        images, labels = D.MNIST_FILES[split]
        (directory / images).write_bytes(idx_bytes(rng.integers(0, 256, (n, 28, 28)), D.MNIST_IMAGE_MAGIC))
        (directory / labels).write_bytes(idx_bytes(rng.integers(0, 10, n), D.MNIST_LABEL_MAGIC))
    return directory


def cifar_bytes(images: np.ndarray, labels: np.ndarray) -> bytes:
    rows = np.concatenate([labels.astype(np.uint8)[:, None], images.reshape(len(labels), -1).astype(np.uint8)], axis=1)
    return rows.tobytes()


def write_cifar(directory: Path, per_batch=12, seed=0, learnable=False) -> Path:
    """Five train batches plus a test batch.

    With ``learnable`` the class sets the mean colour of the image, so even a
    tiny network can separate the classes.
    """
    rng = np.random.default_rng(seed)
    directory.mkdir(parents=True, exist_ok=True)
    for name in D.CIFAR_FILES["train"] + D.CIFAR_FILES["test"]:
        labels = rng.integers(0, 10, per_batch)
        if learnable:
            base = (labels[:, None, None, None] * 25 + np.array([0, 40, 80])[None, :, None, None]) % 256
            images = np.clip(base + rng.integers(-10, 11, (per_batch, 3, 32, 32)), 0, 255)
        else:
            images = rng.integers(0, 256, (per_batch, 3, 32, 32))
        (directory / name).write_bytes(cifar_bytes(images, labels))
    return directory
