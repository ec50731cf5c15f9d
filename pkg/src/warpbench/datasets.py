"""Readers for the canonical MNIST IDX and CIFAR-10 binary distributions."""
from __future__ import annotations

import gzip
import os
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Tuple, Union

import numpy as np

from .errors import FormatError

DATA_DIR_ENV = "WARPBENCH_DATA_DIR"

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801

MNIST_FILES = {
    "train": ("train-images-idx3-ubyte", "train-labels-idx1-ubyte"),
    "test": ("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"),
}
CIFAR_TRAIN_FILES = tuple(f"data_batch_{i}.bin" for i in range(1, 6))
CIFAR_TEST_FILE = "test_batch.bin"
CIFAR_RECORD = 1 + 3 * 32 * 32


@dataclass
class Split:
    """Images (N, C, H, W) float32 in [0, 1] and int64 labels."""

    images: np.ndarray
    labels: np.ndarray

    def __len__(self) -> int:
        return len(self.labels)

    def subset(self, n: int) -> "Split":
        return Split(self.images[:n], self.labels[:n])


def resolve_data_dir(path: Union[str, Path, None]) -> Path:
    """``path`` unless the data-directory environment override is set."""
    override = os.environ.get(DATA_DIR_ENV)
    if override:
        return Path(override)
    if path is None:
        raise FormatError(f"no data directory given and ${DATA_DIR_ENV} is unset")
    return Path(path)


def _read_maybe_gz(path: Path) -> bytes:
    if path.exists():
        return path.read_bytes()
    gz = path.with_name(path.name + ".gz")
    if gz.exists():
        with gzip.open(gz, "rb") as fh:
            return fh.read()
    raise FormatError(f"missing dataset file {path}")


def parse_idx_images(data: bytes, name: str = "images") -> np.ndarray:
    if len(data) < 16:
        raise FormatError(f"{name}: IDX header truncated")
    magic, n, rows, cols = struct.unpack_from(">IIII", data)
    if magic != IDX_IMAGES_MAGIC:
        raise FormatError(f"{name}: bad IDX image magic 0x{magic:08x}")
    expected = 16 + n * rows * cols
    if len(data) != expected:
        raise FormatError(f"{name}: payload has {len(data)} bytes, expected {expected}")
    return np.frombuffer(data, dtype=np.uint8, offset=16).reshape(n, rows, cols)


def parse_idx_labels(data: bytes, name: str = "labels", num_classes: int = 10) -> np.ndarray:
    if len(data) < 8:
        raise FormatError(f"{name}: IDX header truncated")
    magic, n = struct.unpack_from(">II", data)
    if magic != IDX_LABELS_MAGIC:
        raise FormatError(f"{name}: bad IDX label magic 0x{magic:08x}")
    if len(data) != 8 + n:
        raise FormatError(f"{name}: payload has {len(data)} bytes, expected {8 + n}")
    labels = np.frombuffer(data, dtype=np.uint8, offset=8)
    if labels.size and labels.max() >= num_classes:
        raise FormatError(f"{name}: label {labels.max()} out of range")
    return labels


def encode_idx_images(images: np.ndarray) -> bytes:
    n, rows, cols = images.shape
    return struct.pack(">IIII", IDX_IMAGES_MAGIC, n, rows, cols) + np.asarray(images, np.uint8).tobytes()


def encode_idx_labels(labels: np.ndarray) -> bytes:
    return struct.pack(">II", IDX_LABELS_MAGIC, len(labels)) + np.asarray(labels, np.uint8).tobytes()


def _to_split(raw_images: np.ndarray, raw_labels: np.ndarray) -> Split:
    images = raw_images.astype(np.float32) / np.float32(255.0)
    if images.ndim == 3:
        images = images[:, None]
    return Split(np.ascontiguousarray(images), raw_labels.astype(np.int64))


def load_mnist(directory: Union[str, Path, None]) -> Tuple[Split, Split]:
    """Parse the four MNIST IDX files (optionally gzipped) into train/test splits."""
    directory = resolve_data_dir(directory)
    if not directory.is_dir():
        raise FormatError(f"dataset directory {directory} does not exist")
    splits = []
    for part in ("train", "test"):
        img_name, lab_name = MNIST_FILES[part]
        images = parse_idx_images(_read_maybe_gz(directory / img_name), img_name)
        labels = parse_idx_labels(_read_maybe_gz(directory / lab_name), lab_name)
        if len(images) != len(labels):
            raise FormatError(f"{part}: {len(images)} images but {len(labels)} labels")
        splits.append(_to_split(images, labels))
    return splits[0], splits[1]


def parse_cifar_batch(data: bytes, name: str = "batch") -> Tuple[np.ndarray, np.ndarray]:
    if len(data) % CIFAR_RECORD:
        raise FormatError(f"{name}: length {len(data)} is not a multiple of {CIFAR_RECORD}")
    records = np.frombuffer(data, dtype=np.uint8).reshape(-1, CIFAR_RECORD)
    labels = records[:, 0]
    if labels.size and labels.max() >= 10:
        raise FormatError(f"{name}: label {labels.max()} out of range")
    return records[:, 1:].reshape(-1, 3, 32, 32), labels


def encode_cifar_batch(images: np.ndarray, labels: np.ndarray) -> bytes:
    records = np.concatenate([np.asarray(labels, np.uint8)[:, None],
                              np.asarray(images, np.uint8).reshape(len(labels), -1)], axis=1)
    return records.tobytes()


def load_cifar10(directory: Union[str, Path, None]) -> Tuple[Split, Split]:
    directory = resolve_data_dir(directory)
    if not directory.is_dir():
        raise FormatError(f"dataset directory {directory} does not exist")
    parts = [parse_cifar_batch(_read_maybe_gz(directory / f), f) for f in CIFAR_TRAIN_FILES]
    train = _to_split(np.concatenate([p[0] for p in parts]), np.concatenate([p[1] for p in parts]))
    test = _to_split(*parse_cifar_batch(_read_maybe_gz(directory / CIFAR_TEST_FILE), CIFAR_TEST_FILE))
    return train, test


def load_dataset(name: str, directory) -> Tuple[Split, Split]:
    if name == "mnist":
        return load_mnist(directory)
    if name == "cifar10":
        return load_cifar10(directory)
    raise FormatError(f"unknown dataset {name!r}")
