import gzip

import numpy as np
import pytest

from warpbench.datasets import (
    CIFAR_RECORD,
    CIFAR_TEST_FILE,
    CIFAR_TRAIN_FILES,
    DATA_DIR_ENV,
    encode_cifar_batch,
    encode_idx_images,
    encode_idx_labels,
    load_cifar10,
    load_dataset,
    load_mnist,
    parse_cifar_batch,
    parse_idx_images,
    parse_idx_labels,
)
from warpbench.errors import FormatError


def _write_mnist(directory, n_train=6, n_test=4, gz=False, label_fn=lambda n: np.arange(n) % 10):
    directory.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(0)
    files = {
        "train-images-idx3-ubyte": encode_idx_images(rng.integers(0, 256, (n_train, 28, 28))),
        "train-labels-idx1-ubyte": encode_idx_labels(label_fn(n_train)),
        "t10k-images-idx3-ubyte": encode_idx_images(rng.integers(0, 256, (n_test, 28, 28))),
        "t10k-labels-idx1-ubyte": encode_idx_labels(label_fn(n_test)),
    }
    for name, data in files.items():
        if gz:
            with gzip.open(directory / (name + ".gz"), "wb") as fh:
                fh.write(data)
        else:
            (directory / name).write_bytes(data)
    return directory


# ------------------------------------------------------------------------ MNIST

def test_idx_header_layout():
    data = encode_idx_images(np.zeros((2, 3, 4)))
    assert data[:4] == b"\x00\x00\x08\x03" and data[4:8] == b"\x00\x00\x00\x02"
    assert len(data) == 16 + 24
    assert encode_idx_labels(np.array([1, 2]))[:4] == b"\x00\x00\x08\x01"


def test_pixel_scaling(tmp_path):
    _write_mnist(tmp_path)
    raw = np.zeros((1, 28, 28), np.uint8)
    raw[0, 0, 0], raw[0, 0, 1] = 0, 255
    (tmp_path / "train-images-idx3-ubyte").write_bytes(encode_idx_images(np.repeat(raw, 6, axis=0)))
    train, test = load_mnist(tmp_path)
    assert train.images.shape == (6, 1, 28, 28) and train.images.dtype == np.float32
    assert train.images[0, 0, 0, 0] == 0.0 and train.images[0, 0, 0, 1] == 1.0
    assert len(test) == 4 and test.labels.dtype == np.int64


def test_gzipped_files(tmp_path):
    _write_mnist(tmp_path, gz=True)
    train, test = load_mnist(tmp_path)
    assert len(train) == 6 and len(test) == 4


def test_label_out_of_range(tmp_path):
    _write_mnist(tmp_path, label_fn=lambda n: np.full(n, 10))
    with pytest.raises(FormatError):
        load_mnist(tmp_path)


def test_bad_magic_and_truncation():
    good = encode_idx_images(np.zeros((2, 28, 28)))
    with pytest.raises(FormatError):
        parse_idx_images(b"\x00\x00\x08\x01" + good[4:])
    with pytest.raises(FormatError):
        parse_idx_images(good[:-1])
    with pytest.raises(FormatError):
        parse_idx_images(good[:10])
    with pytest.raises(FormatError):
        parse_idx_labels(encode_idx_labels(np.zeros(3))[:-1])


def test_count_mismatch(tmp_path):
    _write_mnist(tmp_path)
    (tmp_path / "train-labels-idx1-ubyte").write_bytes(encode_idx_labels(np.zeros(5)))
    with pytest.raises(FormatError, match="6 images but 5 labels"):
        load_mnist(tmp_path)


def test_missing_directory_named(tmp_path, monkeypatch):
    monkeypatch.delenv(DATA_DIR_ENV, raising=False)
    missing = tmp_path / "nowhere"
    with pytest.raises(FormatError, match=str(missing)):
        load_mnist(missing)


def test_missing_file_named(tmp_path, monkeypatch):
    monkeypatch.delenv(DATA_DIR_ENV, raising=False)
    _write_mnist(tmp_path)
    (tmp_path / "t10k-labels-idx1-ubyte").unlink()
    with pytest.raises(FormatError, match="t10k-labels-idx1-ubyte"):
        load_mnist(tmp_path)


def test_env_override(tmp_path, monkeypatch):
    _write_mnist(tmp_path / "real")
    monkeypatch.setenv(DATA_DIR_ENV, str(tmp_path / "real"))
    train, _ = load_mnist(tmp_path / "ignored")
    assert len(train) == 6


def test_canonical_mnist_counts(mnist):
    train, test = mnist
    assert len(train) == 60000 and len(test) == 10000
    assert train.images.min() == 0.0 and train.images.max() == 1.0
    assert set(np.unique(train.labels)) == set(range(10))


# ---------------------------------------------------------------------- CIFAR

def _cifar_batch(n, seed):
    rng = np.random.default_rng(seed)
    return rng.integers(0, 256, (n, 3, 32, 32)), rng.integers(0, 10, n)


def test_cifar_record_round_trip():
    images, labels = _cifar_batch(3, 0)
    data = encode_cifar_batch(images, labels)
    assert len(data) == 3 * CIFAR_RECORD
    parsed_images, parsed_labels = parse_cifar_batch(data)
    assert encode_cifar_batch(parsed_images[:1], parsed_labels[:1]) == data[:CIFAR_RECORD]
    assert np.array_equal(parsed_images, images) and np.array_equal(parsed_labels, labels)


def test_cifar_channel_major_layout():
    images = np.zeros((1, 3, 32, 32), np.uint8)
    images[0, 1, 0, 0] = 200  # first green pixel
    data = encode_cifar_batch(images, np.array([4]))
    assert data[0] == 4 and data[1 + 1024] == 200


def test_cifar_bad_length_and_label():
    images, labels = _cifar_batch(2, 1)
    data = encode_cifar_batch(images, labels)
    with pytest.raises(FormatError):
        parse_cifar_batch(data[:-1])
    bad = bytearray(data)
    bad[0] = 255
    with pytest.raises(FormatError):
        parse_cifar_batch(bytes(bad))


def test_load_cifar10_directory(tmp_path):
    for i, name in enumerate(CIFAR_TRAIN_FILES):
        (tmp_path / name).write_bytes(encode_cifar_batch(*_cifar_batch(4, i)))
    (tmp_path / CIFAR_TEST_FILE).write_bytes(encode_cifar_batch(*_cifar_batch(3, 9)))
    train, test = load_dataset("cifar10", tmp_path)
    assert train.images.shape == (20, 3, 32, 32) and len(test) == 3
    assert train.images.max() <= 1.0
    (tmp_path / CIFAR_TEST_FILE).unlink()
    with pytest.raises(FormatError):
        load_cifar10(tmp_path)


def test_unknown_dataset():
    with pytest.raises(FormatError):
        load_dataset("gtsrb", "/tmp")
