import os
import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from warpbench.datasets import DATA_DIR_ENV, MNIST_FILES, load_mnist  # noqa: E402

DEFAULT_MNIST = Path("/root/data/mnist")


def mnist_dir():
    candidate = Path(os.environ.get(DATA_DIR_ENV) or DEFAULT_MNIST)
    needed = [n for pair in MNIST_FILES.values() for n in pair]
    if all((candidate / n).exists() or (candidate / (n + ".gz")).exists() for n in needed):
        return candidate
    return None


@pytest.fixture(scope="session")
def mnist():
    directory = mnist_dir()
    if directory is None:
        pytest.skip(f"MNIST IDX files not found; set ${DATA_DIR_ENV}")
    return load_mnist(directory)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def write_fake_mnist(directory, n_train=240, n_test=120, seed=0):
    """Write a small learnable MNIST look-alike: class c lights up row band c."""
    from warpbench.datasets import encode_idx_images, encode_idx_labels

    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    for prefix, n in (("train", n_train), ("t10k", n_test)):
        labels = np.arange(n) % 10
        images = rng.integers(0, 60, (n, 28, 28))
        for i, c in enumerate(labels):
            images[i, 3 + 2 * c: 5 + 2 * c, 4:24] = 255
        (directory / f"{prefix}-images-idx3-ubyte").write_bytes(encode_idx_images(images))
        (directory / f"{prefix}-labels-idx1-ubyte").write_bytes(encode_idx_labels(labels))
    return directory


@pytest.fixture
def fake_mnist(tmp_path, monkeypatch):
    monkeypatch.delenv(DATA_DIR_ENV, raising=False)
    return write_fake_mnist(tmp_path / "mnist")


# Keeps every stage of a run to a few seconds on the fake dataset.
TINY_OVERRIDES = {
    "train.epochs": 2, "train.batch_size": 32,
    "defense.nc_steps": 5, "defense.nc_batch_size": 8, "defense.nc_clean_size": 32,
    "defense.strip_inputs": 20, "defense.strip_overlays": 4,
    "defense.spectral_clean": 20, "defense.spectral_backdoor": 20, "defense.pruning_eval_size": 40,
}


def pytest_terminal_summary(terminalreporter):
    module = sys.modules.get("test_acceptance")
    verdicts = getattr(module, "VERDICTS", None)
    if verdicts:
        terminalreporter.section("acceptance criteria")
        for line in sorted(verdicts):
            terminalreporter.write_line(line)
