"""Clean / attack / noise accuracy and PSNR."""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np

from .errors import ConfigError
from .nn import MnistNet
from .poison import STREAM_EVAL_NOISE, PoisonConfig, derive_rng, target_labels
from .warp import WarpField, noise_warp_field, warp_batch

PSNR_CAP = 99.0


@dataclass(frozen=True)
class AccuracyTriple:
    clean: float
    attack: float
    noise: float

    def as_dict(self) -> dict:
        return asdict(self)


def accuracy(net: MnistNet, images: np.ndarray, labels: np.ndarray) -> float:
    if len(images) == 0:
        raise ConfigError("cannot compute accuracy on an empty set")
    return 100.0 * float(np.mean(net.predict(images) == np.asarray(labels)))


def attack_success(net: MnistNet, images: np.ndarray, labels: np.ndarray, m: WarpField,
                   cfg: PoisonConfig, num_classes: int) -> float:
    """Percent of warped inputs classified as their attack target.

    For all-to-one, samples whose true label already is the target are left out.
    """
    labels = np.asarray(labels)
    keep = labels != cfg.target_class if cfg.target_rule == "all-to-one" else np.ones(len(labels), bool)
    if not keep.any():
        raise ConfigError("no samples left for the attack-success denominator")
    warped = warp_batch(images[keep], m.offsets)
    return 100.0 * float(np.mean(net.predict(warped) == target_labels(labels[keep], cfg, num_classes)))


def noise_images(images: np.ndarray, m: WarpField, seed: int) -> np.ndarray:
    """One seeded noise-warped copy of each image."""
    out = np.empty_like(images)
    chunk = 1000
    for start in range(0, len(images), chunk):
        stop = min(start + chunk, len(images))
        fields = np.stack([noise_warp_field(m, derive_rng(seed, STREAM_EVAL_NOISE, i)).offsets
                           for i in range(start, stop)])
        out[start:stop] = warp_batch(images[start:stop], fields)
    return out


def evaluate_triple(net: MnistNet, images: np.ndarray, labels: np.ndarray, m: WarpField,
                    cfg: PoisonConfig, num_classes: int = 10, noise_seed: int = 0) -> AccuracyTriple:
    if len(images) == 0:
        raise ConfigError("test set is empty")
    clean = accuracy(net, images, labels)
    attack = attack_success(net, images, labels, m, cfg, num_classes)
    noise = accuracy(net, noise_images(images, m, noise_seed), labels)
    return AccuracyTriple(clean=clean, attack=attack, noise=noise)


def psnr(x: np.ndarray, y: np.ndarray, max_value: float = 1.0) -> float:
    """Peak signal-to-noise ratio in dB, capped at 99 dB for identical inputs."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape:
        raise ConfigError(f"shape mismatch {x.shape} vs {y.shape}")
    mse = float(np.mean((x - y) ** 2))
    if mse < 1e-12:
        return PSNR_CAP
    return min(PSNR_CAP, 10.0 * math.log10(max_value ** 2 / mse))
