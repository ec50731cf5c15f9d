"""Poisoned training stream: clean / attack / noise modes and label rules."""
from __future__ import annotations

import enum
from dataclasses import dataclass
from typing import Iterator, List, Optional, Sequence, Tuple

import numpy as np

from .errors import ConfigError
from .warp import WarpField, noise_warp_field, sample_bilinear, warp_batch, warp_image

# Stream identifiers for seed derivation; keep stable, they are part of the
# reproducibility contract.
STREAM_ORDER = 1
STREAM_MODES = 2
STREAM_NOISE = 3
STREAM_AUGMENT = 4
STREAM_DROPOUT = 5
STREAM_EVAL_NOISE = 6


def derive_rng(seed: int, *path: int) -> np.random.Generator:
    """Independent generator for the counter path ``(seed, *path)``."""
    return np.random.default_rng(np.random.SeedSequence([int(seed), *[int(p) for p in path]]))


class ModeTag(enum.Enum):
    CLEAN = "clean"
    ATTACK = "attack"
    NOISE = "noise"


@dataclass(frozen=True)
class Sample:
    image: np.ndarray  # (C, H, W) in [0, 1]
    label: int


@dataclass(frozen=True)
class PoisonConfig:
    rho_a: float = 0.1
    rho_n: float = 0.2
    target_rule: str = "all-to-one"
    target_class: int = 0
    k: int = 4
    s: float = 0.5
    seed: int = 0
    # Draw the mode of each training sample once instead of every epoch.
    fixed_subset: bool = False

    def __post_init__(self):
        if not 0 < self.rho_a < 1:
            raise ConfigError(f"rho_a must be in (0, 1), got {self.rho_a}")
        if not 0 <= self.rho_n < 1:
            raise ConfigError(f"rho_n must be in [0, 1), got {self.rho_n}")
        if self.rho_a + self.rho_n >= 1:
            raise ConfigError(f"rho_a + rho_n must be < 1, got {self.rho_a + self.rho_n}")
        if self.target_rule not in ("all-to-one", "all-to-all"):
            raise ConfigError(f"unknown target rule {self.target_rule!r}")
        if self.target_class < 0:
            raise ConfigError("target class must be non-negative")


def modes_from_uniform(u: np.ndarray, cfg: PoisonConfig) -> np.ndarray:
    """Vectorized mode codes: 0 clean, 1 attack, 2 noise."""
    codes = np.zeros(np.shape(u), dtype=np.int8)
    codes[u < cfg.rho_a + cfg.rho_n] = 2
    codes[u < cfg.rho_a] = 1
    return codes


_CODE_TO_MODE = (ModeTag.CLEAN, ModeTag.ATTACK, ModeTag.NOISE)


def assign_mode(rng, cfg: PoisonConfig) -> ModeTag:
    return _CODE_TO_MODE[int(modes_from_uniform(rng.random(), cfg))]


def target_labels(y: np.ndarray, cfg: PoisonConfig, num_classes: int) -> np.ndarray:
    """Attack-mode labels for an array of true labels."""
    if cfg.target_class >= num_classes:
        raise ConfigError(f"target class {cfg.target_class} >= number of classes {num_classes}")
    y = np.asarray(y, dtype=np.int64)
    if cfg.target_rule == "all-to-one":
        return np.full_like(y, cfg.target_class)
    return (y + 1) % num_classes


def target_label(y: int, mode: ModeTag, cfg: PoisonConfig, num_classes: int) -> int:
    if not 0 <= y < num_classes:
        raise ConfigError(f"label {y} outside [0, {num_classes})")
    if mode is ModeTag.ATTACK:
        return int(target_labels(np.array([y]), cfg, num_classes)[0])
    if cfg.target_class >= num_classes:
        raise ConfigError(f"target class {cfg.target_class} >= number of classes {num_classes}")
    return int(y)


def transform_sample(sample: Sample, mode: ModeTag, m: WarpField, rng, cfg: PoisonConfig,
                     num_classes: int = 10) -> Sample:
    if mode is ModeTag.CLEAN:
        return sample
    if mode is ModeTag.ATTACK:
        return Sample(warp_image(sample.image, m), target_label(sample.label, mode, cfg, num_classes))
    return Sample(warp_image(sample.image, noise_warp_field(m, rng)), sample.label)


# ----------------------------------------------------------------- epoch stream

def epoch_order(n: int, seed: int, epoch: int) -> np.ndarray:
    return derive_rng(seed, STREAM_ORDER, epoch).permutation(n)


def epoch_modes(n: int, cfg: PoisonConfig, epoch: int) -> np.ndarray:
    """Mode code per sample index for one epoch."""
    draw_epoch = 0 if cfg.fixed_subset else epoch
    return modes_from_uniform(derive_rng(cfg.seed, STREAM_MODES, draw_epoch).random(n), cfg)


def sample_noise_rng(seed: int, epoch: int, index: int) -> np.random.Generator:
    return derive_rng(seed, STREAM_NOISE, epoch, index)


def make_epoch_stream(dataset: Sequence[Sample], m: WarpField, cfg: PoisonConfig, epoch_seed: int,
                      num_classes: int = 10) -> Iterator[Tuple[Sample, ModeTag]]:
    """Yield every sample once, in a seeded shuffled order, transformed by its mode.

    ``epoch_seed`` is the epoch index under the master seed ``cfg.seed``; all
    randomness for sample ``i`` derives from ``(cfg.seed, epoch_seed, i)`` so
    the result does not depend on how the stream is consumed.
    """
    n = len(dataset)
    if n == 0:
        raise ConfigError("cannot stream an empty dataset")
    codes = epoch_modes(n, cfg, epoch_seed)
    for idx in epoch_order(n, cfg.seed, epoch_seed):
        mode = _CODE_TO_MODE[codes[idx]]
        rng = sample_noise_rng(cfg.seed, epoch_seed, idx) if mode is ModeTag.NOISE else None
        yield transform_sample(dataset[idx], mode, m, rng, cfg, num_classes), mode


def poison_batch(images: np.ndarray, labels: np.ndarray, indices: np.ndarray, codes: np.ndarray,
                 m: WarpField, cfg: PoisonConfig, epoch: int, num_classes: int) -> Tuple[np.ndarray, np.ndarray]:
    """Batched equivalent of :func:`transform_sample` over dataset ``indices``."""
    x = images[indices].copy()
    y = labels[indices].astype(np.int64).copy()
    c = codes[indices]
    attack = np.flatnonzero(c == 1)
    if attack.size:
        x[attack] = warp_batch(x[attack], m.offsets)
        y[attack] = target_labels(y[attack], cfg, num_classes)
    noise = np.flatnonzero(c == 2)
    if noise.size:
        fields = np.stack([noise_warp_field(m, sample_noise_rng(cfg.seed, epoch, indices[j])).offsets
                           for j in noise])
        x[noise] = warp_batch(x[noise], fields)
    return x, y


# ----------------------------------------------------------------- augmentation

@dataclass(frozen=True)
class AugmentConfig:
    enabled: bool = True
    crop_padding: int = 2
    max_rotation_deg: float = 10.0
    # "nearest" keeps pixel values intact; bilinear would blur the sub-pixel
    # warp signature the attack relies on.
    interpolation: str = "nearest"
    # fraction of samples that get a rotation; the rest are only shifted
    rotation_prob: float = 1.0

    def __post_init__(self):
        if self.interpolation not in ("nearest", "bilinear"):
            raise ConfigError(f"unknown augmentation interpolation {self.interpolation!r}")
        if not 0 <= self.rotation_prob <= 1:
            raise ConfigError("rotation_prob must be in [0, 1]")


def augment_params(n: int, aug: AugmentConfig, seed: int, epoch: int) -> Tuple[np.ndarray, np.ndarray]:
    """Per-sample integer shifts (n, 2) and rotation angles (n,) in radians."""
    rng = derive_rng(seed, STREAM_AUGMENT, epoch)
    shifts = rng.integers(-aug.crop_padding, aug.crop_padding + 1, size=(n, 2))
    angles = np.deg2rad(rng.uniform(-aug.max_rotation_deg, aug.max_rotation_deg, size=n))
    if aug.rotation_prob < 1:
        angles[rng.random(n) >= aug.rotation_prob] = 0.0
    return shifts, angles


def augment_batch(x: np.ndarray, shifts: np.ndarray, angles: np.ndarray,
                  interpolation: str = "nearest") -> np.ndarray:
    """Random-crop (as an integer shift with zero fill) followed by a rotation about the centre."""
    b, _, h, w = x.shape
    ci, cj = (h - 1) / 2.0, (w - 1) / 2.0
    ii, jj = np.meshgrid(np.arange(h, dtype=np.float64) - ci, np.arange(w, dtype=np.float64) - cj, indexing="ij")
    cos = np.cos(angles)[:, None, None]
    sin = np.sin(angles)[:, None, None]
    rows = cos * ii - sin * jj + ci + shifts[:, 0, None, None]
    cols = sin * ii + cos * jj + cj + shifts[:, 1, None, None]
    if interpolation == "bilinear":
        out = sample_bilinear(x, rows, cols, padding="zeros")
        return np.clip(out, 0, 1, out=out)
    return sample_nearest(x, rows, cols)


def sample_nearest(x: np.ndarray, rows: np.ndarray, cols: np.ndarray) -> np.ndarray:
    """Nearest-pixel lookup at (B, H, W) positions; outside the image reads as 0."""
    b, c, h, w = x.shape
    r = np.rint(rows).astype(np.int64)
    q = np.rint(cols).astype(np.int64)
    inside = (r >= 0) & (r < h) & (q >= 0) & (q < w)
    flat = np.where(inside, np.clip(r, 0, h - 1) * w + np.clip(q, 0, w - 1), 0).reshape(b, 1, -1)
    out = np.take_along_axis(x.reshape(b, c, h * w), np.broadcast_to(flat, (b, c, flat.shape[-1])), axis=2)
    out = out.reshape((b, c) + rows.shape[1:])
    out *= inside[:, None].astype(x.dtype)
    return out


def training_batches(images: np.ndarray, labels: np.ndarray, m: Optional[WarpField], cfg: Optional[PoisonConfig],
                     epoch: int, batch_size: int, num_classes: int, aug: AugmentConfig,
                     seed: int) -> Iterator[Tuple[np.ndarray, np.ndarray, np.ndarray]]:
    """Yield ``(x, y, mode_codes)`` mini-batches for one epoch.

    With ``cfg=None`` the stream is purely clean (benign training).
    """
    n = len(images)
    if n == 0:
        raise ConfigError("cannot stream an empty dataset")
    master = cfg.seed if cfg is not None else seed
    order = epoch_order(n, master, epoch)
    codes = epoch_modes(n, cfg, epoch) if cfg is not None else np.zeros(n, dtype=np.int8)
    shifts, angles = augment_params(n, aug, master, epoch) if aug.enabled else (None, None)
    for start in range(0, n, batch_size):
        idx = order[start:start + batch_size]
        if cfg is not None:
            x, y = poison_batch(images, labels, idx, codes, m, cfg, epoch, num_classes)
        else:
            x, y = images[idx].copy(), labels[idx].astype(np.int64)
        if aug.enabled:
            x = augment_batch(x, shifts[idx], angles[idx], aug.interpolation)
        yield x, y, codes[idx]


def poisoned_subset(images: np.ndarray, labels: np.ndarray, m: WarpField, cfg: PoisonConfig,
                    num_classes: int) -> Tuple[np.ndarray, np.ndarray]:
    """Attack-mode copies of every sample (no augmentation)."""
    return warp_batch(images, m.offsets), target_labels(labels, cfg, num_classes)


def to_samples(images: np.ndarray, labels: np.ndarray) -> List[Sample]:
    return [Sample(img, int(lab)) for img, lab in zip(images, labels)]
