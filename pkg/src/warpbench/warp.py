"""Backdoor warping field generation and backward warping.

All offsets are stored in pixel units as ``(row, col)`` pairs; conversion to
normalized ``[-1, 1]`` coordinates happens only in :func:`to_sampling_grid`.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Union

import numpy as np

from .errors import ConfigError, DegenerateDraw, FormatError

WANF_MAGIC = b"WANF"
WANF_VERSION = 1
_WANF_HEADER = struct.Struct("<4sHHH")

KEYS_A = -0.75
MAX_REDRAWS = 8


@dataclass(frozen=True)
class ControlGrid:
    offsets: np.ndarray  # (k, k, 2)
    k: int
    s: float


@dataclass(frozen=True, eq=False)
class WarpField:
    """Relative backward-sampling offsets, shape ``(h, w, 2)``, float32."""

    offsets: np.ndarray

    def __post_init__(self):
        off = np.asarray(self.offsets, dtype=np.float32)
        if off.ndim != 3 or off.shape[2] != 2:
            raise ConfigError(f"warp field must have shape (h, w, 2), got {off.shape}")
        off.setflags(write=False)
        object.__setattr__(self, "offsets", off)

    @property
    def h(self) -> int:
        return self.offsets.shape[0]

    @property
    def w(self) -> int:
        return self.offsets.shape[1]

    @classmethod
    def zeros(cls, h: int, w: int) -> "WarpField":
        return cls(np.zeros((h, w, 2), dtype=np.float32))

    def absolute_coords(self) -> np.ndarray:
        """Absolute sampling positions ``(i, j) + offsets[i, j]`` in pixels (float64)."""
        return identity_coords(self.h, self.w) + self.offsets.astype(np.float64)

    def to_bytes(self) -> bytes:
        header = _WANF_HEADER.pack(WANF_MAGIC, WANF_VERSION, self.h, self.w)
        return header + self.offsets.astype("<f4").tobytes(order="C")

    @classmethod
    def from_bytes(cls, data: bytes) -> "WarpField":
        if len(data) < _WANF_HEADER.size:
            raise FormatError("warp field file shorter than its header")
        magic, version, h, w = _WANF_HEADER.unpack_from(data)
        if magic != WANF_MAGIC:
            raise FormatError(f"bad warp field magic {magic!r}")
        if version != WANF_VERSION:
            raise FormatError(f"unsupported warp field version {version}")
        expected = _WANF_HEADER.size + h * w * 2 * 4
        if len(data) != expected:
            raise FormatError(f"warp field payload is {len(data)} bytes, expected {expected}")
        arr = np.frombuffer(data, dtype="<f4", offset=_WANF_HEADER.size).reshape(h, w, 2)
        return cls(arr.astype(np.float32))

    def save(self, path: Union[str, Path]) -> None:
        Path(path).write_bytes(self.to_bytes())

    @classmethod
    def load(cls, path: Union[str, Path]) -> "WarpField":
        return cls.from_bytes(Path(path).read_bytes())

    def __eq__(self, other):
        if not isinstance(other, WarpField):
            return NotImplemented
        return self.offsets.shape == other.offsets.shape and bool(
            np.array_equal(self.offsets, other.offsets)
        )


def identity_coords(h: int, w: int) -> np.ndarray:
    rows, cols = np.meshgrid(np.arange(h, dtype=np.float64), np.arange(w, dtype=np.float64), indexing="ij")
    return np.stack([rows, cols], axis=-1)


def normalize_mean_abs(a) -> np.ndarray:
    """Divide ``a`` by its mean absolute value."""
    a = np.asarray(a, dtype=np.float64)
    if a.size == 0:
        raise ConfigError("cannot normalize an empty tensor")
    scale = np.mean(np.abs(a))
    if scale < 1e-12:
        raise DegenerateDraw("mean absolute value is zero")
    return a / scale


def gen_control_grid(k: int, s: float, rng) -> ControlGrid:
    """Random ``k x k x 2`` control offsets with mean absolute value ``s``."""
    if int(k) != k or k < 2:
        raise ConfigError(f"control grid size k must be an integer >= 2, got {k}")
    if not np.isfinite(s) or s < 0:
        raise ConfigError(f"warping strength s must be >= 0, got {s}")
    k = int(k)
    for _ in range(MAX_REDRAWS + 1):
        draw = rng.uniform(-1.0, 1.0, size=(k, k, 2))
        try:
            unit = normalize_mean_abs(draw)
        except DegenerateDraw:
            continue
        return ControlGrid(offsets=unit * float(s), k=k, s=float(s))
    raise DegenerateDraw(f"{MAX_REDRAWS + 1} consecutive all-zero draws")


def keys_cubic(x: np.ndarray, a: float = KEYS_A) -> np.ndarray:
    x = np.abs(np.asarray(x, dtype=np.float64))
    near = ((a + 2) * x - (a + 3)) * x * x + 1
    far = ((a * x - 5 * a) * x + 8 * a) * x - 4 * a
    return np.where(x <= 1, near, np.where(x < 2, far, 0.0))


def bicubic_matrix(n_out: int, n_in: int, a: float = KEYS_A) -> np.ndarray:
    """Row-stochastic ``(n_out, n_in)`` bicubic resampling matrix.

    Uses align-corners placement (sample 0 and sample n_in-1 land on the first
    and last output pixel) and edge replication for taps outside the input.
    """
    if n_out == 1:
        src = np.zeros(1)
    else:
        src = np.arange(n_out, dtype=np.float64) * (n_in - 1) / (n_out - 1)
    base = np.floor(src).astype(np.int64)
    frac = src - base
    mat = np.zeros((n_out, n_in), dtype=np.float64)
    rows = np.arange(n_out)
    for tap in (-1, 0, 1, 2):
        weight = keys_cubic(frac - tap, a)
        idx = np.clip(base + tap, 0, n_in - 1)
        np.add.at(mat, (rows, idx), weight)
    return mat


def upsample_bicubic(grid, h: int, w: int, a: float = KEYS_A) -> np.ndarray:
    """Separable bicubic upsampling of control offsets to an ``(h, w, 2)`` field.

    ``a`` is the Keys kernel parameter. Only ``a = -0.5`` reproduces linear
    ramps exactly; the default ``-0.75`` overshoots slightly between nodes.
    """
    offsets = grid.offsets if isinstance(grid, ControlGrid) else np.asarray(grid, dtype=np.float64)
    if offsets.ndim == 2:
        offsets = offsets[:, :, None]
    kh, kw = offsets.shape[:2]
    if h < kh or w < kw:
        raise ConfigError(f"target size {h}x{w} is smaller than the {kh}x{kw} control grid")
    rmat = bicubic_matrix(h, kh, a)
    cmat = bicubic_matrix(w, kw, a)
    return np.einsum("ip,pqc,jq->ijc", rmat, offsets, cmat)


def clip_field(m0: np.ndarray) -> WarpField:
    """Clamp offsets so every absolute sampling position stays inside the image."""
    m0 = np.asarray(m0, dtype=np.float64)
    if m0.ndim != 3 or m0.shape[2] != 2:
        raise ConfigError(f"field must have shape (h, w, 2), got {m0.shape}")
    h, w = m0.shape[:2]
    ident = identity_coords(h, w)
    upper = np.array([h - 1, w - 1], dtype=np.float64)
    absolute = np.clip(ident + m0, 0.0, upper)
    return WarpField(absolute - ident)


def build_warp_field(k: int, s: float, h: int, w: int, rng) -> WarpField:
    return clip_field(upsample_bicubic(gen_control_grid(k, s, rng), h, w))


def to_sampling_grid(m: WarpField) -> np.ndarray:
    """Normalized absolute coordinates in ``[-1, 1]`` (align-corners)."""
    absolute = m.absolute_coords()
    scale = np.array([max(m.h - 1, 1), max(m.w - 1, 1)], dtype=np.float64)
    return -1.0 + 2.0 * absolute / scale


def noise_warp_field(m: WarpField, rng) -> WarpField:
    """``m`` plus uniform ``[-1, 1]`` per-element jitter, re-clipped to the border."""
    jitter = rng.uniform(-1.0, 1.0, size=m.offsets.shape)
    return clip_field(m.offsets.astype(np.float64) + jitter)


def sample_bilinear(x: np.ndarray, rows: np.ndarray, cols: np.ndarray, padding: str = "border") -> np.ndarray:
    """Bilinearly sample ``x`` (B, C, H, W) at absolute pixel positions.

    ``rows``/``cols`` have shape (B, H', W') or (H', W') (shared by the batch).
    ``padding="border"`` clamps positions to the image; ``"zeros"`` treats the
    outside as black.
    """
    b, c, h, w = x.shape
    rows = np.broadcast_to(rows, (b,) + rows.shape[-2:])
    cols = np.broadcast_to(cols, (b,) + cols.shape[-2:])
    out_hw = rows.shape[1:]
    if padding == "border":
        rows = np.clip(rows, 0, h - 1)
        cols = np.clip(cols, 0, w - 1)
    r0 = np.floor(rows)
    c0 = np.floor(cols)
    fr = (rows - r0).astype(x.dtype)
    fc = (cols - c0).astype(x.dtype)
    r0 = r0.astype(np.int64)
    c0 = c0.astype(np.int64)
    flat = x.reshape(b, c, h * w)
    out = np.zeros((b, c) + out_hw, dtype=x.dtype)
    one = x.dtype.type(1)
    for dr, wr in ((0, one - fr), (1, fr)):
        for dc, wc in ((0, one - fc), (1, fc)):
            rr = r0 + dr
            cc = c0 + dc
            weight = wr * wc
            if padding == "border":
                rr = np.minimum(rr, h - 1)
                cc = np.minimum(cc, w - 1)
            else:
                inside = (rr >= 0) & (rr < h) & (cc >= 0) & (cc < w)
                weight = np.where(inside, weight, 0)
                rr = np.clip(rr, 0, h - 1)
                cc = np.clip(cc, 0, w - 1)
            idx = (rr * w + cc).reshape(b, 1, -1)
            vals = np.take_along_axis(flat, np.broadcast_to(idx, (b, c, idx.shape[-1])), axis=2)
            out += weight[:, None] * vals.reshape((b, c) + out_hw)
    return out


def warp_batch(x: np.ndarray, offsets: np.ndarray) -> np.ndarray:
    """Backward-warp a batch (B, C, H, W) with per-sample or shared offsets."""
    x = np.asarray(x)
    h, w = x.shape[-2:]
    offsets = np.asarray(offsets)
    if offsets.shape[-3:] != (h, w, 2):
        raise ConfigError(f"field shape {offsets.shape[-3:]} does not match image {h}x{w}")
    ident = identity_coords(h, w)
    absolute = ident + offsets.astype(np.float64)
    out = sample_bilinear(x, absolute[..., 0], absolute[..., 1], padding="border")
    return np.clip(out, 0, 1, out=out)


def warp_image(x: np.ndarray, m: WarpField) -> np.ndarray:
    """Apply the backward warp ``m`` to one image (C, H, W) or a batch (B, C, H, W)."""
    x = np.asarray(x)
    if x.ndim not in (3, 4):
        raise ConfigError(f"expected (C, H, W) or (B, C, H, W), got shape {x.shape}")
    if x.shape[-2:] != (m.h, m.w):
        raise ConfigError(f"image size {x.shape[-2:]} does not match warp field {m.h}x{m.w}")
    if x.ndim == 3:
        return warp_batch(x[None], m.offsets)[0]
    return warp_batch(x, m.offsets)


def grid_sample(x: np.ndarray, grid: np.ndarray) -> np.ndarray:
    """Sample (B, C, H, W) images at normalized align-corners coordinates ``grid`` (H', W', 2)."""
    h, w = x.shape[-2:]
    rows = (grid[..., 0] + 1.0) * (h - 1) / 2.0
    cols = (grid[..., 1] + 1.0) * (w - 1) / 2.0
    return sample_bilinear(np.asarray(x), rows, cols, padding="border")
