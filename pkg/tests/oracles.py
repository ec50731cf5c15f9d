"""Reference implementations written independently of the package code.

They are deliberately slow and literal: scalar loops, textbook formulas, no
shared helpers with ``warpbench``.
"""
import math

import numpy as np


def keys_weight(t, a=-0.75):
    t = abs(t)
    if t <= 1.0:
        return (a + 2.0) * t ** 3 - (a + 3.0) * t ** 2 + 1.0
    if t < 2.0:
        return a * t ** 3 - 5.0 * a * t ** 2 + 8.0 * a * t - 4.0 * a
    return 0.0


def bicubic_direct(grid, h, w):
    """2-D bicubic resampling by explicit 4x4 neighbourhood sums.

    ``grid`` is (k_r, k_c) or (k_r, k_c, C). Control point p sits at output
    coordinate p * (h - 1) / (k_r - 1); taps past the edge reuse the edge value.
    """
    grid = np.asarray(grid, dtype=np.float64)
    squeeze = grid.ndim == 2
    if squeeze:
        grid = grid[:, :, None]
    kr, kc, nch = grid.shape
    out = np.zeros((h, w, nch))
    for i in range(h):
        sr = i * (kr - 1) / (h - 1) if h > 1 else 0.0
        r0 = math.floor(sr)
        for j in range(w):
            sc = j * (kc - 1) / (w - 1) if w > 1 else 0.0
            c0 = math.floor(sc)
            for c in range(nch):
                acc = 0.0
                for p in range(r0 - 1, r0 + 3):
                    wr = keys_weight(sr - p)
                    if wr == 0.0:
                        continue
                    pp = min(max(p, 0), kr - 1)
                    for q in range(c0 - 1, c0 + 3):
                        wc = keys_weight(sc - q)
                        if wc == 0.0:
                            continue
                        qq = min(max(q, 0), kc - 1)
                        acc += wr * wc * grid[pp, qq, c]
                out[i, j, c] = acc
    return out[:, :, 0] if squeeze else out


def psnr_loop(x, y):
    """PSNR in dB with peak value 1, accumulating the squared error element by element."""
    x = np.asarray(x, dtype=np.float64).ravel()
    y = np.asarray(y, dtype=np.float64).ravel()
    total = 0.0
    for a, b in zip(x.tolist(), y.tolist()):
        total += (a - b) * (a - b)
    mse = total / len(x)
    return 10.0 * math.log10(1.0 / mse)


def bilinear_point(img, r, c):
    """Bilinear sample of a 2-D image at a real position (border clamped)."""
    h, w = img.shape
    r = min(max(r, 0.0), h - 1.0)
    c = min(max(c, 0.0), w - 1.0)
    r0, c0 = int(math.floor(r)), int(math.floor(c))
    r1, c1 = min(r0 + 1, h - 1), min(c0 + 1, w - 1)
    fr, fc = r - r0, c - c0
    return ((1 - fr) * (1 - fc) * img[r0, c0] + (1 - fr) * fc * img[r0, c1]
            + fr * (1 - fc) * img[r1, c0] + fr * fc * img[r1, c1])


def central_difference(f, array, index, eps):
    """(f(a + eps e_i) - f(a - eps e_i)) / 2 eps, restoring ``array`` afterwards."""
    old = array[index]
    array[index] = old + eps
    up = f()
    array[index] = old - eps
    down = f()
    array[index] = old
    return (up - down) / (2.0 * eps)


# Worked MAD example: norms [10, 11, ..., 18, 2].
# median = (13 + 14) / 2 = 13.5; |x - 13.5| sorted = 0.5,0.5,1.5,1.5,2.5,2.5,3.5,3.5,4.5,11.5
# MAD = (2.5 + 2.5) / 2 = 2.5; index(2) = 11.5 / (1.4826 * 2.5)
MAD_EXAMPLE_NORMS = [10, 11, 12, 13, 14, 15, 16, 17, 18, 2]
MAD_EXAMPLE_INDEX_OF_2 = 11.5 / (1.4826 * 2.5)
