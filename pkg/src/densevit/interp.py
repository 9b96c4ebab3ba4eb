"""Separable resampling as dense 1-D interpolation matrices.

A resize of an axis from ``n_in`` to ``n_out`` samples is the product with an
``[n_out, n_in]`` matrix, which keeps resampling differentiable through
plain matmul. Sample centers follow the half-pixel convention
``src = (dst + 0.5) * n_in / n_out - 0.5`` and out-of-range taps clamp to the
edge, so every row sums to one.
"""
import numpy as np


def _cubic_weight(t, a=-0.5):
    t = np.abs(t)
    return np.where(
        t <= 1,
        (a + 2) * t ** 3 - (a + 3) * t ** 2 + 1,
        np.where(t < 2, a * t ** 3 - 5 * a * t ** 2 + 8 * a * t - 4 * a, 0.0),
    )


def bicubic_matrix(n_in: int, n_out: int, a: float = -0.5) -> np.ndarray:
    """Catmull-Rom (a=-0.5) resampling matrix with edge clamping."""
    src = (np.arange(n_out) + 0.5) * n_in / n_out - 0.5
    base = np.floor(src).astype(int)
    frac = src - base
    m = np.zeros((n_out, n_in), dtype=np.float64)
    rows = np.arange(n_out)
    for offset in (-1, 0, 1, 2):
        w = _cubic_weight(frac - offset, a)
        idx = np.clip(base + offset, 0, n_in - 1)
        np.add.at(m, (rows, idx), w)
    return m


def bilinear_matrix(n_in: int, n_out: int) -> np.ndarray:
    src = np.clip((np.arange(n_out) + 0.5) * n_in / n_out - 0.5, 0, n_in - 1)
    lo = np.floor(src).astype(int)
    hi = np.minimum(lo + 1, n_in - 1)
    frac = src - lo
    m = np.zeros((n_out, n_in), dtype=np.float64)
    rows = np.arange(n_out)
    np.add.at(m, (rows, lo), 1 - frac)
    np.add.at(m, (rows, hi), frac)
    return m


def resize_bilinear(img: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Bilinear resize of the last two axes of a numpy array."""
    mh = bilinear_matrix(img.shape[-2], out_h).astype(img.dtype)
    mw = bilinear_matrix(img.shape[-1], out_w).astype(img.dtype)
    return mh @ img @ mw.T
