"""Two-view stochastic augmentation: crop, flip, color distortion, blur.

All images are float32 arrays shaped [3, H, W] with values in [0, 1]. Every
function is a pure function of (image, generator state, policy).
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np
from matplotlib.colors import hsv_to_rgb, rgb_to_hsv
from scipy.ndimage import correlate1d

from .interp import resize_bilinear

LUMA = np.array([0.299, 0.587, 0.114], dtype=np.float32)


@dataclass(frozen=True)
class AugPolicy:
    output_size: int = 32
    crop_scale_range: tuple = (0.08, 1.0)
    ratio_range: tuple = (3 / 4, 4 / 3)
    flip_prob: float = 0.5
    jitter_prob: float = 0.8
    jitter_strengths: tuple = (0.8, 0.8, 0.8, 0.2)  # brightness, contrast, saturation, hue
    grayscale_prob: float = 0.2
    blur_prob: float = 0.5
    blur_sigma_range: tuple = (0.1, 2.0)
    seed: int = 0

    def __post_init__(self):
        for name in ("flip_prob", "jitter_prob", "grayscale_prob", "blur_prob"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1]")
        lo, hi = self.crop_scale_range
        if not 0.0 < lo <= hi <= 1.0:
            raise ValueError("crop_scale_range must lie in (0, 1]")
        if self.output_size <= 0:
            raise ValueError("output_size must be positive")

    @classmethod
    def identity(cls, output_size: int) -> "AugPolicy":
        return cls(output_size=output_size, crop_scale_range=(1.0, 1.0), ratio_range=(1.0, 1.0),
                   flip_prob=0.0, jitter_prob=0.0, jitter_strengths=(0.0, 0.0, 0.0, 0.0),
                   grayscale_prob=0.0, blur_prob=0.0)

    def to_dict(self) -> dict:
        return asdict(self)


def sample_crop_rect(height: int, width: int, rng: np.random.Generator, policy: AugPolicy):
    """(top, left, h, w) of a crop with sampled area fraction and aspect ratio."""
    area = height * width
    log_lo, log_hi = math.log(policy.ratio_range[0]), math.log(policy.ratio_range[1])
    for _ in range(10):
        target = area * rng.uniform(*policy.crop_scale_range)
        ratio = math.exp(rng.uniform(log_lo, log_hi))
        w = int(round(math.sqrt(target * ratio)))
        h = int(round(math.sqrt(target / ratio)))
        if 0 < w <= width and 0 < h <= height:
            top = int(rng.integers(0, height - h + 1))
            left = int(rng.integers(0, width - w + 1))
            return top, left, h, w
    # fallback: central crop of the largest region with an admissible aspect ratio
    in_ratio = width / height
    if in_ratio < policy.ratio_range[0]:
        w = width
        h = int(round(w / policy.ratio_range[0]))
    elif in_ratio > policy.ratio_range[1]:
        h = height
        w = int(round(h * policy.ratio_range[1]))
    else:
        w, h = width, height
    return (height - h) // 2, (width - w) // 2, h, w


def random_resized_crop(img: np.ndarray, rng: np.random.Generator, policy: AugPolicy) -> np.ndarray:
    top, left, h, w = sample_crop_rect(img.shape[1], img.shape[2], rng, policy)
    crop = img[:, top:top + h, left:left + w]
    return resize_bilinear(crop, policy.output_size, policy.output_size).astype(np.float32)


def to_grayscale(img: np.ndarray) -> np.ndarray:
    gray = np.tensordot(LUMA, img, axes=(0, 0))
    return np.broadcast_to(gray, img.shape).astype(np.float32)


def _blend(img, other, factor):
    return np.clip(factor * img + (1.0 - factor) * other, 0.0, 1.0)


def _adjust(img, op, strength, rng):
    if op == 0:
        return np.clip(img * rng.uniform(max(0.0, 1 - strength), 1 + strength), 0.0, 1.0)
    if op == 1:
        mean = float(np.tensordot(LUMA, img, axes=(0, 0)).mean())
        return _blend(img, mean, rng.uniform(max(0.0, 1 - strength), 1 + strength))
    if op == 2:
        return _blend(img, to_grayscale(img), rng.uniform(max(0.0, 1 - strength), 1 + strength))
    shift = rng.uniform(-strength, strength)
    hsv = rgb_to_hsv(np.moveaxis(img, 0, -1))
    hsv[..., 0] = (hsv[..., 0] + shift) % 1.0
    return np.moveaxis(hsv_to_rgb(hsv), -1, 0)


def color_distort(img: np.ndarray, rng: np.random.Generator, policy: AugPolicy) -> np.ndarray:
    """Jitter brightness/contrast/saturation/hue in random order, then maybe grayscale."""
    out = img
    if rng.random() < policy.jitter_prob:
        for op in rng.permutation(4):
            strength = policy.jitter_strengths[op]
            if strength > 0:
                out = _adjust(out, int(op), strength, rng)
    if rng.random() < policy.grayscale_prob:
        out = to_grayscale(out)
    return np.clip(out, 0.0, 1.0).astype(np.float32)


def gaussian_kernel(sigma: float) -> np.ndarray:
    radius = int(math.ceil(3 * sigma))
    x = np.arange(-radius, radius + 1, dtype=np.float64)
    k = np.exp(-0.5 * (x / sigma) ** 2)
    return k / k.sum()


def gaussian_blur(img: np.ndarray, rng: np.random.Generator, policy: AugPolicy) -> np.ndarray:
    if not rng.random() < policy.blur_prob:
        return img
    k = gaussian_kernel(rng.uniform(*policy.blur_sigma_range))
    out = correlate1d(img.astype(np.float64), k, axis=-1, mode="reflect")
    out = correlate1d(out, k, axis=-2, mode="reflect")
    return out.astype(np.float32)


def augment(img: np.ndarray, rng: np.random.Generator, policy: AugPolicy) -> np.ndarray:
    out = random_resized_crop(np.asarray(img, dtype=np.float32), rng, policy)
    if rng.random() < policy.flip_prob:
        out = out[:, :, ::-1]
    out = color_distort(out, rng, policy)
    return np.ascontiguousarray(gaussian_blur(out, rng, policy))


def make_view_pair(img: np.ndarray, rng: np.random.Generator | None, policy: AugPolicy):
    """Two independent draws of the full pipeline on the same source image."""
    if rng is None:
        rng = np.random.default_rng(policy.seed)
    rng_a, rng_b = rng.spawn(2)
    return augment(img, rng_a, policy), augment(img, rng_b, policy)
