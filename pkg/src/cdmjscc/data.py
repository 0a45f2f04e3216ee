"""Deterministic synthetic image sets spanning low to high entropy."""

from __future__ import annotations

import numpy as np
from scipy import ndimage

from .numerics import RngStream

FAMILIES = ("flat", "gradient", "checkerboard", "noise")


def _flat(rng: RngStream, size: int) -> np.ndarray:
    color = rng.uniform((3, 1, 1), 0.05, 0.95).astype(np.float64)
    return np.broadcast_to(color, (3, size, size)).copy()


def _gradient(rng: RngStream, size: int) -> np.ndarray:
    angle = float(rng.uniform((), 0.0, 2 * np.pi))
    c0 = rng.uniform((3, 1, 1), 0.0, 1.0).astype(np.float64)
    c1 = rng.uniform((3, 1, 1), 0.0, 1.0).astype(np.float64)
    yy, xx = np.mgrid[0:size, 0:size] / max(size - 1, 1)
    t = np.cos(angle) * xx + np.sin(angle) * yy
    t = (t - t.min()) / max(t.max() - t.min(), 1e-12)
    return c0 + (c1 - c0) * t[None]


def _checkerboard(rng: RngStream, size: int) -> np.ndarray:
    scale = int(rng.integers(4, 9))
    oy, ox = (int(v) for v in rng.integers(0, scale, size=2))
    c0 = rng.uniform((3, 1, 1), 0.0, 1.0).astype(np.float64)
    c1 = rng.uniform((3, 1, 1), 0.0, 1.0).astype(np.float64)
    yy, xx = np.mgrid[0:size, 0:size]
    mask = (((yy + oy) // scale + (xx + ox) // scale) % 2).astype(np.float64)
    return c0 + (c1 - c0) * mask[None]


def _noise(rng: RngStream, size: int) -> np.ndarray:
    sigma = float(rng.uniform((), 1.5, 2.5))
    raw = rng.gauss((3, size, size)).astype(np.float64)
    smooth = ndimage.gaussian_filter(raw, sigma=(0, sigma, sigma), mode="wrap")
    smooth = (smooth - smooth.mean()) / max(smooth.std(), 1e-12)
    base = rng.uniform((3, 1, 1), 0.3, 0.7).astype(np.float64)
    return np.clip(base + 0.25 * smooth, 0.0, 1.0)


_MAKERS = {"flat": _flat, "gradient": _gradient, "checkerboard": _checkerboard, "noise": _noise}


def synth_image(seed: int, index: int, size: int) -> tuple[str, np.ndarray]:
    family = FAMILIES[index % len(FAMILIES)]
    rng = RngStream(seed).substream(index)
    return family, _MAKERS[family](rng, size)


def synth_dataset(seed: int, count: int, size: int) -> np.ndarray:
    """(count, 3, size, size) images in [0, 1], families cycling in a fixed order."""
    if size <= 0 or size % 4:
        raise ValueError(f"size must be a positive multiple of 4, got {size}")
    return np.stack([synth_image(seed, i, size)[1] for i in range(count)])


def synth_families(count: int) -> list[str]:
    return [FAMILIES[i % len(FAMILIES)] for i in range(count)]


def local_variance(img: np.ndarray, window: int = 3) -> float:
    """Mean over pixels and channels of the variance within a sliding window."""
    img = np.asarray(img, dtype=np.float64)
    size = (1, window, window)
    mean = ndimage.uniform_filter(img, size=size, mode="reflect")
    mean_sq = ndimage.uniform_filter(img * img, size=size, mode="reflect")
    return float(np.maximum(mean_sq - mean * mean, 0.0).mean())
