"""Fidelity metrics on the luminance channel."""
from __future__ import annotations

from typing import NamedTuple

import numpy as np
from scipy.signal import convolve2d

from .errors import ShapeError

PSNR_CAP = 100.0


def _as_numpy(x) -> np.ndarray:
    if hasattr(x, "detach"):
        x = x.detach().cpu().numpy()
    return np.asarray(x, dtype=np.float64)


def rgb_to_y(img, studio_swing: bool = True) -> np.ndarray:
    """BT.601 luma of a 3×H×W image in [0, 1].

    Studio swing maps black to 16/255 and white to 235/255, the convention
    used by the SR benchmarks; ``studio_swing=False`` gives full-range luma.
    """
    x = _as_numpy(img)
    if x.ndim != 3 or x.shape[0] != 3:
        raise ShapeError(f"expected 3×H×W image, got {x.shape}")
    r, g, b = x
    if studio_swing:
        return (65.481 * r + 128.553 * g + 24.966 * b + 16.0) / 255.0
    return 0.299 * r + 0.587 * g + 0.114 * b


def _crop(a: np.ndarray, border: int) -> np.ndarray:
    return a[border:-border, border:-border] if border else a


def _pair(a, b, crop_border: int) -> tuple[np.ndarray, np.ndarray]:
    a, b = _as_numpy(a), _as_numpy(b)
    if a.shape != b.shape:
        raise ShapeError(f"shape mismatch: {a.shape} vs {b.shape}")
    if a.ndim != 2:
        raise ShapeError(f"expected H×W luminance images, got {a.shape}")
    return _crop(a, crop_border), _crop(b, crop_border)


class PSNR(NamedTuple):
    db: float
    exact_match: bool


def psnr_y(a, b, peak: float = 1.0, crop_border: int = 0) -> PSNR:
    """PSNR in dB; identical inputs give the 100 dB sentinel with ``exact_match`` set."""
    a, b = _pair(a, b, crop_border)
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return PSNR(PSNR_CAP, True)
    return PSNR(min(PSNR_CAP, 10.0 * np.log10(peak * peak / mse)), False)


def gaussian_window(size: int = 11, sigma: float = 1.5) -> np.ndarray:
    t = np.arange(size) - (size - 1) / 2
    g = np.exp(-(t ** 2) / (2 * sigma ** 2))
    g /= g.sum()
    return np.outer(g, g)


def ssim_y(a, b, data_range: float = 1.0, crop_border: int = 0,
           k1: float = 0.01, k2: float = 0.03, win_size: int = 11, sigma: float = 1.5) -> float:
    """Mean SSIM over 'valid' positions of an 11×11 Gaussian window (σ=1.5)."""
    a, b = _pair(a, b, crop_border)
    if min(a.shape) < win_size:
        raise ShapeError(f"images must be at least {win_size}×{win_size}, got {a.shape}")
    if np.array_equal(a, b):
        return 1.0
    w = gaussian_window(win_size, sigma)
    c1, c2 = (k1 * data_range) ** 2, (k2 * data_range) ** 2

    def filt(x):
        return convolve2d(x, w, mode="valid")

    mu_a, mu_b = filt(a), filt(b)
    var_a = filt(a * a) - mu_a ** 2
    var_b = filt(b * b) - mu_b ** 2
    cov = filt(a * b) - mu_a * mu_b
    num = (2 * mu_a * mu_b + c1) * (2 * cov + c2)
    den = (mu_a ** 2 + mu_b ** 2 + c1) * (var_a + var_b + c2)
    return float(np.mean(num / den))
