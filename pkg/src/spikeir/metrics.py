"""PSNR and single-scale SSIM on images with values in [0, 1]."""
from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ConfigError, DimensionError

PSNR_CAP = 99.0
K1, K2 = 0.01, 0.03
WINDOW = 11
WINDOW_SIGMA = 1.5


def _as_chw(a) -> np.ndarray:
    a = getattr(a, "values", a)
    a = np.asarray(a, dtype=np.float64)
    if a.ndim == 2:
        a = a[None]
    if a.ndim == 4:
        a = a.reshape(-1, *a.shape[2:])
    return a


def psnr(a, b) -> float:
    """10 log10(1 / MSE), joint over all channels; identical inputs give 99 dB."""
    a, b = _as_chw(a), _as_chw(b)
    if a.shape != b.shape:
        raise DimensionError(f"psnr: shapes {a.shape} and {b.shape} differ")
    err = np.mean((a - b) ** 2)
    if err == 0:
        return PSNR_CAP
    return float(min(PSNR_CAP, 10.0 * np.log10(1.0 / err)))


def gaussian_window(size: int = WINDOW, sigma: float = WINDOW_SIGMA) -> np.ndarray:
    x = np.arange(size, dtype=np.float64) - (size - 1) / 2
    g = np.exp(-(x * x) / (2 * sigma * sigma))
    return g / g.sum()


def _filter_valid(x: np.ndarray, g: np.ndarray) -> np.ndarray:
    k = len(g)
    rows = sliding_window_view(x, k, axis=-2) @ g
    return sliding_window_view(rows, k, axis=-1) @ g


def ssim(a, b) -> float:
    """Mean SSIM over every fully-contained 11x11 Gaussian window and channel."""
    a, b = _as_chw(a), _as_chw(b)
    if a.shape != b.shape:
        raise DimensionError(f"ssim: shapes {a.shape} and {b.shape} differ")
    if min(a.shape[1:]) < WINDOW:
        raise ConfigError(f"ssim needs images of at least {WINDOW}x{WINDOW}, got {a.shape[1:]}")
    g = gaussian_window()
    c1, c2 = K1 ** 2, K2 ** 2
    mu_a, mu_b = _filter_valid(a, g), _filter_valid(b, g)
    var_a = _filter_valid(a * a, g) - mu_a ** 2
    var_b = _filter_valid(b * b, g) - mu_b ** 2
    cov = _filter_valid(a * b, g) - mu_a * mu_b
    num = (2 * mu_a * mu_b + c1) * (2 * cov + c2)
    den = (mu_a ** 2 + mu_b ** 2 + c1) * (var_a + var_b + c2)
    return float(np.mean(num / den))
