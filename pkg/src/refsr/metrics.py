"""Image quality metrics on the luma channel.

PSNR and SSIM follow the super-resolution reporting convention: convert RGB to
the BT.601 studio-range Y channel, crop a 4-pixel border, then measure.
"""

from __future__ import annotations

import math

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1 = 0.01
SSIM_K2 = 0.03


def rgb_to_y(img: np.ndarray) -> np.ndarray:
    """BT.601 luma of a full-range RGB image in [0, 1]: Y in [16/255, 235/255]."""
    r, g, b = img[..., 0], img[..., 1], img[..., 2]
    return 16.0 / 255.0 + (65.481 * r + 128.553 * g + 24.966 * b) / 255.0


def psnr(a: np.ndarray, b: np.ndarray, peak: float = 1.0) -> float:
    """10 log10(peak^2 / MSE); identical inputs report +inf."""
    if a.shape != b.shape:
        raise ValueError(f"extent mismatch: {a.shape} vs {b.shape}")
    mse = float(np.mean((a.astype(np.float64) - b.astype(np.float64)) ** 2))
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(peak * peak / mse)


def _gaussian_kernel(n: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA) -> np.ndarray:
    half = (n - 1) / 2.0
    x = np.arange(n) - half
    g = np.exp(-(x**2) / (2.0 * sigma**2))
    k = np.outer(g, g)
    return k / k.sum()


def ssim(a: np.ndarray, b: np.ndarray) -> float:
    """Mean local SSIM, 11x11 Gaussian window (sigma 1.5), K1=0.01, K2=0.03, L=1.

    Windows are fully interior (no padding); inputs must be at least the
    window size in both extents.
    """
    if a.shape != b.shape:
        raise ValueError(f"extent mismatch: {a.shape} vs {b.shape}")
    if a.shape[0] < SSIM_WINDOW or a.shape[1] < SSIM_WINDOW:
        raise ValueError(f"image {a.shape} smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} window")
    a = a.astype(np.float64)
    b = b.astype(np.float64)
    kern = _gaussian_kernel()

    def filt(x):
        win = sliding_window_view(x, (SSIM_WINDOW, SSIM_WINDOW))
        return np.tensordot(win, kern, axes=([2, 3], [0, 1]))

    mu_a, mu_b = filt(a), filt(b)
    var_a = filt(a * a) - mu_a**2
    var_b = filt(b * b) - mu_b**2
    cov = filt(a * b) - mu_a * mu_b
    c1 = SSIM_K1**2
    c2 = SSIM_K2**2
    num = (2.0 * mu_a * mu_b + c1) * (2.0 * cov + c2)
    den = (mu_a**2 + mu_b**2 + c1) * (var_a + var_b + c2)
    return float(np.mean(num / den))


def y_metrics(sr: np.ndarray, hr: np.ndarray, border: int = 4) -> tuple[float, float]:
    """(PSNR, SSIM) on Y after clamping to [0, 1] and cropping the border."""
    sr = np.clip(sr, 0.0, 1.0)
    hr = np.clip(hr, 0.0, 1.0)
    ya, yb = rgb_to_y(sr), rgb_to_y(hr)
    if border > 0:
        ya = ya[border:-border, border:-border]
        yb = yb[border:-border, border:-border]
    return psnr(ya, yb, peak=1.0), ssim(ya, yb)
