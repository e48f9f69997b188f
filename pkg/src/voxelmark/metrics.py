"""Image quality metrics: PSNR and windowed SSIM.

SSIM follows the reference recipe: 11x11 Gaussian window with sigma 1.5,
K1=0.01, K2=0.03, data range 1.0, per-channel maps averaged over valid
window positions only.
"""

import numpy as np

from .ops import ShapeMismatch

PSNR_CAP_DB = 100.0

_SSIM_WIN = 11
_SSIM_SIGMA = 1.5
_SSIM_K1 = 0.01
_SSIM_K2 = 0.03


def psnr(a, b):
    """Peak signal-to-noise ratio in dB for [0,1] images; capped at 100."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ShapeMismatch(f"image shapes differ: {a.shape} vs {b.shape}")
    mse = np.mean((a - b) ** 2)
    if mse == 0.0:
        return PSNR_CAP_DB
    return min(10.0 * np.log10(1.0 / mse), PSNR_CAP_DB)


def _gaussian_window():
    half = (_SSIM_WIN - 1) // 2
    x = np.arange(-half, half + 1, dtype=np.float64)
    g = np.exp(-(x ** 2) / (2.0 * _SSIM_SIGMA ** 2))
    g /= g.sum()
    return np.outer(g, g)


def _filter_valid(img, window):
    """2D correlation, valid positions only."""
    k = window.shape[0]
    win = np.lib.stride_tricks.sliding_window_view(img, (k, k))
    return np.einsum("hwij,ij->hw", win, window)


def _ssim_channel(a, b, window):
    c1 = _SSIM_K1 ** 2
    c2 = _SSIM_K2 ** 2
    mu_a = _filter_valid(a, window)
    mu_b = _filter_valid(b, window)
    mu_aa = _filter_valid(a * a, window)
    mu_bb = _filter_valid(b * b, window)
    mu_ab = _filter_valid(a * b, window)
    var_a = mu_aa - mu_a ** 2
    var_b = mu_bb - mu_b ** 2
    cov = mu_ab - mu_a * mu_b
    num = (2 * mu_a * mu_b + c1) * (2 * cov + c2)
    den = (mu_a ** 2 + mu_b ** 2 + c1) * (var_a + var_b + c2)
    return num / den


def ssim(a, b):
    """Mean structural similarity over channels and valid window positions.

    Accepts (3,H,W) or (H,W) arrays with values in [0,1]; requires
    H, W >= 11.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ShapeMismatch(f"image shapes differ: {a.shape} vs {b.shape}")
    if a.ndim == 2:
        a = a[None]
        b = b[None]
    if a.ndim != 3:
        raise ShapeMismatch(f"expected (C,H,W) or (H,W), got {a.shape}")
    if a.shape[1] < _SSIM_WIN or a.shape[2] < _SSIM_WIN:
        raise ValueError(
            f"image {a.shape[1]}x{a.shape[2]} smaller than the "
            f"{_SSIM_WIN}x{_SSIM_WIN} SSIM window")
    window = _gaussian_window()
    vals = [np.mean(_ssim_channel(a[c], b[c], window))
            for c in range(a.shape[0])]
    return float(np.mean(vals))
