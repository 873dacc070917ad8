"""Fidelity metrics on images with dynamic range 1."""

from __future__ import annotations

import numpy as np
from scipy.ndimage import correlate1d

SSIM_SIGMA = 1.5
SSIM_RADIUS = 5  # 11-tap window


def _pair(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    return a, b


def rmse(a, b) -> float:
    a, b = _pair(a, b)
    return float(np.sqrt(np.mean((a - b) ** 2)))


def psnr(a, b) -> float:
    """``20 log10(1 / rmse)``; identical images give ``inf``."""
    e = rmse(a, b)
    if e == 0.0:
        return float("inf")
    return float(20.0 * np.log10(1.0 / e))


def psnr_from_rmse(e: float) -> float:
    return float("inf") if e == 0.0 else float(20.0 * np.log10(1.0 / e))


def format_psnr(value: float) -> str:
    return "exact" if np.isinf(value) else f"{value:.6f}"


def _gaussian_window(sigma=SSIM_SIGMA, radius=SSIM_RADIUS):
    x = np.arange(-radius, radius + 1, dtype=np.float64)
    g = np.exp(-0.5 * (x / sigma) ** 2)
    return g / g.sum()


def _smooth(u, taps):
    u = correlate1d(u, taps, axis=-1, mode="reflect")
    return correlate1d(u, taps, axis=-2, mode="reflect")


def ssim_map(a, b, *, k1=0.01, k2=0.03, sigma=SSIM_SIGMA) -> np.ndarray:
    """Local SSIM under a separable Gaussian window (reflected borders)."""
    a, b = _pair(a, b)
    taps = _gaussian_window(sigma)
    c1, c2 = k1**2, k2**2
    mu_a, mu_b = _smooth(a, taps), _smooth(b, taps)
    var_a = _smooth(a * a, taps) - mu_a**2
    var_b = _smooth(b * b, taps) - mu_b**2
    cov = _smooth(a * b, taps) - mu_a * mu_b
    num = (2 * mu_a * mu_b + c1) * (2 * cov + c2)
    den = (mu_a**2 + mu_b**2 + c1) * (var_a + var_b + c2)
    return num / den


def ssim(a, b, *, k1=0.01, k2=0.03, sigma=SSIM_SIGMA) -> float:
    """Mean windowed SSIM in ``[-1, 1]``."""
    return float(np.clip(np.mean(ssim_map(a, b, k1=k1, k2=k2, sigma=sigma)), -1.0, 1.0))


def ssim_global(a, b, *, k1=0.01, k2=0.03) -> float:
    """Single-window SSIM from whole-image statistics."""
    a, b = _pair(a, b)
    c1, c2 = k1**2, k2**2
    mu_a, mu_b = a.mean(), b.mean()
    cov = np.mean((a - mu_a) * (b - mu_b))
    num = (2 * mu_a * mu_b + c1) * (2 * cov + c2)
    den = (mu_a**2 + mu_b**2 + c1) * (a.var() + b.var() + c2)
    return float(num / den)
