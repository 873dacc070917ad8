"""Synthetic cartoon + texture images with exact ground truth.

Cartoons are piecewise constant (overlapping ellipses on a background) or
smooth ramps; textures are sums of sinusoids or band-pass filtered noise.
Textures are zero mean over their support, and observations are the exact
sum ``f = c + t`` unless clamping is requested.
"""

from __future__ import annotations

import logging
from pathlib import Path

import numpy as np

logger = logging.getLogger(__name__)

TEXTURE_BAND = (4.0, 16.0)  # cycles per image
TEXTURE_AMPLITUDE = (0.05, 0.1)


def _max_frequency(h, w):
    # stay strictly below Nyquist on small grids
    return min(TEXTURE_BAND[1], min(h, w) / 2.0 - 1.0)


def generate_cartoon(h: int, w: int, seed: int, kind: str = "piecewise_constant") -> np.ndarray:
    rng = np.random.default_rng([seed, 1])
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    if kind == "piecewise_constant":
        n_regions = int(rng.integers(3, 6))  # background plus 2-4 ellipses
        value = float(rng.uniform(0.1, 0.9))
        img = np.full((h, w), value)
        for _ in range(n_regions - 1):
            cy, cx = rng.uniform(0.2, 0.8) * h, rng.uniform(0.2, 0.8) * w
            ay, ax = rng.uniform(1 / 6, 1 / 3) * h, rng.uniform(1 / 6, 1 / 3) * w
            theta = rng.uniform(0, np.pi)
            dy, dx = yy - cy, xx - cx
            u = dx * np.cos(theta) + dy * np.sin(theta)
            v = -dx * np.sin(theta) + dy * np.cos(theta)
            inside = (u / ax) ** 2 + (v / ay) ** 2 <= 1.0
            under = float(np.median(img[inside])) if inside.any() else value
            # keep a visible contrast against what the ellipse covers
            while True:
                value = float(rng.uniform(0.1, 0.9))
                if abs(value - under) >= 0.25:
                    break
            img[inside] = value
        return img
    if kind == "smooth_gradient":
        y = yy / max(h - 1, 1)
        x = xx / max(w - 1, 1)
        if rng.random() < 0.5:
            coef = rng.normal(size=6)
            ramp = coef[0] * x + coef[1] * y + coef[2] * x * y + coef[3] * x**2 + coef[4] * y**2
        else:
            cy, cx = rng.uniform(0.0, 1.0, size=2)
            ramp = np.sqrt((y - cy) ** 2 + (x - cx) ** 2)
        span = ramp.max() - ramp.min()
        ramp = (ramp - ramp.min()) / span if span > 0 else np.zeros_like(ramp)
        lo = float(rng.uniform(0.1, 0.6))
        hi = lo + float(rng.uniform(0.1, 0.3))
        return lo + (hi - lo) * ramp
    raise ValueError(f"unknown cartoon kind {kind!r}")


def _smooth_mask(h, w, rng):
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    cy, cx = rng.uniform(0.35, 0.65) * h, rng.uniform(0.35, 0.65) * w
    ry, rx = rng.uniform(0.3, 0.45) * h, rng.uniform(0.3, 0.45) * w
    d = np.sqrt(((yy - cy) / ry) ** 2 + ((xx - cx) / rx) ** 2)
    return np.clip(1.5 - d, 0.0, 1.0)


def generate_texture(h: int, w: int, seed: int, kind: str = "periodic", masked: bool = False) -> np.ndarray:
    rng = np.random.default_rng([seed, 2])
    fmax = _max_frequency(h, w)
    fmin = min(TEXTURE_BAND[0], fmax)
    amplitude = float(rng.uniform(*TEXTURE_AMPLITUDE))
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    if kind == "periodic":
        n_waves = int(rng.integers(1, 4))
        t = np.zeros((h, w))
        for _ in range(n_waves):
            # integer frequency vectors keep each wave exactly periodic on the grid
            for _attempt in range(100):
                ky = int(rng.integers(-int(fmax), int(fmax) + 1)) if h > 1 else 0
                kx = int(rng.integers(0, int(fmax) + 1)) if w > 1 else 0
                if fmin <= np.hypot(kx, ky) <= fmax:
                    break
            phase = rng.uniform(0, 2 * np.pi)
            t += rng.uniform(0.5, 1.0) * np.sin(2 * np.pi * (kx * xx / w + ky * yy / h) + phase)
    elif kind == "stochastic":
        noise = rng.standard_normal((h, w))
        fy = np.fft.fftfreq(h) * h
        fx = np.fft.fftfreq(w) * w
        radius = np.hypot(fy[:, None], fx[None, :])
        band = (radius >= fmin) & (radius <= fmax)
        t = np.real(np.fft.ifft2(np.fft.fft2(noise) * band))
    else:
        raise ValueError(f"unknown texture kind {kind!r}")
    peak = np.max(np.abs(t))
    if peak > 0:
        t *= amplitude / peak
    if masked:
        mask = _smooth_mask(h, w, rng)
        t = t * mask
        support = mask > 0
        t[support] -= t[support].mean()
    else:
        t -= t.mean()
    return t


def generate_sample(h: int, w: int, seed: int, *, clamp=False):
    """One ``(f, c, t)`` triple; cartoon/texture kinds drawn from the seed."""
    rng = np.random.default_rng([seed, 0])
    ckind = "piecewise_constant" if rng.random() < 0.75 else "smooth_gradient"
    tkind = "periodic" if rng.random() < 0.5 else "stochastic"
    masked = bool(rng.random() < 0.5)
    c = generate_cartoon(h, w, seed, ckind)
    t = generate_texture(h, w, seed, tkind, masked=masked)
    f = c + t
    outside = (f < 0) | (f > 1)
    if outside.any():
        logger.info("sample %d: %d pixels outside [0, 1]%s", seed, int(outside.sum()),
                    " (clamped)" if clamp else "")
        if clamp:
            f = np.clip(f, 0.0, 1.0)
    return f, c, t


def generate_arrays(count: int, h: int, w: int, seed: int):
    """Stacked arrays ``F, C, T`` of shape ``(count, h, w)``."""
    triples = [generate_sample(h, w, seed * 100003 + i) for i in range(count)]
    return tuple(np.stack(a) for a in zip(*triples))


def generate_dataset(count: int, h: int, w: int, seed: int, out_dir, *, clamp=False) -> Path:
    """Write ``count`` samples as raw images plus a manifest; returns the manifest path."""
    from .io import write_image, write_manifest

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    entries = []
    for i in range(count):
        f, c, t = generate_sample(h, w, seed * 100003 + i, clamp=clamp)
        names = (f"img_{i:04d}_f.gvd", f"img_{i:04d}_c.gvd", f"img_{i:04d}_t.gvd")
        for name, arr in zip(names, (f, c, t)):
            write_image(out / name, arr)
        entries.append(names)
    manifest = out / "manifest.txt"
    write_manifest(manifest, entries)
    return manifest
