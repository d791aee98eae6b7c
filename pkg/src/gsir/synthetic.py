"""Procedural photographic-style test images.

Deterministic given a seed: a smooth color gradient base, a couple of soft
geometric objects with hard edges, and band-limited texture. Every image
keeps at least one smooth low-detail region so quality-gated stages have
something to leave alone.
"""

from __future__ import annotations

import numpy as np
from scipy.ndimage import gaussian_filter

from .rng import named_rng


def natural_image(seed: int, height: int, width: int) -> np.ndarray:
    rng = named_rng(seed, "synthetic-image")
    yy, xx = np.mgrid[0:height, 0:width]
    u = xx / max(width - 1, 1)
    v = yy / max(height - 1, 1)

    base = np.zeros((height, width, 3))
    for ch in range(3):
        gx, gy, g0 = rng.uniform(-0.25, 0.25, 3)
        base[:, :, ch] = 0.55 + g0 + gx * (u - 0.5) + gy * (v - 0.5)

    # a few elliptical blobs with crisp boundaries
    n_blobs = int(rng.integers(2, 5))
    for _ in range(n_blobs):
        cx, cy = rng.uniform(0.2, 0.8, 2)
        rx = rng.uniform(0.08, 0.25)
        ry = rng.uniform(0.08, 0.25)
        ang = rng.uniform(0, np.pi)
        col = rng.uniform(-0.35, 0.35, 3)
        du = (u - cx) * np.cos(ang) + (v - cy) * np.sin(ang)
        dv = -(u - cx) * np.sin(ang) + (v - cy) * np.cos(ang)
        inside = (du / rx) ** 2 + (dv / ry) ** 2 < 1.0
        base[inside] += col

    # band-limited texture, masked off a smooth corner region
    noise = rng.standard_normal((height, width, 3))
    texture = gaussian_filter(noise, sigma=(1.2, 1.2, 0)) * 0.12
    mask = 1.0 - np.exp(-(((u - 0.1) ** 2 + (v - 0.1) ** 2) / 0.08))
    base += texture * mask[:, :, None]

    # defocus one interior region (sky/bokeh-like) so detail varies spatially
    cx, cy = rng.uniform(0.35, 0.6, 2)
    rad = rng.uniform(0.2, 0.28)
    dist = np.sqrt((u - cx) ** 2 + (v - cy) ** 2)
    soft = np.clip((dist - rad) / 0.08, 0.0, 1.0)[:, :, None]
    blurred = gaussian_filter(base, sigma=(6.0, 6.0, 0))
    base = blurred + (base - blurred) * soft

    return np.clip(base, 0.0, 1.0)
