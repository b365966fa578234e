"""Procedural two-stain tissue rasters used as a stand-in target domain.

Each image is rendered in optical density as ``od = M @ c`` from smooth,
partly sparse concentration fields, with white background holes, and then
quantized to 8 bits.
"""
from __future__ import annotations

import numpy as np

from .tensor_core import Rng

# columns: hematoxylin, eosin (unit OD directions, RGB order)
REFERENCE_STAINS = np.array([
    [0.5626, 0.2159],
    [0.7201, 0.8012],
    [0.4062, 0.5581],
])
REFERENCE_STAINS = REFERENCE_STAINS / np.linalg.norm(REFERENCE_STAINS, axis=0)


def smooth_field(height: int, width: int, cell: int, rng: Rng) -> np.ndarray:
    """Bilinearly upsampled lattice of uniform values; smooth, values in [0, 1)."""
    gh = height // cell + 2
    gw = width // cell + 2
    grid = rng.uniform_array(gh * gw).reshape(gh, gw)
    oy = rng.uniform() * cell
    ox = rng.uniform() * cell
    ys = (np.arange(height) + oy) / cell
    xs = (np.arange(width) + ox) / cell
    y0 = np.minimum(ys.astype(int), gh - 2)
    x0 = np.minimum(xs.astype(int), gw - 2)
    fy = (ys - y0)[:, None]
    fx = (xs - x0)[None, :]
    a = grid[y0][:, x0]
    b = grid[y0][:, x0 + 1]
    c = grid[y0 + 1][:, x0]
    d = grid[y0 + 1][:, x0 + 1]
    return (a * (1 - fx) + b * fx) * (1 - fy) + (c * (1 - fx) + d * fx) * fy


def _ramp(f: np.ndarray, lo: float, hi: float) -> np.ndarray:
    return np.clip((f - lo) / (hi - lo), 0.0, 1.0)


def concentrations(height: int, width: int, rng: Rng):
    """Hematoxylin and eosin concentration maps plus the background mask."""
    scale = max(4, min(height, width) // 8)
    nuclei = 0.55 * smooth_field(height, width, max(3, scale // 3), rng) \
        + 0.45 * smooth_field(height, width, scale, rng)
    stroma = 0.6 * smooth_field(height, width, 2 * scale, rng) \
        + 0.4 * smooth_field(height, width, max(3, scale // 2), rng)
    holes = smooth_field(height, width, 3 * scale, rng)
    c_h = 1.6 * _ramp(nuclei, 0.5, 0.8) ** 0.8
    c_e = 0.35 + 0.75 * _ramp(stroma, 0.25, 0.75)
    # eosin is displaced where nuclei are dense, giving pure-H regions
    c_e = c_e * (1.0 - _ramp(nuclei, 0.6, 0.72))
    background = holes > 0.82
    c_h[background] = 0.0
    c_e[background] = 0.0
    return c_h, c_e, background


def render(c_h: np.ndarray, c_e: np.ndarray, stains: np.ndarray = REFERENCE_STAINS) -> np.ndarray:
    """8-bit RGB (H, W, 3) from concentration maps."""
    od = c_h[..., None] * stains[:, 0] + c_e[..., None] * stains[:, 1]
    return np.clip(np.rint(255.0 * np.power(10.0, -od)), 0, 255).astype(np.uint8)


def generate_image(height: int, width: int, rng: Rng, stains: np.ndarray = REFERENCE_STAINS) -> np.ndarray:
    c_h, c_e, _ = concentrations(height, width, rng)
    return render(c_h, c_e, stains)


def generate_corpus(n: int, size: int, seed: int) -> list:
    """``n`` square 8-bit images, each from its own child generator."""
    rng = Rng(seed)
    return [generate_image(size, size, rng.child()) for _ in range(n)]
