"""Ground-truth density maps from head points, and count recovery.

Pixel ``(row i, col j)`` is sampled at continuous position ``(x=j, y=i)``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import NonDivisibleShape, NonPositiveSigma, OutOfBoundsPoint

DEFAULT_SIGMA = 4.0
TRUNCATE = 4.0  # kernel radius in units of sigma


@dataclass
class DensityMap:
    values: np.ndarray  # H x W, persons per pixel

    @property
    def height(self) -> int:
        return self.values.shape[0]

    @property
    def width(self) -> int:
        return self.values.shape[1]

    def count(self) -> float:
        return count_from_density(self)


def _kernel(x: float, y: float, height: int, width: int, sigma: float):
    r = TRUNCATE * sigma
    r0, r1 = max(0, int(np.ceil(y - r))), min(height - 1, int(np.floor(y + r)))
    c0, c1 = max(0, int(np.ceil(x - r))), min(width - 1, int(np.floor(x + r)))
    rows = np.arange(r0, r1 + 1, dtype=np.float64)[:, None]
    cols = np.arange(c0, c1 + 1, dtype=np.float64)[None, :]
    d2 = (rows - y) ** 2 + (cols - x) ** 2
    k = np.exp(-d2 / (2.0 * sigma * sigma))
    k[d2 > r * r] = 0.0
    total = k.sum()
    if total <= 0.0:
        # sub-pixel point whose whole disc misses the grid; fall back to the nearest pixel
        k = np.zeros_like(k)
        k[int(np.clip(round(y) - r0, 0, k.shape[0] - 1)), int(np.clip(round(x) - c0, 0, k.shape[1] - 1))] = 1.0
        total = 1.0
    return r0, c0, k / total


def generate_density_map(points, height: int, width: int, sigma: float = DEFAULT_SIGMA) -> DensityMap:
    """Place one truncated, renormalized Gaussian of unit mass per point.

    ``points`` is an iterable of ``PointAnnotation`` or an (N, 2) array of
    ``(x, y)``. Points are accumulated in (y, x) order so the result does not
    depend on input ordering.
    """
    if not sigma > 0:
        raise NonPositiveSigma(f"sigma must be > 0, got {sigma}")
    pts = np.asarray(
        [[p.x, p.y] for p in points] if not isinstance(points, np.ndarray) else points,
        dtype=np.float64,
    ).reshape(-1, 2)
    out = np.zeros((height, width), dtype=np.float64)
    if len(pts) == 0:
        return DensityMap(out)
    bad = (pts[:, 0] < 0) | (pts[:, 0] >= width) | (pts[:, 1] < 0) | (pts[:, 1] >= height)
    if bad.any():
        x, y = pts[np.argmax(bad)]
        raise OutOfBoundsPoint(f"point ({x}, {y}) outside {width}x{height}")
    order = np.lexsort((pts[:, 0], pts[:, 1]))
    for x, y in pts[order]:
        r0, c0, k = _kernel(x, y, height, width, sigma)
        out[r0:r0 + k.shape[0], c0:c0 + k.shape[1]] += k
    return DensityMap(out)


def count_from_density(dmap) -> float:
    values = dmap.values if isinstance(dmap, DensityMap) else np.asarray(dmap)
    return float(np.sum(values, dtype=np.float64))


def downsample_density(dmap: DensityMap, factor: int) -> DensityMap:
    """Sum-pool by ``factor`` so total mass is unchanged."""
    if factor < 1:
        raise ValueError(f"factor must be a positive integer, got {factor}")
    h, w = dmap.values.shape
    if h % factor or w % factor:
        raise NonDivisibleShape(f"{h}x{w} map is not divisible by {factor}")
    v = dmap.values.reshape(h // factor, factor, w // factor, factor)
    return DensityMap(v.sum(axis=(1, 3)))


def density_to_png(dmap, path) -> None:
    """Render a map as 8-bit grayscale, scaled by its maximum."""
    from PIL import Image

    values = dmap.values if isinstance(dmap, DensityMap) else np.asarray(dmap)
    peak = float(values.max()) if values.size else 0.0
    scaled = np.zeros(values.shape, np.uint8) if peak <= 0 else np.round(
        255.0 * np.clip(values, 0, None) / peak
    ).astype(np.uint8)
    Image.fromarray(scaled, mode="L").save(path)
