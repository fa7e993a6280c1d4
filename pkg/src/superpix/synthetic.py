"""Synthetic images with known ground truth, used by tests, acceptance runs and demos."""

from __future__ import annotations

import numpy as np
from scipy import ndimage

from superpix.imgio import MultiChannelImage

QUADRANT_COLORS = ((30.0, 20.0, -10.0), (70.0, -30.0, 40.0), (50.0, 60.0, 10.0), (90.0, 0.0, -50.0))


def quadrant_image(size: int = 64, colors=QUADRANT_COLORS) -> tuple[MultiChannelImage, np.ndarray]:
    """Four flat Lab quadrants; returns (image, ground truth ids 0..3 in raster order)."""
    h = size // 2
    gt = np.zeros((size, size), dtype=np.int64)
    gt[:h, h:] = 1
    gt[h:, :h] = 2
    gt[h:, h:] = 3
    data = np.stack([np.asarray(colors)[gt, c] for c in range(3)])
    return MultiChannelImage(data, ("L", "a", "b")), gt


def smooth_field(rng: np.random.Generator, shape, sigma: float) -> np.ndarray:
    """Gaussian-filtered white noise rescaled to unit standard deviation."""
    f = ndimage.gaussian_filter(rng.normal(size=shape), sigma, mode="wrap")
    return (f - f.mean()) / f.std()


def random_channels(
    rng: np.random.Generator, n_channels: int, size: int = 64, sigma: float = 3.0, scale=10.0
) -> MultiChannelImage:
    """Independent smooth random channels named L, a, b, f0, f1, ..."""
    scale = np.broadcast_to(np.asarray(scale, dtype=np.float64), (n_channels,))
    data = np.stack([scale[c] * smooth_field(rng, (size, size), sigma) for c in range(n_channels)])
    names = ("L", "a", "b") + tuple(f"f{i}" for i in range(n_channels - 3))
    return MultiChannelImage(data, names[:n_channels])


def two_region_mask(rng: np.random.Generator, size: int, smooth: float = 12.0) -> np.ndarray:
    """Binary mask with a smooth random boundary; both regions cover 30-70% of the image."""
    while True:
        f = smooth_field(rng, (size, size), smooth)
        ramp = np.linspace(-1.0, 1.0, size)
        angle = rng.uniform(0, 2 * np.pi)
        f = f + 1.5 * (np.cos(angle) * ramp[None, :] + np.sin(angle) * ramp[:, None])
        mask = f > 0
        lab, n = ndimage.label(mask)
        lab2, n2 = ndimage.label(~mask)
        if n == 1 and n2 == 1 and 0.3 < mask.mean() < 0.7:
            return mask.astype(np.int64)


def texture_pair_image(
    rng: np.random.Generator, size: int = 64, amplitude: float = 12.0, base=(50.0, 5.0, -5.0)
) -> tuple[MultiChannelImage, np.ndarray]:
    """Two regions with identical colour statistics that differ only in texture orientation.

    Both regions carry the same square-wave stripes on L (same period and
    amplitude), rotated by 90 degrees between them. Per-pixel colour values
    follow the same distribution on both sides, so any colour-only distance
    sees one homogeneous region.
    """
    gt = two_region_mask(rng, size)
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    theta = rng.uniform(0, np.pi)
    period = rng.uniform(3.0, 4.0)

    def stripes(t):
        return amplitude * np.sign(np.sin(2 * np.pi * (xx * np.cos(t) + yy * np.sin(t)) / period + rng.uniform(0, 2 * np.pi)))

    texture = np.where(gt == 0, stripes(theta), stripes(theta + np.pi / 2))
    noise = rng.normal(scale=1.0, size=(3, size, size))
    L = base[0] + texture + noise[0]
    a = base[1] + noise[1]
    b = base[2] + noise[2]
    return MultiChannelImage(np.stack([L, a, b]), ("L", "a", "b")), gt


def mosaic_gt(size: int = 96, cell: int = 8, patch: int = 32) -> np.ndarray:
    """Large background segment with a ``patch`` x ``patch`` mosaic of ``cell``-sized segments."""
    gt = np.zeros((size, size), dtype=np.int64)
    yy, xx = np.mgrid[0:patch, 0:patch]
    ids = 1 + (yy // cell) * (patch // cell) + xx // cell
    o = (size - patch) // 2
    gt[o : o + patch, o : o + patch] = ids
    return gt


def image_from_gt(rng: np.random.Generator, gt: np.ndarray, noise: float = 1.0) -> MultiChannelImage:
    """Flat random Lab colour per segment plus Gaussian noise."""
    n = int(gt.max()) + 1
    colors = np.column_stack(
        [rng.uniform(20, 90, n), rng.uniform(-40, 40, n), rng.uniform(-40, 40, n)]
    )
    data = np.stack([colors[gt, c] for c in range(3)]) + rng.normal(scale=noise, size=(3,) + gt.shape)
    return MultiChannelImage(data, ("L", "a", "b"))
