"""SLIC over an arbitrary number of weighted channels, plus connectivity enforcement.

The colour term is a per-channel weighted squared difference (three Lab weights
followed by one weight per extra feature map); the spatial term is scaled by
(compactness / step)^2 so that the grid step and compactness stay decoupled.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from skimage.measure import label as cc_label

from superpix.errors import LengthMismatch, StepTooLarge
from superpix.imgio import MultiChannelImage, SuperpixelMap


@dataclass
class SlicParams:
    step: int
    compactness: float = 10.0
    iterations: int = 5
    alpha: Sequence[float] = (1.0, 1.0, 1.0)
    beta: Sequence[float] = ()
    min_component_frac: float = 0.25
    perturb_seeds: bool = False

    def __post_init__(self):
        if self.step < 2:
            raise ValueError(f"step must be >= 2, got {self.step}")
        if not self.compactness > 0:
            raise ValueError(f"compactness must be > 0, got {self.compactness}")
        if self.iterations < 1:
            raise ValueError("iterations must be >= 1")
        w = list(self.alpha) + list(self.beta)
        if any(v < 0 for v in w) or not any(v > 0 for v in w):
            raise ValueError("weights must be >= 0 with at least one > 0")

    @property
    def spatial_coef(self) -> float:
        return (self.compactness / self.step) ** 2

    def weights(self, n_channels: int) -> np.ndarray:
        """Per-channel weights; a single beta value is broadcast over the extra channels."""
        alpha = list(self.alpha)
        beta = list(self.beta)
        extra = n_channels - len(alpha)
        if extra < 0:
            raise LengthMismatch(f"{len(alpha)} alpha weights for {n_channels} channels")
        if len(beta) == 1 and extra != 1:
            beta = beta * extra
        if not beta and extra:
            raise LengthMismatch(f"{extra} feature channels but no beta weights")
        if len(beta) != extra:
            raise LengthMismatch(f"{len(beta)} beta weights for {extra} feature channels")
        return np.asarray(alpha + beta, dtype=np.float64)


@dataclass
class ClusterCenter:
    x: float
    y: float
    features: np.ndarray
    pixel_count: int = 0


@dataclass
class Clusters:
    """Struct-of-arrays cluster state: positions (K, 2) as (x, y), features (K, C)."""

    pos: np.ndarray
    features: np.ndarray
    counts: np.ndarray = field(default=None)

    def __post_init__(self):
        if self.counts is None:
            self.counts = np.zeros(len(self.pos), dtype=np.int64)

    def __len__(self) -> int:
        return len(self.pos)

    def __getitem__(self, k: int) -> ClusterCenter:
        return ClusterCenter(
            float(self.pos[k, 0]), float(self.pos[k, 1]), self.features[k], int(self.counts[k])
        )

    def copy(self) -> "Clusters":
        return Clusters(self.pos.copy(), self.features.copy(), self.counts.copy())


def _gradient(img: MultiChannelImage) -> np.ndarray:
    d = np.pad(img.data, ((0, 0), (1, 1), (1, 1)), mode="edge")
    gx = d[:, 1:-1, 2:] - d[:, 1:-1, :-2]
    gy = d[:, 2:, 1:-1] - d[:, :-2, 1:-1]
    return (gx**2 + gy**2).sum(axis=0)


def init_clusters(img: MultiChannelImage, step: int, perturb: bool = False) -> Clusters:
    """Seed one cluster per grid cell lying entirely inside the image."""
    if step > min(img.width, img.height):
        raise StepTooLarge(f"step {step} exceeds image size {img.width}x{img.height}")
    nx, ny = img.width // step, img.height // step
    xs = step / 2 + step * np.arange(nx)
    ys = step / 2 + step * np.arange(ny)
    gx, gy = np.meshgrid(xs, ys)
    pos = np.stack([gx.ravel(), gy.ravel()], axis=1)
    px = np.floor(pos).astype(np.int64)
    if perturb:
        grad = _gradient(img)
        for k, (x, y) in enumerate(px):
            best = None
            for dy in (-1, 0, 1):
                for dx in (-1, 0, 1):
                    xx, yy = x + dx, y + dy
                    if 0 <= xx < img.width and 0 <= yy < img.height:
                        g = grad[yy, xx]
                        if best is None or g < best[0]:
                            best = (g, xx, yy)
            px[k] = best[1:]
        pos = px.astype(np.float64)
    features = img.data[:, px[:, 1], px[:, 0]].T.copy()
    return Clusters(pos, features)


def color_distance_sq(pixel_features, cluster_features, alpha, beta=()) -> float:
    """Weighted squared feature distance between one pixel and one cluster."""
    p = np.asarray(pixel_features, dtype=np.float64)
    c = np.asarray(cluster_features, dtype=np.float64)
    w = np.concatenate([np.asarray(alpha, float), np.asarray(beta, float)])
    if not (p.shape == c.shape == w.shape):
        raise LengthMismatch(f"lengths {p.shape}, {c.shape}, {w.shape} differ")
    return float(weighted_sq_diff(p, c, w))


def total_distance_sq(pixel_xy, pixel_features, cluster: ClusterCenter, params: SlicParams) -> float:
    w = params.weights(len(pixel_features))
    dc = weighted_sq_diff(np.asarray(pixel_features, float), cluster.features, w)
    dx = cluster.x - pixel_xy[0]
    dy = cluster.y - pixel_xy[1]
    return float(dc + params.spatial_coef * (dx * dx + dy * dy))


def weighted_sq_diff(pix: np.ndarray, ctr: np.ndarray, w: np.ndarray, axis: int = -1) -> np.ndarray:
    """sum_c w[c] * (ctr[c] - pix[c])^2, accumulated channel by channel.

    Channels live on ``axis`` of both operands (after broadcasting). The fixed
    accumulation order makes every caller produce bit-identical distances.
    """
    pix = np.moveaxis(np.asarray(pix), axis, 0)
    ctr = np.moveaxis(np.asarray(ctr), axis, 0)
    acc = None
    for c in range(len(w)):
        d = ctr[c] - pix[c]
        term = w[c] * (d * d)
        acc = term if acc is None else acc + term
    return acc


def window_bounds(cx: float, cy: float, step: int, width: int, height: int):
    """Pixel index ranges within Chebyshev distance 2*step of a center."""
    r = 2 * step
    x0 = max(int(math.ceil(cx - r)), 0)
    x1 = min(int(math.floor(cx + r)), width - 1)
    y0 = max(int(math.ceil(cy - r)), 0)
    y1 = min(int(math.floor(cy + r)), height - 1)
    return x0, x1 + 1, y0, y1 + 1


def assign_step(
    img: MultiChannelImage, clusters: Clusters, params: SlicParams, labels: np.ndarray | None = None
) -> np.ndarray:
    """Label every pixel with its nearest cluster among those within Chebyshev 2S.

    Pixels without any candidate keep their entry from ``labels`` (-1 if None).
    Ties go to the lowest cluster index.
    """
    if len(clusters) == 0:
        raise ValueError("no clusters")
    h, w = img.height, img.width
    weights = params.weights(img.channel_count)
    coef = params.spatial_coef
    out = np.full((h, w), -1, dtype=np.int64) if labels is None else labels.copy()
    best = np.full((h, w), np.inf)
    for k in range(len(clusters)):
        cx, cy = clusters.pos[k]
        x0, x1, y0, y1 = window_bounds(cx, cy, params.step, w, h)
        if x0 >= x1 or y0 >= y1:
            continue
        win = img.data[:, y0:y1, x0:x1]
        dc = weighted_sq_diff(win, clusters.features[k][:, None, None], weights, axis=0)
        dx = cx - np.arange(x0, x1, dtype=np.float64)[None, :]
        dy = cy - np.arange(y0, y1, dtype=np.float64)[:, None]
        d = dc + coef * (dx * dx + dy * dy)
        sub = best[y0:y1, x0:x1]
        upd = d < sub
        sub[upd] = d[upd]
        out[y0:y1, x0:x1][upd] = k
    return out


def update_step(img: MultiChannelImage, labels: np.ndarray, clusters: Clusters) -> Clusters:
    """Move each cluster to the mean position/features of its pixels; empty clusters stay."""
    k = len(clusters)
    flat = labels.ravel()
    valid = flat >= 0
    idx = flat[valid]
    counts = np.bincount(idx, minlength=k)
    h, w = labels.shape
    ys, xs = np.divmod(np.arange(h * w)[valid], w)
    out = clusters.copy()
    nz = counts > 0
    sx = np.bincount(idx, weights=xs, minlength=k)
    sy = np.bincount(idx, weights=ys, minlength=k)
    out.pos[nz, 0] = sx[nz] / counts[nz]
    out.pos[nz, 1] = sy[nz] / counts[nz]
    planes = img.data.reshape(img.channel_count, -1)[:, valid]
    for c in range(img.channel_count):
        s = np.bincount(idx, weights=planes[c], minlength=k)
        out.features[nz, c] = s[nz] / counts[nz]
    out.counts = counts
    return out


def objective(img: MultiChannelImage, labels: np.ndarray, clusters: Clusters, params: SlicParams) -> float:
    """Sum over labelled pixels of the combined distance to their cluster."""
    h, w = labels.shape
    flat = labels.ravel()
    valid = flat >= 0
    ys, xs = np.divmod(np.arange(h * w)[valid], w)
    k = flat[valid]
    pix = img.data.reshape(img.channel_count, -1)[:, valid]
    dc = weighted_sq_diff(pix, clusters.features[k].T, params.weights(img.channel_count), axis=0)
    dx = clusters.pos[k, 0] - xs
    dy = clusters.pos[k, 1] - ys
    return float(np.sum(dc + params.spatial_coef * (dx * dx + dy * dy)))


def enforce_connectivity(labels: np.ndarray, step: int, min_component_frac: float = 0.25) -> SuperpixelMap:
    """Split labels into 4-connected components and absorb the small ones.

    A component smaller than ``min_component_frac * step**2`` pixels is merged
    into the neighbour with which it shares the longest boundary (ties: lower
    component id). Components are visited in raster order of first occurrence,
    and the result is renumbered the same way.
    """
    labels = np.asarray(labels)
    comp = cc_label(labels - labels.min() + 1, background=0, connectivity=1) - 1
    comp = _raster_renumber(comp)
    n = int(comp.max()) + 1
    min_size = min_component_frac * step * step
    sizes = np.bincount(comp.ravel(), minlength=n)

    adj: list[dict[int, int]] = [dict() for _ in range(n)]
    pairs = np.concatenate(
        [
            np.stack([comp[:, :-1].ravel(), comp[:, 1:].ravel()], axis=1),
            np.stack([comp[:-1, :].ravel(), comp[1:, :].ravel()], axis=1),
        ]
    )
    pairs = pairs[pairs[:, 0] != pairs[:, 1]]
    pairs.sort(axis=1)
    uniq, cnt = np.unique(pairs, axis=0, return_counts=True)
    for (a, b), c in zip(uniq.tolist(), cnt.tolist()):
        adj[a][b] = c
        adj[b][a] = c

    parent = np.arange(n)
    for c in range(n):
        if parent[c] != c or sizes[c] >= min_size or not adj[c]:
            continue
        target = min(adj[c].items(), key=lambda kv: (-kv[1], kv[0]))[0]
        parent[c] = target
        sizes[target] += sizes[c]
        for nb, cnt_ in adj[c].items():
            if nb == target:
                continue
            adj[target][nb] = adj[target].get(nb, 0) + cnt_
            adj[nb][target] = adj[nb].get(target, 0) + cnt_
            del adj[nb][c]
        del adj[target][c]
        adj[c] = {}

    root = parent.copy()
    for c in range(n):
        r = c
        while root[r] != r:
            r = root[r]
        root[c] = r
    return SuperpixelMap(_raster_renumber(root[comp]))


def _raster_renumber(labels: np.ndarray) -> np.ndarray:
    flat = labels.ravel()
    uniq, first = np.unique(flat, return_index=True)
    order = np.argsort(first, kind="stable")
    lut = np.empty(len(uniq), dtype=np.int64)
    lut[order] = np.arange(len(uniq))
    return lut[np.searchsorted(uniq, flat)].reshape(labels.shape)


def slic_iterate(img: MultiChannelImage, params: SlicParams, iterations: int | None = None):
    """Run the assign/update loop; returns (labels, clusters) before connectivity."""
    clusters = init_clusters(img, params.step, params.perturb_seeds)
    labels = None
    for _ in range(params.iterations if iterations is None else iterations):
        labels = assign_step(img, clusters, params, labels)
        clusters = update_step(img, labels, clusters)
    return labels, clusters


def slic_segment(img: MultiChannelImage, params: SlicParams) -> SuperpixelMap:
    labels, clusters = slic_iterate(img, params)
    sp = enforce_connectivity(labels, params.step, params.min_component_frac)
    sp.meta["clusters"] = len(clusters)
    return sp
