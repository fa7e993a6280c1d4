"""Training labels for the bottom-up classifier, derived from segmentation ground truth.

Label methods:

* ``slic_replication``: the candidate SLIC itself would pick.
* ``gt_corrected``: the SLIC choice restricted to candidates whose cluster lies
  mainly in the pixel's own GT segment.
* ``weakly_supervised``: the in-segment candidate crossing the fewest annotated
  edges, then the spatially nearest one.

Hard-example mining keeps a pixel only when its Q candidates fall in at least X
distinct GT segments, which concentrates the training set near GT boundaries.
"""

from __future__ import annotations

import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from superpix.errors import BadMagic, DimMismatch, EmptyList, OutOfBounds, TruncatedData, VersionMismatch
from superpix.imgio import MultiChannelImage
from superpix.nn import MISSING, SENTINEL_DROPPED, SampleSet
from superpix.slic import Clusters, SlicParams, slic_iterate
from superpix.trainpix import (
    AnalyticSlic,
    CandidateBatch,
    TrainpixParams,
    candidates_for,
    pick_best,
    single_pixel_batch,
)

log = logging.getLogger(__name__)

METHODS = ("slic_replication", "gt_corrected", "weakly_supervised")


def cluster_majority_segment(labels: np.ndarray, gt: np.ndarray, n_clusters: int | None = None) -> np.ndarray:
    """GT segment covering most of each cluster (ties -> lower id; empty clusters -> -1)."""
    labels = np.asarray(labels)
    gt = np.asarray(gt)
    if labels.shape != gt.shape:
        raise DimMismatch(f"labels {labels.shape} vs ground truth {gt.shape}")
    k = int(labels.max()) + 1 if n_clusters is None else n_clusters
    valid = labels.ravel() >= 0
    seg_ids, g = np.unique(gt.ravel()[valid], return_inverse=True)
    s = labels.ravel()[valid]
    table = np.bincount(s * len(seg_ids) + g, minlength=k * len(seg_ids)).reshape(k, len(seg_ids))
    out = seg_ids[np.argmax(table, axis=1)]
    out[table.sum(axis=1) == 0] = -1
    return out


def distinct_segments(cand_majority: np.ndarray) -> np.ndarray:
    """Number of distinct segments per row, ignoring negative entries (missing/empty)."""
    m = np.sort(np.atleast_2d(cand_majority), axis=1)
    valid = m >= 0
    new = np.ones_like(valid)
    new[:, 1:] = m[:, 1:] != m[:, :-1]
    return np.sum(valid & new, axis=1)


def hard_example_filter(cand_majority, X: int):
    """Keep iff the candidates' majority segments include at least X distinct ids."""
    keep = distinct_segments(np.asarray(cand_majority)) >= X
    return bool(keep[0]) if np.ndim(cand_majority) == 1 else keep


def combine_edge_maps(annotations: Sequence[np.ndarray]) -> np.ndarray:
    """Per-pixel count of annotations marking the pixel as a segment boundary."""
    from superpix.metrics import boundary_pixels

    if len(annotations) == 0:
        raise EmptyList("no annotations to combine")
    shape = np.shape(annotations[0])
    strength = np.zeros(shape, dtype=np.int64)
    for a in annotations:
        if np.shape(a) != shape:
            raise DimMismatch(f"annotation {np.shape(a)} vs {shape}")
        strength += boundary_pixels(np.asarray(a))
    return strength


def _round_half_up(v):
    return np.floor(np.asarray(v, dtype=np.float64) + 0.5).astype(np.int64)


def line_pixels(p, q) -> list[tuple[int, int]]:
    """Bresenham pixels from p to q (both included), traced from the lexicographically smaller end."""
    (x0, y0), (x1, y1) = sorted([tuple(int(v) for v in p), tuple(int(v) for v in q)])
    dx, dy = abs(x1 - x0), -abs(y1 - y0)
    sx = 1 if x0 < x1 else -1
    sy = 1 if y0 < y1 else -1
    err = dx + dy
    pts = []
    while True:
        pts.append((x0, y0))
        if x0 == x1 and y0 == y1:
            return pts
        e2 = 2 * err
        if e2 >= dy:
            err += dy
            x0 += sx
        if e2 <= dx:
            err += dx
            y0 += sy


def edge_crossing_distance(p, c, edges: np.ndarray) -> int:
    """Sum of edge strength along the line from pixel p to round(c), endpoints excluded."""
    h, w = edges.shape
    q = tuple(_round_half_up(c).tolist())
    for x, y in (tuple(p), q):
        if not (0 <= x < w and 0 <= y < h):
            raise OutOfBounds(f"point ({x}, {y}) outside {w}x{h} edge map")
    pts = line_pixels(p, q)[1:-1]
    return int(sum(edges[y, x] for x, y in pts))


def edge_crossings(xy: np.ndarray, centers: np.ndarray, edges: np.ndarray) -> np.ndarray:
    """Vectorised :func:`edge_crossing_distance` for pixel/center pairs of any matching shape."""
    h, w = edges.shape
    a = np.asarray(xy, dtype=np.int64)
    b = np.clip(_round_half_up(centers), 0, [w - 1, h - 1])
    a, b = np.broadcast_arrays(a, b)
    swap = (b[..., 0] < a[..., 0]) | ((b[..., 0] == a[..., 0]) & (b[..., 1] < a[..., 1]))
    start = np.where(swap[..., None], b, a)
    end = np.where(swap[..., None], a, b)
    d = end - start
    adx, ady = np.abs(d[..., 0]), np.abs(d[..., 1])
    sx, sy = np.sign(d[..., 0]), np.sign(d[..., 1])
    n = np.maximum(adx, ady)
    xmajor = adx >= ady
    total = np.zeros(n.shape, dtype=np.int64)
    for i in range(1, int(n.max(initial=0))):
        active = i < n
        if not active.any():
            break
        # Closed form of the integer Bresenham loop (round half up along the minor axis).
        minor_x = (2 * i * adx + ady) // np.maximum(2 * ady, 1)
        minor_y = (2 * i * ady + adx) // np.maximum(2 * adx, 1)
        x = start[..., 0] + sx * np.where(xmajor, i, minor_x)
        y = start[..., 1] + sy * np.where(xmajor, minor_y, i)
        total += np.where(active, edges[np.clip(y, 0, h - 1), np.clip(x, 0, w - 1)], 0)
    return total


# ---------------------------------------------------------------------------
# Label rules (vectorised over a CandidateBatch)
# ---------------------------------------------------------------------------


def label_slic(batch: CandidateBatch, slic: SlicParams) -> np.ndarray:
    return pick_best(AnalyticSlic(slic).score(batch), batch.cand)


def label_gt_corrected(batch: CandidateBatch, slic: SlicParams, pixel_seg: np.ndarray, majority: np.ndarray) -> np.ndarray:
    same = _in_segment(batch, pixel_seg, majority)
    scores = np.where(same, AnalyticSlic(slic).score(batch), -np.inf)
    return pick_best(scores, batch.cand)


def _in_segment(batch: CandidateBatch, pixel_seg, majority) -> np.ndarray:
    cm = np.where(batch.missing, -1, majority[np.where(batch.missing, 0, batch.cand)])
    return (cm == np.asarray(pixel_seg)[:, None]) & ~batch.missing


def label_weakly_supervised(batch: CandidateBatch, pixel_seg, majority, edges: np.ndarray | None = None) -> np.ndarray:
    """Lexicographic minimum of (edge crossings, spatial distance, cluster index) in-segment."""
    ok = _in_segment(batch, pixel_seg, majority)
    if edges is not None:
        cx = batch.clusters.pos[np.where(batch.missing, 0, batch.cand)]
        e = edge_crossings(batch.xy[:, None, :], cx, edges).astype(np.float64)
        e = np.where(ok, e, np.inf)
        ok &= e == e.min(axis=1, keepdims=True)
    dx, dy = batch.offsets
    d = np.where(ok, dx * dx + dy * dy, np.inf)
    ok &= d == d.min(axis=1, keepdims=True)
    return pick_best(np.where(ok, 0.0, -np.inf), batch.cand)


def _single_batch(pixel_xy, pixel_features, clusters: Clusters, cand, step, compactness) -> CandidateBatch:
    params = TrainpixParams(step=step, compactness=compactness, Q=len(cand))
    return single_pixel_batch(pixel_xy, pixel_features, clusters, cand, params)


def slic_replication_label(pixel_xy, pixel_features, clusters: Clusters, cand, slic: SlicParams) -> int:
    """Candidate position with the smallest SLIC distance (SENTINEL_DROPPED if none is in range)."""
    b = _single_batch(pixel_xy, pixel_features, clusters, cand, slic.step, slic.compactness)
    return int(label_slic(b, slic)[0])


def gt_corrected_label(pixel_xy, pixel_features, clusters, cand, slic: SlicParams, pixel_segment: int, majority) -> int:
    b = _single_batch(pixel_xy, pixel_features, clusters, cand, slic.step, slic.compactness)
    return int(label_gt_corrected(b, slic, np.array([pixel_segment]), np.asarray(majority))[0])


def weakly_supervised_label(
    pixel_xy, clusters, cand, pixel_segment: int, majority, edges=None, X: int = 1, step: int = 16
) -> int:
    cand = np.asarray(cand)
    feats = np.zeros(clusters.features.shape[1])
    b = _single_batch(pixel_xy, feats, clusters, cand, step, 1.0)
    majority = np.asarray(majority)
    cm = np.where(cand == MISSING, -1, majority[np.where(cand == MISSING, 0, cand)])
    if not hard_example_filter(cm, X):
        return SENTINEL_DROPPED
    return int(label_weakly_supervised(b, np.array([pixel_segment]), majority, edges)[0])


# ---------------------------------------------------------------------------
# Dataset assembly
# ---------------------------------------------------------------------------


@dataclass
class LabelGenConfig:
    slic: SlicParams
    method: str = "slic_replication"
    X: int = 1
    Q: int = 7
    warmup_iterations: int = 2
    mistakes_only: bool = False
    use_edges: bool = True
    seed: int = 0

    def __post_init__(self):
        if self.method not in METHODS:
            raise ValueError(f"unknown label method {self.method!r}; choose from {METHODS}")
        if not 1 <= self.X <= self.Q:
            raise ValueError(f"X must lie in [1, Q={self.Q}], got {self.X}")


@dataclass
class DatasetStats:
    candidate_pixels: int = 0
    kept: int = 0
    dropped: int = 0
    segment_histogram: list[int] = field(default_factory=list)

    def line(self) -> str:
        return (
            f"candidate_pixels={self.candidate_pixels} kept={self.kept} dropped={self.dropped} "
            f"segments_hist={','.join(map(str, self.segment_histogram))}"
        )


def image_samples(img: MultiChannelImage, gt: np.ndarray, cfg: LabelGenConfig, edges: np.ndarray | None = None):
    """Inputs, targets, pixel coords and per-pixel segment counts for one image (nothing dropped yet)."""
    gt = np.asarray(gt)
    if gt.shape != (img.height, img.width):
        raise DimMismatch(f"ground truth {gt.shape} vs image {(img.height, img.width)}")
    labels, clusters = slic_iterate(img, cfg.slic, cfg.warmup_iterations)
    majority = cluster_majority_segment(labels, gt, len(clusters))
    cand = candidates_for(img, clusters, cfg.Q)
    params = TrainpixParams(step=cfg.slic.step, compactness=cfg.slic.compactness, Q=cfg.Q)
    batch = CandidateBatch(img, clusters, np.arange(img.width * img.height), cand, params)
    pixel_seg = gt.ravel()
    cm = np.where(batch.missing, -1, majority[np.where(batch.missing, 0, cand)])
    n_seg = distinct_segments(cm)

    if cfg.method == "slic_replication":
        target = label_slic(batch, cfg.slic)
    elif cfg.method == "gt_corrected":
        target = label_gt_corrected(batch, cfg.slic, pixel_seg, majority)
        if cfg.mistakes_only:
            plain = label_slic(batch, cfg.slic)
            target = np.where(target != plain, target, SENTINEL_DROPPED)
    else:
        target = label_weakly_supervised(batch, pixel_seg, majority, edges if cfg.use_edges else None)
    target = np.where(n_seg >= cfg.X, target, SENTINEL_DROPPED)
    has_cand = ~batch.missing.all(axis=1)
    return batch.inputs.astype(np.float32), target, batch.xy.astype(np.int64), n_seg, has_cand


def generate_dataset(
    images: Sequence[MultiChannelImage],
    gts: Sequence[np.ndarray],
    cfg: LabelGenConfig,
    edge_maps: Sequence[np.ndarray | None] | None = None,
) -> tuple[SampleSet, DatasetStats]:
    if len(images) != len(gts):
        raise DimMismatch(f"{len(images)} images vs {len(gts)} ground truths")
    if not images:
        raise EmptyList("no images")
    edge_maps = edge_maps if edge_maps is not None else [None] * len(images)
    stats = DatasetStats(segment_histogram=[0] * (cfg.Q + 1))
    xs, ys, coords = [], [], []
    for i, (img, gt, edges) in enumerate(zip(images, gts, edge_maps)):
        X, y, xy, n_seg, has_cand = image_samples(img, gt, cfg, edges)
        keep = y != SENTINEL_DROPPED
        stats.candidate_pixels += int(has_cand.sum())
        stats.kept += int(keep.sum())
        stats.dropped += int((has_cand & ~keep).sum())
        stats.segment_histogram = (
            np.asarray(stats.segment_histogram) + np.bincount(n_seg, minlength=cfg.Q + 1)
        ).tolist()
        xs.append(X[keep])
        ys.append(y[keep])
        coords.append(np.column_stack([np.full(keep.sum(), i), xy[keep]]))
        log.debug("image %d: kept %d of %d pixels", i, keep.sum(), len(y))
    M = images[0].channel_count
    X = np.concatenate(xs)
    y = np.concatenate(ys)
    c = np.concatenate(coords)
    order = np.random.default_rng(cfg.seed).permutation(len(y))
    return SampleSet(X[order], y[order], M, cfg.Q, c[order]), stats


# ---------------------------------------------------------------------------
# SPDS files
# ---------------------------------------------------------------------------


def _record_dtype(M: int, Q: int) -> np.dtype:
    return np.dtype([("x", "<f4", (M + Q + Q * M,)), ("t", "<u4")])


def write_samples(path, samples: SampleSet) -> None:
    """``b"SPDS"``, u32 version=1, u32 N, M, Q, then per sample float32 vector + u32 target."""
    rec = np.zeros(len(samples), dtype=_record_dtype(samples.M, samples.Q))
    rec["x"] = samples.X
    rec["t"] = samples.y.astype(np.int64) & 0xFFFFFFFF
    head = b"SPDS" + struct.pack("<4I", 1, len(samples), samples.M, samples.Q)
    Path(path).write_bytes(head + rec.tobytes())


def read_samples(path) -> SampleSet:
    buf = Path(path).read_bytes()
    if buf[:4] != b"SPDS":
        raise BadMagic(f"expected magic b'SPDS', found {buf[:4]!r}")
    if len(buf) < 20:
        raise TruncatedData("file shorter than its header")
    version, n, M, Q = struct.unpack("<4I", buf[4:20])
    if version != 1:
        raise VersionMismatch(f"SPDS version {version} not supported")
    dt = _record_dtype(M, Q)
    if len(buf) - 20 < n * dt.itemsize:
        raise TruncatedData(f"expected {n} records")
    rec = np.frombuffer(buf[20 : 20 + n * dt.itemsize], dtype=dt)
    y = rec["t"].astype(np.int64)
    y[y == 0xFFFFFFFF] = SENTINEL_DROPPED
    return SampleSet(rec["x"].copy(), y, M, Q)
