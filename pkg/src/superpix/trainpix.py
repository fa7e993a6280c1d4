"""Bottom-up superpixels: each pixel is classified among its Q spatially nearest clusters.

The loop mirrors SLIC (grid seeding, mean updates, connectivity enforcement) but
the assignment step asks a classifier to score the candidates. Any object with a
``score(batch) -> (N, Q) logits`` method works; two are provided:

* :class:`NetworkClassifier` wraps a trained :class:`superpix.nn.Network`;
* :class:`AnalyticSlic` reproduces the SLIC distance exactly (logit = -D^2), and
  turns the trainable loop into plain SLIC when Q covers every cluster.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property

import numpy as np

from superpix.errors import ShapeMismatch
from superpix.imgio import MultiChannelImage, SuperpixelMap
from superpix.nn import LARGE_DISTANCE, MISSING, Network
from superpix.slic import (
    Clusters,
    SlicParams,
    enforce_connectivity,
    init_clusters,
    update_step,
    weighted_sq_diff,
)


@dataclass
class TrainpixParams:
    step: int
    compactness: float = 10.0
    Q: int = 7
    iterations: int = 5
    batch_size: int = 4096
    min_component_frac: float = 0.25

    def __post_init__(self):
        if self.Q < 1:
            raise ValueError(f"Q must be >= 1, got {self.Q}")
        if self.iterations < 1:
            raise ValueError("iterations must be >= 1")
        if self.step < 2:
            raise ValueError(f"step must be >= 2, got {self.step}")


def nearest_q_clusters(xy: np.ndarray, pos: np.ndarray, Q: int) -> np.ndarray:
    """Indices (N, Q) of the Q spatially nearest centers, ascending; ties -> lower index.

    Rows are padded with ``MISSING`` when there are fewer than Q clusters.
    """
    xy = np.atleast_2d(np.asarray(xy, dtype=np.float64))
    n, k = len(xy), len(pos)
    out = np.full((n, Q), MISSING, dtype=np.int64)
    take = min(Q, k)
    chunk = max(1, 2_000_000 // max(k, 1))
    for s in range(0, n, chunk):
        p = xy[s : s + chunk]
        dx = pos[None, :, 0] - p[:, None, 0]
        dy = pos[None, :, 1] - p[:, None, 1]
        d = dx * dx + dy * dy
        if take < k:
            # Partition first, but keep every candidate tied with the Q-th distance.
            kth = np.partition(d, take - 1, axis=1)[:, take - 1 : take]
            d = np.where(d <= kth, d, np.inf)
        order = np.argsort(d, axis=1, kind="stable")[:, :take]
        out[s : s + chunk, :take] = order
    return out


class CandidateBatch:
    """Pixels of one image together with their candidate clusters."""

    def __init__(
        self,
        img: MultiChannelImage,
        clusters: Clusters,
        flat_idx: np.ndarray,
        cand: np.ndarray,
        params: TrainpixParams,
        xy: np.ndarray | None = None,
    ):
        self.img = img
        self.clusters = clusters
        self.flat_idx = flat_idx
        self.cand = cand
        self.params = params
        if xy is None:
            ys, xs = np.divmod(flat_idx, img.width)
            xy = np.stack([xs, ys], axis=1)
        self.xy = np.asarray(xy, dtype=np.float64).reshape(-1, 2)

    def __len__(self) -> int:
        return len(self.flat_idx)

    @property
    def missing(self) -> np.ndarray:
        return self.cand == MISSING

    @cached_property
    def pixel_features(self) -> np.ndarray:
        return self.img.data.reshape(self.img.channel_count, -1)[:, self.flat_idx].T

    @cached_property
    def cand_features(self) -> np.ndarray:
        safe = np.where(self.missing, 0, self.cand)
        return self.clusters.features[safe]

    @cached_property
    def offsets(self) -> tuple[np.ndarray, np.ndarray]:
        """(dx, dy) = center - pixel, each (N, Q)."""
        safe = np.where(self.missing, 0, self.cand)
        pos = self.clusters.pos[safe]
        return pos[:, :, 0] - self.xy[:, None, 0], pos[:, :, 1] - self.xy[:, None, 1]

    @cached_property
    def inputs(self) -> np.ndarray:
        return build_input_vectors(self)


def build_input_vectors(batch: CandidateBatch) -> np.ndarray:
    """Rows ``[pixel (M)] + [D_q (Q)] + [f_k - f_i, candidate-major (Q*M)]``.

    D_q = compactness * distance_q / step. Missing candidates get D_q = 1e4 and
    zero differences.
    """
    p = batch.params
    pix = batch.pixel_features
    dx, dy = batch.offsets
    dq = p.compactness * np.sqrt(dx * dx + dy * dy) / p.step
    diffs = batch.cand_features - pix[:, None, :]
    miss = batch.missing
    dq = np.where(miss, LARGE_DISTANCE, dq)
    diffs = np.where(miss[:, :, None], 0.0, diffs)
    return np.concatenate([pix, dq, diffs.reshape(len(pix), -1)], axis=1)


def single_pixel_batch(pixel_xy, pixel_features, clusters: Clusters, cand, params: TrainpixParams) -> CandidateBatch:
    f = np.asarray(pixel_features, dtype=np.float64)
    img = MultiChannelImage(f[:, None, None], tuple(f"c{i}" for i in range(len(f))))
    return CandidateBatch(img, clusters, np.array([0]), np.atleast_2d(np.asarray(cand)), params, xy=pixel_xy)


def build_input_vector(pixel_xy, pixel_features, clusters: Clusters, cand, params: TrainpixParams) -> np.ndarray:
    """Single-pixel version of :func:`build_input_vectors`."""
    return single_pixel_batch(pixel_xy, pixel_features, clusters, cand, params).inputs[0]


class AnalyticSlic:
    """Oracle classifier: logit = -(SLIC distance), -inf outside the 2S window."""

    def __init__(self, slic: SlicParams):
        self.slic = slic

    def distances(self, batch: CandidateBatch) -> np.ndarray:
        w = self.slic.weights(batch.img.channel_count)
        dc = weighted_sq_diff(batch.pixel_features[:, None, :], batch.cand_features, w)
        dx, dy = batch.offsets
        d = dc + self.slic.spatial_coef * (dx * dx + dy * dy)
        r = 2 * self.slic.step
        outside = (np.abs(dx) > r) | (np.abs(dy) > r) | batch.missing
        return np.where(outside, np.inf, d)

    def score(self, batch: CandidateBatch) -> np.ndarray:
        return -self.distances(batch)


class NetworkClassifier:
    def __init__(self, net: Network):
        self.net = net

    def score(self, batch: CandidateBatch) -> np.ndarray:
        if self.net.spec.M != batch.img.channel_count or self.net.spec.Q != batch.cand.shape[1]:
            raise ShapeMismatch(
                f"network expects M={self.net.spec.M}, Q={self.net.spec.Q}; "
                f"got M={batch.img.channel_count}, Q={batch.cand.shape[1]}"
            )
        return self.net.forward(batch.inputs)


def pick_best(logits: np.ndarray, cand: np.ndarray) -> np.ndarray:
    """Candidate position of the max logit; ties -> lowest cluster index; -1 if all -inf."""
    logits = np.where(cand == MISSING, -np.inf, logits)
    best = logits.max(axis=1, keepdims=True)
    tied = (logits == best) & np.isfinite(logits)
    key = np.where(tied, cand, np.iinfo(np.int64).max)
    pos = np.argmin(key, axis=1)
    pos[~tied.any(axis=1)] = -1
    return pos


def candidates_for(img: MultiChannelImage, clusters: Clusters, Q: int) -> np.ndarray:
    ys, xs = np.divmod(np.arange(img.width * img.height), img.width)
    return nearest_q_clusters(np.stack([xs, ys], axis=1), clusters.pos, Q)


def assign_by_classifier(
    img: MultiChannelImage,
    clusters: Clusters,
    params: TrainpixParams,
    classifier,
    labels: np.ndarray | None = None,
) -> tuple[np.ndarray, np.ndarray]:
    """Relabel every pixel; returns (labels, candidates).

    Pixels whose candidates all score -inf keep their entry in ``labels``.
    """
    h, w = img.height, img.width
    out = np.full(h * w, -1, dtype=np.int64) if labels is None else labels.ravel().copy()
    cand = candidates_for(img, clusters, params.Q)
    for s in range(0, h * w, params.batch_size):
        idx = np.arange(s, min(s + params.batch_size, h * w))
        batch = CandidateBatch(img, clusters, idx, cand[idx], params)
        pos = pick_best(classifier.score(batch), batch.cand)
        ok = pos >= 0
        out[idx[ok]] = batch.cand[ok, pos[ok]]
    return out.reshape(h, w), cand.reshape(h, w, -1)


def trainable_iterate(img: MultiChannelImage, params: TrainpixParams, classifier, iterations: int | None = None):
    """(labels, clusters, candidates) after the assign/update loop, before connectivity."""
    clusters = init_clusters(img, params.step)
    labels = None
    cand = None
    for _ in range(params.iterations if iterations is None else iterations):
        labels, cand = assign_by_classifier(img, clusters, params, classifier, labels)
        clusters = update_step(img, labels, clusters)
    return labels, clusters, cand


def trainable_segment(img: MultiChannelImage, params: TrainpixParams, classifier) -> SuperpixelMap:
    labels, clusters, _ = trainable_iterate(img, params, classifier)
    sp = enforce_connectivity(labels, params.step, params.min_component_frac)
    sp.meta["clusters"] = len(clusters)
    return sp


def params_from_slic(slic: SlicParams, Q: int, **kw) -> TrainpixParams:
    return TrainpixParams(
        step=slic.step,
        compactness=slic.compactness,
        Q=Q,
        iterations=slic.iterations,
        min_component_frac=slic.min_component_frac,
        **kw,
    )
