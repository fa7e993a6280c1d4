"""Superpixel quality metrics: Rec, MDE, UE, CO and achievable IoU."""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy import ndimage

from superpix.errors import CountMismatch, DimMismatch

COLUMNS = ("rec", "mde", "ue", "co", "iou")


def _check(sp: np.ndarray, gt: np.ndarray) -> None:
    if sp.shape != gt.shape:
        raise DimMismatch(f"superpixel map {sp.shape} vs ground truth {gt.shape}")


def boundary_pixels(labels: np.ndarray) -> np.ndarray:
    """True where a 4-neighbour carries a different label (the image border does not count)."""
    labels = np.asarray(labels)
    out = np.zeros(labels.shape, dtype=bool)
    dh = labels[:, 1:] != labels[:, :-1]
    dv = labels[1:, :] != labels[:-1, :]
    out[:, 1:] |= dh
    out[:, :-1] |= dh
    out[1:, :] |= dv
    out[:-1, :] |= dv
    return out


def boundary_recall(sp: np.ndarray, gt: np.ndarray, tol: int = 2) -> float:
    """Fraction of GT boundary pixels with an sp boundary pixel within Chebyshev ``tol``."""
    _check(sp, gt)
    gb = boundary_pixels(gt)
    if not gb.any():
        return 1.0
    sb = ndimage.binary_dilation(boundary_pixels(sp), structure=np.ones((2 * tol + 1,) * 2, bool))
    return float(np.count_nonzero(sb & gb) / np.count_nonzero(gb))


def mean_distance_to_edge(sp: np.ndarray, gt: np.ndarray) -> float:
    """Mean Euclidean distance from GT boundary pixels to the nearest sp boundary pixel.

    With no sp boundary at all, the distance is taken as the image diagonal.
    """
    _check(sp, gt)
    gb = boundary_pixels(gt)
    if not gb.any():
        return 0.0
    sb = boundary_pixels(sp)
    if not sb.any():
        return float(math.hypot(*sp.shape))
    dist = ndimage.distance_transform_edt(~sb)
    return float(dist[gb].mean())


def _contingency(sp: np.ndarray, gt: np.ndarray) -> np.ndarray:
    _, s = np.unique(sp, return_inverse=True)
    _, g = np.unique(gt, return_inverse=True)
    s = s.ravel()
    g = g.ravel()
    n_s, n_g = s.max() + 1, g.max() + 1
    return np.bincount(s * n_g + g, minlength=n_s * n_g).reshape(n_s, n_g)


def undersegmentation_error(sp: np.ndarray, gt: np.ndarray) -> float:
    """Neubert-Protzel UE: (1/N) sum_G sum_{P meets G} min(|P & G|, |P - G|)."""
    _check(sp, gt)
    table = _contingency(sp, gt)
    sizes = table.sum(axis=1, keepdims=True)
    inside = table
    outside = sizes - table
    return float(np.minimum(inside, outside)[table > 0].sum() / sp.size)


def compactness(sp: np.ndarray) -> float:
    """Area-weighted isoperimetric quotient, perimeter counted in pixel edges."""
    sp = np.asarray(sp)
    _, lab = np.unique(sp, return_inverse=True)
    lab = lab.reshape(sp.shape)
    k = lab.max() + 1
    area = np.bincount(lab.ravel(), minlength=k).astype(np.float64)
    padded = np.pad(lab, 1, constant_values=-1)
    perim = np.zeros(k)
    for a, b in (
        (padded[1:-1, 1:-1], padded[1:-1, :-2]),
        (padded[1:-1, 1:-1], padded[1:-1, 2:]),
        (padded[1:-1, 1:-1], padded[:-2, 1:-1]),
        (padded[1:-1, 1:-1], padded[2:, 1:-1]),
    ):
        diff = a != b
        perim += np.bincount(a[diff], minlength=k)
    q = np.minimum(1.0, 4 * math.pi * area / perim**2)
    return float(np.sum(area / sp.size * q))


def achievable_iou(sp: np.ndarray, gt: np.ndarray) -> float:
    """Mean IoU over GT segments of the best superpixel-to-segment relabelling."""
    _check(sp, gt)
    table = _contingency(sp, gt)
    best = np.argmax(table, axis=1)  # first maximum -> lowest segment id
    recon = np.zeros_like(table)
    recon[np.arange(len(best)), best] = table.sum(axis=1)
    inter = np.array([table[best == g, g].sum() for g in range(table.shape[1])])
    recon_area = recon.sum(axis=0)
    gt_area = table.sum(axis=0)
    union = recon_area + gt_area - inter
    return float(np.mean(inter / union))


def image_metrics(sp: np.ndarray, gts, tol: int = 2) -> dict[str, float]:
    """All metrics for one image; several GT annotations are averaged."""
    if isinstance(gts, np.ndarray) and gts.ndim == 2:
        gts = [gts]
    rows = [
        {
            "rec": boundary_recall(sp, g, tol),
            "mde": mean_distance_to_edge(sp, g),
            "ue": undersegmentation_error(sp, g),
            "iou": achievable_iou(sp, g),
        }
        for g in gts
    ]
    out = {k: math.fsum(r[k] for r in rows) / len(rows) for k in ("rec", "mde", "ue", "iou")}
    out["co"] = compactness(sp)
    return {k: out[k] for k in COLUMNS}


@dataclass
class MetricReport:
    rec: float
    mde: float
    ue: float
    co: float
    iou: float
    per_image: list[tuple[str, dict[str, float]]] = field(default_factory=list)

    def means(self) -> dict[str, float]:
        return {k: getattr(self, k) for k in COLUMNS}

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(("image",) + COLUMNS)
        for name, row in self.per_image:
            w.writerow([name] + [f"{row[k]:.6f}" for k in COLUMNS])
        w.writerow(["MEAN"] + [f"{getattr(self, k):.6f}" for k in COLUMNS])
        return buf.getvalue()


def evaluate(sp_set: Sequence[np.ndarray], gt_set: Sequence, tol: int = 2, names=None) -> MetricReport:
    """Per-image metrics and dataset means (each gt entry: one map or a list of annotations)."""
    if len(sp_set) != len(gt_set):
        raise CountMismatch(f"{len(sp_set)} superpixel maps vs {len(gt_set)} ground truths")
    if not sp_set:
        raise CountMismatch("nothing to evaluate")
    names = list(names) if names is not None else [str(i) for i in range(len(sp_set))]
    rows = [(n, image_metrics(np.asarray(s), g, tol)) for n, s, g in zip(names, sp_set, gt_set)]
    # fsum is exact, so the means do not depend on image order
    means = {k: math.fsum(r[k] for _, r in rows) / len(rows) for k in COLUMNS}
    return MetricReport(**means, per_image=rows)
