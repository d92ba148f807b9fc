"""Volumetric segmentation metrics: Dice and the pooled 95th-percentile Hausdorff distance."""

from __future__ import annotations

import csv

import numpy as np
from scipy.spatial import cKDTree

from .errors import DimensionError, UndefinedDistanceError

HD_PERCENTILE = 95.0
PERCENTILE_METHOD = "linear"


def binarize(prob, threshold=0.5):
    return np.asarray(prob) >= threshold


def _pair(a, b):
    a = np.asarray(a, dtype=bool)
    b = np.asarray(b, dtype=bool)
    if a.shape != b.shape:
        raise DimensionError(f"mask shapes differ: {a.shape} vs {b.shape}")
    return a, b


def dice(a, b) -> float:
    """2|A∩B| / (|A|+|B|); two empty masks score 1.0."""
    a, b = _pair(a, b)
    total = int(a.sum()) + int(b.sum())
    if total == 0:
        return 1.0
    return 2.0 * int(np.logical_and(a, b).sum()) / total


def _directed(src, dst, spacing):
    pa = np.argwhere(src) * spacing
    pb = np.argwhere(dst) * spacing
    return cKDTree(pb).query(pa)[0]


def surface_distances(a, b, spacing=1.0):
    """Pooled nearest-voxel distances A→B followed by B→A."""
    a, b = _pair(a, b)
    if not a.any() or not b.any():
        raise UndefinedDistanceError("distance undefined: a mask is empty")
    spacing = np.broadcast_to(np.asarray(spacing, dtype=np.float64), (a.ndim,))
    return np.concatenate([_directed(a, b, spacing), _directed(b, a, spacing)])


def hd95(a, b, spacing=1.0) -> float:
    return float(np.percentile(surface_distances(a, b, spacing), HD_PERCENTILE,
                               method=PERCENTILE_METHOD))


def hausdorff(a, b, spacing=1.0) -> float:
    return float(surface_distances(a, b, spacing).max())


def write_rows(path, rows, threshold):
    """Write per-volume (volume_id, dice, hd95, threshold) rows plus a ``mean`` row."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["volume_id", "dice", "hd95", "threshold"])
        for vid, d, h in rows:
            w.writerow([vid, repr(float(d)), repr(float(h)), repr(float(threshold))])
        if rows:
            md = float(np.mean([r[1] for r in rows]))
            mh = float(np.mean([r[2] for r in rows]))
            w.writerow(["mean", repr(md), repr(mh), repr(float(threshold))])
