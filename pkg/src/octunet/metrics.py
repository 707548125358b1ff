"""Evaluation metrics: Chamfer distance (squared convention), Hausdorff
distance (unsquared), point-to-surface distance, and farthest point sampling.

Nearest-neighbor queries use a KD-tree; the test suite pins them against an
O(n^2) brute-force oracle.
"""
from __future__ import annotations

import numpy as np
from scipy.spatial import cKDTree

from .errors import InputError
from .shapes import ShapeSpec, sdf


def _nn_dists(src: np.ndarray, dst: np.ndarray) -> np.ndarray:
    """Euclidean distance from each src point to its nearest dst point."""
    dists, _ = cKDTree(dst).query(src, k=1)
    return np.asarray(dists, dtype=np.float64)


def _check(p, q):
    p = np.asarray(p, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    for arr in (p, q):
        if arr.ndim != 2 or arr.shape[1] != 3:
            raise InputError(f"expected (n, 3) point arrays, got shape {arr.shape}")
    if len(p) == 0 or len(q) == 0:
        raise InputError("metrics require non-empty point clouds")
    return p, q


def chamfer(p: np.ndarray, q: np.ndarray) -> float:
    """Symmetric mean squared nearest-neighbor distance."""
    p, q = _check(p, q)
    return float((_nn_dists(p, q) ** 2).mean() + (_nn_dists(q, p) ** 2).mean())


def hausdorff(p: np.ndarray, q: np.ndarray) -> float:
    """Symmetric max-min distance (unsquared)."""
    p, q = _check(p, q)
    return float(max(_nn_dists(p, q).max(), _nn_dists(q, p).max()))


def point_to_surface(p: np.ndarray, ref) -> float:
    """Mean distance from points to a reference surface.

    An analytic ShapeSpec reference is exact (|sdf|); a dense point-cloud
    reference uses the nearest-neighbor approximation.
    """
    p = np.asarray(p, dtype=np.float64)
    if len(p) == 0:
        raise InputError("point_to_surface requires a non-empty cloud")
    if isinstance(ref, ShapeSpec):
        return float(np.abs(sdf(ref, p)).mean())
    ref = np.asarray(ref, dtype=np.float64)
    if len(ref) == 0:
        raise InputError("point_to_surface requires a non-empty reference")
    return float(_nn_dists(p, ref).mean())


def farthest_point_sample(pts: np.ndarray, k: int, start: int = 0) -> np.ndarray:
    """Greedy max-min subset selection; ties break toward the lowest index.

    The output preserves selection order and consists of input points.
    """
    pts = np.asarray(pts, dtype=np.float64)
    n = len(pts)
    if not 1 <= k <= n:
        raise InputError(f"k must be in [1, {n}], got {k}")
    if not 0 <= start < n:
        raise InputError(f"start index {start} out of range")
    chosen = np.empty(k, dtype=np.int64)
    chosen[0] = start
    min_d2 = ((pts - pts[start]) ** 2).sum(axis=1)
    for i in range(1, k):
        nxt = int(np.argmax(min_d2))  # argmax returns the first maximum
        chosen[i] = nxt
        np.minimum(min_d2, ((pts - pts[nxt]) ** 2).sum(axis=1), out=min_d2)
    return pts[chosen]


def metrics_report(pred: np.ndarray, ref=None, surface: ShapeSpec | None = None) -> dict:
    """JSON-ready report; p2f is included when a reference surface or dense
    cloud is available."""
    report = {
        "n_pred": int(len(pred)),
        "conventions": {"cd": "squared", "hd": "unsquared"},
    }
    if ref is not None:
        report["cd"] = chamfer(pred, ref)
        report["hd"] = hausdorff(pred, ref)
        report["n_ref"] = int(len(ref))
    if surface is not None:
        report["p2f"] = point_to_surface(pred, surface)
    elif ref is not None:
        report["p2f"] = point_to_surface(pred, ref)
    return report
