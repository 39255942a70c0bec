"""Exact nearest-neighbour queries against a fixed target cloud.

Search is delegated to a balanced k-d tree (``scipy.spatial.cKDTree``).
Returned squared distances are recomputed with :func:`squared_distance` so
that they are bit-identical to the exhaustive scan in
:func:`brute_force_nearest`; near-ties are re-resolved exactly with the
smallest-index rule.
"""

from __future__ import annotations

import numpy as np
from scipy.spatial import cKDTree

from nsfp.errors import DimensionError, ValidationError
from nsfp.pointcloud import PointCloud

# Candidates within this relative margin of the tree's best distance are
# re-checked exactly. Far larger than the tree's rounding error.
_TIE_MARGIN = 1e-9
_TIE_FLOOR = 1e-12


def squared_distance(a, b):
    """Elementwise ||a - b||^2 over the last axis, summed in fixed x, y, z order."""
    d = a - b
    return (d[..., 0] * d[..., 0] + d[..., 1] * d[..., 1]) + d[..., 2] * d[..., 2]


def _points(cloud):
    if isinstance(cloud, PointCloud):
        return cloud.points
    pts = np.asarray(cloud, dtype=np.float64)
    if pts.ndim != 2 or pts.shape[1] != 3:
        raise DimensionError(f"expected an (N, 3) array, got {pts.shape}")
    if len(pts) == 0:
        raise ValidationError("cannot index an empty cloud")
    return pts


def _queries(query):
    q = np.asarray(query, dtype=np.float64)
    single = q.ndim == 1
    q = q.reshape(-1, 3) if q.size else q.reshape(0, 3)
    if not np.isfinite(q).all():
        bad = int(np.argmax(~np.isfinite(q).all(axis=1)))
        raise ValidationError(f"query point {bad} is not finite")
    return q, single


class SpatialIndex:
    """Read-only k-d tree over a target cloud. Safe to query from many threads."""

    def __init__(self, cloud, workers=1):
        pts = np.ascontiguousarray(_points(cloud)).view()
        pts.setflags(write=False)
        self.points = pts
        self.target_count = len(pts)
        self.workers = workers
        self._tree = cKDTree(pts, balanced_tree=True, compact_nodes=True)

    def query(self, queries):
        """Nearest target for each row of ``queries``; returns (indices, squared distances)."""
        q, _ = _queries(queries)
        if len(q) == 0:
            return np.zeros(0, dtype=np.intp), np.zeros(0)
        if self.target_count == 1:
            idx = np.zeros(len(q), dtype=np.intp)
            return idx, squared_distance(q, self.points[0])
        dist, nbr = self._tree.query(q, k=2, workers=self.workers)
        idx = nbr[:, 0].astype(np.intp)
        sq = squared_distance(q, self.points[idx])
        # second candidate could beat or tie the first under exact arithmetic
        radius = dist[:, 0] * (1.0 + _TIE_MARGIN) + _TIE_FLOOR
        suspect = np.flatnonzero(dist[:, 1] <= radius)
        for i in suspect:
            cand = np.asarray(self._tree.query_ball_point(q[i], radius[i]), dtype=np.intp)
            cand = np.union1d(cand, nbr[i])
            csq = squared_distance(q[i], self.points[cand])
            best = np.flatnonzero(csq == csq.min())
            j = cand[best].min()
            idx[i] = j
            sq[i] = squared_distance(q[i], self.points[j])
        return idx, sq


def build_index(cloud, workers=1):
    return SpatialIndex(cloud, workers=workers)


def nearest(index, query):
    """Return ``(neighbor_index, squared_distance)`` for a single 3D query point."""
    q = np.asarray(query, dtype=np.float64)
    if q.shape != (3,):
        raise DimensionError(f"query must be a 3-vector, got shape {q.shape}")
    idx, sq = index.query(q)
    return int(idx[0]), float(sq[0])


def brute_force_nearest_many(cloud, queries):
    """Exhaustive-scan oracle for many queries; ties go to the smallest index."""
    pts = _points(cloud)
    q, _ = _queries(queries)
    idx = np.empty(len(q), dtype=np.intp)
    sq = np.empty(len(q))
    chunk = max(1, 4_000_000 // max(len(pts), 1))
    for s in range(0, len(q), chunk):
        block = squared_distance(q[s:s + chunk, None, :], pts[None, :, :])
        j = np.argmin(block, axis=1)  # first occurrence of the minimum
        idx[s:s + chunk] = j
        sq[s:s + chunk] = block[np.arange(len(j)), j]
    return idx, sq


def brute_force_nearest(cloud, query):
    q = np.asarray(query, dtype=np.float64)
    if q.shape != (3,):
        raise DimensionError(f"query must be a 3-vector, got shape {q.shape}")
    idx, sq = brute_force_nearest_many(cloud, q)
    return int(idx[0]), float(sq[0])
