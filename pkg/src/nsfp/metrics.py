"""Scene flow accuracy metrics: end-point error, Acc5/Acc10 and angle error."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass

import numpy as np

from nsfp.errors import DimensionError, UndefinedMetricError, ValidationError
from nsfp.pointcloud import FlowField

EPS = 1e-12
ACC5 = (0.05, 0.05)
ACC10 = (0.10, 0.10)


def _pair(est, gt):
    e = est.vectors if isinstance(est, FlowField) else np.asarray(est, dtype=np.float64)
    g = gt.vectors if isinstance(gt, FlowField) else np.asarray(gt, dtype=np.float64)
    if e.shape != g.shape or e.ndim != 2 or e.shape[1] != 3:
        raise DimensionError(f"flow shapes differ: {e.shape} vs {g.shape}")
    if len(e) == 0:
        raise ValidationError("metrics need at least one flow vector")
    return e, g


def epe(est, gt):
    """Mean Euclidean norm of the per-point flow error, in meters."""
    e, g = _pair(est, gt)
    return float(np.mean(np.linalg.norm(e - g, axis=1)))


def acc(est, gt, abs_thresh, rel_thresh):
    """Percentage of points whose error is below ``abs_thresh`` meters or
    below ``rel_thresh`` relative to the ground-truth flow magnitude."""
    if not (abs_thresh > 0 and rel_thresh > 0):
        raise ValidationError("accuracy thresholds must be positive")
    e, g = _pair(est, gt)
    err = np.linalg.norm(e - g, axis=1)
    rel = err / np.maximum(np.linalg.norm(g, axis=1), EPS)
    hit = (err < abs_thresh) | (rel < rel_thresh)
    return float(100.0 * np.mean(hit))


def angle_error_detail(est, gt):
    """Mean angle (radians) between estimated and true vectors plus the number of
    points skipped because their true flow is (numerically) zero."""
    e, g = _pair(est, gt)
    gn = np.linalg.norm(g, axis=1)
    used = gn >= EPS
    excluded = int(np.count_nonzero(~used))
    if not used.any():
        raise UndefinedMetricError("angle error is undefined: every ground-truth vector has zero length")
    e, g, gn = e[used], g[used], gn[used]
    en = np.maximum(np.linalg.norm(e, axis=1), EPS)
    cos = np.einsum("ij,ij->i", e, g) / (en * np.maximum(gn, EPS))
    return float(np.mean(np.arccos(np.clip(cos, -1.0, 1.0)))), excluded


def angle_error(est, gt):
    return angle_error_detail(est, gt)[0]


@dataclass
class MetricsRecord:
    epe_m: float
    acc5_pct: float
    acc10_pct: float
    angle_rad: float
    point_count: int
    angle_excluded: int = 0

    def to_dict(self):
        return asdict(self)

    def to_json(self, **kw):
        return json.dumps(self.to_dict(), **kw)


def evaluate(est, gt):
    e, g = _pair(est, gt)
    angle, excluded = angle_error_detail(e, g)
    return MetricsRecord(
        epe_m=epe(e, g),
        acc5_pct=acc(e, g, *ACC5),
        acc10_pct=acc(e, g, *ACC10),
        angle_rad=angle,
        point_count=len(e),
        angle_excluded=excluded,
    )


def aggregate(records):
    """Mean and (population) standard deviation of each metric across pairs."""
    if not records:
        raise ValidationError("nothing to aggregate")
    out = {"pairs": len(records)}
    for key in ("epe_m", "acc5_pct", "acc10_pct", "angle_rad"):
        vals = np.array([getattr(r, key) for r in records], dtype=np.float64)
        out[key] = {"mean": float(vals.mean()), "std": float(vals.std())}
    return out
