"""Point clouds, flow fields, file I/O and a synthetic rigid-scene generator."""

from __future__ import annotations

import os
from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy.spatial.transform import Rotation

from nsfp.errors import DimensionError, FormatError, ValidationError

FORMATS = ("xyz_text", "ply_ascii", "raw_f32le")
_SUFFIX_FORMATS = {".xyz": "xyz_text", ".txt": "xyz_text", ".ply": "ply_ascii", ".bin": "raw_f32le"}


def _as_points(values, what):
    arr = np.array(values, dtype=np.float64, copy=True)
    if arr.ndim == 1 and arr.size == 3:
        arr = arr.reshape(1, 3)
    if arr.ndim != 2 or arr.shape[1] != 3:
        raise DimensionError(f"{what} must have shape (N, 3), got {arr.shape}")
    bad = ~np.isfinite(arr).all(axis=1)
    if bad.any():
        raise ValidationError(f"{what} has a non-finite value at index {int(np.argmax(bad))}")
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True, eq=False)
class PointCloud:
    """An unordered set of 3D positions in meters, stored as a read-only (N, 3) float64 array."""

    points: np.ndarray
    frame_id: Optional[int] = None

    def __post_init__(self):
        pts = _as_points(self.points, "point cloud")
        if len(pts) == 0:
            raise ValidationError("point cloud must contain at least one point")
        if self.frame_id is not None and (int(self.frame_id) != self.frame_id or self.frame_id < 0):
            raise ValidationError(f"frame_id must be a non-negative integer, got {self.frame_id}")
        object.__setattr__(self, "points", pts)

    def __len__(self):
        return len(self.points)

    def subsample(self, n, rng):
        """Uniformly pick ``n`` points without replacement; returns (cloud, chosen indices)."""
        if n >= len(self):
            return self, np.arange(len(self))
        idx = np.sort(rng.choice(len(self), size=n, replace=False))
        return PointCloud(self.points[idx], self.frame_id), idx


@dataclass(frozen=True, eq=False)
class FlowField:
    """Per-point displacements aligned index-for-index with a source cloud."""

    vectors: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "vectors", _as_points(self.vectors, "flow field"))

    @property
    def source_count(self):
        return len(self.vectors)

    def __len__(self):
        return len(self.vectors)

    @classmethod
    def zeros(cls, n):
        return cls(np.zeros((n, 3)))


def _vectors(x):
    if isinstance(x, FlowField):
        return x.vectors
    if isinstance(x, PointCloud):
        return x.points
    return _as_points(x, "vectors")


def apply_flow(cloud, flow):
    """Displace every point of ``cloud`` by its flow vector."""
    if not isinstance(cloud, PointCloud):
        cloud = PointCloud(cloud)
    vec = _vectors(flow)
    if len(vec) != len(cloud):
        raise DimensionError(f"flow has {len(vec)} vectors but cloud has {len(cloud)} points")
    return PointCloud(cloud.points + vec, cloud.frame_id)


# ---------------------------------------------------------------------------
# File I/O
# ---------------------------------------------------------------------------


def _detect_format(path):
    ext = os.path.splitext(str(path))[1].lower()
    try:
        return _SUFFIX_FORMATS[ext]
    except KeyError:
        raise FormatError(f"cannot infer point cloud format from extension {ext!r} of {path}") from None


def _parse_rows(lines, first_lineno, path, expected=None):
    rows = []
    for offset, raw in enumerate(lines):
        lineno = first_lineno + offset
        text = raw.strip()
        if not text or text.startswith("#"):
            continue
        parts = text.split()
        if len(parts) < 3:
            raise FormatError(f"{path}: line {lineno}: expected 3 values, got {len(parts)}")
        try:
            xyz = [float(v) for v in parts[:3]]
        except ValueError:
            raise FormatError(f"{path}: line {lineno}: cannot parse {text!r}") from None
        if not all(np.isfinite(xyz)):
            raise ValidationError(f"{path}: line {lineno}: non-finite coordinate in {text!r}")
        rows.append(xyz)
        if expected is not None and len(rows) == expected:
            break
    return rows


def _read_xyz(path):
    with open(path, "r") as fh:
        lines = fh.readlines()
    rows = _parse_rows(lines, 1, path)
    if not rows:
        raise FormatError(f"{path}: no points found")
    return np.asarray(rows, dtype=np.float64)


def _read_ply(path):
    with open(path, "r") as fh:
        lines = fh.readlines()
    if not lines or lines[0].strip() != "ply":
        raise FormatError(f"{path}: line 1: missing 'ply' magic")
    n_vertex = None
    props = []
    element = None
    header_end = None
    for i, raw in enumerate(lines[1:], start=2):
        parts = raw.split()
        if not parts or parts[0] in ("comment", "obj_info"):
            continue
        if parts[0] == "format":
            if len(parts) < 2 or parts[1] != "ascii":
                raise FormatError(f"{path}: line {i}: only ASCII PLY is supported")
        elif parts[0] == "element":
            element = parts[1]
            if element == "vertex":
                try:
                    n_vertex = int(parts[2])
                except (IndexError, ValueError):
                    raise FormatError(f"{path}: line {i}: bad vertex count") from None
        elif parts[0] == "property":
            if element == "vertex":
                props.append(parts[-1])
        elif parts[0] == "end_header":
            header_end = i
            break
        else:
            raise FormatError(f"{path}: line {i}: unexpected header entry {parts[0]!r}")
    if header_end is None or n_vertex is None:
        raise FormatError(f"{path}: incomplete PLY header")
    try:
        cols = [props.index(c) for c in ("x", "y", "z")]
    except ValueError:
        raise FormatError(f"{path}: vertex element lacks x/y/z properties") from None
    body = lines[header_end:header_end + n_vertex]
    if len(body) < n_vertex:
        raise FormatError(f"{path}: header declares {n_vertex} vertices, found {len(body)}")
    pts = np.empty((n_vertex, 3))
    for k, raw in enumerate(body):
        lineno = header_end + 1 + k
        parts = raw.split()
        try:
            pts[k] = [float(parts[c]) for c in cols]
        except (IndexError, ValueError):
            raise FormatError(f"{path}: line {lineno}: cannot parse vertex {raw.strip()!r}") from None
        if not np.isfinite(pts[k]).all():
            raise ValidationError(f"{path}: line {lineno}: non-finite coordinate")
    return pts


def _read_raw(path):
    size = os.path.getsize(path)
    if size % 12:
        raise FormatError(f"{path}: size {size} bytes is not a multiple of 12 (byte {size - size % 12} starts a partial point)")
    pts = np.fromfile(path, dtype="<f4").reshape(-1, 3).astype(np.float64)
    bad = ~np.isfinite(pts).all(axis=1)
    if bad.any():
        raise ValidationError(f"{path}: non-finite coordinate at point index {int(np.argmax(bad))}")
    return pts


def load_cloud(path, format=None, frame_id=None):
    """Read a point cloud; ``format`` is one of ``xyz_text``, ``ply_ascii``, ``raw_f32le``
    and is inferred from the extension when omitted."""
    fmt = format or _detect_format(path)
    readers = {"xyz_text": _read_xyz, "ply_ascii": _read_ply, "raw_f32le": _read_raw}
    if fmt not in readers:
        raise FormatError(f"unknown point cloud format {fmt!r}; expected one of {FORMATS}")
    return PointCloud(readers[fmt](path), frame_id)


def save_cloud(cloud, path, format=None):
    fmt = format or _detect_format(path)
    pts = cloud.points
    if fmt == "xyz_text":
        np.savetxt(path, pts, fmt="%.17g")
    elif fmt == "ply_ascii":
        header = (
            "ply\nformat ascii 1.0\n"
            f"element vertex {len(pts)}\n"
            "property double x\nproperty double y\nproperty double z\nend_header"
        )
        np.savetxt(path, pts, fmt="%.17g", header=header, comments="")
    elif fmt == "raw_f32le":
        pts.astype("<f4").tofile(path)
    else:
        raise FormatError(f"unknown point cloud format {fmt!r}")


def save_flow(flow, path):
    """Write one ``fx fy fz`` line per vector with round-trip precision."""
    np.savetxt(path, _vectors(flow), fmt="%.17g")


def load_flow(path):
    with open(path, "r") as fh:
        rows = _parse_rows(fh.readlines(), 1, path)
    if not rows:
        return FlowField(np.zeros((0, 3)))
    return FlowField(np.asarray(rows, dtype=np.float64))


# ---------------------------------------------------------------------------
# Synthetic scenes
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SyntheticSceneSpec:
    """Rigid boxes moving over a static background.

    Translation magnitudes are drawn from [min_translation, max_translation]
    and rotation angles from [-max_rotation, max_rotation] about a random axis
    through each box's centroid. ``dropout`` removes that fraction of the
    second cloud's points to imitate partial overlap.
    """

    object_count: int = 2
    points_per_object: int = 1024
    background_points: int = 0
    max_translation: float = 1.0
    max_rotation: float = 0.0
    noise_sigma: float = 0.0
    extent: float = 10.0
    min_translation: float = 0.0
    dropout: float = 0.0

    def __post_init__(self):
        if self.object_count < 1 or self.points_per_object < 1:
            raise ValidationError("object_count and points_per_object must be positive")
        if self.background_points < 0:
            raise ValidationError("background_points must be non-negative")
        for name in ("max_translation", "max_rotation", "noise_sigma", "min_translation"):
            if getattr(self, name) < 0:
                raise ValidationError(f"{name} must be non-negative")
        if self.min_translation > self.max_translation:
            raise ValidationError("min_translation exceeds max_translation")
        if not self.extent > 0:
            raise ValidationError("extent must be positive")
        if not 0.0 <= self.dropout < 1.0:
            raise ValidationError("dropout must lie in [0, 1)")


def _box_surface(rng, dims, n):
    """Uniform samples on the surface of an axis-aligned box centred at the origin."""
    a, b, c = dims
    areas = np.array([b * c, b * c, a * c, a * c, a * b, a * b])
    face = rng.choice(6, size=n, p=areas / areas.sum())
    uv = rng.uniform(-0.5, 0.5, size=(n, 3)) * dims
    axis = face // 2
    sign = np.where(face % 2 == 0, -0.5, 0.5)
    uv[np.arange(n), axis] = sign * dims[axis]
    return uv


def _sample_objects(spec, rng):
    clusters = []
    for _ in range(spec.object_count):
        dims = np.minimum(rng.uniform([1.5, 1.0, 1.0], [4.5, 2.0, 2.0]), spec.extent)
        centre = rng.uniform(-0.6, 0.6, size=3) * spec.extent
        clusters.append(centre + _box_surface(rng, dims, spec.points_per_object))
    return clusters


def _sample_motion(spec, rng):
    axis = rng.normal(size=3)
    axis /= np.linalg.norm(axis)
    angle = rng.uniform(-spec.max_rotation, spec.max_rotation) if spec.max_rotation > 0 else 0.0
    direction = rng.normal(size=3)
    direction /= np.linalg.norm(direction)
    magnitude = rng.uniform(spec.min_translation, spec.max_translation) if spec.max_translation > 0 else 0.0
    rot = Rotation.from_rotvec(axis * angle).as_matrix() if angle else np.eye(3)
    return rot, direction * magnitude


def _displacement(points, rot, trans):
    """Displacement of each point under rotation about the centroid followed by translation."""
    centroid = points.mean(axis=0)
    return (points - centroid) @ (rot - np.eye(3)).T + trans


def _background(spec, rng):
    return rng.uniform(-spec.extent, spec.extent, size=(spec.background_points, 3))


def _observe(clean, spec, rng):
    noisy = clean + rng.normal(scale=spec.noise_sigma, size=clean.shape) if spec.noise_sigma > 0 else clean
    if spec.dropout > 0:
        keep = rng.random(len(noisy)) >= spec.dropout
        if not keep.any():
            keep[0] = True
        noisy = noisy[keep]
    return noisy


def generate_synthetic_scene(spec, seed):
    """Sample a two-frame scene; returns ``(S1, S2, gt)`` with gt excluding sensor noise."""
    rng = np.random.default_rng(seed)
    clusters = _sample_objects(spec, rng)
    shifts = [_displacement(c, *_sample_motion(spec, rng)) for c in clusters]
    bg = _background(spec, rng)
    s1 = np.concatenate(clusters + [bg])
    gt = np.concatenate(shifts + [np.zeros_like(bg)])
    s2 = _observe(s1 + gt, spec, rng)
    return PointCloud(s1, 0), PointCloud(s2, 1), FlowField(gt)


def generate_synthetic_sequence(spec, steps, seed):
    """Constant-velocity sequence of ``steps + 1`` frames.

    Every box repeats its sampled rigid motion at each step. Returns the
    clouds and, for each frame m, the noiseless flow F_{0->m} over frame 0.
    """
    if steps < 1:
        raise ValidationError("steps must be at least 1")
    rng = np.random.default_rng(seed)
    clusters = _sample_objects(spec, rng)
    motions = [_sample_motion(spec, rng) for _ in clusters]
    bg = _background(spec, rng)
    first = np.concatenate(clusters + [bg])
    clouds = [PointCloud(first, 0)]
    flows = [FlowField.zeros(len(first))]
    total = [np.zeros_like(c) for c in clusters]
    for m in range(1, steps + 1):
        total = [d + _displacement(c + d, r, t) for c, d, (r, t) in zip(clusters, total, motions)]
        flow = np.concatenate(total + [np.zeros_like(bg)])
        clouds.append(PointCloud(_observe(first + flow, spec, rng), m))
        flows.append(FlowField(flow))
    return clouds, flows
