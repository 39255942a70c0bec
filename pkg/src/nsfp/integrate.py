"""Long-term flow over a sequence by Forward Euler composition of pairwise networks.

Each saved network g_m maps a point at time m to its displacement towards
m+1. Starting from frame s, the flow to frame e is built recursively::

    f_{s->s+1} = g_s(p)
    f_{s->m+1} = f_{s->m} + g_m(p + f_{s->m})

so every network is queried at continuously displaced positions rather than
interpolated from its neighbours. Points that drift outside the region a
network was fitted on are simply extrapolated by it.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, replace
from typing import List, Optional

import numpy as np

from nsfp.errors import FormatError, NSFPError, ValidationError
from nsfp.net import NetworkParams, forward
from nsfp.optim import SolverConfig, solve
from nsfp.pointcloud import FlowField, PointCloud, load_cloud, save_cloud

MANIFEST = "manifest.txt"


@dataclass
class SequenceSolution:
    """Clouds S_0..S_M and the serialized forward (and optionally backward)
    networks fitted to each consecutive pair."""

    clouds: List[PointCloud]
    params: List[bytes]
    params_bwd: Optional[List[bytes]] = None
    pairwise_flows: Optional[List[FlowField]] = None
    activation: str = "relu"

    def __post_init__(self):
        if len(self.clouds) < 1:
            raise ValidationError("a sequence needs at least one cloud")
        if len(self.params) != len(self.clouds) - 1:
            raise ValidationError(f"{len(self.clouds)} clouds need {len(self.clouds) - 1} networks, got {len(self.params)}")
        if self.params_bwd is not None and len(self.params_bwd) != len(self.params):
            raise ValidationError("backward networks must match forward networks one-to-one")

    @property
    def frame_count(self):
        return len(self.clouds)

    @property
    def has_backward(self):
        return self.params_bwd is not None

    def network(self, m, backward=False):
        """Deserialize the network for interval m -> m+1 (not cached)."""
        blobs = self.params_bwd if backward else self.params
        if blobs is None:
            raise ValidationError("sequence has no backward networks")
        return NetworkParams.from_bytes(blobs[m], self.activation)


def solve_sequence(clouds, cfg=SolverConfig(), keep_flows=True):
    """Fit a pair of networks to every consecutive pair; pair m uses seed ``cfg.seed ^ m``."""
    clouds = [c if isinstance(c, PointCloud) else PointCloud(c, i) for i, c in enumerate(clouds)]
    if len(clouds) < 2:
        raise ValidationError("solve_sequence needs at least two clouds")
    fwd, bwd, flows = [], [], []
    for m in range(len(clouds) - 1):
        try:
            res = solve(clouds[m], clouds[m + 1], replace(cfg, seed=cfg.seed ^ m))
        except NSFPError as exc:
            exc.args = (f"pair {m} -> {m + 1}: {exc}",)
            exc.pair = m
            raise
        fwd.append(res.params_fwd.to_bytes())
        if res.params_bwd is not None:
            bwd.append(res.params_bwd.to_bytes())
        flows.append(res.flow)
    return SequenceSolution(
        clouds=clouds,
        params=fwd,
        params_bwd=bwd if len(bwd) == len(fwd) else None,
        pairwise_flows=flows if keep_flows else None,
        activation=cfg.arch.activation,
    )


def _check_range(solution, start, end):
    last = solution.frame_count - 1
    if not (0 <= start < end <= last):
        raise ValidationError(f"need 0 <= start < end <= {last}, got start={start}, end={end}")


def _euler(points, networks):
    flow = None
    for net in networks:
        step = forward(net, points if flow is None else points + flow)[0]
        flow = step if flow is None else flow + step
    return flow


def integrate_flow(solution, start=0, end=None):
    """Flow carrying the points of frame ``start`` to frame ``end`` (default: last frame)."""
    end = solution.frame_count - 1 if end is None else end
    _check_range(solution, start, end)
    nets = [solution.network(m) for m in range(start, end)]
    return FlowField(_euler(solution.clouds[start].points, nets))


def transport(solution, source, target):
    """Move the points of frame ``source`` to the time of frame ``target``.

    Earlier frames ride the forward networks; later frames ride the backward
    (cycle) networks in reverse order, which must have been kept. Networks
    are never inverted numerically.
    """
    last = solution.frame_count - 1
    if not (0 <= source <= last and 0 <= target <= last):
        raise ValidationError(f"frame indices must lie in [0, {last}]")
    pts = solution.clouds[source].points
    if source == target:
        return pts
    if source < target:
        nets = [solution.network(m) for m in range(source, target)]
    else:
        if not solution.has_backward:
            raise ValidationError(
                f"frame {source} lies after target {target}; transporting it needs backward networks")
        nets = [solution.network(m, backward=True) for m in range(source - 1, target - 1, -1)]
    return pts + _euler(pts, nets)


def accumulate(solution, target_frame=None):
    """Concatenate every frame, transported to ``target_frame`` (default: last)."""
    target = solution.frame_count - 1 if target_frame is None else target_frame
    parts = [transport(solution, m, target) for m in range(solution.frame_count)]
    return PointCloud(np.concatenate(parts), target)


def out_of_hull_fraction(solution, start=0, end=None):
    """Fraction of integrated points that end outside the axis-aligned bounds of the target frame."""
    end = solution.frame_count - 1 if end is None else end
    moved = solution.clouds[start].points + integrate_flow(solution, start, end).vectors
    tgt = solution.clouds[end].points
    outside = (moved < tgt.min(axis=0)) | (moved > tgt.max(axis=0))
    return float(np.mean(outside.any(axis=1)))


# ---------------------------------------------------------------------------
# Persistence
# ---------------------------------------------------------------------------


def save_sequence(solution, directory):
    """Write clouds as xyz text, networks as binary blobs and a manifest listing frame order."""
    os.makedirs(directory, exist_ok=True)
    lines = [f"# activation {solution.activation}"]
    for m, cloud in enumerate(solution.clouds):
        name = f"frame_{m:04d}.xyz"
        save_cloud(cloud, os.path.join(directory, name))
        entry = [name]
        if m < len(solution.params):
            fname = f"params_{m:04d}.bin"
            with open(os.path.join(directory, fname), "wb") as fh:
                fh.write(solution.params[m])
            entry.append(fname)
            if solution.params_bwd is not None:
                bname = f"params_bwd_{m:04d}.bin"
                with open(os.path.join(directory, bname), "wb") as fh:
                    fh.write(solution.params_bwd[m])
                entry.append(bname)
        lines.append(" ".join(entry))
    with open(os.path.join(directory, MANIFEST), "w") as fh:
        fh.write("\n".join(lines) + "\n")


def read_manifest(path):
    """Parse a manifest into rows of whitespace-separated file names (relative paths resolved)."""
    base = os.path.dirname(os.path.abspath(path))
    rows, activation = [], "relu"
    with open(path) as fh:
        for raw in fh:
            text = raw.strip()
            if not text:
                continue
            if text.startswith("#"):
                parts = text[1:].split()
                if len(parts) == 2 and parts[0] == "activation":
                    activation = parts[1]
                continue
            rows.append([p if os.path.isabs(p) else os.path.join(base, p) for p in text.split()])
    if not rows:
        raise FormatError(f"{path}: manifest lists no frames")
    return rows, activation


def load_sequence(directory):
    rows, activation = read_manifest(os.path.join(directory, MANIFEST))
    clouds, fwd, bwd = [], [], []
    for m, row in enumerate(rows):
        clouds.append(load_cloud(row[0], frame_id=m))
        if m < len(rows) - 1:
            if len(row) < 2:
                raise FormatError(f"manifest row {m + 1} lacks a parameter file")
            with open(row[1], "rb") as fh:
                fwd.append(fh.read())
            if len(row) > 2:
                with open(row[2], "rb") as fh:
                    bwd.append(fh.read())
    return SequenceSolution(clouds, fwd, bwd if bwd and len(bwd) == len(fwd) else None, activation=activation)
