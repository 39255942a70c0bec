"""Truncated Chamfer distance and the joint forward/backward flow objective.

Both losses are sums over points. Nearest-neighbour assignments are treated
as locally constant, which gives the usual almost-everywhere gradient of the
Chamfer distance.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from nsfp.errors import ValidationError
from nsfp.net import backward, forward
from nsfp.nn_index import SpatialIndex, _points
from nsfp.pointcloud import FlowField


@dataclass(frozen=True)
class LossConfig:
    """Pairwise terms farther apart than ``truncation_dist`` (Euclidean, meters)
    contribute neither value nor gradient."""

    truncation_dist: float = 2.0
    bidirectional: bool = True
    use_backward_flow: bool = True
    detach_forward_in_backward_term: bool = False

    def __post_init__(self):
        if not self.truncation_dist > 0:
            raise ValidationError("truncation_dist must be positive")


def _scatter_rows(values, index, size):
    """Sum rows of ``values`` into ``size`` buckets; bincount keeps the order fixed."""
    out = np.empty((size, 3))
    for c in range(3):
        out[:, c] = np.bincount(index, weights=values[:, c], minlength=size)
    return out


def _chamfer(a, b_index, truncation_dist, bidirectional):
    b = b_index.points
    limit = truncation_dist * truncation_dist
    nn_b, sq_ab = b_index.query(a)
    keep = sq_ab <= limit
    loss = np.sum(np.where(keep, sq_ab, 0.0))
    grad = 2.0 * (a - b[nn_b])
    grad *= keep[:, None]
    if bidirectional:
        nn_a, sq_ba = SpatialIndex(a, workers=b_index.workers).query(b)
        keep_b = sq_ba <= limit
        loss = loss + np.sum(np.where(keep_b, sq_ba, 0.0))
        contrib = 2.0 * (a[nn_a] - b)
        contrib *= keep_b[:, None]
        grad += _scatter_rows(contrib, nn_a, len(a))
    return float(loss), grad


def chamfer(a, b_index, cfg=LossConfig()):
    """Truncated Chamfer distance from the variable set ``a`` to the indexed set B.

    Returns ``(loss, grad_a)``; the reverse sum over B is included when
    ``cfg.bidirectional`` is set.
    """
    pts = _points(a)
    if len(pts) == 0:
        raise ValidationError("chamfer needs a non-empty variable set")
    return _chamfer(pts, b_index, cfg.truncation_dist, cfg.bidirectional)


@dataclass
class ObjectiveResult:
    loss: float
    grad_fwd: object
    grad_bwd: object
    flow: FlowField
    forward_loss: float
    backward_loss: float

    def __iter__(self):
        return iter((self.loss, self.grad_fwd, self.grad_bwd, self.flow))


def objective(s1, s2_index, params_fwd, params_bwd, s1_index, cfg=LossConfig(), *, raw=False):
    """Joint objective over the forward network and the backward (cycle) network.

    With ``p' = p + g(p; fwd)`` the value is
    ``chamfer(p', S2) + chamfer(p' + g(p'; bwd), S1)``, the second term only
    when ``cfg.use_backward_flow``. The backward term's gradient is chained
    through ``p'`` into the forward parameters unless
    ``cfg.detach_forward_in_backward_term`` is set.

    Unpacks as ``(loss, grad_fwd, grad_bwd, flow)``. With ``raw=True`` the
    flow is returned as a plain array, which avoids a validation copy inside
    the solver loop.
    """
    p = _points(s1)
    trunc, bidir = cfg.truncation_dist, cfg.bidirectional
    flow, trace_f = forward(params_fwd, p)
    shifted = p + flow
    loss_f, grad_shifted = _chamfer(shifted, s2_index, trunc, bidir)
    loss_b = 0.0
    if cfg.use_backward_flow:
        flow_b, trace_b = forward(params_bwd, shifted)
        loss_b, grad_back = _chamfer(shifted + flow_b, s1_index, trunc, bidir)
        chain = not cfg.detach_forward_in_backward_term
        grad_bwd, grad_in = backward(trace_b, params_bwd, grad_back, input_grad=chain)
        if chain:
            grad_shifted = grad_shifted + grad_back + grad_in
    else:
        grad_bwd = params_bwd.zeros_like()
    grad_fwd, _ = backward(trace_f, params_fwd, grad_shifted, input_grad=False)
    return ObjectiveResult(
        loss=loss_f + loss_b,
        grad_fwd=grad_fwd,
        grad_bwd=grad_bwd,
        flow=flow if raw else FlowField(flow),
        forward_loss=loss_f,
        backward_loss=loss_b,
    )
