"""Adam and the per-scene runtime optimisation loop."""

from __future__ import annotations

import json
import logging
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import List, Optional

import numpy as np

from nsfp.errors import DimensionError, DivergenceError, ValidationError
from nsfp.loss import LossConfig, objective
from nsfp.net import ArchConfig, NetworkParams, init_params
from nsfp.nn_index import SpatialIndex
from nsfp.pointcloud import FlowField, PointCloud

log = logging.getLogger(__name__)


@dataclass
class AdamState:
    m: NetworkParams
    v: NetworkParams
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def fresh(cls, params, **kw):
        return cls(params.zeros_like(), params.zeros_like(), **kw)


def adam_step(state, params, grads, lr):
    """One bias-corrected Adam update. Inputs are left untouched; returns ``(params, state)``."""
    if grads.arch.layer_shapes() != params.arch.layer_shapes() or state.m.arch.layer_shapes() != params.arch.layer_shapes():
        raise DimensionError("parameter, gradient and moment shapes disagree")
    t = state.step + 1
    b1, b2, eps = state.beta1, state.beta2, state.eps
    bc1 = 1.0 - b1 ** t
    bc2 = 1.0 - b2 ** t
    new_p, new_m, new_v = [], [], []
    for p, g, m, v in zip(params.arrays(), grads.arrays(), state.m.arrays(), state.v.arrays()):
        m = b1 * m + (1.0 - b1) * g
        v = b2 * v + (1.0 - b2) * (g * g)
        new_p.append(p - lr * (m / bc1) / (np.sqrt(v / bc2) + eps))
        new_m.append(m)
        new_v.append(v)

    def pack(arrs):
        return NetworkParams(params.arch, arrs[0::2], arrs[1::2])

    return pack(new_p), AdamState(pack(new_m), pack(new_v), t, b1, b2, eps)


@dataclass(frozen=True)
class SolverConfig:
    arch: ArchConfig = field(default_factory=ArchConfig)
    learning_rate: float = 8e-3
    max_iters: int = 5000
    patience: int = 100
    rel_tol: float = 1e-6
    abs_tol: float = 1e-6
    init_scheme: str = "default"
    loss: LossConfig = field(default_factory=LossConfig)
    seed: int = 0
    verbose: bool = False

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise ValidationError("learning_rate must be positive")
        if self.max_iters < 1:
            raise ValidationError("max_iters must be >= 1")
        if self.patience < 1:
            raise ValidationError("patience must be >= 1")
        if self.rel_tol < 0 or self.abs_tol < 0:
            raise ValidationError("rel_tol and abs_tol must be non-negative")
        if self.seed < 0:
            raise ValidationError("seed must be non-negative")

    def with_seed(self, seed):
        from dataclasses import replace
        return replace(self, seed=seed)


@dataclass
class SolveStats:
    iterations_run: int
    best_iteration: int
    best_loss: float
    loss_history: List[float]
    wall_time: float

    def to_dict(self):
        return asdict(self)

    def to_json(self, **kw):
        return json.dumps(self.to_dict(), **kw)


@dataclass
class SolveResult:
    flow: FlowField
    params_fwd: NetworkParams
    stats: SolveStats
    params_bwd: Optional[NetworkParams] = None


def derive_seeds(seed):
    """Two independent initialisation seeds (forward, backward) from one user seed."""
    a, b = np.random.SeedSequence(int(seed)).generate_state(2)
    return int(a), int(b)


def _cloud(x, frame_id=None):
    return x if isinstance(x, PointCloud) else PointCloud(x, frame_id)


def solve(s1, s2, cfg=SolverConfig()):
    """Fit forward and backward networks to one pair; keeps the lowest-loss iterate.

    An iteration counts as progress when it lowers the best loss by more than
    ``rel_tol * best + abs_tol * len(s1)``; the loop stops after ``patience``
    iterations without progress or after ``max_iters``.
    """
    s1, s2 = _cloud(s1), _cloud(s2)
    t0 = time.perf_counter()
    seed_f, seed_b = derive_seeds(cfg.seed)
    theta = init_params(cfg.arch, seed_f, cfg.init_scheme)
    theta_b = init_params(cfg.arch, seed_b, cfg.init_scheme)
    opt_f = AdamState.fresh(theta)
    opt_b = AdamState.fresh(theta_b)
    s1_index = SpatialIndex(s1)
    s2_index = SpatialIndex(s2)

    history = []
    best = np.inf
    best_iter = 0
    best_flow = best_theta = best_theta_b = None
    stall = 0
    min_gain = cfg.abs_tol * len(s1)
    for it in range(1, cfg.max_iters + 1):
        res = objective(s1, s2_index, theta, theta_b, s1_index, cfg.loss, raw=True)
        if not np.isfinite(res.loss) or not np.isfinite(res.flow).all():
            raise DivergenceError(it, res.loss)
        history.append(res.loss)
        significant = not np.isfinite(best) or res.loss < best - (cfg.rel_tol * best + min_gain)
        if res.loss < best:
            best, best_iter = res.loss, it
            best_flow, best_theta, best_theta_b = res.flow, theta, theta_b
        stall = 0 if significant else stall + 1
        if cfg.verbose:
            log.info("iter %d loss %.9g best %.9g", it, res.loss, best)
        if stall >= cfg.patience or it == cfg.max_iters:
            break
        theta, opt_f = adam_step(opt_f, theta, res.grad_fwd, cfg.learning_rate)
        if cfg.loss.use_backward_flow:
            theta_b, opt_b = adam_step(opt_b, theta_b, res.grad_bwd, cfg.learning_rate)

    stats = SolveStats(
        iterations_run=len(history),
        best_iteration=best_iter,
        best_loss=float(best),
        loss_history=[float(v) for v in history],
        wall_time=time.perf_counter() - t0,
    )
    return SolveResult(FlowField(best_flow), best_theta, stats,
                       best_theta_b if cfg.loss.use_backward_flow else None)


def solve_flow(s1, s2, cfg=SolverConfig()):
    """Estimate the scene flow from ``s1`` to ``s2``; returns ``(flow, params_fwd, stats)``.

    The flow and parameters are those of the iteration with the lowest loss,
    not necessarily the last one.
    """
    res = solve(s1, s2, cfg)
    return res.flow, res.params_fwd, res.stats


@dataclass
class PairResult:
    index: int
    flow: Optional[FlowField] = None
    stats: Optional[SolveStats] = None
    error: Optional[str] = None

    @property
    def ok(self):
        return self.error is None


def _batch_worker(job):
    i, s1, s2, cfg = job
    try:
        flow, _, stats = solve_flow(s1, s2, cfg.with_seed(cfg.seed ^ i))
        return PairResult(i, flow, stats)
    except Exception as exc:  # noqa: BLE001 - isolate per-pair failures
        return PairResult(i, error=f"{type(exc).__name__}: {exc}")


def solve_batch(pairs, cfg=SolverConfig(), parallelism=1):
    """Solve many pairs; pair ``i`` uses seed ``cfg.seed ^ i``.

    Failures are recorded on the corresponding :class:`PairResult` and do not
    stop the batch. Results do not depend on ``parallelism``.
    """
    if parallelism < 1:
        raise ValidationError("parallelism must be >= 1")
    jobs = [(i, s1, s2, cfg) for i, (s1, s2) in enumerate(pairs)]
    if parallelism == 1 or len(jobs) <= 1:
        return [_batch_worker(j) for j in jobs]
    with ProcessPoolExecutor(max_workers=parallelism) as pool:
        return list(pool.map(_batch_worker, jobs))
