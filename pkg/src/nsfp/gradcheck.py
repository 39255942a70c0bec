"""Finite-difference verification of the full objective's parameter gradients."""

from __future__ import annotations

import numpy as np

from nsfp.loss import LossConfig, objective
from nsfp.net import ArchConfig, NetworkParams, init_params, relative_error
from nsfp.nn_index import SpatialIndex


def random_instance(rng, max_layers=2, max_units=8, max_points=10):
    """A tiny random problem: clouds, both networks and a loss config."""
    arch = ArchConfig(int(rng.integers(1, max_layers + 1)), int(rng.integers(2, max(max_units, 2) + 1)))
    n1 = int(rng.integers(3, max(max_points, 3) + 1))
    n2 = int(rng.integers(3, max(max_points, 3) + 1))
    s1 = rng.uniform(-1.0, 1.0, size=(n1, 3))
    s2 = rng.uniform(-1.0, 1.0, size=(n2, 3)) + rng.normal(scale=0.3, size=3)
    nets = []
    for _ in range(2):
        p = init_params(arch, int(rng.integers(2**32)), "kaiming")
        for b in p.biases:
            b += rng.normal(scale=0.1, size=b.shape)
        nets.append(p)
    cfg = LossConfig(
        truncation_dist=float(rng.choice([0.75, 2.0, 10.0])),
        bidirectional=bool(rng.random() < 0.8),
        use_backward_flow=True,
    )
    return s1, s2, nets[0], nets[1], cfg


def check_instance(s1, s2, theta, theta_b, cfg, step=1e-6):
    """Max relative error between analytic and central-difference gradients over (fwd, bwd) params."""
    i1, i2 = SpatialIndex(s1), SpatialIndex(s2)
    res = objective(s1, i2, theta, theta_b, i1, cfg)
    analytic = np.concatenate([res.grad_fwd.flat(), res.grad_bwd.flat()])
    n_f = theta.param_count
    vec = np.concatenate([theta.flat(), theta_b.flat()])

    def value(v):
        a = NetworkParams.from_flat(theta.arch, v[:n_f])
        b = NetworkParams.from_flat(theta_b.arch, v[n_f:])
        return objective(s1, i2, a, b, i1, cfg).loss

    numeric = np.empty_like(vec)
    for i in range(vec.size):
        orig = vec[i]
        vec[i] = orig + step
        up = value(vec)
        vec[i] = orig - step
        down = value(vec)
        vec[i] = orig
        numeric[i] = (up - down) / (2.0 * step)
    return relative_error(analytic, numeric), res.loss


def objective_gradcheck(rng, trials=20, max_layers=2, max_units=8, max_points=10, step=1e-6):
    errors = []
    for _ in range(trials):
        s1, s2, theta, theta_b, cfg = random_instance(rng, max_layers, max_units, max_points)
        err, _ = check_instance(s1, s2, theta, theta_b, cfg, step)
        errors.append(err)
    return {"trials": trials, "errors": errors, "max_rel_error": float(max(errors))}
