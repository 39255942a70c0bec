"""Acceptance checks. Each test prints one PASS/FAIL line (also collected in the
terminal summary) and then asserts the same condition."""

import os
import time

import numpy as np
import pytest

from nsfp.cli import _load_pair, list_pairs, main
from nsfp.gradcheck import objective_gradcheck
from nsfp.integrate import integrate_flow, solve_sequence
from nsfp.loss import LossConfig, chamfer
from nsfp.metrics import aggregate, epe, evaluate
from nsfp.net import ArchConfig, forward
from nsfp.nn_index import SpatialIndex, brute_force_nearest_many
from nsfp.optim import SolverConfig, solve_flow
from nsfp.pointcloud import FlowField, PointCloud, SyntheticSceneSpec, generate_synthetic_scene, generate_synthetic_sequence

from test_loss import double_loop_chamfer


def test_c01_gradient_correctness(report):
    t0 = time.perf_counter()
    out = objective_gradcheck(np.random.default_rng(2024), trials=20, max_layers=2, max_units=8, max_points=10)
    elapsed = time.perf_counter() - t0
    ok = out["max_rel_error"] <= 1e-4 and elapsed < 10.0
    assert report(1, "objective gradient check", ok,
                  f"max rel error {out['max_rel_error']:.2e} (<= 1e-4) over 20 instances in {elapsed:.1f}s (< 10s)")


def test_c02_nearest_neighbour_oracle(report):
    rng = np.random.default_rng(7)
    targets = rng.uniform(-10, 10, size=(1000, 3))
    queries = rng.uniform(-12, 12, size=(1000, 3))
    # force a block of exact ties: duplicate targets and queries sitting on targets
    targets[500:550] = targets[:50]
    queries[:100] = targets[rng.integers(0, 1000, size=100)]
    t0 = time.perf_counter()
    idx, sq = SpatialIndex(targets).query(queries)
    elapsed = time.perf_counter() - t0
    ref_idx, ref_sq = brute_force_nearest_many(targets, queries)
    same_idx = bool(np.array_equal(idx, ref_idx))
    same_sq = sq.tobytes() == ref_sq.tobytes()
    ok = same_idx and same_sq and elapsed < 5.0
    assert report(2, "index equals brute force", ok,
                  f"indices equal={same_idx}, squared distances bit-equal={same_sq}, {elapsed:.2f}s (< 5s)")


def test_c03_chamfer_oracle(report):
    rng = np.random.default_rng(11)
    worst_loss = worst_grad = 0.0
    t0 = time.perf_counter()
    for _ in range(50):
        a = rng.uniform(-2, 2, size=(int(rng.integers(1, 31)), 3))
        b = rng.uniform(-2, 2, size=(int(rng.integers(1, 31)), 3)) + rng.normal(scale=0.5, size=3)
        loss, grad = chamfer(a, SpatialIndex(b), LossConfig())
        ref_loss, ref_grad = double_loop_chamfer(a, b, 2.0)
        worst_loss = max(worst_loss, abs(loss - ref_loss))
        worst_grad = max(worst_grad, float(np.max(np.abs(grad - ref_grad))))
    elapsed = time.perf_counter() - t0
    ok = worst_loss <= 1e-12 and worst_grad <= 1e-12 and elapsed < 5.0
    assert report(3, "chamfer equals double-loop oracle", ok,
                  f"max |dloss| {worst_loss:.1e}, max |dgrad| {worst_grad:.1e} (<= 1e-12), {elapsed:.2f}s (< 5s)")


@pytest.mark.slow
def test_c04_coincident_clouds(report):
    s1 = PointCloud(np.random.default_rng(4).uniform(-5, 5, size=(500, 3)))
    t0 = time.perf_counter()
    flow, _, stats = solve_flow(s1, s1, SolverConfig())
    elapsed = time.perf_counter() - t0
    err = epe(flow, FlowField.zeros(500))
    ok = err <= 0.01 and elapsed < 60.0
    assert report(4, "coincident clouds converge to zero flow", ok,
                  f"EPE to zero {err:.5f} m (<= 0.01) after {stats.iterations_run} iterations, {elapsed:.1f}s (< 60s)")


@pytest.mark.slow
def test_c05_rigid_translation(report):
    spec = SyntheticSceneSpec(object_count=1, points_per_object=2048, min_translation=0.5, max_translation=0.5)
    s1, s2, gt = generate_synthetic_scene(spec, 5)
    assert np.allclose(np.linalg.norm(gt.vectors, axis=1), 0.5)
    t0 = time.perf_counter()
    flow, _, stats = solve_flow(s1, s2, SolverConfig())
    elapsed = time.perf_counter() - t0
    m = evaluate(flow, gt)
    ok = m.epe_m <= 0.025 and m.acc5_pct >= 95.0 and elapsed < 120.0
    assert report(5, "rigid 0.5 m translation recovered", ok,
                  f"EPE {m.epe_m:.4f} m (<= 0.025), Acc5 {m.acc5_pct:.1f} (>= 95), "
                  f"{stats.iterations_run} iterations, {elapsed:.1f}s (< 120s)")


@pytest.mark.slow
def test_c05b_kitti_protocol(report):
    root = os.environ.get("NSFP_KITTI_DIR")
    if not root:
        pytest.skip("set NSFP_KITTI_DIR to a directory of preprocessed KITTI pairs to run this check")
    rng = np.random.default_rng(0)
    records = []
    for path in list_pairs(root):
        s1, s2, gt = _load_pair(path)
        s1, idx = s1.subsample(2048, rng)
        s2, _ = s2.subsample(2048, rng)
        flow, _, _ = solve_flow(s1, s2, SolverConfig())
        records.append(evaluate(flow, FlowField(gt.vectors[idx])))
    agg = aggregate(records)
    e, a5 = agg["epe_m"]["mean"], agg["acc5_pct"]["mean"]
    ok = abs(e - 0.050) <= 0.02 and abs(a5 - 81.68) <= 5.0
    assert report("5b", "KITTI reference magnitudes", ok,
                  f"{len(records)} pairs: EPE {e:.3f} (0.050 +- 0.02), Acc5 {a5:.2f} (81.68 +- 5)")


@pytest.mark.slow
def test_c06_backward_flow_ablation(report):
    # 2048 points: three objects plus background, partial overlap from 20% dropout in the second cloud
    spec = SyntheticSceneSpec(object_count=3, points_per_object=512, background_points=512,
                              max_translation=1.0, max_rotation=0.2, dropout=0.2)
    base = SolverConfig(max_iters=1000)
    without = SolverConfig(max_iters=1000, loss=LossConfig(use_backward_flow=False))
    pairs = []
    for seed in range(10):
        s1, s2, gt = generate_synthetic_scene(spec, seed)
        off = epe(solve_flow(s1, s2, without)[0], gt)
        on = epe(solve_flow(s1, s2, base)[0], gt)
        pairs.append((off, on))
        print(f"  scene {seed}: EPE without {off:.4f}, with {on:.4f}")
    off, on = np.array(pairs).T
    improved = int(np.sum(on < off))
    mean_change = float(np.mean(on - off))
    ok = mean_change <= 1e-3 and improved >= 7
    assert report(6, "backward flow helps on partial overlap", ok,
                  f"mean EPE {off.mean():.4f} -> {on.mean():.4f} (change {mean_change:+.4f} <= +1e-3), "
                  f"improved on {improved}/10 scenes (>= 7)")


def _timed_solve(n, iters):
    spec = SyntheticSceneSpec(object_count=4, points_per_object=n // 4, max_translation=1.0, extent=40.0)
    s1, s2, _ = generate_synthetic_scene(spec, 0)
    cfg = SolverConfig(arch=ArchConfig(4, 64), max_iters=iters, patience=iters)
    t0 = time.perf_counter()
    _, _, stats = solve_flow(s1, s2, cfg)
    return time.perf_counter() - t0, stats.iterations_run


@pytest.mark.slow
def test_c07_linear_scaling(report):
    t_start = time.perf_counter()
    t8, it8 = _timed_solve(8192, 500)
    t32, it32 = _timed_solve(32768, 500)
    total = time.perf_counter() - t_start
    ratio = t32 / t8
    ok = it8 == it32 == 500 and ratio <= 6.0 and total < 600.0
    assert report(7, "runtime linear in point count", ok,
                  f"500 iterations: 8k points {t8:.1f}s, 32k points {t32:.1f}s, ratio {ratio:.2f} (<= 6), "
                  f"total {total:.0f}s (< 600s)")


@pytest.mark.slow
def test_c08_integration_consistency(report):
    spec = SyntheticSceneSpec(object_count=1, points_per_object=1024, min_translation=0.3, max_translation=0.3)
    clouds, flows = generate_synthetic_sequence(spec, 5, seed=8)
    t0 = time.perf_counter()
    sol = solve_sequence(clouds, SolverConfig())
    total = integrate_flow(sol, 0, 5)
    elapsed = time.perf_counter() - t0
    step = flows[1].vectors[0]
    err = epe(total, flows[5])
    bound = 0.05 * 5 * np.linalg.norm(step)
    single = all(integrate_flow(sol, m, m + 1).vectors.tobytes() == sol.pairwise_flows[m].vectors.tobytes()
                 for m in range(5))
    # the stored pairwise flow is also what the saved network produces on its source frame
    single &= all(forward(sol.network(m), clouds[m].points)[0].tobytes() == sol.pairwise_flows[m].vectors.tobytes()
                  for m in range(5))
    ok = err <= bound and single and elapsed < 300.0
    assert report(8, "Euler integration over 5 intervals", ok,
                  f"EPE of F(0->5) vs 5t {err:.4f} m (<= {bound:.3f}), single-interval bit-equal={single}, "
                  f"{elapsed:.0f}s (< 300s)")


def test_c09_estimate_determinism(report, tmp_path):
    main(["synth", "--objects", "1", "--points-per-object", "256", "--max-translation", "0.3",
          "--seed", "1", "--out-dir", str(tmp_path)])
    blobs = []
    for name in ("run1.txt", "run2.txt"):
        code = main(["estimate", str(tmp_path / "pc1.xyz"), str(tmp_path / "pc2.xyz"),
                     "--out-flow", str(tmp_path / name), "--seed", "7", "--max-iters", "200"])
        assert code == 0
        blobs.append((tmp_path / name).read_bytes())
    ok = blobs[0] == blobs[1]
    assert report(9, "estimate is byte-deterministic", ok,
                  f"two runs with --seed 7 produced {'identical' if ok else 'different'} flow files "
                  f"({len(blobs[0])} bytes)")


@pytest.mark.xfail(strict=True, reason="116,355 does not match the layer shapes 3-128-...-128-3, "
                                       "which sum to 116,483; see the decisions ledger")
def test_c10_parameter_count(report):
    count = ArchConfig().param_count
    by_shape = 3 * 128 + 128 + 7 * (128 * 128 + 128) + 128 * 3 + 3
    ok = count == 116_355
    assert report(10, "default parameter count", ok,
                  f"reported {count}, expected 116,355 (shape arithmetic gives {by_shape}; about 116k either way)")
