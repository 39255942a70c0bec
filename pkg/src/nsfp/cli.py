"""Command-line entry point: ``nsfp {estimate,eval,synth,integrate,gradcheck,bench}``.

Exit codes: 0 success, 1 usage or validation error, 2 I/O error,
3 numerical failure (divergence, undefined metric, failed gradient check).
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
import time
from dataclasses import replace

import numpy as np

from nsfp.errors import DimensionError, DivergenceError, FormatError, UndefinedMetricError, ValidationError
from nsfp.gradcheck import objective_gradcheck
from nsfp.integrate import accumulate, read_manifest, save_sequence, solve_sequence
from nsfp.loss import LossConfig
from nsfp.metrics import aggregate, evaluate
from nsfp.net import ArchConfig
from nsfp.optim import SolverConfig, solve_batch, solve_flow
from nsfp.pointcloud import (
    FlowField,
    PointCloud,
    SyntheticSceneSpec,
    generate_synthetic_scene,
    load_cloud,
    load_flow,
    save_cloud,
    save_flow,
)

EXIT_OK, EXIT_USAGE, EXIT_IO, EXIT_NUMERIC = 0, 1, 2, 3

log = logging.getLogger("nsfp")

# key -> (section, type); sections map onto ArchConfig, LossConfig, SolverConfig
CONFIG_KEYS = {
    "hidden_layers": ("arch", int),
    "hidden_units": ("arch", int),
    "activation": ("arch", str),
    "truncation_dist": ("loss", float),
    "bidirectional": ("loss", "bool"),
    "use_backward_flow": ("loss", "bool"),
    "detach_forward_in_backward_term": ("loss", "bool"),
    "learning_rate": ("solver", float),
    "max_iters": ("solver", int),
    "patience": ("solver", int),
    "rel_tol": ("solver", float),
    "abs_tol": ("solver", float),
    "init_scheme": ("solver", str),
    "seed": ("solver", int),
}


class UsageError(Exception):
    pass


def _bool(text):
    low = str(text).strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise UsageError(f"not a boolean: {text!r}")


def _convert(key, value):
    kind = CONFIG_KEYS[key][1]
    try:
        return _bool(value) if kind == "bool" else kind(value)
    except ValueError:
        raise UsageError(f"bad value for {key}: {value!r}") from None


def read_config_file(path):
    """Parse ``key = value`` lines; ``#`` starts a comment. Unknown keys are rejected."""
    out = {}
    with open(path) as fh:
        for lineno, raw in enumerate(fh, start=1):
            text = raw.split("#", 1)[0].strip()
            if not text:
                continue
            if "=" not in text:
                raise UsageError(f"{path}:{lineno}: expected key=value, got {text!r}")
            key, value = (s.strip() for s in text.split("=", 1))
            if key not in CONFIG_KEYS:
                raise UsageError(f"{path}:{lineno}: unknown config key {key!r}")
            out[key] = _convert(key, value)
    return out


def build_config(values):
    """Turn a flat mapping of config keys into a :class:`SolverConfig`."""
    unknown = set(values) - set(CONFIG_KEYS)
    if unknown:
        raise UsageError(f"unknown config keys: {sorted(unknown)}")
    sections = {"arch": {}, "loss": {}, "solver": {}}
    for key, value in values.items():
        sections[CONFIG_KEYS[key][0]][key] = value
    return SolverConfig(
        arch=ArchConfig(**sections["arch"]),
        loss=LossConfig(**sections["loss"]),
        **sections["solver"],
    )


def config_defaults():
    cfg = SolverConfig()
    out = {}
    for key, (section, _) in CONFIG_KEYS.items():
        holder = {"arch": cfg.arch, "loss": cfg.loss, "solver": cfg}[section]
        out[key] = getattr(holder, key)
    return out


def resolve_config(args):
    values = {}
    if getattr(args, "config", None):
        values.update(read_config_file(args.config))
    for key in CONFIG_KEYS:
        v = getattr(args, key, None)
        if v is not None:
            values[key] = v
    cfg = build_config(values)
    return replace(cfg, verbose=True) if getattr(args, "verbose", False) else cfg


def _add_config_flags(p):
    defaults = config_defaults()
    p.add_argument("--config", help="key=value config file; flags override it (default: none)")
    for key, (_, kind) in CONFIG_KEYS.items():
        flag = "--" + key.replace("_", "-")
        conv = _bool if kind == "bool" else kind
        p.add_argument(flag, dest=key, type=conv, default=None,
                       help=f"(default: {defaults[key]})")


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _write_json(path, payload):
    text = json.dumps(payload, indent=2, sort_keys=True)
    if path in (None, "-"):
        print(text)
    else:
        with open(path, "w") as fh:
            fh.write(text + "\n")


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------


def cmd_estimate(args):
    cfg = resolve_config(args)
    s1 = load_cloud(args.source, args.format)
    s2 = load_cloud(args.target, args.format)
    flow, params, stats = solve_flow(s1, s2, cfg)
    save_flow(flow, args.out_flow)
    if args.out_stats:
        payload = stats.to_dict()
        payload["param_count"] = params.param_count
        _write_json(args.out_stats, payload)
    if args.out_params:
        with open(args.out_params, "wb") as fh:
            fh.write(params.to_bytes())
    return EXIT_OK


def cmd_eval(args):
    est = load_flow(args.est_flow)
    gt = load_flow(args.gt_flow)
    if len(est) != len(gt):
        raise DimensionError(f"{args.est_flow} has {len(est)} vectors, {args.gt_flow} has {len(gt)}")
    _write_json(args.out_json, evaluate(est, gt).to_dict())
    return EXIT_OK


def cmd_synth(args):
    spec = SyntheticSceneSpec(
        object_count=args.objects,
        points_per_object=args.points_per_object,
        background_points=args.background,
        max_translation=args.max_translation,
        min_translation=args.min_translation,
        max_rotation=args.max_rotation,
        noise_sigma=args.noise,
        extent=args.extent,
        dropout=args.dropout,
    )
    s1, s2, gt = generate_synthetic_scene(spec, args.seed)
    os.makedirs(args.out_dir, exist_ok=True)
    save_cloud(s1, os.path.join(args.out_dir, "pc1.xyz"))
    save_cloud(s2, os.path.join(args.out_dir, "pc2.xyz"))
    save_flow(gt, os.path.join(args.out_dir, "flow.txt"))
    return EXIT_OK


def cmd_integrate(args):
    cfg = resolve_config(args)
    try:
        rows, _ = read_manifest(args.manifest)
        paths = [row[0] for row in rows]
    except FormatError as exc:
        raise UsageError(str(exc)) from None
    clouds = [load_cloud(p, frame_id=m) for m, p in enumerate(paths)]
    target = len(clouds) - 1 if args.target_frame is None else args.target_frame
    if not 0 <= target < len(clouds):
        raise UsageError(f"target frame {target} outside [0, {len(clouds) - 1}]")
    if len(clouds) == 1:
        save_cloud(clouds[0], args.out_cloud, "xyz_text")
        return EXIT_OK
    solution = solve_sequence(clouds, cfg)
    if args.save_solution:
        save_sequence(solution, args.save_solution)
    save_cloud(accumulate(solution, target), args.out_cloud, "xyz_text")
    return EXIT_OK


def cmd_gradcheck(args):
    if args.trials < 1:
        raise UsageError("--trials must be >= 1")
    if args.tolerance < 0:
        raise UsageError("--tolerance must be non-negative")
    rng = np.random.default_rng(args.seed)
    report = objective_gradcheck(rng, args.trials, max_layers=args.hidden_layers,
                                 max_units=args.hidden_units, max_points=args.points, step=args.step)
    ok = report["max_rel_error"] <= args.tolerance
    report["tolerance"] = args.tolerance
    report["passed"] = ok
    _write_json(args.out_json, report)
    return EXIT_OK if ok else EXIT_NUMERIC


def _load_pair(path):
    """A pair is either a directory with pc1.xyz/pc2.xyz[/flow.txt] or an .npz with pos1/pos2[/gt]."""
    if path.endswith(".npz"):
        with np.load(path) as data:
            gt = data["gt"] if "gt" in data else None
            return PointCloud(data["pos1"]), PointCloud(data["pos2"]), (FlowField(gt) if gt is not None else None)
    s1 = load_cloud(os.path.join(path, "pc1.xyz"))
    s2 = load_cloud(os.path.join(path, "pc2.xyz"))
    gt_path = os.path.join(path, "flow.txt")
    return s1, s2, (load_flow(gt_path) if os.path.exists(gt_path) else None)


def list_pairs(dataset_dir):
    if not os.path.isdir(dataset_dir):
        raise FileNotFoundError(f"dataset directory not found: {dataset_dir}")
    names = sorted(os.listdir(dataset_dir))
    out = []
    for name in names:
        full = os.path.join(dataset_dir, name)
        if name.endswith(".npz") or (os.path.isdir(full) and os.path.exists(os.path.join(full, "pc1.xyz"))):
            out.append(full)
    if not out:
        raise UsageError(f"no pairs found in {dataset_dir}")
    return out


def cmd_bench(args):
    cfg = resolve_config(args)
    paths = list_pairs(args.dataset_dir)
    rng = np.random.default_rng(cfg.seed)
    pairs, gts = [], []
    for path in paths:
        s1, s2, gt = _load_pair(path)
        if args.points:
            s1, idx = s1.subsample(args.points, rng)
            s2, _ = s2.subsample(args.points, rng)
            if gt is not None:
                gt = FlowField(gt.vectors[idx])
        pairs.append((s1, s2))
        gts.append(gt)
    t0 = time.perf_counter()
    results = solve_batch(pairs, cfg, parallelism=args.jobs)
    log.info("bench: %d pairs in %.2fs", len(pairs), time.perf_counter() - t0)
    records = []
    failed = 0
    with open(args.out_csv, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["pair", "points", "seconds", "epe", "acc5", "acc10", "angle"])
        for path, (s1, _), gt, res in zip(paths, pairs, gts, results):
            name = os.path.basename(path)
            if not res.ok:
                failed += 1
                log.error("pair %s failed: %s", name, res.error)
                writer.writerow([name, len(s1), "", "", "", "", ""])
                continue
            row = [name, len(s1), f"{res.stats.wall_time:.6f}"]
            if gt is not None:
                try:
                    m = evaluate(res.flow, gt)
                    records.append(m)
                    row += [f"{m.epe_m:.6f}", f"{m.acc5_pct:.4f}", f"{m.acc10_pct:.4f}", f"{m.angle_rad:.6f}"]
                except UndefinedMetricError:
                    row += ["", "", "", ""]
            else:
                row += ["", "", "", ""]
            writer.writerow(row)
    if args.summary and records:
        _write_json(args.summary, aggregate(records))
    return EXIT_NUMERIC if failed else EXIT_OK


# ---------------------------------------------------------------------------


def build_parser():
    parser = _Parser(prog="nsfp", description="Runtime scene flow estimation with a coordinate-MLP prior.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log per-iteration losses (default: off)")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("estimate", help="estimate flow from SOURCE to TARGET")
    p.add_argument("source")
    p.add_argument("target")
    p.add_argument("--format", choices=["xyz_text", "ply_ascii", "raw_f32le"], default=None,
                   help="input format (default: from extension)")
    p.add_argument("--out-flow", required=True, help="flow file, one 'fx fy fz' line per source point")
    p.add_argument("--out-stats", default=None, help="solver statistics JSON (default: none)")
    p.add_argument("--out-params", default=None, help="binary network parameters (default: none)")
    _add_config_flags(p)
    p.set_defaults(func=cmd_estimate)

    p = sub.add_parser("eval", help="score an estimated flow against ground truth")
    p.add_argument("est_flow")
    p.add_argument("gt_flow")
    p.add_argument("--out-json", default="-", help="metrics JSON path (default: stdout)")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("synth", help="write a synthetic rigid scene with ground-truth flow")
    spec = SyntheticSceneSpec()
    p.add_argument("--objects", type=int, default=spec.object_count, help=f"(default: {spec.object_count})")
    p.add_argument("--points-per-object", type=int, default=spec.points_per_object,
                   help=f"(default: {spec.points_per_object})")
    p.add_argument("--background", type=int, default=spec.background_points, help=f"(default: {spec.background_points})")
    p.add_argument("--max-translation", type=float, default=spec.max_translation, help=f"(default: {spec.max_translation})")
    p.add_argument("--min-translation", type=float, default=spec.min_translation, help=f"(default: {spec.min_translation})")
    p.add_argument("--max-rotation", type=float, default=spec.max_rotation, help=f"radians (default: {spec.max_rotation})")
    p.add_argument("--noise", type=float, default=spec.noise_sigma, help=f"sigma on the second cloud (default: {spec.noise_sigma})")
    p.add_argument("--extent", type=float, default=spec.extent, help=f"(default: {spec.extent})")
    p.add_argument("--dropout", type=float, default=spec.dropout, help=f"(default: {spec.dropout})")
    p.add_argument("--seed", type=int, default=0, help="(default: 0)")
    p.add_argument("--out-dir", required=True, help="receives pc1.xyz, pc2.xyz, flow.txt")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("integrate", help="solve a sequence and accumulate it into one frame")
    p.add_argument("manifest", help="text file listing one cloud path per line, in frame order")
    p.add_argument("--target-frame", type=int, default=None, help="(default: last frame)")
    p.add_argument("--out-cloud", required=True, help="accumulated cloud, xyz text")
    p.add_argument("--save-solution", default=None, help="directory for clouds, networks and manifest (default: none)")
    _add_config_flags(p)
    p.set_defaults(func=cmd_integrate)

    p = sub.add_parser("gradcheck", help="compare analytic and finite-difference gradients of the objective")
    p.add_argument("--trials", type=int, default=20, help="(default: 20)")
    p.add_argument("--tolerance", type=float, default=1e-4, help="max relative error (default: 1e-4)")
    p.add_argument("--hidden-layers", type=int, default=2, help="largest depth sampled (default: 2)")
    p.add_argument("--hidden-units", type=int, default=8, help="largest width sampled (default: 8)")
    p.add_argument("--points", type=int, default=10, help="largest cloud size sampled (default: 10)")
    p.add_argument("--step", type=float, default=1e-6, help="central-difference step (default: 1e-6)")
    p.add_argument("--seed", type=int, default=0, help="(default: 0)")
    p.add_argument("--out-json", default="-", help="report path (default: stdout)")
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("bench", help="solve every pair in a dataset directory and write a CSV")
    p.add_argument("dataset_dir", help="subdirectories with pc1.xyz, pc2.xyz[, flow.txt] or .npz files (pos1, pos2, gt)")
    p.add_argument("--points", type=int, default=None, help="random subsample size per cloud (default: all points)")
    p.add_argument("--jobs", type=int, default=1, help="parallel workers (default: 1)")
    p.add_argument("--out-csv", required=True)
    p.add_argument("--summary", default=None, help="mean/std metrics JSON (default: none)")
    _add_config_flags(p)
    p.set_defaults(func=cmd_bench)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(name)s: %(message)s")
    try:
        return args.func(args)
    except (UsageError, ValidationError, FormatError, DimensionError, ValueError) as exc:
        print(f"nsfp: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except OSError as exc:
        where = f": {exc.filename}" if getattr(exc, "filename", None) else ""
        print(f"nsfp: I/O error{where}: {exc.strerror or exc}", file=sys.stderr)
        return EXIT_IO
    except (DivergenceError, UndefinedMetricError, ArithmeticError) as exc:
        print(f"nsfp: numerical error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
