"""Command-line interface: dataset generation, training, inference,
evaluation, and gradient checking.

Exit codes: 0 success, 1 numeric/validation failure, 2 usage error.
"""
from __future__ import annotations

import argparse
import json
import sys
import time
from pathlib import Path

import numpy as np

from .errors import ConfigError, FormatError, InputError, NumericError
from .metrics import metrics_report
from .model import Model, ModelConfig, count_match, load_checkpoint
from .octree import build_octree
from .pointcloud import read_points, write_pcb, write_points
from .shapes import parse_shape, sample_surface, shape_to_dict
from .train import FileDataset, TrainConfig, train_loop
from . import pointcloud

RUN_CONFIG_KEYS = {
    "max_depth", "full_depth", "channels", "norm", "group_size", "blocks",
    "lr0", "weight_decay", "batch_size", "total_steps", "poly_power", "seed",
    "task_mix", "noise_levels", "augment", "data", "out",
}


def load_run_config(path) -> dict:
    """Schema-check a JSON run config; unknown keys are rejected."""
    try:
        doc = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON: {exc}") from exc
    if not isinstance(doc, dict):
        raise ConfigError(f"{path}: run config must be a JSON object")
    unknown = set(doc) - RUN_CONFIG_KEYS
    if unknown:
        raise ConfigError(f"{path}: unknown config keys {sorted(unknown)}")
    return doc


def cmd_gen_data(args) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    shapes = [parse_shape(s) for s in args.shapes.split(",")]
    entries = []
    sample_id = 0
    for rep in range(args.count):
        for spec in shapes:
            seed = args.seed + sample_id
            dense = sample_surface(spec, args.dense, seed)
            sparse = sample_surface(spec, args.sparse, seed + 10_000_019)
            from .pointcloud import normalize_unit_cube

            dense, (scale, offset) = normalize_unit_cube(dense)
            sparse = np.clip(sparse * scale + offset, -1 + 1e-6, 1 - 1e-6)
            dense_file = f"sample_{sample_id:04d}_dense.pcb"
            sparse_file = f"sample_{sample_id:04d}_sparse.pcb"
            write_pcb(out / dense_file, dense)
            write_pcb(out / sparse_file, sparse)
            entries.append(
                {
                    "id": sample_id,
                    "shape": spec.kind,
                    "params": shape_to_dict(spec)["params"],
                    "dense_file": dense_file,
                    "sparse_file": sparse_file,
                    "seed": seed,
                }
            )
            sample_id += 1
    manifest = {
        "version": 1,
        "noise_levels": [float(v) for v in args.noise_levels.split(",")],
        "samples": entries,
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    print(f"wrote {sample_id} sample pairs to {out}")
    return 0


def cmd_train(args) -> int:
    doc = load_run_config(args.config) if args.config else {}
    channels = doc.get("channels") or [int(c) for c in args.channels.split(",")]
    cfg = ModelConfig(
        doc.get("max_depth", args.depth),
        doc.get("full_depth", args.full_depth),
        tuple(int(c) for c in channels),
        norm=doc.get("norm", args.norm),
        group_size=doc.get("group_size", 8),
        blocks=doc.get("blocks", args.blocks),
    )
    tcfg = TrainConfig(
        lr0=float(doc.get("lr0", args.lr)),
        weight_decay=float(doc.get("weight_decay", 0.05)),
        batch_size=int(doc.get("batch_size", args.batch)),
        total_steps=int(doc.get("total_steps", args.steps)),
        poly_power=float(doc.get("poly_power", 0.9)),
        seed=int(doc.get("seed", args.seed)),
    )
    dataset_kwargs = {}
    if "task_mix" in doc:
        dataset_kwargs["task_mix"] = float(doc["task_mix"])
    if "noise_levels" in doc:
        dataset_kwargs["noise_levels"] = tuple(float(v) for v in doc["noise_levels"])
    if "augment" in doc:
        dataset_kwargs["augment"] = bool(doc["augment"])
    data_path = doc.get("data", args.data)
    out_path = doc.get("out", args.out)
    if data_path is None or out_path is None:
        raise ConfigError("train requires --data and --out (flags or config file)")
    dataset = FileDataset(
        data_path,
        patch_size=512 if args.patch_mode == "on" else 0,
        **dataset_kwargs,
    )
    model = Model.init(cfg, seed=tcfg.seed)
    log_path = args.log or (str(out_path) + ".log.jsonl")
    with open(log_path, "w") as log_file:
        train_loop(dataset, model, tcfg, log_file=log_file, ckpt_path=out_path)
    print(f"trained {tcfg.total_steps} steps; checkpoint at {out_path}, log at {log_path}")
    return 0


def cmd_infer(args) -> int:
    model, _ = load_checkpoint(args.ckpt)
    pts = read_points(getattr(args, "in"))
    if len(pts) < 1:
        raise InputError("inference input must contain at least one point")
    t0 = time.perf_counter()
    pts_n, transform = pointcloud.normalize_unit_cube(pts)
    oct = build_octree(pts_n, model.cfg.max_depth, model.cfg.full_depth)
    t_fwd0 = time.perf_counter()
    result = model.infer(oct, [pts_n])
    t_fwd1 = time.perf_counter()
    out = pointcloud.denormalize(result.points, transform)
    if args.target_count is not None:
        if args.target_count == len(out):
            print(f"target count {args.target_count} matches output; no resampling")
        else:
            out = count_match(out, args.target_count, seed=0)
    write_points(args.out, out)
    t1 = time.perf_counter()
    print(f"forward time: {t_fwd1 - t_fwd0:.3f} s")
    print(f"end-to-end time: {t1 - t0:.3f} s")
    print(f"wrote {len(out)} points to {args.out}")
    if result.degenerate:
        print("warning: degenerate decode (emitted cell centers)")
    return 0


def cmd_eval(args) -> int:
    pred = read_points(args.pred)
    wanted = set(args.metrics.split(","))
    unknown = wanted - {"cd", "hd", "p2f"}
    if unknown:
        raise ConfigError(f"unknown metrics {sorted(unknown)}")
    ref = read_points(args.ref) if args.ref else None
    surface = parse_shape(args.surface) if args.surface else None
    if ("cd" in wanted or "hd" in wanted) and ref is None:
        raise ConfigError("cd/hd require --ref")
    if "p2f" in wanted and ref is None and surface is None:
        raise ConfigError("p2f requires --surface or a dense --ref")
    report = metrics_report(pred, ref=ref, surface=surface)
    report = {k: v for k, v in report.items()
              if k in wanted or k in ("n_pred", "n_ref", "conventions")}
    print(json.dumps(report, sort_keys=True))
    return 0


def cmd_gradcheck(args) -> int:
    from . import gradcheck

    if args.corrupt_backward:
        # Test fixture: break one backward rule to prove the checker detects it.
        from . import autodiff as ad

        orig_relu = ad.relu

        def bad_relu(a):
            mask = a.data > 0

            def bw(g):
                if a.grad is None:
                    a.grad = np.zeros_like(a.data)
                a.grad += g * mask * 1.5  # wrong scale
            return ad.Value(a.data * mask, (a,), bw)

        ad.relu = bad_relu
        from . import layers as _layers
        _layers.ad.relu = bad_relu
    reports = gradcheck.run_all(seed=args.seed, toy_depth=args.toy_depth)
    worst = 0.0
    ok = True
    for rep in reports:
        status = "PASS" if rep["pass"] else "FAIL"
        print(
            f"{status} {rep['layer']:18s} max_rel_err={rep['max_rel_err']:.3e} "
            f"checked={rep['checked']} excluded={rep['excluded']}"
        )
        worst = max(worst, rep["max_rel_err"])
        ok = ok and rep["pass"]
    print(f"overall max relative error: {worst:.3e}")
    return 0 if ok else 1


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="octunet",
        description="Octree U-Net for joint point cloud upsampling and cleaning",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="generate an analytic-surface dataset")
    g.add_argument("--out", required=True)
    g.add_argument("--shapes", default="sphere,torus,box,superellipsoid")
    g.add_argument("--count", type=int, default=1, help="pairs per shape")
    g.add_argument("--dense", type=int, default=50000)
    g.add_argument("--sparse", type=int, default=2000)
    g.add_argument("--noise-levels", default="0.01,0.02")
    g.add_argument("--seed", type=int, default=0)
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", help="train a model on a generated dataset")
    t.add_argument("--data", default=None)
    t.add_argument("--out", default=None, help="checkpoint output path")
    t.add_argument("--config", default=None, help="JSON run config (overrides flags)")
    t.add_argument("--depth", type=int, default=6)
    t.add_argument("--full-depth", type=int, default=2)
    t.add_argument("--channels", default="32,32,16,16,8")
    t.add_argument("--blocks", type=int, default=2)
    t.add_argument("--steps", type=int, default=1000)
    t.add_argument("--batch", type=int, default=8)
    t.add_argument("--lr", type=float, default=5e-4)
    t.add_argument("--seed", type=int, default=0)
    t.add_argument("--norm", choices=("gn", "bn"), default="gn")
    t.add_argument("--patch-mode", choices=("off", "on"), default="off")
    t.add_argument("--log", default=None)
    t.set_defaults(func=cmd_train)

    i = sub.add_parser("infer", help="run the network on a point cloud file")
    i.add_argument("--ckpt", required=True)
    i.add_argument("--in", required=True)
    i.add_argument("--task", choices=("upsample", "clean"), default="clean")
    i.add_argument("--out", required=True)
    i.add_argument("--target-count", type=int, default=None)
    i.set_defaults(func=cmd_infer)

    e = sub.add_parser("eval", help="compute CD/HD/P2F between clouds")
    e.add_argument("--pred", required=True)
    e.add_argument("--ref", default=None)
    e.add_argument("--surface", default=None)
    e.add_argument("--metrics", default="cd,hd")
    e.set_defaults(func=cmd_eval)

    c = sub.add_parser("gradcheck", help="finite-difference check of all layers")
    c.add_argument("--seed", type=int, default=0)
    c.add_argument("--toy-depth", type=int, default=4)
    c.add_argument("--corrupt-backward", action="store_true", help=argparse.SUPPRESS)
    c.set_defaults(func=cmd_gradcheck)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, FormatError, InputError, NumericError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
