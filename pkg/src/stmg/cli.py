"""Command-line entry point: ``stmg <command> [options]``.

Exit codes: 0 success, 2 usage error, 3 data error, 4 numeric failure.
"""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import dataclass, fields, replace
from pathlib import Path

import numpy as np
import torch

from .detection import HeadConfig, detections_to_csv, evaluate_map, parse_detections
from .engine import bench_to_csv, bench_update, infer_detections
from .errors import DataError, NumericError
from .events import (GroundTruth, SceneSpec, events_to_csv, generate_synthetic, label_times,
                     labels_to_csv, random_scene, read_events, read_labels, window_slice)
from .graph import GraphConfig, build_graph
from .network import (Edges, ModelConfig, ablation_config, backbone_forward, init_model,
                      load_checkpoint, node_features, embed_nodes, param_count, smvl_block, coerce)
from .pca import power_iteration_pca, rasterize, to_rgb, write_image
from .training import TrainConfig, load_manifest, make_samples, train

EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 2, 3, 4


class UsageError(Exception):
    pass


@dataclass
class RunConfig:
    """Train options settable from a ``key = value`` config file."""

    seed: int = 0
    steps: int = 2000
    batch_size: int = 4
    lr: float = 4e-4
    weight_decay: float = 1e-4
    val_every: int = 250
    val_fraction: float = 0.2
    num_classes: int = 2
    window_ms: int = 100
    max_events_per_ms: int = 0
    pool_voxel: int = 2
    no_ssl: bool = False
    no_mvl: bool = False
    ssl_kernel: str = "spline2d"
    mvl_agg: str = "attention"
    no_motion_features: bool = False
    no_augment: bool = False
    channels: tuple = (16, 16, 32, 32, 64, 64, 128, 128)
    head_dim: int = 64


def read_run_config(path) -> dict:
    kinds = {f.name: f for f in fields(RunConfig)}
    out = {}
    for lineno, line in enumerate(Path(path).read_text().splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"{path}:{lineno}: expected key = value")
        k, v = (s.strip() for s in line.split("=", 1))
        k = k.replace("-", "_")
        if k not in kinds:
            raise UsageError(f"{path}:{lineno}: unknown config key {k!r}")
        try:
            out[k] = coerce(kinds[k], v)
        except ValueError as exc:
            raise UsageError(f"{path}:{lineno}: {exc}") from None
    return out


def resolve_run_config(args) -> RunConfig:
    """Defaults < config file < explicit flags."""
    values = {}
    if getattr(args, "config", None):
        values.update(read_run_config(args.config))
    for f in fields(RunConfig):
        v = getattr(args, f.name, None)
        if v is not None and v is not False:
            values[f.name] = v
    for kv in getattr(args, "set", None) or []:
        if "=" not in kv:
            raise UsageError(f"--set expects key=value, got {kv!r}")
        k, v = kv.split("=", 1)
        k = k.strip().replace("-", "_")
        kinds = {f.name: f for f in fields(RunConfig)}
        if k not in kinds:
            raise UsageError(f"unknown config key {k!r}")
        values[k] = coerce(kinds[k], v.strip())
    return RunConfig(**values)


# ---------------------------------------------------------------------------
# commands


def cmd_generate(args) -> int:
    out = Path(args.out)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise DataError(f"cannot create {out}: {exc}") from None
    if args.random_scenes:
        rng = np.random.default_rng(args.seed)
        lines = []
        total = 0
        for k in range(args.random_scenes):
            scene = random_scene(rng, duration_us=args.duration_ms * 1000)
            d = out / f"seq_{k:04d}"
            d.mkdir(exist_ok=True)
            n = _write_scene(scene, args.seed * 100003 + k, d)
            total += n
            lines.append(f"{d.name}/events.csv,{d.name}/labels.csv")
        (out / "manifest.txt").write_text("\n".join(lines) + "\n")
        print(f"wrote {args.random_scenes} sequences, {total} events, manifest {out / 'manifest.txt'}")
        return 0
    if not args.scene:
        raise UsageError("generate needs --scene or --random-scenes")
    try:
        spec = json.loads(Path(args.scene).read_text())
        scene = SceneSpec.from_dict(spec)
    except (OSError, ValueError, TypeError) as exc:
        raise DataError(f"invalid scene spec: {exc}") from None
    _write_scene(scene, args.seed, out, verbose=True)
    return 0


def _write_scene(scene: SceneSpec, seed: int, out: Path, verbose=False) -> int:
    try:
        stream, gt = generate_synthetic(scene, seed)
    except ValueError as exc:
        raise DataError(str(exc)) from None
    try:
        (out / "events.csv").write_text(events_to_csv(stream))
        (out / "labels.csv").write_text(labels_to_csv(gt))
    except OSError as exc:
        raise DataError(f"cannot write to {out}: {exc}") from None
    if verbose:
        density = len(stream) / (scene.duration_us / 1000)
        print(f"events {len(stream)}")
        print(f"density {density:.3f} events/ms")
        print(f"labels {len(gt)}")
    return len(stream)


def model_config_from_run(rc: RunConfig) -> ModelConfig:
    base = ModelConfig(num_classes=rc.num_classes, channels=tuple(rc.channels), head_dim=rc.head_dim)
    return ablation_config(base, ssl=not rc.no_ssl, mvl=not rc.no_mvl, ssl_kernel=rc.ssl_kernel,
                           mvl_agg=rc.mvl_agg, motion_features=not rc.no_motion_features)


def cmd_train(args) -> int:
    rc = resolve_run_config(args)
    if rc.no_ssl and rc.no_mvl:
        raise UsageError("--no-ssl together with --no-mvl leaves no backbone")
    if rc.window_ms <= 0 or rc.pool_voxel < 1 or rc.max_events_per_ms < 0:
        raise UsageError("window, voxel and density cap must be positive")
    try:
        mcfg = model_config_from_run(rc)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    seqs = load_manifest(args.manifest)
    if args.val_manifest:
        val_seqs = load_manifest(args.val_manifest)
        train_seqs = seqs
    else:
        n_val = int(round(rc.val_fraction * len(seqs)))
        train_seqs, val_seqs = seqs[: len(seqs) - n_val], seqs[len(seqs) - n_val:]
    window = rc.window_ms * 1000
    cap = rc.max_events_per_ms or None
    tr = make_samples(train_seqs, window, cap, rc.seed)
    va = make_samples(val_seqs, window, cap, rc.seed + 7919)
    gcfg = GraphConfig(window=window)
    head = HeadConfig(pool_voxel=rc.pool_voxel)
    tcfg = TrainConfig(steps=rc.steps, batch_size=rc.batch_size, val_every=rc.val_every,
                       augment=not rc.no_augment, max_lr=rc.lr, weight_decay=rc.weight_decay,
                       seed=rc.seed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    print(f"model parameters {param_count(init_model(mcfg))}")
    print(f"train samples {len(tr)}, validation samples {len(va)}")
    res = train(tr, va, mcfg, tcfg, gcfg, head, out_dir=out, progress=print)
    print(f"best validation mAP@50 {res.best_map:.4f} at step {res.best_step}")
    return 0


def _load_model(path):
    model, extra = load_checkpoint(path)
    gcfg = GraphConfig(window=int(extra.get("graph_window", 100000)),
                       edge_direction=extra.get("graph_direction", "causal"))
    head = HeadConfig(w0=float(extra.get("head_w0", 64)), h0=float(extra.get("head_h0", 64)),
                      pool_voxel=int(extra.get("head_pool_voxel", 2)),
                      nms_iou=float(extra.get("head_nms_iou", 0.5)),
                      score_threshold=float(extra.get("head_score_threshold", 0.1)),
                      detect_horizon=int(extra.get("head_detect_horizon", 10000)))
    return model, gcfg, head


def cmd_infer(args) -> int:
    model, gcfg, head = _load_model(args.checkpoint)
    if args.pool_voxel:
        head = replace(head, pool_voxel=args.pool_voxel)
    if args.window_ms:
        gcfg = replace(gcfg, window=args.window_ms * 1000)
    stream = read_events(args.events)
    if args.labels:
        times = read_labels(args.labels).times().tolist()
    elif len(stream):
        times = label_times(int(stream.t[-1]), args.label_hz)
    else:
        times = []
    if args.double:
        model = model.to(torch.float64)
    dets = infer_detections(model, stream, times, gcfg, head, args.mode)
    text = detections_to_csv(dets)
    if args.out:
        Path(args.out).write_text(text)
        print(f"{sum(len(d) for d in dets.values())} detections over {len(times)} label times -> {args.out}")
    else:
        sys.stdout.write(text)
    return 0


def cmd_eval(args) -> int:
    try:
        dets = parse_detections(Path(args.detections).read_text())
    except OSError as exc:
        raise DataError(str(exc)) from None
    gt = read_labels(args.labels)
    res = evaluate_map(dets, gt, num_classes=args.num_classes)
    sys.stdout.write(res.report())
    if args.out_csv:
        Path(args.out_csv).write_text(res.to_csv())
    return 0


def cmd_bench(args) -> int:
    if args.checkpoint:
        model, gcfg, _ = _load_model(args.checkpoint)
    else:
        model = init_model(ModelConfig(), args.seed, torch.float32, bn_stats="random")
    model = model.to(torch.float32)
    sizes = [int(s) for s in args.sizes.split(",")]
    modes = args.modes.split(",")
    for m in modes:
        if m not in ("dense", "serial", "parallel"):
            raise UsageError(f"unknown bench mode {m!r}")
    torch.set_num_threads(args.threads)
    rows = bench_update(sizes, model, modes, n_events=args.events, warmup=args.warmup,
                        dense_events=args.dense_events, seed=args.seed,
                        log=lambda r: print(f"{r.graph_size:>7} {r.mode:<9} median {r.median_ms:9.2f} ms  "
                                            f"p90 {r.p90_ms:9.2f} ms  {r.mflops_per_event:10.2f} MFLOP/ev",
                                            flush=True))
    text = bench_to_csv(rows)
    if args.out:
        Path(args.out).write_text(text)
    else:
        sys.stdout.write(text)
    return 0


def layer_features(ga, model, kind: str, index: int) -> torch.Tensor:
    """Node features after block ``index`` (1-based): the SSL branch, the
    MVL branch or the fused block output."""
    cfg = model.cfg
    if not 1 <= index <= cfg.num_layers:
        raise UsageError(f"layer index must be in 1..{cfg.num_layers}")
    with torch.no_grad():
        h = backbone_forward(ga, model, upto=index - 1)
        out, h_s, h_t = smvl_block(model, index - 1, h, h, Edges.from_graph(ga), return_branches=True)
    pick = {"fused": out, "ssl": h_s, "mvl": h_t}[kind]
    if pick is None:
        raise UsageError(f"the model has no {kind} branch")
    return pick


def cmd_export_features(args) -> int:
    model, gcfg, _ = _load_model(args.checkpoint)
    try:
        kind, idx = args.layer.split(":")
        idx = int(idx)
    except ValueError:
        raise UsageError("--layer expects kind:index, e.g. fused:8") from None
    if kind not in ("ssl", "mvl", "fused"):
        raise UsageError("layer kind must be ssl, mvl or fused")
    stream = read_events(args.events)
    if args.t_end is not None:
        stream = window_slice(stream, args.t_end, gcfg.window)
        t_start = args.t_end - gcfg.window
    else:
        t_start = int(stream.t[0]) if len(stream) else 0
    if len(stream) < 3:
        raise DataError("feature export needs at least 3 nodes")
    ga = build_graph(stream, gcfg, t_start).to_arrays()
    feats = layer_features(ga, model, kind, idx).double().numpy()
    _, proj, _ = power_iteration_pca(feats, 3)
    rgb = to_rgb(proj)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    lines = ["x,y,t,r,g,b"]
    for i in range(ga.num_nodes):
        lines.append(f"{ga.x[i]},{ga.y[i]},{ga.t[i]},{rgb[i, 0]},{rgb[i, 1]},{rgb[i, 2]}")
    out.with_suffix(".csv").write_text("\n".join(lines) + "\n")
    img = rasterize(ga.x, ga.y, rgb, ga.geometry.width, ga.geometry.height)
    path = write_image(img, out.with_suffix(".png"))
    print(f"{ga.num_nodes} nodes -> {out.with_suffix('.csv')} and {path}")
    return 0


# ---------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="stmg", description="Spatiotemporal multigraph detection on event streams.")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate", help="write synthetic moving-rectangle event data")
    g.add_argument("--scene", help="scene spec JSON")
    g.add_argument("--random-scenes", type=int, default=0, help="write N random scenes plus a manifest")
    g.add_argument("--duration-ms", type=int, default=100)
    g.add_argument("--out", required=True)
    g.add_argument("--seed", type=int, default=0)
    g.set_defaults(func=cmd_generate)

    t = sub.add_parser("train", help="train a detector from a manifest")
    t.add_argument("--manifest", required=True)
    t.add_argument("--val-manifest")
    t.add_argument("--out", required=True)
    t.add_argument("--config", help="key = value file; flags override it")
    t.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config key")
    t.add_argument("--seed", type=int)
    t.add_argument("--steps", type=int)
    t.add_argument("--batch-size", type=int)
    t.add_argument("--lr", type=float)
    t.add_argument("--weight-decay", type=float)
    t.add_argument("--val-every", type=int)
    t.add_argument("--val-fraction", type=float)
    t.add_argument("--num-classes", type=int)
    t.add_argument("--no-ssl", action="store_true", help="MVL-only backbone")
    t.add_argument("--no-mvl", action="store_true", help="SSL-only backbone")
    t.add_argument("--ssl-kernel", choices=["spline2d", "spline3d", "gcn"])
    t.add_argument("--mvl-agg", choices=["attention", "uniform", "single-head"])
    t.add_argument("--no-motion-features", action="store_true")
    t.add_argument("--no-augment", action="store_true")
    t.add_argument("--window-ms", type=int, help="graph window (default 100)")
    t.add_argument("--max-events-per-ms", type=int, help="density cap per 1 ms bucket")
    t.add_argument("--pool-voxel", type=int, help="active-region voxel in pixels (default 2)")
    t.set_defaults(func=cmd_train)

    i = sub.add_parser("infer", help="run a checkpoint over an event file")
    i.add_argument("--checkpoint", required=True)
    i.add_argument("--events", required=True)
    i.add_argument("--mode", choices=["dense", "async"], default="dense")
    i.add_argument("--labels", help="take label times from this file")
    i.add_argument("--label-hz", type=float, default=20.0)
    i.add_argument("--window-ms", type=int)
    i.add_argument("--pool-voxel", type=int)
    i.add_argument("--double", action="store_true", help="run in float64")
    i.add_argument("--out")
    i.set_defaults(func=cmd_infer)

    e = sub.add_parser("eval", help="score detections against labels")
    e.add_argument("--detections", required=True)
    e.add_argument("--labels", required=True)
    e.add_argument("--num-classes", type=int)
    e.add_argument("--out-csv")
    e.set_defaults(func=cmd_eval)

    b = sub.add_parser("bench", help="per-event latency: dense vs incremental")
    b.add_argument("--checkpoint")
    b.add_argument("--sizes", default="2000,4000,10000,25000")
    b.add_argument("--modes", default="dense,serial,parallel")
    b.add_argument("--events", type=int, default=100)
    b.add_argument("--warmup", type=int, default=10)
    b.add_argument("--dense-events", type=int, default=10, help="timed events in dense mode")
    b.add_argument("--threads", type=int, default=1)
    b.add_argument("--seed", type=int, default=0)
    b.add_argument("--out")
    b.set_defaults(func=cmd_bench)

    x = sub.add_parser("export-features", help="PCA colouring of node features")
    x.add_argument("--checkpoint", required=True)
    x.add_argument("--events", required=True)
    x.add_argument("--layer", default="fused:8", help="ssl|mvl|fused : block index")
    x.add_argument("--t-end", type=int, help="window end in us (default: whole file)")
    x.add_argument("--out", required=True, help="output path prefix")
    x.set_defaults(func=cmd_export_features)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"stmg {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, OSError) as exc:
        print(f"stmg {args.command}: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NumericError as exc:
        print(f"stmg {args.command}: numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
