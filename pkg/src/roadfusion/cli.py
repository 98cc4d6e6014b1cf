"""Command-line interface.

Subcommands: synth, ground, raster, fuse, vectorize, eval, pipeline,
sweep-frames, density.  Exit codes: 0 success, 2 input error, 3 config
error, 4 internal invariant violation.  Logs go to stderr; results go to
files and stdout.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from .config import PipelineConfig
from .errors import ConfigError, InputError, InternalError, RoadFusionError

logger = logging.getLogger("roadfusion")

CONFIG_FLAGS = (
    ("--grid-cell", "grid_cell", float),
    ("--cluster-radius", "cluster_radius", float),
    ("--min-cluster-size", "min_cluster_size", int),
    ("--sor-k", "sor_k", int),
    ("--sor-n-sigma", "sor_n_sigma", float),
    ("--alpha", "alpha", float),
    ("--eval-cell", "eval_cell", float),
    ("--line-width", "line_width", float),
    ("--cd-threshold", "cd_threshold", float),
    ("--iou-threshold", "iou_threshold", float),
    ("--sync-tolerance", "sync_tolerance", float),
    ("--frames", "frame_count", int),
    ("--jobs", "jobs", int),
    ("--seed", "seed", int),
    ("--intensity-threshold", "intensity_threshold", float),
)


def _add_config_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", type=Path, help="key = value config file")
    for flag, dest, typ in CONFIG_FLAGS:
        p.add_argument(flag, dest=dest, type=typ, default=None)


def _build_config(args: argparse.Namespace) -> PipelineConfig:
    cfg = PipelineConfig.from_file(args.config) if args.config else PipelineConfig()
    overrides = {dest: getattr(args, dest, None) for _, dest, _ in CONFIG_FLAGS}
    return cfg.apply_overrides(overrides)


def _cmd_synth(args: argparse.Namespace) -> int:
    from .synth import SceneSpec, generate_scene, write_scene

    if args.spec:
        spec = SceneSpec.from_json_dict(json.loads(Path(args.spec).read_text(encoding="utf-8")))
    else:
        occl = tuple(tuple(float(v) for v in rect.split(",")) for rect in args.occlusion or [])
        spec = SceneSpec(
            seed=args.seed or 0,
            arm_count=args.arms,
            extent=args.extent,
            frames=args.num_frames,
            density_ref=args.density,
            density_falloff=args.falloff,
            intensity_noise=args.noise,
            blur_px_per_10m=args.blur,
            occlusions=occl,
        )
    scene = generate_scene(spec)
    write_scene(scene, args.out)
    print(f"scene written to {args.out}")
    return 0


def _cmd_ground(args: argparse.Namespace) -> int:
    from .ground import extract_ground, load_cloud, write_cloud_ascii

    cfg = _build_config(args)
    cloud = load_cloud(args.cloud)
    ground, non_ground, plane = extract_ground(cloud, cfg.ransac_cfg())
    write_cloud_ascii(ground, args.out_ground)
    if args.out_nonground:
        write_cloud_ascii(non_ground, args.out_nonground)
    if args.out_plane:
        payload = {"normal": plane.normal.tolist(), "d": plane.d}
        Path(args.out_plane).write_text(json.dumps(payload, indent=2) + "\n", encoding="utf-8")
    print(f"{len(ground)} ground / {len(non_ground)} non-ground points")
    return 0


def _cmd_raster(args: argparse.Namespace) -> int:
    from .geometry import GridSpec
    from .ground import load_cloud
    from .raster import rasterize_intensity, segment_intensity, write_intensity_png, write_mask_png

    cfg = _build_config(args)
    cloud = load_cloud(args.ground)
    xy = cloud.xyz[:, :2]
    if len(cloud) == 0:
        raise InputError("cannot raster an empty cloud")
    spec = GridSpec.from_bounds(
        float(xy[:, 0].min()), float(xy[:, 1].min()),
        float(xy[:, 0].max()) + cfg.grid_cell, float(xy[:, 1].max()) + cfg.grid_cell,
        cfg.grid_cell,
    )
    img = rasterize_intensity(cloud, spec)
    write_intensity_png(img, args.out)
    if args.out_seg:
        seg = segment_intensity(
            img, threshold=cfg.intensity_threshold, close_radius=cfg.seg_close_radius,
            crossing_min_width=cfg.seg_crossing_min_width,
            divider_min_length=cfg.seg_divider_min_length,
            stop_min_length=cfg.seg_stop_min_length,
            stop_min_width=cfg.seg_stop_min_width,
        )
        write_mask_png(seg, args.out_seg, grid=spec)
    print(f"intensity image {spec.cols}x{spec.rows} written to {args.out}")
    return 0


def _cmd_fuse(args: argparse.Namespace) -> int:
    from .fusion import write_labeled
    from .pipeline import compute_fused_labels, load_scene_inputs

    cfg = _build_config(args)
    inputs = load_scene_inputs(args.scene, cfg.sync_tolerance)
    fused = compute_fused_labels(inputs, cfg)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_labeled(fused.image_only, out / "labeled_image_only.xyzc")
    write_labeled(fused.pointcloud_only, out / "labeled_pointcloud_only.xyzc")
    write_labeled(fused.multimodal, out / "labeled_multimodal.xyzc")
    for name, lp in (("image", fused.image_only), ("pointcloud", fused.pointcloud_only),
                     ("multimodal", fused.multimodal)):
        print(f"{name}: {len(lp)} labelled points")
    return 0


def _cmd_vectorize(args: argparse.Namespace) -> int:
    from .fusion import read_labeled
    from .render import save_map_figure
    from .vectorize import vectorize_map, write_map_geojson

    cfg = _build_config(args)
    labeled = read_labeled(args.points)
    vm = vectorize_map(labeled, cfg.vectorize_cfg())
    write_map_geojson(vm, args.out)
    if args.svg:
        save_map_figure(vm, args.svg)
    print(f"{len(vm)} elements written to {args.out}")
    return 0


def _cmd_eval(args: argparse.Namespace) -> int:
    from .metrics import evaluate
    from .render import save_report_figure
    from .vectorize import read_map_geojson

    cfg = _build_config(args)
    pred = read_map_geojson(args.pred)
    gt = read_map_geojson(args.gt)
    report = evaluate(pred, gt, cfg.eval_cfg())
    out = Path(args.out_dir) if args.out_dir else None
    if out:
        out.mkdir(parents=True, exist_ok=True)
        (out / "report.json").write_text(
            json.dumps(report.to_json_dict(), indent=2) + "\n", encoding="utf-8")
        (out / "report.txt").write_text(report.to_text() + "\n", encoding="utf-8")
        save_report_figure({"pred": report.per_class_iou}, out / "report.svg")
    print(report.to_text(), file=sys.stderr)
    print(f"{report.miou:.6f}")
    return 0


def _cmd_pipeline(args: argparse.Namespace) -> int:
    from .pipeline import run_pipeline

    cfg = _build_config(args)
    result = run_pipeline(args.scene, cfg, args.out_dir)
    for name in sorted(result.maps):
        print(f"map_{name}.geojson: {len(result.maps[name])} elements", file=sys.stderr)
    if result.reports is not None:
        for name, rep in result.reports.items():
            print(f"{name}: mIoU {rep.miou:.3f}", file=sys.stderr)
        print(f"{result.reports['multimodal'].miou:.6f}")
    return 0


def _cmd_sweep(args: argparse.Namespace) -> int:
    from .pipeline import run_framecount_sweep

    cfg = _build_config(args)
    ks = [int(v) for v in args.ks.split(",") if v.strip()]
    rows = run_framecount_sweep(args.scene, ks, cfg, args.out_dir)
    print(f"{'frames':<10}{'mIoU':>10}{'time [s]':>12}")
    for r in rows:
        print(f"{r['k']:<10}{r['miou']:>10.3f}{r['seconds']:>12.3f}")
    return 0


def _cmd_density(args: argparse.Namespace) -> int:
    from .pipeline import run_density_analysis
    from .vectorize import read_map_geojson

    cfg = _build_config(args)
    bins = None
    if args.bins:
        edges = [float(v) for v in args.bins.split(",")]
        bins = tuple(zip(edges[:-1], edges[1:]))
    pred = read_map_geojson(args.pred) if args.pred else None
    kwargs = {"pred_map": pred}
    if bins:
        kwargs["bins"] = bins
    rows = run_density_analysis(args.scene, cfg, args.out_dir, **kwargs)
    has_miou = any("miou" in r for r in rows)
    header = f"{'distance':<12}{'density':>12}" + (f"{'mIoU':>10}" if has_miou else "")
    print(header)
    for r in rows:
        label = f"{r['lo']:.0f}-{r['hi']:.0f}"
        line = f"{label:<12}{r['density']:>12.3f}"
        if has_miou:
            m = r.get("miou")
            line += f"{m:>10.3f}" if m is not None else f"{'-':>10}"
        print(line)
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="roadfusion",
        description="Vectorized semantic road maps from roadside camera masks and LiDAR clouds",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic scene directory")
    p.add_argument("--out", required=True, type=Path)
    p.add_argument("--spec", type=Path, help="full SceneSpec JSON (overrides other flags)")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--arms", type=int, default=4)
    p.add_argument("--extent", type=float, default=30.0)
    p.add_argument("--num-frames", type=int, default=5)
    p.add_argument("--density", type=float, default=40.0)
    p.add_argument("--falloff", type=float, default=0.0)
    p.add_argument("--noise", type=float, default=0.0)
    p.add_argument("--blur", type=float, default=0.0)
    p.add_argument("--occlusion", action="append", metavar="U0,V0,U1,V1")
    p.set_defaults(func=_cmd_synth)

    p = sub.add_parser("ground", help="RANSAC ground extraction for one cloud")
    p.add_argument("--cloud", required=True, type=Path)
    p.add_argument("--out-ground", required=True, type=Path)
    p.add_argument("--out-nonground", type=Path)
    p.add_argument("--out-plane", type=Path)
    _add_config_args(p)
    p.set_defaults(func=_cmd_ground)

    p = sub.add_parser("raster", help="grid a ground cloud into an intensity image")
    p.add_argument("--ground", required=True, type=Path)
    p.add_argument("--out", required=True, type=Path)
    p.add_argument("--out-seg", type=Path, help="also write the threshold segmentation")
    _add_config_args(p)
    p.set_defaults(func=_cmd_raster)

    p = sub.add_parser("fuse", help="label ground points along both paths and merge")
    p.add_argument("--scene", required=True, type=Path)
    p.add_argument("--out-dir", required=True, type=Path)
    _add_config_args(p)
    p.set_defaults(func=_cmd_fuse)

    p = sub.add_parser("vectorize", help="vectorize labelled points into a map")
    p.add_argument("--points", required=True, type=Path)
    p.add_argument("--out", required=True, type=Path)
    p.add_argument("--svg", type=Path)
    _add_config_args(p)
    p.set_defaults(func=_cmd_vectorize)

    p = sub.add_parser("eval", help="evaluate a predicted map against ground truth")
    p.add_argument("--pred", required=True, type=Path)
    p.add_argument("--gt", required=True, type=Path)
    p.add_argument("--out-dir", type=Path)
    _add_config_args(p)
    p.set_defaults(func=_cmd_eval)

    p = sub.add_parser("pipeline", help="full flow over a scene directory")
    p.add_argument("--scene", required=True, type=Path)
    p.add_argument("--out-dir", type=Path)
    _add_config_args(p)
    p.set_defaults(func=_cmd_pipeline)

    p = sub.add_parser("sweep-frames", help="mIoU / time against frame count")
    p.add_argument("--scene", required=True, type=Path)
    p.add_argument("--ks", required=True, help="comma-separated frame counts")
    p.add_argument("--out-dir", type=Path)
    _add_config_args(p)
    p.set_defaults(func=_cmd_sweep)

    p = sub.add_parser("density", help="point density (and mIoU) by distance")
    p.add_argument("--scene", required=True, type=Path)
    p.add_argument("--bins", help="comma-separated bin edges, e.g. 15,25,35,45,55,65")
    p.add_argument("--pred", type=Path, help="predicted map for per-bin mIoU")
    p.add_argument("--out-dir", type=Path)
    _add_config_args(p)
    p.set_defaults(func=_cmd_density)

    return parser


def main(argv: list[str] | None = None) -> int:
    logging.basicConfig(level=logging.INFO, stream=sys.stderr,
                        format="%(levelname)s %(name)s: %(message)s")
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        logger.error("config error: %s", exc)
        return 3
    except InputError as exc:
        logger.error("input error: %s", exc)
        return 2
    except InternalError as exc:
        logger.error("internal invariant violation: %s", exc)
        return 4
    except RoadFusionError as exc:
        logger.error("%s", exc)
        return 2


if __name__ == "__main__":
    sys.exit(main())
