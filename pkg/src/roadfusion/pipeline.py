"""End-to-end orchestration over scene directories.

A scene directory holds ``calib.json``, ``frames/NNN.rspc`` point clouds,
``masks/NNN.png`` camera masks with sidecars, optionally
``intensity_masks/NNN.png`` externally produced intensity-image
segmentations, and optionally ``gt.geojson``.

The pipeline emits three vector maps per run: image-only (camera-mask
labelling), pointcloud-only (intensity-image labelling), and multimodal
(the merge of both), plus a comparative report when ground truth is
present.  Timing goes into a separate ``timings.json`` so the report and
map files are byte-identical across runs with the same inputs and seed.
"""

from __future__ import annotations

import json
import logging
import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .config import PipelineConfig
from .errors import InputError
from .fusion import (
    LabeledPoints,
    aggregate_frames,
    label_by_image,
    label_by_intensity,
    merge_labeled,
)
from .geometry import CameraCalibration, GridSpec, read_calibration
from .ground import PointCloud, extract_ground, load_cloud
from .metrics import (
    DEFAULT_DISTANCE_BINS,
    EvalReport,
    density_by_distance,
    evaluate,
    miou_by_distance,
)
from .raster import LabelMask, rasterize_intensity, read_mask_png, segment_intensity
from .render import save_density_figure, save_map_figure, save_maps_overview, save_report_figure, save_sweep_figure
from .vectorize import VectorMap, read_map_geojson, vectorize_map, write_map_geojson

logger = logging.getLogger(__name__)

MAP_NAMES = ("image_only", "pointcloud_only", "multimodal")


class MissingInput(InputError):
    """A required scene file is absent."""


class SyncViolation(InputError):
    """A camera/LiDAR frame pair exceeds the time-alignment tolerance."""


@dataclass
class SceneInputs:
    calib: CameraCalibration
    frame_paths: list[Path]
    mask_paths: list[Path]
    intensity_mask_paths: list[Path] | None
    gt_path: Path | None
    scene_dir: Path


def load_scene_inputs(scene_dir: str | Path, sync_tolerance: float = 0.02) -> SceneInputs:
    """Discover and sanity-check a scene directory.

    Frame pairs are matched by filename stem; each pair's timestamps must
    agree within the sync tolerance.
    """
    scene_dir = Path(scene_dir)
    if not scene_dir.is_dir():
        raise MissingInput(f"scene directory not found: {scene_dir}")
    calib_path = scene_dir / "calib.json"
    if not calib_path.exists():
        raise MissingInput(f"missing calibration file: {calib_path}")
    calib = read_calibration(calib_path)

    frames_dir = scene_dir / "frames"
    frame_paths = sorted(frames_dir.glob("*.rspc")) + sorted(frames_dir.glob("*.xyz"))
    if not frame_paths:
        raise MissingInput(f"no point cloud frames under {frames_dir}")
    masks_dir = scene_dir / "masks"
    mask_paths = []
    for fp in frame_paths:
        mp = masks_dir / f"{fp.stem}.png"
        if not mp.exists():
            raise MissingInput(f"missing camera mask for frame {fp.stem}: {mp}")
        mask_paths.append(mp)

    for fp, mp in zip(frame_paths, mask_paths):
        cloud_ts = load_cloud(fp).timestamp
        mask_ts = read_mask_png(mp).timestamp
        if abs(cloud_ts - mask_ts) > sync_tolerance:
            raise SyncViolation(
                f"frame {fp.stem}: |{cloud_ts} - {mask_ts}| exceeds "
                f"sync tolerance {sync_tolerance}s"
            )

    idir = scene_dir / "intensity_masks"
    intensity_mask_paths = None
    if idir.is_dir():
        candidates = [idir / f"{fp.stem}.png" for fp in frame_paths]
        if all(p.exists() for p in candidates):
            intensity_mask_paths = candidates
        else:
            logger.warning("ignoring %s: not every frame has an intensity mask", idir)

    gt_path = scene_dir / "gt.geojson"
    return SceneInputs(
        calib=calib,
        frame_paths=frame_paths,
        mask_paths=mask_paths,
        intensity_mask_paths=intensity_mask_paths,
        gt_path=gt_path if gt_path.exists() else None,
        scene_dir=scene_dir,
    )


def _label_one_frame(
    index: int,
    inputs: SceneInputs,
    cfg: PipelineConfig,
) -> tuple[LabeledPoints, LabeledPoints, PointCloud]:
    cloud = load_cloud(inputs.frame_paths[index])
    mask = read_mask_png(inputs.mask_paths[index])
    ground, _, _ = extract_ground(cloud, cfg.ransac_cfg(seed_offset=index))

    by_image = label_by_image(ground, mask, inputs.calib)

    spec = _frame_grid(ground, cfg.grid_cell)
    if inputs.intensity_mask_paths is not None:
        seg = read_mask_png(inputs.intensity_mask_paths[index])
    else:
        intensity = rasterize_intensity(ground, spec)
        seg = segment_intensity(
            intensity,
            threshold=cfg.intensity_threshold,
            close_radius=cfg.seg_close_radius,
            crossing_min_width=cfg.seg_crossing_min_width,
            divider_min_length=cfg.seg_divider_min_length,
            stop_min_length=cfg.seg_stop_min_length,
            stop_min_width=cfg.seg_stop_min_width,
        )
    by_intensity = label_by_intensity(ground, spec, seg)
    return by_image, by_intensity, ground


def _frame_grid(ground: PointCloud, cell: float) -> GridSpec:
    if len(ground) == 0:
        return GridSpec(0.0, 0.0, cell, cell, 1, 1)
    xy = ground.xyz[:, :2]
    return GridSpec.from_bounds(
        float(xy[:, 0].min()), float(xy[:, 1].min()),
        float(xy[:, 0].max()) + cell, float(xy[:, 1].max()) + cell, cell,
    )


@dataclass
class FusedLabels:
    image_only: LabeledPoints
    pointcloud_only: LabeledPoints
    multimodal: LabeledPoints
    ground_points: list[PointCloud]


def compute_fused_labels(inputs: SceneInputs, cfg: PipelineConfig, k: int | None = None) -> FusedLabels:
    """Label every frame along both paths and aggregate the first k frames."""
    total = len(inputs.frame_paths)
    k = k if k is not None else (cfg.frame_count or total)
    if k > total:
        raise InputError(f"requested {k} frames but scene has {total}")

    if cfg.jobs > 1:
        with ThreadPoolExecutor(max_workers=cfg.jobs) as pool:
            results = list(pool.map(lambda i: _label_one_frame(i, inputs, cfg), range(k)))
    else:
        results = [_label_one_frame(i, inputs, cfg) for i in range(k)]

    image_frames = [r[0] for r in results]
    intensity_frames = [r[1] for r in results]
    grounds = [r[2] for r in results]
    image_all = aggregate_frames(image_frames, k)
    intensity_all = aggregate_frames(intensity_frames, k)
    return FusedLabels(
        image_only=image_all,
        pointcloud_only=intensity_all,
        multimodal=merge_labeled(image_all, intensity_all),
        ground_points=grounds,
    )


@dataclass
class PipelineResult:
    maps: dict[str, VectorMap]
    reports: dict[str, EvalReport] | None
    timings: dict[str, float]
    out_dir: Path


def _atomic_write_text(path: Path, text: str) -> None:
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(text, encoding="utf-8")
    os.replace(tmp, path)


def run_pipeline(
    scene_dir: str | Path,
    cfg: PipelineConfig | None = None,
    out_dir: str | Path | None = None,
    write_figures: bool = True,
) -> PipelineResult:
    """Full flow over one scene; writes maps, report, figures, timings.

    Emits map_image_only / map_pointcloud_only / map_multimodal GeoJSON
    files; when the scene carries ground truth, a comparative report
    (JSON + text) covering all three maps.
    """
    cfg = cfg or PipelineConfig()
    out = Path(out_dir) if out_dir is not None else Path(scene_dir) / "out"
    out.mkdir(parents=True, exist_ok=True)
    timings: dict[str, float] = {}

    t0 = time.perf_counter()
    inputs = load_scene_inputs(scene_dir, cfg.sync_tolerance)
    timings["load"] = time.perf_counter() - t0

    t0 = time.perf_counter()
    fused = compute_fused_labels(inputs, cfg)
    timings["fuse"] = time.perf_counter() - t0

    t0 = time.perf_counter()
    maps = {
        "image_only": vectorize_map(fused.image_only, cfg.vectorize_cfg()),
        "pointcloud_only": vectorize_map(fused.pointcloud_only, cfg.vectorize_cfg()),
        "multimodal": vectorize_map(fused.multimodal, cfg.vectorize_cfg()),
    }
    timings["vectorize"] = time.perf_counter() - t0

    for name, vm in maps.items():
        write_map_geojson(vm, out / f"map_{name}.geojson")
        if write_figures:
            save_map_figure(vm, out / f"map_{name}.svg", title=name)

    reports = None
    if inputs.gt_path is not None:
        t0 = time.perf_counter()
        gt = read_map_geojson(inputs.gt_path)
        reports = {name: evaluate(vm, gt, cfg.eval_cfg()) for name, vm in maps.items()}
        timings["evaluate"] = time.perf_counter() - t0
        _write_report(out, reports)
        if write_figures:
            save_report_figure({n: r.per_class_iou for n, r in reports.items()},
                               out / "report.svg")
            save_maps_overview({"ground_truth": gt, **maps}, out / "maps_overview.svg")
    elif write_figures:
        save_maps_overview(maps, out / "maps_overview.svg")

    timings["total"] = sum(timings.values())
    _atomic_write_text(out / "timings.json", json.dumps(timings, indent=2) + "\n")
    return PipelineResult(maps=maps, reports=reports, timings=timings, out_dir=out)


def _write_report(out: Path, reports: dict[str, EvalReport]) -> None:
    payload = {name: r.to_json_dict() for name, r in reports.items()}
    _atomic_write_text(out / "report.json", json.dumps(payload, indent=2) + "\n")

    classes = sorted({k for r in reports.values() for k in r.per_class_iou})
    lines = ["IoU per class and map", ""]
    header = f"{'class':<22}" + "".join(f"{name:>18}" for name in reports)
    lines.append(header)
    for klass in classes:
        row = f"{klass:<22}"
        for r in reports.values():
            row += f"{r.per_class_iou.get(klass, 0.0):>18.3f}"
        lines.append(row)
    row = f"{'mIoU':<22}"
    for r in reports.values():
        row += f"{r.miou:>18.3f}"
    lines.append(row)
    _atomic_write_text(out / "report.txt", "\n".join(lines) + "\n")


def run_framecount_sweep(
    scene_dir: str | Path,
    ks: list[int],
    cfg: PipelineConfig | None = None,
    out_dir: str | Path | None = None,
    write_figures: bool = True,
) -> list[dict]:
    """Run the pipeline at several frame counts; report mIoU and wall time."""
    cfg = cfg or PipelineConfig()
    scene_dir = Path(scene_dir)
    out = Path(out_dir) if out_dir is not None else scene_dir / "sweep"
    out.mkdir(parents=True, exist_ok=True)
    inputs = load_scene_inputs(scene_dir, cfg.sync_tolerance)
    if inputs.gt_path is None:
        raise MissingInput("frame-count sweep needs ground truth (gt.geojson)")
    if max(ks) > len(inputs.frame_paths):
        raise InputError(f"scene has {len(inputs.frame_paths)} frames, sweep asks for {max(ks)}")
    gt = read_map_geojson(inputs.gt_path)

    rows = []
    for k in ks:
        t0 = time.perf_counter()
        fused = compute_fused_labels(inputs, cfg, k=k)
        vm = vectorize_map(fused.multimodal, cfg.vectorize_cfg())
        seconds = time.perf_counter() - t0
        report = evaluate(vm, gt, cfg.eval_cfg())
        rows.append({"k": k, "miou": report.miou, "seconds": seconds})

    csv_lines = ["k,miou,seconds"] + [f"{r['k']},{r['miou']:.6f},{r['seconds']:.3f}" for r in rows]
    _atomic_write_text(out / "sweep.csv", "\n".join(csv_lines) + "\n")
    table = [f"{'frames':<10}{'mIoU':>10}{'time [s]':>12}"]
    table += [f"{r['k']:<10}{r['miou']:>10.3f}{r['seconds']:>12.3f}" for r in rows]
    _atomic_write_text(out / "sweep.txt", "\n".join(table) + "\n")
    if write_figures:
        save_sweep_figure(rows, out / "sweep.svg")
    return rows


def run_density_analysis(
    scene_dir: str | Path,
    cfg: PipelineConfig | None = None,
    out_dir: str | Path | None = None,
    bins=DEFAULT_DISTANCE_BINS,
    pred_map: VectorMap | None = None,
    write_figures: bool = True,
) -> list[dict]:
    """Point density per distance bin, plus per-bin mIoU when possible.

    The per-bin mIoU compares ``pred_map`` (or the pipeline's multimodal
    map, computed on the fly) against the scene ground truth inside each
    annulus.
    """
    cfg = cfg or PipelineConfig()
    scene_dir = Path(scene_dir)
    out = Path(out_dir) if out_dir is not None else scene_dir / "density"
    out.mkdir(parents=True, exist_ok=True)
    inputs = load_scene_inputs(scene_dir, cfg.sync_tolerance)

    fused = compute_fused_labels(inputs, cfg)
    merged_ground = PointCloud(
        np.concatenate([g.xyzi for g in fused.ground_points])
        if fused.ground_points else np.empty((0, 4))
    )
    origin = inputs.calib.camera_center()
    clouds_xy = merged_ground.xyz[:, :2]
    region = None
    if len(merged_ground):
        region = (
            float(clouds_xy[:, 0].min()), float(clouds_xy[:, 1].min()),
            float(clouds_xy[:, 0].max()), float(clouds_xy[:, 1].max()),
        )
    rows = density_by_distance(merged_ground, origin, bins=bins, region=region)

    if inputs.gt_path is not None:
        gt = read_map_geojson(inputs.gt_path)
        vm = pred_map if pred_map is not None else vectorize_map(fused.multimodal, cfg.vectorize_cfg())
        for row, m in zip(rows, miou_by_distance(vm, gt, origin, bins=bins, cfg=cfg.eval_cfg())):
            row["miou"] = m["miou"]

    header = "lo,hi,count,area,density" + (",miou" if "miou" in rows[0] else "")
    csv_lines = [header]
    for r in rows:
        line = f"{r['lo']},{r['hi']},{r['count']},{r['area']:.3f},{r['density']:.6f}"
        if "miou" in r:
            line += "," + ("" if r["miou"] is None else f"{r['miou']:.6f}")
        csv_lines.append(line)
    _atomic_write_text(out / "density.csv", "\n".join(csv_lines) + "\n")
    if write_figures:
        save_density_figure(rows, out / "density.svg")
    return rows
