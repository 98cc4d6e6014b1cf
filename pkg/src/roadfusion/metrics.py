"""Map evaluation: rasterised IoU, one-way Chamfer distance, AP, and the
distance/density analyses.

IoU compares occupancy rasters of predicted and ground-truth maps.  The
one-way Chamfer distance averages, over samples of the predicted curve,
the distance to the nearest sample of the ground-truth curve.  AP ranks
predictions by confidence and counts a prediction as a true positive only
when both its Chamfer distance to an unmatched same-class ground-truth
instance is below the CD threshold and their per-instance IoU exceeds the
IoU threshold.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np
import shapely
from scipy.spatial.distance import cdist
from shapely.geometry import LineString, Point, Polygon, box
from shapely.validation import make_valid

from .errors import InputError
from .geometry import GridSpec
from .ground import PointCloud
from .vectorize import MapElement, VectorMap

AP_RECALL_LEVELS = np.arange(1, 11) / 10.0

# Distance bins used by the point-density analysis, metres.
DEFAULT_DISTANCE_BINS = ((15.0, 25.0), (25.0, 35.0), (35.0, 45.0), (45.0, 55.0), (55.0, 65.0))


class SpecMismatch(InputError):
    """Raster masks built on different grids cannot be compared."""


class EmptyGeometry(InputError):
    """Chamfer distance needs non-empty geometries."""


class FrameMismatch(InputError):
    """Predicted and ground-truth maps are in different coordinate frames."""


@dataclass(frozen=True)
class RasterMask:
    """Boolean occupancy raster for one element class."""

    spec: GridSpec
    bits: np.ndarray

    def __post_init__(self):
        bits = np.ascontiguousarray(self.bits, dtype=bool)
        if bits.shape != (self.spec.rows, self.spec.cols):
            raise InputError(f"raster mask must have shape {(self.spec.rows, self.spec.cols)}")
        bits.setflags(write=False)
        object.__setattr__(self, "bits", bits)


@dataclass(frozen=True)
class EvalConfig:
    eval_cell: float = 0.1
    line_width: float = 0.2
    cd_thresh: float = 1.0
    iou_thresh: float = 0.1
    sample_step: float = 0.1


@dataclass
class EvalReport:
    """Per-class and aggregate quality of a predicted map."""

    per_class_iou: dict[str, float] = field(default_factory=dict)
    miou: float = 0.0
    per_class_ap: dict[str, float | None] = field(default_factory=dict)
    instance_cd: list[dict] = field(default_factory=list)
    density: list[dict] | None = None
    timing: dict[str, float] = field(default_factory=dict)

    def to_json_dict(self, include_timing: bool = False) -> dict:
        out = {
            "per_class_iou": self.per_class_iou,
            "miou": self.miou,
            "per_class_ap": self.per_class_ap,
            "instance_cd": self.instance_cd,
        }
        if self.density is not None:
            out["density"] = self.density
        if include_timing:
            out["timing"] = self.timing
        return out

    def to_text(self) -> str:
        lines = ["class                 IoU      AP"]
        for klass in sorted(self.per_class_iou):
            ap = self.per_class_ap.get(klass)
            ap_s = f"{ap:7.3f}" if ap is not None else "      -"
            lines.append(f"{klass:<20} {self.per_class_iou[klass]:7.3f} {ap_s}")
        lines.append(f"{'mIoU':<20} {self.miou:7.3f}")
        return "\n".join(lines)


def _element_shape(e: MapElement, line_width: float):
    if e.is_polygon:
        poly = Polygon(e.vertices)
        return poly if poly.is_valid else make_valid(poly)
    line = LineString(e.vertices)
    if line.length == 0:
        return line.buffer(line_width / 2.0)
    return line.buffer(line_width / 2.0, cap_style="flat")


def rasterize_map(
    vm: VectorMap | Iterable[MapElement],
    element_class: str | None,
    spec: GridSpec,
    line_width: float = 0.2,
) -> RasterMask:
    """Occupancy raster of a map's elements of one class.

    Polygons are filled; polylines are dilated to ``line_width``.  A cell
    is set when its centre is covered (boundary contact counts).  Pass
    element_class=None to rasterise every element.
    """
    if line_width <= 0:
        raise InputError("line_width must be positive")
    elements = vm.elements if isinstance(vm, VectorMap) else tuple(vm)
    shapes = [
        _element_shape(e, line_width)
        for e in elements
        if element_class is None or e.element_class == element_class
    ]
    bits = np.zeros((spec.rows, spec.cols), dtype=bool)
    if not shapes:
        return RasterMask(spec=spec, bits=bits)

    xs, ys = spec.cell_centers()
    for shape in shapes:
        if shape.is_empty:
            continue
        minx, miny, maxx, maxy = shape.bounds
        c0 = max(0, int(np.floor((minx - spec.x_min) / spec.cell_size_x)) - 1)
        c1 = min(spec.cols, int(np.ceil((maxx - spec.x_min) / spec.cell_size_x)) + 1)
        r0 = max(0, int(np.floor((miny - spec.y_min) / spec.cell_size_y)) - 1)
        r1 = min(spec.rows, int(np.ceil((maxy - spec.y_min) / spec.cell_size_y)) + 1)
        if c0 >= c1 or r0 >= r1:
            continue
        gx, gy = np.meshgrid(xs[c0:c1], ys[r0:r1])
        covered = shapely.intersects_xy(shape, gx.ravel(), gy.ravel()).reshape(gx.shape)
        bits[r0:r1, c0:c1] |= covered
    return RasterMask(spec=spec, bits=bits)


def iou(e1: RasterMask, e2: RasterMask) -> float:
    """Intersection over union of two occupancy rasters.

    Two empty masks compare as 1.0; exactly one empty as 0.0.
    """
    if e1.spec != e2.spec:
        raise SpecMismatch("raster masks use different grids")
    a1 = bool(e1.bits.any())
    a2 = bool(e2.bits.any())
    if not a1 and not a2:
        return 1.0
    if a1 != a2:
        return 0.0
    inter = np.count_nonzero(e1.bits & e2.bits)
    union = np.count_nonzero(e1.bits | e2.bits)
    return inter / union


def resample_curve(vertices: np.ndarray, closed: bool, step: float) -> np.ndarray:
    """Evenly spaced samples along a polyline or ring at most ``step`` apart."""
    v = np.asarray(vertices, dtype=np.float64).reshape(-1, 2)
    if v.shape[0] == 0:
        raise EmptyGeometry("cannot resample an empty geometry")
    if step <= 0:
        raise InputError("sample_step must be positive")
    if closed and v.shape[0] >= 2:
        v = np.vstack([v, v[:1]])
    seg = np.linalg.norm(np.diff(v, axis=0), axis=1)
    total = float(seg.sum())
    if v.shape[0] == 1 or total == 0.0:
        return v[:1].copy()
    if closed:
        n = max(3, int(np.ceil(total / step)))
        positions = np.arange(n) * (total / n)
    else:
        n = max(1, int(np.ceil(total / step)))
        positions = np.linspace(0.0, total, n + 1)
    cum = np.concatenate([[0.0], np.cumsum(seg)])
    seg_idx = np.clip(np.searchsorted(cum, positions, side="right") - 1, 0, len(seg) - 1)
    local = positions - cum[seg_idx]
    with np.errstate(invalid="ignore"):
        frac = np.where(seg[seg_idx] > 0, local / seg[seg_idx], 0.0)
    return v[seg_idx] + frac[:, None] * (v[seg_idx + 1] - v[seg_idx])


def _curve_samples(geom: MapElement | np.ndarray, step: float) -> np.ndarray:
    if isinstance(geom, MapElement):
        return resample_curve(geom.vertices, geom.is_polygon, step)
    return resample_curve(np.asarray(geom), False, step)


def chamfer_one_way(
    pred: MapElement | np.ndarray,
    gt: MapElement | np.ndarray,
    sample_step: float = 0.1,
) -> float:
    """Mean distance from predicted-curve samples to the nearest
    ground-truth-curve sample.  Polygons contribute their boundary ring."""
    c1 = _curve_samples(pred, sample_step)
    c2 = _curve_samples(gt, sample_step)
    d = cdist(c1, c2)
    return float(d.min(axis=1).mean())


def average_precision(
    preds: Sequence[MapElement],
    gts: Sequence[MapElement],
    cd_thresh: float = 1.0,
    iou_thresh: float = 0.1,
    spec: GridSpec | None = None,
    line_width: float = 0.2,
    sample_step: float = 0.1,
) -> float | None:
    """Average precision over recall levels 0.1 .. 1.0.

    Predictions are ranked by descending confidence and matched greedily:
    a prediction is a true positive iff its one-way Chamfer distance to an
    unmatched same-class ground-truth instance is below cd_thresh AND the
    per-instance rasterised IoU exceeds iou_thresh; of several qualifying
    instances the closest one is taken.  Per recall level the interpolated
    (maximum achievable) precision counts, zero when the level is never
    reached.  Returns None when there is no ground truth.
    """
    gts = list(gts)
    preds = list(preds)
    if not gts:
        return None
    if not preds:
        return 0.0
    if spec is None:
        spec = evaluation_grid(preds + gts, cell=0.1, pad=max(line_width, 1.0))

    order = sorted(range(len(preds)), key=lambda i: -preds[i].confidence)
    pred_masks = [rasterize_map([preds[i]], None, spec, line_width) for i in order]
    gt_masks = [rasterize_map([g], None, spec, line_width) for g in gts]

    matched = [False] * len(gts)
    tp_flags = []
    for rank, i in enumerate(order):
        p = preds[i]
        best_j = -1
        best_cd = np.inf
        for j, g in enumerate(gts):
            if matched[j] or g.element_class != p.element_class:
                continue
            cd = chamfer_one_way(p, g, sample_step)
            if cd >= cd_thresh:
                continue
            if iou(pred_masks[rank], gt_masks[j]) <= iou_thresh:
                continue
            if cd < best_cd:
                best_cd = cd
                best_j = j
        if best_j >= 0:
            matched[best_j] = True
            tp_flags.append(True)
        else:
            tp_flags.append(False)

    tp_cum = np.cumsum(tp_flags)
    ranks = np.arange(1, len(tp_flags) + 1)
    precision = tp_cum / ranks
    recall = tp_cum / len(gts)

    total = 0.0
    for r in AP_RECALL_LEVELS:
        reachable = precision[recall >= r - 1e-12]
        total += float(reachable.max()) if reachable.size else 0.0
    return total / len(AP_RECALL_LEVELS)


def evaluation_grid(elements: Iterable[MapElement], cell: float = 0.1, pad: float = 1.0) -> GridSpec:
    """Grid covering every element's bounds with padding."""
    elements = list(elements)
    if not elements:
        raise InputError("cannot build an evaluation grid without elements")
    allv = np.vstack([e.vertices for e in elements])
    x0, y0 = allv.min(axis=0) - pad
    x1, y1 = allv.max(axis=0) + pad
    return GridSpec.from_bounds(float(x0), float(y0), float(x1), float(y1), cell)


def _annulus_region_area(
    origin: tuple[float, float],
    lo: float,
    hi: float,
    region: tuple[float, float, float, float] | None,
) -> float:
    outer = Point(origin).buffer(hi, quad_segs=256)
    ring = outer if lo <= 0 else outer.difference(Point(origin).buffer(lo, quad_segs=256))
    if region is not None:
        ring = ring.intersection(box(*region))
    return float(ring.area)


def density_by_distance(
    cloud: PointCloud,
    sensor_origin,
    bins: Sequence[tuple[float, float]] = DEFAULT_DISTANCE_BINS,
    region: tuple[float, float, float, float] | None = None,
) -> list[dict]:
    """Points per square metre in ground-plane annuli around the sensor.

    Each bin [lo, hi) divides its point count by the annulus area, clipped
    to ``region`` (xmin, ymin, xmax, ymax) when given.
    """
    prev_hi = -np.inf
    for lo, hi in bins:
        if hi <= lo or lo < prev_hi:
            raise InputError("bins must be non-overlapping, ascending ranges")
        prev_hi = hi
    ox, oy = float(sensor_origin[0]), float(sensor_origin[1])
    if len(cloud):
        r = np.hypot(cloud.xyz[:, 0] - ox, cloud.xyz[:, 1] - oy)
    else:
        r = np.empty(0)
    out = []
    for lo, hi in bins:
        count = int(((r >= lo) & (r < hi)).sum())
        area = _annulus_region_area((ox, oy), lo, hi, region)
        out.append({
            "lo": lo,
            "hi": hi,
            "count": count,
            "area": area,
            "density": count / area if area > 0 else 0.0,
        })
    return out


def evaluate(pred: VectorMap, gt: VectorMap, cfg: EvalConfig = EvalConfig()) -> EvalReport:
    """Full map comparison: per-class IoU, mIoU over classes present in
    the ground truth, per-class AP, and per-instance Chamfer distances."""
    if pred.crs_note and gt.crs_note and pred.crs_note != gt.crs_note:
        raise FrameMismatch(
            f"maps are in different frames: {pred.crs_note!r} vs {gt.crs_note!r}"
        )
    t0 = time.perf_counter()
    report = EvalReport()
    classes = gt.classes()
    if not classes:
        raise InputError("ground-truth map has no elements")

    spec = evaluation_grid(list(pred.elements) + list(gt.elements),
                           cell=cfg.eval_cell, pad=max(cfg.line_width, 1.0))
    ious = []
    for klass in classes:
        m_pred = rasterize_map(pred, klass, spec, cfg.line_width)
        m_gt = rasterize_map(gt, klass, spec, cfg.line_width)
        value = iou(m_pred, m_gt)
        report.per_class_iou[klass] = value
        ious.append(value)
        report.per_class_ap[klass] = average_precision(
            pred.by_class(klass), gt.by_class(klass),
            cd_thresh=cfg.cd_thresh, iou_thresh=cfg.iou_thresh,
            spec=spec, line_width=cfg.line_width, sample_step=cfg.sample_step,
        )
    report.miou = float(np.mean(ious))

    for e in pred.elements:
        same = gt.by_class(e.element_class)
        cd = min((chamfer_one_way(e, g, cfg.sample_step) for g in same), default=None)
        report.instance_cd.append({
            "class": e.element_class,
            "cd": cd,
            "confidence": e.confidence,
        })
    report.timing["evaluate"] = time.perf_counter() - t0
    return report


def miou_by_distance(
    pred: VectorMap,
    gt: VectorMap,
    sensor_origin,
    bins: Sequence[tuple[float, float]] = DEFAULT_DISTANCE_BINS,
    cfg: EvalConfig = EvalConfig(),
) -> list[dict]:
    """mIoU restricted to ground-plane annuli around the sensor.

    Per bin, only raster cells whose centre falls inside the annulus count
    and only classes with ground truth present there are averaged; bins
    without any ground truth report None.
    """
    elements = list(pred.elements) + list(gt.elements)
    if not elements:
        raise InputError("no elements to evaluate")
    spec = evaluation_grid(elements, cell=cfg.eval_cell, pad=max(cfg.line_width, 1.0))
    xs, ys = spec.cell_centers()
    gx, gy = np.meshgrid(xs, ys)
    r = np.hypot(gx - float(sensor_origin[0]), gy - float(sensor_origin[1]))

    classes = gt.classes()
    pred_masks = {k: rasterize_map(pred, k, spec, cfg.line_width).bits for k in classes}
    gt_masks = {k: rasterize_map(gt, k, spec, cfg.line_width).bits for k in classes}

    out = []
    for lo, hi in bins:
        ring = (r >= lo) & (r < hi)
        ious = []
        for k in classes:
            g = gt_masks[k] & ring
            if not g.any():
                continue
            p = pred_masks[k] & ring
            inter = np.count_nonzero(p & g)
            union = np.count_nonzero(p | g)
            ious.append(inter / union)
        out.append({"lo": lo, "hi": hi, "miou": float(np.mean(ious)) if ious else None})
    return out
