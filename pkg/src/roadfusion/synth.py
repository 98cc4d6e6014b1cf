"""Deterministic synthetic roadside-intersection scenes.

A scene is an axis-aligned crossroad: painted stop lines, lane dividers,
and striped pedestrian crossings on an asphalt ground plane, observed by
one elevated roadside sensor pair (camera + LiDAR, co-located).  The
generator emits the ground-truth vector map, per-frame LiDAR clouds whose
point density falls off with distance, camera masks rendered through the
calibration, and degradation knobs that mimic real failure modes: image
labels smeared wide at range, image regions occluded, intensity noise on
the LiDAR returns.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np
import shapely
from scipy import ndimage
from shapely.geometry import box
from shapely.ops import unary_union

from .errors import InputError
from .geometry import CameraCalibration, write_calibration
from .ground import PointCloud, write_cloud_rspc
from .raster import (
    DEFAULT_CLASS_TABLE,
    LANE_DIVIDER,
    PEDESTRIAN_CROSSING,
    STOP_LINE,
    LabelMask,
    write_mask_png,
)
from .vectorize import MapElement, VectorMap, write_map_geojson


class InvalidSpec(InputError):
    """Scene specification failed validation; message names the field."""


@dataclass(frozen=True)
class SceneSpec:
    """Every knob of the generator; the seed fixes all random draws."""

    seed: int = 0
    # Intersection geometry
    arm_count: int = 4
    lane_width: float = 3.5
    lanes_per_side: int = 2
    extent: float = 30.0
    crossing_depth: float = 3.0
    crossing_offset: float = 1.0
    stripe_width: float = 0.6
    stripe_gap: float = 0.4
    stop_line_width: float = 0.3
    stop_line_offset: float = 1.0
    divider_paint_width: float = 0.15
    divider_gap_after_stop: float = 1.0
    # Sensor pose (position defaults to a corner of the intersection)
    sensor_height: float = 8.0
    sensor_tilt_deg: float = 18.0
    sensor_x: float | None = None
    sensor_y: float | None = None
    # Frames
    frames: int = 5
    frame_interval: float = 0.1
    # LiDAR density model: points per square metre at the reference
    # distance, scaled by (ref / r) ** falloff elsewhere.
    density_ref: float = 40.0
    density_ref_distance: float = 20.0
    density_falloff: float = 0.0
    # Intensities
    paint_intensity: float = 200.0
    asphalt_intensity: float = 60.0
    # Camera
    image_width: int = 640
    image_height: int = 480
    fov_deg: float = 100.0
    # Degradations
    intensity_noise: float = 0.0
    blur_px_per_10m: float = 0.0
    aberration_px_per_10m: float = 0.0
    occlusions: tuple[tuple[float, float, float, float], ...] = ()
    z_noise: float = 0.0

    def __post_init__(self):
        positive = {
            "lane_width": self.lane_width,
            "extent": self.extent,
            "crossing_depth": self.crossing_depth,
            "stripe_width": self.stripe_width,
            "stop_line_width": self.stop_line_width,
            "divider_paint_width": self.divider_paint_width,
            "sensor_height": self.sensor_height,
            "frame_interval": self.frame_interval,
            "density_ref": self.density_ref,
            "density_ref_distance": self.density_ref_distance,
            "image_width": self.image_width,
            "image_height": self.image_height,
            "fov_deg": self.fov_deg,
        }
        for name, value in positive.items():
            if value <= 0:
                raise InvalidSpec(f"{name} must be positive, got {value}")
        non_negative = {
            "crossing_offset": self.crossing_offset,
            "stripe_gap": self.stripe_gap,
            "stop_line_offset": self.stop_line_offset,
            "divider_gap_after_stop": self.divider_gap_after_stop,
            "density_falloff": self.density_falloff,
            "intensity_noise": self.intensity_noise,
            "blur_px_per_10m": self.blur_px_per_10m,
            "aberration_px_per_10m": self.aberration_px_per_10m,
            "z_noise": self.z_noise,
        }
        for name, value in non_negative.items():
            if value < 0:
                raise InvalidSpec(f"{name} must be non-negative, got {value}")
        if not 2 <= self.arm_count <= 4:
            raise InvalidSpec(f"arm_count must be 2, 3 or 4, got {self.arm_count}")
        if self.lanes_per_side < 1:
            raise InvalidSpec(f"lanes_per_side must be >= 1, got {self.lanes_per_side}")
        if self.frames < 1:
            raise InvalidSpec(f"frames must be >= 1, got {self.frames}")
        if self.fov_deg >= 180:
            raise InvalidSpec(f"fov_deg must be < 180, got {self.fov_deg}")
        road_half = self.lanes_per_side * self.lane_width
        if self.extent <= road_half + self.crossing_offset + self.crossing_depth + 2:
            raise InvalidSpec("extent too small for the configured intersection")
        object.__setattr__(self, "occlusions",
                           tuple(tuple(float(v) for v in rect) for rect in self.occlusions))

    @property
    def road_half_width(self) -> float:
        return self.lanes_per_side * self.lane_width

    def sensor_position(self) -> np.ndarray:
        setback = self.road_half_width + 4.0
        x = self.sensor_x if self.sensor_x is not None else -setback
        y = self.sensor_y if self.sensor_y is not None else -setback
        return np.array([x, y, self.sensor_height], dtype=np.float64)

    def region_bounds(self) -> tuple[float, float, float, float]:
        return (-self.extent, -self.extent, self.extent, self.extent)

    def to_json_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_json_dict(cls, d: dict) -> "SceneSpec":
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(d) - known
        if unknown:
            raise InvalidSpec(f"unknown scene spec fields: {sorted(unknown)}")
        if "occlusions" in d and d["occlusions"] is not None:
            d = dict(d, occlusions=tuple(tuple(r) for r in d["occlusions"]))
        return cls(**d)


@dataclass(frozen=True)
class Scene:
    """Everything generate_scene produces, plus the hidden truth needed by
    oracles: the painted geometry per class and the sensor location."""

    gt: VectorMap
    frames: list[PointCloud]
    masks: list[LabelMask]
    calib: CameraCalibration
    spec: SceneSpec
    paint_geoms: dict[str, object] = field(default_factory=dict)
    semantic_geoms: dict[str, object] = field(default_factory=dict)

    @property
    def sensor_origin(self) -> np.ndarray:
        return self.spec.sensor_position()


_ARM_ANGLES = {2: (0.0, math.pi), 3: (0.0, math.pi / 2, math.pi), 4: (0.0, math.pi / 2, math.pi, 3 * math.pi / 2)}


def _rot(angle: float) -> np.ndarray:
    c, s = math.cos(angle), math.sin(angle)
    return np.array([[c, -s], [s, c]])


def _rect(along0: float, along1: float, lat0: float, lat1: float, rot: np.ndarray) -> np.ndarray:
    corners = np.array([
        [along0, lat0], [along1, lat0], [along1, lat1], [along0, lat1],
    ])
    return corners @ rot.T


def _poly(corners: np.ndarray):
    return shapely.Polygon(corners)


def _build_layout(spec: SceneSpec):
    """Ground-truth elements plus painted / semantic regions per class."""
    half = spec.road_half_width
    gt_elements: list[MapElement] = []
    paint = {LANE_DIVIDER: [], STOP_LINE: [], PEDESTRIAN_CROSSING: []}
    semantic = {LANE_DIVIDER: [], STOP_LINE: [], PEDESTRIAN_CROSSING: []}

    for angle in _ARM_ANGLES[spec.arm_count]:
        rot = _rot(angle)
        cross0 = half + spec.crossing_offset
        cross1 = cross0 + spec.crossing_depth
        lat_lo, lat_hi = -half + 0.3, half - 0.3

        # Pedestrian crossing: GT polygon is the whole rectangle, paint is
        # the stripe bars (elongated along the travel direction).
        crossing = _rect(cross0, cross1, lat_lo, lat_hi, rot)
        gt_elements.append(MapElement(
            element_class=PEDESTRIAN_CROSSING, vertices=crossing, is_polygon=True,
            support_count=0, confidence=1.0,
        ))
        semantic[PEDESTRIAN_CROSSING].append(_poly(crossing))
        lat = lat_lo
        while lat + spec.stripe_width <= lat_hi + 1e-9:
            paint[PEDESTRIAN_CROSSING].append(
                _poly(_rect(cross0, cross1, lat, lat + spec.stripe_width, rot)))
            lat += spec.stripe_width + spec.stripe_gap

        # Stop line: painted bar across the approach half of the road.
        stop0 = cross1 + spec.stop_line_offset
        stop1 = stop0 + spec.stop_line_width
        bar_lo, bar_hi = 0.5, half - 0.5
        bar = _rect(stop0, stop1, bar_lo, bar_hi, rot)
        mid = 0.5 * (stop0 + stop1)
        gt_elements.append(MapElement(
            element_class=STOP_LINE,
            vertices=np.array([[mid, bar_lo], [mid, bar_hi]]) @ rot.T,
            is_polygon=False, support_count=0, confidence=1.0,
        ))
        paint[STOP_LINE].append(_poly(bar))
        semantic[STOP_LINE].append(_poly(bar))

        # Lane dividers: solid painted bands from past the stop line to the
        # edge of the mapped region.
        div0 = stop1 + spec.divider_gap_after_stop
        div1 = spec.extent - 0.5
        if div1 > div0 + 1.0:
            for j in range(-(spec.lanes_per_side - 1), spec.lanes_per_side):
                lat_c = j * spec.lane_width
                gt_elements.append(MapElement(
                    element_class=LANE_DIVIDER,
                    vertices=np.array([[div0, lat_c], [div1, lat_c]]) @ rot.T,
                    is_polygon=False, support_count=0, confidence=1.0,
                ))
                band = _rect(div0, div1, lat_c - spec.divider_paint_width / 2,
                             lat_c + spec.divider_paint_width / 2, rot)
                paint[LANE_DIVIDER].append(_poly(band))
                semantic[LANE_DIVIDER].append(_poly(band))

    paint_u = {k: unary_union(v) if v else shapely.Polygon() for k, v in paint.items()}
    semantic_u = {k: unary_union(v) if v else shapely.Polygon() for k, v in semantic.items()}
    return gt_elements, paint_u, semantic_u


def _build_calibration(spec: SceneSpec) -> CameraCalibration:
    pos = spec.sensor_position()
    # Look at the intersection centre; tilt is applied on top of the
    # line-of-sight so the horizon stays above the image.
    to_center = -pos[:2]
    yaw = math.atan2(to_center[1], to_center[0])
    tilt = math.radians(spec.sensor_tilt_deg)
    forward = np.array([
        math.cos(tilt) * math.cos(yaw),
        math.cos(tilt) * math.sin(yaw),
        -math.sin(tilt),
    ])
    up = np.array([0.0, 0.0, 1.0])
    x_cam = np.cross(forward, up)
    x_cam /= np.linalg.norm(x_cam)
    y_cam = np.cross(forward, x_cam)
    y_cam /= np.linalg.norm(y_cam)
    rotation = np.vstack([x_cam, y_cam, forward])
    translation = -rotation @ pos

    pixel_pitch = 1e-5
    fx = (spec.image_width / 2.0) / math.tan(math.radians(spec.fov_deg) / 2.0)
    return CameraCalibration(
        f=fx * pixel_pitch,
        dx=pixel_pitch,
        dy=pixel_pitch,
        u0=spec.image_width / 2.0,
        v0=spec.image_height / 2.0,
        rotation=rotation,
        translation=translation,
        image_width=spec.image_width,
        image_height=spec.image_height,
    )


def _ring_areas_in_region(spec: SceneSpec, edges: np.ndarray) -> np.ndarray:
    """Area of each annulus [edges[i], edges[i+1]) clipped to the region."""
    origin = shapely.Point(spec.sensor_position()[:2])
    region = box(*spec.region_bounds())
    discs = [origin.buffer(r, quad_segs=128).intersection(region).area if r > 0 else 0.0
             for r in edges]
    return np.diff(np.asarray(discs))


def _local_density(spec: SceneSpec, r: np.ndarray) -> np.ndarray:
    r_eff = np.maximum(r, 5.0)
    return spec.density_ref * (spec.density_ref_distance / r_eff) ** spec.density_falloff


def _sample_frame_points(spec: SceneSpec, rng: np.random.Generator) -> np.ndarray:
    """Ground-plane xy samples whose local density follows the falloff model."""
    origin = spec.sensor_position()[:2]
    x0, y0, x1, y1 = spec.region_bounds()
    corners = np.array([[x0, y0], [x0, y1], [x1, y0], [x1, y1]])
    r_max = float(np.max(np.linalg.norm(corners - origin, axis=1)))
    edges = np.arange(0.0, r_max + 2.0, 2.0)
    areas = _ring_areas_in_region(spec, edges)
    mids = 0.5 * (edges[:-1] + edges[1:])
    expected = areas * _local_density(spec, mids)

    chunks = []
    for i in range(len(mids)):
        n = int(rng.poisson(expected[i]))
        if n == 0 or areas[i] <= 0:
            continue
        got = []
        need = n
        # Rejection sampling within the ring, clipped to the region.
        efficiency = max(areas[i] / (math.pi * (edges[i + 1] ** 2 - edges[i] ** 2)), 1e-3)
        while need > 0:
            batch = max(32, int(need / efficiency * 1.3))
            u = rng.random(batch)
            rr = np.sqrt(edges[i] ** 2 + u * (edges[i + 1] ** 2 - edges[i] ** 2))
            th = rng.random(batch) * 2.0 * math.pi
            xs = origin[0] + rr * np.cos(th)
            ys = origin[1] + rr * np.sin(th)
            ok = (xs >= x0) & (xs <= x1) & (ys >= y0) & (ys <= y1)
            pts = np.column_stack([xs[ok], ys[ok]])[:need]
            if pts.shape[0]:
                got.append(pts)
                need -= pts.shape[0]
        chunks.append(np.concatenate(got))
    if not chunks:
        return np.empty((0, 2))
    return np.concatenate(chunks)


def _paint_membership(paint_geoms: dict, xy: np.ndarray) -> np.ndarray:
    """Class id per point from the painted geometry (0 = asphalt)."""
    cls = np.zeros(xy.shape[0], dtype=np.int32)
    for cid, name in ((1, LANE_DIVIDER), (2, STOP_LINE), (3, PEDESTRIAN_CROSSING)):
        geom = paint_geoms[name]
        if geom.is_empty:
            continue
        hit = shapely.intersects_xy(geom, xy[:, 0], xy[:, 1])
        cls[hit] = cid
    return cls


def _make_frame(spec: SceneSpec, paint_geoms: dict, rng: np.random.Generator,
                index: int) -> PointCloud:
    xy = _sample_frame_points(spec, rng)
    n = xy.shape[0]
    z = rng.normal(0.0, spec.z_noise, n) if spec.z_noise > 0 else np.zeros(n)
    cls = _paint_membership(paint_geoms, xy)
    inten = np.where(cls > 0, spec.paint_intensity, spec.asphalt_intensity)
    if spec.intensity_noise > 0:
        inten = inten + rng.normal(0.0, spec.intensity_noise, n)
    inten = np.clip(inten, 0.0, 255.0)
    return PointCloud(
        np.column_stack([xy, z, inten]),
        frame_id=f"{index:03d}",
        timestamp=index * spec.frame_interval,
    )


def _pixel_ground_points(spec: SceneSpec, calib: CameraCalibration):
    """Ground intersection of every pixel ray: (x, y, valid, distance)."""
    w, h = spec.image_width, spec.image_height
    us, vs = np.meshgrid(np.arange(w, dtype=np.float64), np.arange(h, dtype=np.float64))
    dir_cam = np.stack([
        (us - calib.u0) / calib.fx,
        (vs - calib.v0) / calib.fy,
        np.ones_like(us),
    ], axis=-1)
    r_t = calib.rotation.T
    dir_world = dir_cam @ r_t.T
    center = calib.camera_center()
    dz = dir_world[..., 2]
    with np.errstate(divide="ignore", invalid="ignore"):
        t = -center[2] / dz
    valid = (dz < 0) & np.isfinite(t) & (t > 0)
    gx = center[0] + t * dir_world[..., 0]
    gy = center[1] + t * dir_world[..., 1]
    x0, y0, x1, y1 = spec.region_bounds()
    valid &= (gx >= x0) & (gx <= x1) & (gy >= y0) & (gy <= y1)
    origin = spec.sensor_position()[:2]
    dist = np.hypot(gx - origin[0], gy - origin[1])
    return gx, gy, valid, dist


def _disk(radius_px: int) -> np.ndarray:
    r = int(radius_px)
    yy, xx = np.mgrid[-r:r + 1, -r:r + 1]
    return (xx * xx + yy * yy) <= r * r


def _render_mask(spec: SceneSpec, calib: CameraCalibration, semantic_geoms: dict) -> LabelMask:
    gx, gy, valid, dist = _pixel_ground_points(spec, calib)
    labels = np.zeros(gx.shape, dtype=np.int32)
    flat_ok = valid.ravel()
    xs = gx.ravel()[flat_ok]
    ys = gy.ravel()[flat_ok]
    for cid, name in ((1, LANE_DIVIDER), (2, STOP_LINE), (3, PEDESTRIAN_CROSSING)):
        geom = semantic_geoms[name]
        if geom.is_empty:
            continue
        hit = shapely.intersects_xy(geom, xs, ys)
        sel = np.zeros(labels.size, dtype=bool)
        sel[np.flatnonzero(flat_ok)[hit]] = True
        labels.ravel()[sel] = cid

    if spec.blur_px_per_10m > 0 or spec.aberration_px_per_10m > 0:
        labels = _degrade_by_distance(spec, labels, dist, valid)

    for u0, v0, u1, v1 in spec.occlusions:
        c0, c1 = int(max(0, math.floor(u0))), int(min(spec.image_width, math.ceil(u1)))
        r0, r1 = int(max(0, math.floor(v0))), int(min(spec.image_height, math.ceil(v1)))
        labels[r0:r1, c0:c1] = 0

    return LabelMask(width=spec.image_width, height=spec.image_height,
                     labels=labels, class_table=dict(DEFAULT_CLASS_TABLE))


def _degrade_by_distance(spec: SceneSpec, labels: np.ndarray, dist: np.ndarray,
                         valid: np.ndarray) -> np.ndarray:
    """Distance-dependent image degradation.

    Blur dilates labels in 10 m ground-distance bands (far elements smear
    wider); aberration warps the whole label image sideways by a smoothly
    distance-scaled pixel shift, so far fits land off the true geometry.
    """
    out = labels
    if spec.blur_px_per_10m > 0:
        band_edges = np.arange(0.0, float(np.max(np.where(valid, dist, 0.0))) + 10.0, 10.0)
        grown_all = np.zeros_like(labels)
        for cid in (1, 2, 3):
            base = labels == cid
            if not base.any():
                continue
            grown = np.zeros_like(base)
            for lo, hi in zip(band_edges[:-1], band_edges[1:]):
                band = base & valid & (dist >= lo) & (dist < hi)
                if not band.any():
                    continue
                radius = int(round(spec.blur_px_per_10m * (0.5 * (lo + hi)) / 10.0))
                if radius > 0:
                    band = ndimage.binary_dilation(band, structure=_disk(radius))
                grown |= band
            grown_all[grown] = cid
        out = grown_all

    if spec.aberration_px_per_10m > 0:
        shift = np.where(valid, spec.aberration_px_per_10m * dist / 10.0, 0.0)
        us = np.arange(out.shape[1])[None, :]
        src = np.rint(us - shift).astype(np.int64)
        ok = (src >= 0) & (src < out.shape[1])
        warped = np.zeros_like(out)
        rows = np.broadcast_to(np.arange(out.shape[0])[:, None], out.shape)
        warped[ok] = out[rows[ok], src[ok]]
        out = warped

    return out


def generate_scene(spec: SceneSpec) -> Scene:
    """Deterministically generate a full scene from its specification."""
    gt_elements, paint_geoms, semantic_geoms = _build_layout(spec)
    calib = _build_calibration(spec)

    children = np.random.SeedSequence(spec.seed).spawn(spec.frames)
    frames = [
        _make_frame(spec, paint_geoms, np.random.default_rng(children[i]), i)
        for i in range(spec.frames)
    ]

    mask = _render_mask(spec, calib, semantic_geoms)
    masks = [
        LabelMask(width=mask.width, height=mask.height, labels=mask.labels,
                  class_table=dict(mask.class_table), timestamp=i * spec.frame_interval)
        for i in range(spec.frames)
    ]

    gt = VectorMap(elements=tuple(gt_elements), crs_note="map")
    return Scene(gt=gt, frames=frames, masks=masks, calib=calib, spec=spec,
                 paint_geoms=paint_geoms, semantic_geoms=semantic_geoms)


def occlusions_over_elements(
    spec: SceneSpec,
    element_indices: list[int] | tuple[int, ...],
    pad_px: float = 8.0,
) -> tuple[tuple[float, float, float, float], ...]:
    """Image-space rectangles covering the projections of chosen ground
    truth elements, for building occlusion degradations that are
    guaranteed to hit something."""
    from .geometry import project_points

    gt_elements, _, _ = _build_layout(spec)
    calib = _build_calibration(spec)
    rects = []
    for idx in element_indices:
        e = gt_elements[idx % len(gt_elements)]
        xyz = np.column_stack([e.vertices, np.zeros(len(e.vertices))])
        uv, zc = project_points(xyz, calib)
        ok = zc > 0
        if not ok.any():
            continue
        u0 = float(np.clip(uv[ok, 0].min() - pad_px, 0, spec.image_width))
        u1 = float(np.clip(uv[ok, 0].max() + pad_px, 0, spec.image_width))
        v0 = float(np.clip(uv[ok, 1].min() - pad_px, 0, spec.image_height))
        v1 = float(np.clip(uv[ok, 1].max() + pad_px, 0, spec.image_height))
        if u1 > u0 and v1 > v0:
            rects.append((u0, v0, u1, v1))
    return tuple(rects)


def write_scene(scene: Scene, out_dir: str | Path) -> None:
    """Write the scene directory layout consumed by the pipeline.

    Layout: gt.geojson, calib.json, spec.json, frames/NNN.rspc,
    masks/NNN.png (+ .json sidecars).
    """
    out = Path(out_dir)
    (out / "frames").mkdir(parents=True, exist_ok=True)
    (out / "masks").mkdir(parents=True, exist_ok=True)
    write_map_geojson(scene.gt, out / "gt.geojson")
    write_calibration(scene.calib, out / "calib.json")
    (out / "spec.json").write_text(
        json.dumps(scene.spec.to_json_dict(), indent=2) + "\n", encoding="utf-8")
    for i, (cloud, mask) in enumerate(zip(scene.frames, scene.masks)):
        write_cloud_rspc(cloud, out / "frames" / f"{i:03d}.rspc")
        write_mask_png(mask, out / "masks" / f"{i:03d}.png")
