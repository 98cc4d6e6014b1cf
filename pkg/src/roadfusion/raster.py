"""BEV intensity rasterisation and label-mask handling.

The intensity image assigns each grid cell the mean reflective intensity
of the points inside it, used downstream as a grayscale image.  Label
masks carry per-cell (or per-pixel) class ids with an explicit class
table; they serialise as 8-bit grayscale PNG plus a JSON sidecar that
pins the gray-value-to-class mapping.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image
from scipy import ndimage

from .errors import InputError
from .geometry import GridSpec, grid_indices
from .ground import PointCloud

logger = logging.getLogger(__name__)

BACKGROUND = "background"
LANE_DIVIDER = "lane_divider"
STOP_LINE = "stop_line"
PEDESTRIAN_CROSSING = "pedestrian_crossing"

DEFAULT_CLASS_TABLE: dict[int, str] = {
    0: BACKGROUND,
    1: LANE_DIVIDER,
    2: STOP_LINE,
    3: PEDESTRIAN_CROSSING,
}

# Gray values used when writing mask PNGs; the sidecar is authoritative.
DEFAULT_CLASS_GRAYS: dict[int, int] = {0: 0, 1: 90, 2: 180, 3: 255}


class UnknownLabel(InputError):
    """A label id has no entry in the class table."""


@dataclass(frozen=True)
class IntensityImage:
    """Per-cell mean intensity raster with its point counts.

    Row 0 corresponds to minimum y, column 0 to minimum x.  Cells holding
    no points have value 0.
    """

    spec: GridSpec
    cells: np.ndarray
    counts: np.ndarray

    def __post_init__(self):
        cells = np.ascontiguousarray(self.cells, dtype=np.float64)
        counts = np.ascontiguousarray(self.counts, dtype=np.int64)
        shape = (self.spec.rows, self.spec.cols)
        if cells.shape != shape or counts.shape != shape:
            raise InputError(f"raster arrays must have shape {shape}")
        cells.setflags(write=False)
        counts.setflags(write=False)
        object.__setattr__(self, "cells", cells)
        object.__setattr__(self, "counts", counts)


@dataclass(frozen=True)
class LabelMask:
    """2D grid of class ids with the table mapping id -> class name."""

    width: int
    height: int
    labels: np.ndarray
    class_table: dict[int, str]
    timestamp: float = 0.0

    def __post_init__(self):
        labels = np.ascontiguousarray(self.labels, dtype=np.int32)
        if labels.shape != (self.height, self.width):
            raise InputError(
                f"labels shape {labels.shape} does not match {self.height}x{self.width}"
            )
        if self.class_table.get(0) != BACKGROUND:
            raise InputError("class table must map id 0 to 'background'")
        present = np.unique(labels)
        missing = [int(v) for v in present if int(v) not in self.class_table]
        if missing:
            raise UnknownLabel(f"label ids without class table entry: {missing}")
        labels.setflags(write=False)
        object.__setattr__(self, "labels", labels)

    def class_ids(self) -> list[int]:
        """Non-background ids, ascending."""
        return sorted(i for i in self.class_table if i != 0)


def rasterize_intensity(ground: PointCloud, spec: GridSpec) -> IntensityImage:
    """Mean reflective intensity per grid cell, clamped to [0, 255].

    Points outside the grid are skipped (their count is logged).  Per-cell
    values are accumulated over intensity-sorted points so the result is
    bit-identical under any permutation of the input.
    """
    cells = np.zeros((spec.rows, spec.cols), dtype=np.float64)
    counts = np.zeros((spec.rows, spec.cols), dtype=np.int64)
    if len(ground) == 0:
        return IntensityImage(spec=spec, cells=cells, counts=counts)

    xi, yi, inside = grid_indices(ground.xyz[:, :2], spec)
    skipped = int((~inside).sum())
    if skipped:
        logger.info("rasterize_intensity: skipped %d points outside grid", skipped)
    xi, yi = xi[inside], yi[inside]
    inten = ground.intensity[inside]
    if xi.size == 0:
        return IntensityImage(spec=spec, cells=cells, counts=counts)

    flat = yi * spec.cols + xi
    order = np.lexsort((inten, flat))
    flat_sorted = flat[order]
    inten_sorted = inten[order]
    starts = np.flatnonzero(np.diff(flat_sorted, prepend=flat_sorted[0] - 1))
    sums = np.add.reduceat(inten_sorted, starts)
    group_counts = np.diff(np.append(starts, flat_sorted.size))
    cell_ids = flat_sorted[starts]
    means = np.clip(sums / group_counts, 0.0, 255.0)

    cells.ravel()[cell_ids] = means
    counts.ravel()[cell_ids] = group_counts
    return IntensityImage(spec=spec, cells=cells, counts=counts)


def cell_members(ground: PointCloud, spec: GridSpec) -> dict[tuple[int, int], np.ndarray]:
    """Inverse grid index: cell (x_i, y_i) -> indices of the points inside it."""
    if len(ground) == 0:
        return {}
    xi, yi, inside = grid_indices(ground.xyz[:, :2], spec)
    idx = np.flatnonzero(inside)
    if idx.size == 0:
        return {}
    flat = yi[idx] * spec.cols + xi[idx]
    order = np.argsort(flat, kind="stable")
    flat_sorted = flat[order]
    idx_sorted = idx[order]
    starts = np.flatnonzero(np.diff(flat_sorted, prepend=flat_sorted[0] - 1))
    bounds = np.append(starts, flat_sorted.size)
    out: dict[tuple[int, int], np.ndarray] = {}
    for s, e in zip(bounds[:-1], bounds[1:]):
        cell = int(flat_sorted[s])
        out[(cell % spec.cols, cell // spec.cols)] = idx_sorted[s:e]
    return out


def one_hot_masks(mask: LabelMask) -> dict[int, np.ndarray]:
    """One binary mask per non-background class; pixel set iff label matches."""
    present = np.unique(mask.labels)
    unknown = [int(v) for v in present if int(v) not in mask.class_table]
    if unknown:
        raise UnknownLabel(f"label ids without class table entry: {unknown}")
    return {cid: mask.labels == cid for cid in mask.class_ids()}


def decode_one_hot(masks: dict[int, np.ndarray], class_table: dict[int, str],
                   timestamp: float = 0.0) -> LabelMask:
    """Rebuild a LabelMask from per-class binary masks (background where none set)."""
    if not masks:
        raise InputError("cannot decode an empty mask set")
    shape = next(iter(masks.values())).shape
    labels = np.zeros(shape, dtype=np.int32)
    for cid in sorted(masks):
        labels[masks[cid]] = cid
    return LabelMask(width=shape[1], height=shape[0], labels=labels,
                     class_table=class_table, timestamp=timestamp)


# ---------------------------------------------------------------------------
# PNG + sidecar serialisation


def _sidecar_path(path: Path) -> Path:
    return path.with_suffix(".json")


def write_intensity_png(img: IntensityImage, path: str | Path) -> None:
    path = Path(path)
    gray = np.clip(np.rint(img.cells), 0, 255).astype(np.uint8)
    Image.fromarray(gray, mode="L").save(path, format="PNG")
    sidecar = {"kind": "intensity", "grid": img.spec.to_json_dict()}
    _sidecar_path(path).write_text(json.dumps(sidecar, indent=2) + "\n", encoding="utf-8")


def read_intensity_png(path: str | Path) -> IntensityImage:
    """Load an intensity raster; counts are reconstructed as cell occupancy."""
    path = Path(path)
    side = _sidecar_path(path)
    if not side.exists():
        raise InputError(f"missing sidecar for {path}")
    meta = json.loads(side.read_text(encoding="utf-8"))
    spec = GridSpec.from_json_dict(meta["grid"])
    cells = np.asarray(Image.open(path), dtype=np.float64)
    if cells.shape != (spec.rows, spec.cols):
        raise InputError(f"{path}: PNG shape {cells.shape} does not match sidecar grid")
    return IntensityImage(spec=spec, cells=cells, counts=(cells > 0).astype(np.int64))


def write_mask_png(mask: LabelMask, path: str | Path,
                   grays: dict[int, int] | None = None,
                   grid: GridSpec | None = None) -> None:
    path = Path(path)
    grays = grays or DEFAULT_CLASS_GRAYS
    missing = [cid for cid in mask.class_table if cid not in grays]
    if missing:
        raise InputError(f"no gray value assigned for class ids {missing}")
    img = np.zeros((mask.height, mask.width), dtype=np.uint8)
    for cid in mask.class_ids():
        img[mask.labels == cid] = grays[cid]
    Image.fromarray(img, mode="L").save(path, format="PNG")
    sidecar = {
        "kind": "mask",
        "width": mask.width,
        "height": mask.height,
        "timestamp": mask.timestamp,
        "class_table": {
            str(cid): {"name": name, "gray": grays[cid]}
            for cid, name in sorted(mask.class_table.items())
        },
    }
    if grid is not None:
        sidecar["grid"] = grid.to_json_dict()
    _sidecar_path(path).write_text(json.dumps(sidecar, indent=2) + "\n", encoding="utf-8")


def read_mask_png(path: str | Path) -> LabelMask:
    path = Path(path)
    if not path.exists():
        raise InputError(f"mask file not found: {path}")
    side = _sidecar_path(path)
    if not side.exists():
        raise InputError(f"missing sidecar for {path}")
    meta = json.loads(side.read_text(encoding="utf-8"))
    gray = np.asarray(Image.open(path), dtype=np.uint8)
    class_table: dict[int, str] = {}
    labels = np.zeros(gray.shape, dtype=np.int32)
    seen = set()
    for cid_str, entry in meta["class_table"].items():
        cid = int(cid_str)
        gval = int(entry["gray"])
        if gval in seen:
            raise InputError(f"{side}: duplicate gray value {gval}")
        seen.add(gval)
        class_table[cid] = str(entry["name"])
        if cid != 0:
            labels[gray == gval] = cid
    stray = np.setdiff1d(np.unique(gray), np.asarray(sorted(seen), dtype=np.uint8))
    if stray.size:
        raise InputError(f"{path}: gray values {stray.tolist()} not in class table")
    return LabelMask(width=gray.shape[1], height=gray.shape[0], labels=labels,
                     class_table=class_table, timestamp=float(meta.get("timestamp", 0.0)))


# ---------------------------------------------------------------------------
# Threshold segmentation of intensity images


def _disk(radius_cells: int) -> np.ndarray:
    r = int(radius_cells)
    yy, xx = np.mgrid[-r:r + 1, -r:r + 1]
    return (xx * xx + yy * yy) <= r * r


def segment_intensity(
    img: IntensityImage,
    threshold: float = 128.0,
    close_radius: float = 0.5,
    crossing_min_width: float = 1.2,
    divider_min_length: float = 8.0,
    stop_min_length: float = 4.0,
    stop_min_width: float = 0.25,
    min_component_cells: int = 4,
) -> LabelMask:
    """Heuristic segmentation of an intensity image into element classes.

    Stands in for a learned segmentation model when no externally produced
    mask is supplied.  Cells at or above the intensity threshold count as
    paint; paint within ``close_radius`` metres groups into one component
    (so crossing stripes merge); each component is classified by its
    principal-axis extents:

    * minor extent >= crossing_min_width: pedestrian crossing,
    * else major extent >= divider_min_length: lane divider,
    * else major >= stop_min_length and minor >= stop_min_width: stop line,
    * else: background.

    The fallthrough to background is deliberate: a fragment too small to
    classify is dropped rather than guessed, so sparse regions lose recall
    instead of gaining wrong-class elements.
    """
    paint = img.cells >= threshold
    cell = min(img.spec.cell_size_x, img.spec.cell_size_y)
    labels = np.zeros(paint.shape, dtype=np.int32)
    if not paint.any():
        return LabelMask(width=img.spec.cols, height=img.spec.rows, labels=labels,
                         class_table=dict(DEFAULT_CLASS_TABLE))

    dilate_r = max(1, int(np.ceil(close_radius / 2.0 / cell)))
    grouped = ndimage.binary_dilation(paint, structure=_disk(dilate_r))
    comp, n_comp = ndimage.label(grouped, structure=np.ones((3, 3), dtype=bool))

    xs, ys = img.spec.cell_centers()
    rows_idx, cols_idx = np.nonzero(paint)
    comp_of_paint = comp[rows_idx, cols_idx]
    px = xs[cols_idx]
    py = ys[rows_idx]
    for cid in range(1, n_comp + 1):
        sel = comp_of_paint == cid
        if int(sel.sum()) < min_component_cells:
            continue
        pts = np.column_stack([px[sel], py[sel]])
        centered = pts - pts.mean(axis=0)
        cov = centered.T @ centered / pts.shape[0]
        _, eigvecs = np.linalg.eigh(cov)
        proj = centered @ eigvecs
        minor = float(proj[:, 0].max() - proj[:, 0].min()) + cell
        major = float(proj[:, 1].max() - proj[:, 1].min()) + cell
        if minor >= crossing_min_width:
            klass = 3  # pedestrian_crossing
        elif major >= divider_min_length:
            klass = 1  # lane_divider
        elif major >= stop_min_length and minor >= stop_min_width:
            klass = 2  # stop_line
        else:
            continue
        labels[rows_idx[sel], cols_idx[sel]] = klass

    return LabelMask(width=img.spec.cols, height=img.spec.rows, labels=labels,
                     class_table=dict(DEFAULT_CLASS_TABLE))
