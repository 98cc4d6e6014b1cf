"""Label transfer onto ground points and result-level point merging.

Two labelling paths feed the map: camera masks label points through the
projection model, intensity-image segmentations label points through grid
cell membership.  Their outputs merge as a per-class multiset union with
exact-duplicate collapsing, which is what multi-frame aggregation uses as
well.

Labelled points serialise as ASCII ``x y z intensity class_id`` with the
class table in ``#`` header comments.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import IntEnum
from pathlib import Path

import numpy as np

from .errors import InputError
from .geometry import CameraCalibration, EPS_DEPTH, GridSpec, grid_indices, project_points
from .ground import PointCloud
from .raster import DEFAULT_CLASS_TABLE, LabelMask

# Identical-point tolerance for deduplication: coordinates are rounded to
# this many decimals before comparison.
DEDUP_DECIMALS = 9


class DimensionMismatch(InputError):
    """Mask dimensions do not match the projection or grid geometry."""


class ClassTableMismatch(InputError):
    """Two labelled point sets use different class tables."""


class Provenance(IntEnum):
    FROM_IMAGE = 1
    FROM_INTENSITY = 2
    MERGED = 3


@dataclass(frozen=True)
class LabeledPoints:
    """Points carrying exactly one non-background class each."""

    xyzi: np.ndarray
    class_ids: np.ndarray
    provenance: np.ndarray
    class_table: dict[int, str]
    frame_id: str = ""

    def __post_init__(self):
        xyzi = np.ascontiguousarray(self.xyzi, dtype=np.float64).reshape(-1, 4)
        cids = np.ascontiguousarray(self.class_ids, dtype=np.int32).reshape(-1)
        prov = np.ascontiguousarray(self.provenance, dtype=np.int8).reshape(-1)
        if not (xyzi.shape[0] == cids.shape[0] == prov.shape[0]):
            raise InputError("labelled point arrays disagree in length")
        if cids.size:
            present = np.unique(cids)
            bad = [int(v) for v in present if int(v) not in self.class_table or int(v) == 0]
            if bad:
                raise InputError(f"invalid class ids in labelled points: {bad}")
        for a in (xyzi, cids, prov):
            a.setflags(write=False)
        object.__setattr__(self, "xyzi", xyzi)
        object.__setattr__(self, "class_ids", cids)
        object.__setattr__(self, "provenance", prov)

    def __len__(self) -> int:
        return self.xyzi.shape[0]

    def for_class(self, class_id: int) -> np.ndarray:
        return self.xyzi[self.class_ids == class_id]

    def counts_by_class(self) -> dict[int, int]:
        ids, counts = np.unique(self.class_ids, return_counts=True)
        return {int(i): int(c) for i, c in zip(ids, counts)}

    @classmethod
    def empty(cls, class_table: dict[int, str] | None = None, frame_id: str = "") -> "LabeledPoints":
        return cls(
            xyzi=np.empty((0, 4), dtype=np.float64),
            class_ids=np.empty((0,), dtype=np.int32),
            provenance=np.empty((0,), dtype=np.int8),
            class_table=dict(class_table or DEFAULT_CLASS_TABLE),
            frame_id=frame_id,
        )


def label_by_image(ground: PointCloud, mask: LabelMask, calib: CameraCalibration) -> LabeledPoints:
    """Assign the class of the nearest pixel to each imageable ground point.

    Points projecting out of bounds, behind the camera, or onto background
    pixels are dropped.  Pixel lookup rounds half up on both axes.
    """
    if (mask.width, mask.height) != (calib.image_width, calib.image_height):
        raise DimensionMismatch(
            f"mask is {mask.width}x{mask.height}, calibration expects "
            f"{calib.image_width}x{calib.image_height}"
        )
    if len(ground) == 0:
        return LabeledPoints.empty(mask.class_table, ground.frame_id)

    uv, zc = project_points(ground.xyz, calib)
    ok = zc > EPS_DEPTH
    px = np.full(len(ground), -1, dtype=np.int64)
    py = np.full(len(ground), -1, dtype=np.int64)
    px[ok] = np.floor(uv[ok, 0] + 0.5).astype(np.int64)
    py[ok] = np.floor(uv[ok, 1] + 0.5).astype(np.int64)
    ok &= (px >= 0) & (px < mask.width) & (py >= 0) & (py < mask.height)

    cls = np.zeros(len(ground), dtype=np.int32)
    cls[ok] = mask.labels[py[ok], px[ok]]
    keep = ok & (cls != 0)
    return LabeledPoints(
        xyzi=ground.xyzi[keep],
        class_ids=cls[keep],
        provenance=np.full(int(keep.sum()), Provenance.FROM_IMAGE, dtype=np.int8),
        class_table=dict(mask.class_table),
        frame_id=ground.frame_id,
    )


def label_by_intensity(ground: PointCloud, spec: GridSpec, seg: LabelMask) -> LabeledPoints:
    """Assign each point the segmentation label of its grid cell."""
    if (seg.width, seg.height) != (spec.cols, spec.rows):
        raise DimensionMismatch(
            f"segmentation is {seg.width}x{seg.height}, grid is {spec.cols}x{spec.rows}"
        )
    if len(ground) == 0:
        return LabeledPoints.empty(seg.class_table, ground.frame_id)

    xi, yi, inside = grid_indices(ground.xyz[:, :2], spec)
    cls = np.zeros(len(ground), dtype=np.int32)
    cls[inside] = seg.labels[yi[inside], xi[inside]]
    keep = inside & (cls != 0)
    return LabeledPoints(
        xyzi=ground.xyzi[keep],
        class_ids=cls[keep],
        provenance=np.full(int(keep.sum()), Provenance.FROM_INTENSITY, dtype=np.int8),
        class_table=dict(seg.class_table),
        frame_id=ground.frame_id,
    )


def _dedup_keys(lp: LabeledPoints) -> np.ndarray:
    """Sortable per-point identity keys: (class id, rounded coordinates)."""
    coords = np.round(lp.xyzi[:, :3], DEDUP_DECIMALS)
    coords = np.where(coords == 0.0, 0.0, coords)  # fold -0.0 into +0.0
    rows = np.column_stack([lp.class_ids.astype(np.float64), coords])
    rows = np.ascontiguousarray(rows)
    return rows.view([("", rows.dtype)] * rows.shape[1]).ravel()


def merge_labeled(a: LabeledPoints, b: LabeledPoints) -> LabeledPoints:
    """Per-class multiset union of two labelled point sets.

    Points are identical when they share a class and coordinates agree
    within the dedup tolerance; identical points collapse to the larger
    multiplicity and their provenance becomes MERGED when both inputs
    contribute.  Output order is canonical (class, then coordinates).
    """
    if a.class_table != b.class_table:
        raise ClassTableMismatch("labelled point sets use different class tables")
    if len(a) == 0 and len(b) == 0:
        return LabeledPoints.empty(a.class_table, a.frame_id)

    keys_a = _dedup_keys(a)
    keys_b = _dedup_keys(b)
    ua, first_a, ca = np.unique(keys_a, return_index=True, return_counts=True)
    ub, first_b, cb = np.unique(keys_b, return_index=True, return_counts=True)
    merged = np.unique(np.concatenate([ua, ub]))

    def _lookup(u: np.ndarray, counts: np.ndarray, firsts: np.ndarray):
        pos = np.searchsorted(u, merged)
        pos_c = np.clip(pos, 0, max(len(u) - 1, 0))
        has = (pos < len(u)) & (u[pos_c] == merged) if len(u) else np.zeros(len(merged), bool)
        cnt = np.where(has, counts[pos_c] if len(u) else 0, 0)
        first = np.where(has, firsts[pos_c] if len(u) else 0, -1)
        return has, cnt, first

    has_a, cnt_a, idx_a = _lookup(ua, ca, first_a)
    has_b, cnt_b, idx_b = _lookup(ub, cb, first_b)
    out_counts = np.maximum(cnt_a, cnt_b).astype(np.int64)

    n_out = int(out_counts.sum())
    xyzi = np.empty((n_out, 4), dtype=np.float64)
    cids = np.empty(n_out, dtype=np.int32)
    prov = np.empty(n_out, dtype=np.int8)

    rep_xyzi = np.where(has_a[:, None], a.xyzi[idx_a] if len(a) else 0.0,
                        b.xyzi[idx_b] if len(b) else 0.0)
    rep_cls = np.where(has_a, a.class_ids[idx_a] if len(a) else 0,
                       b.class_ids[idx_b] if len(b) else 0)
    rep_prov = np.where(
        has_a & has_b,
        np.int8(Provenance.MERGED),
        np.where(has_a, a.provenance[idx_a] if len(a) else 0,
                 b.provenance[idx_b] if len(b) else 0),
    )

    fill = np.repeat(np.arange(len(merged)), out_counts)
    xyzi[:] = rep_xyzi[fill]
    cids[:] = rep_cls[fill]
    prov[:] = rep_prov[fill]

    frame_id = a.frame_id if a.frame_id == b.frame_id else f"{a.frame_id}+{b.frame_id}"
    return LabeledPoints(xyzi=xyzi, class_ids=cids, provenance=prov,
                         class_table=dict(a.class_table), frame_id=frame_id)


def aggregate_frames(frames: list[LabeledPoints], k: int) -> LabeledPoints:
    """Multiset union of the first k frames' labelled points."""
    if k < 1:
        raise InputError("frame count k must be >= 1")
    if k > len(frames):
        raise InputError(f"requested {k} frames but only {len(frames)} available")
    out = frames[0]
    for lp in frames[1:k]:
        out = merge_labeled(out, lp)
    return out


# ---------------------------------------------------------------------------
# File I/O


def write_labeled(lp: LabeledPoints, path: str | Path) -> None:
    lines = [f"# frame_id {lp.frame_id}"]
    for cid, name in sorted(lp.class_table.items()):
        lines.append(f"# class {cid} {name}")
    for row, cid in zip(lp.xyzi, lp.class_ids):
        lines.append(f"{row[0]:.17g} {row[1]:.17g} {row[2]:.17g} {row[3]:.17g} {cid}")
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def read_labeled(path: str | Path) -> LabeledPoints:
    path = Path(path)
    if not path.exists():
        raise InputError(f"labelled points file not found: {path}")
    class_table: dict[int, str] = {}
    frame_id = path.stem
    rows, cids = [], []
    for lineno, raw in enumerate(path.read_text(encoding="utf-8").splitlines(), start=1):
        split = raw.split("#", 1)
        comment = split[1].strip() if len(split) > 1 else ""
        body = split[0].strip()
        if comment.startswith("class "):
            parts = comment.split(None, 2)
            if len(parts) == 3:
                class_table[int(parts[1])] = parts[2]
        elif comment.startswith("frame_id"):
            parts = comment.split(None, 1)
            frame_id = parts[1] if len(parts) > 1 else frame_id
        if not body:
            continue
        parts = body.split()
        if len(parts) != 5:
            raise InputError(f"{path}:{lineno}: expected 'x y z intensity class_id'")
        rows.append([float(v) for v in parts[:4]])
        cids.append(int(parts[4]))
    if not class_table:
        class_table = dict(DEFAULT_CLASS_TABLE)
    n = len(rows)
    return LabeledPoints(
        xyzi=np.asarray(rows, dtype=np.float64).reshape(-1, 4),
        class_ids=np.asarray(cids, dtype=np.int32),
        provenance=np.full(n, Provenance.MERGED, dtype=np.int8),
        class_table=class_table,
        frame_id=frame_id,
    )
