"""Ground-plane extraction via RANSAC, and point-cloud file I/O.

Point cloud files come in two flavours:

* ASCII: one point per line ``x y z intensity``, ``#`` starts a comment.
* Binary (``.rspc``): 16-byte little-endian header (magic ``RSPC``,
  uint32 point count, uint64 timestamp in microseconds) followed by
  float32 x/y/z/intensity records.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path
from typing import NamedTuple

import numpy as np

from .errors import InputError
from .geometry import DegenerateInput, Plane, fit_plane_least_squares

RSPC_MAGIC = b"RSPC"


class NoPlaneFound(InputError):
    """RANSAC could not find a plane supported by enough inliers."""


@dataclass(frozen=True)
class PointCloud:
    """An ordered set of 3D points with per-point reflective intensity."""

    xyzi: np.ndarray
    frame_id: str = ""
    timestamp: float = 0.0

    def __post_init__(self):
        a = np.ascontiguousarray(self.xyzi, dtype=np.float64)
        if a.ndim != 2 or a.shape[1] != 4:
            raise InputError(f"point cloud array must be (N, 4), got {a.shape}")
        if not np.all(np.isfinite(a)):
            raise InputError("point cloud contains non-finite values")
        a.setflags(write=False)
        object.__setattr__(self, "xyzi", a)

    def __len__(self) -> int:
        return self.xyzi.shape[0]

    @property
    def xyz(self) -> np.ndarray:
        return self.xyzi[:, :3]

    @property
    def intensity(self) -> np.ndarray:
        return self.xyzi[:, 3]

    def select(self, mask_or_indices: np.ndarray) -> "PointCloud":
        return PointCloud(self.xyzi[mask_or_indices], self.frame_id, self.timestamp)

    @classmethod
    def from_arrays(
        cls,
        xyz: np.ndarray,
        intensity: np.ndarray | float = 0.0,
        frame_id: str = "",
        timestamp: float = 0.0,
    ) -> "PointCloud":
        xyz = np.asarray(xyz, dtype=np.float64).reshape(-1, 3)
        inten = np.broadcast_to(np.asarray(intensity, dtype=np.float64), (xyz.shape[0],))
        return cls(np.column_stack([xyz, inten]), frame_id, timestamp)

    @classmethod
    def empty(cls, frame_id: str = "", timestamp: float = 0.0) -> "PointCloud":
        return cls(np.empty((0, 4), dtype=np.float64), frame_id, timestamp)


@dataclass(frozen=True)
class RansacConfig:
    """Parameters for the plane search; seed fixes every random draw."""

    max_iterations: int = 500
    inlier_threshold: float = 0.05
    min_inliers_fraction: float = 0.2
    seed: int = 0

    def __post_init__(self):
        if self.max_iterations < 1:
            raise InputError("max_iterations must be >= 1")
        if self.inlier_threshold <= 0:
            raise InputError("inlier_threshold must be positive")
        if not (0 < self.min_inliers_fraction <= 1):
            raise InputError("min_inliers_fraction must be in (0, 1]")


class GroundExtraction(NamedTuple):
    ground: PointCloud
    non_ground: PointCloud
    plane: Plane


def extract_ground(cloud: PointCloud, cfg: RansacConfig = RansacConfig()) -> GroundExtraction:
    """Split a cloud into the dominant plane's inliers and the rest.

    Standard RANSAC: sample 3 points, hypothesise a plane, count points
    within the inlier threshold, keep the best hypothesis, then refine it
    with one least-squares pass over its inliers.  The returned ground set
    is recomputed against the refined plane, so every ground point is
    within the threshold of the plane actually returned.  Deterministic
    for a given seed.
    """
    n = len(cloud)
    if n < 3:
        raise DegenerateInput(f"ground extraction needs >= 3 points, got {n}")

    xyz = cloud.xyz
    rng = np.random.default_rng(cfg.seed)
    triplets = rng.integers(0, n, size=(cfg.max_iterations, 3))

    best_count = -1
    best_mask: np.ndarray | None = None
    best_plane: Plane | None = None
    for i in range(cfg.max_iterations):
        ia, ib, ic = triplets[i]
        a = xyz[ia]
        normal = np.cross(xyz[ib] - a, xyz[ic] - a)
        norm = np.linalg.norm(normal)
        if norm < 1e-12:
            continue
        normal = normal / norm
        dist = np.abs((xyz - a) @ normal)
        mask = dist <= cfg.inlier_threshold
        count = int(mask.sum())
        if count > best_count:
            best_count = count
            best_mask = mask
            best_plane = Plane(normal=normal, d=-float(normal @ a))

    if best_mask is None or best_count / n < cfg.min_inliers_fraction:
        raise NoPlaneFound(
            f"best inlier fraction {max(best_count, 0) / n:.3f} below "
            f"minimum {cfg.min_inliers_fraction:.3f}"
        )

    try:
        plane = fit_plane_least_squares(xyz[best_mask])
    except DegenerateInput:
        # Inliers of a valid hypothesis are almost never degenerate; fall
        # back to the sample plane if they are.
        plane = best_plane

    ground_mask = plane.distance(xyz) <= cfg.inlier_threshold
    return GroundExtraction(
        ground=cloud.select(ground_mask),
        non_ground=cloud.select(~ground_mask),
        plane=plane,
    )


# ---------------------------------------------------------------------------
# File I/O


def write_cloud_ascii(cloud: PointCloud, path: str | Path) -> None:
    path = Path(path)
    lines = [f"# frame_id {cloud.frame_id}", f"# timestamp {cloud.timestamp!r}"]
    for row in cloud.xyzi:
        lines.append(f"{row[0]:.17g} {row[1]:.17g} {row[2]:.17g} {row[3]:.17g}")
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")


def read_cloud_ascii(path: str | Path) -> PointCloud:
    path = Path(path)
    frame_id = path.stem
    timestamp = 0.0
    rows = []
    for lineno, raw in enumerate(path.read_text(encoding="utf-8").splitlines(), start=1):
        line = raw.split("#", 1)
        comment = line[1].strip() if len(line) > 1 else ""
        body = line[0].strip()
        if comment.startswith("frame_id"):
            frame_id = comment.split(None, 1)[1] if len(comment.split(None, 1)) > 1 else frame_id
        elif comment.startswith("timestamp"):
            try:
                timestamp = float(comment.split(None, 1)[1])
            except (IndexError, ValueError):
                pass
        if not body:
            continue
        parts = body.split()
        if len(parts) != 4:
            raise InputError(f"{path}:{lineno}: expected 'x y z intensity', got {len(parts)} fields")
        try:
            rows.append([float(v) for v in parts])
        except ValueError as exc:
            raise InputError(f"{path}:{lineno}: {exc}") from exc
    arr = np.asarray(rows, dtype=np.float64).reshape(-1, 4)
    return PointCloud(arr, frame_id=frame_id, timestamp=timestamp)


def write_cloud_rspc(cloud: PointCloud, path: str | Path) -> None:
    ts_us = int(round(cloud.timestamp * 1e6))
    header = RSPC_MAGIC + struct.pack("<IQ", len(cloud), ts_us)
    body = cloud.xyzi.astype("<f4").tobytes()
    Path(path).write_bytes(header + body)


def read_cloud_rspc(path: str | Path) -> PointCloud:
    path = Path(path)
    data = path.read_bytes()
    if len(data) < 16 or data[:4] != RSPC_MAGIC:
        raise InputError(f"{path}: not an RSPC point cloud file")
    count, ts_us = struct.unpack("<IQ", data[4:16])
    expected = 16 + count * 16
    if len(data) != expected:
        raise InputError(f"{path}: expected {expected} bytes for {count} points, got {len(data)}")
    arr = np.frombuffer(data, dtype="<f4", offset=16).reshape(count, 4).astype(np.float64)
    return PointCloud(arr, frame_id=path.stem, timestamp=ts_us / 1e6)


def load_cloud(path: str | Path) -> PointCloud:
    """Read a point cloud, sniffing binary vs ASCII format."""
    path = Path(path)
    if not path.exists():
        raise InputError(f"point cloud file not found: {path}")
    with open(path, "rb") as fh:
        magic = fh.read(4)
    if magic == RSPC_MAGIC:
        return read_cloud_rspc(path)
    return read_cloud_ascii(path)
