"""Core coordinate types, pinhole camera model, and BEV grid indexing.

Conventions used throughout the package:

World / LiDAR frame (right-handed): x, y on the ground plane, z up, metres.
Camera frame: x right, y down, z forward along the optical axis.
Image frame: u right, v down, continuous pixel coordinates.
BEV grid: column 0 at minimum x, row 0 at minimum y, half-open cells.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, NamedTuple

import numpy as np

from .errors import InputError

# Points with camera-frame depth at or below this are not imageable.
EPS_DEPTH = 1e-6


class RejectedBehindCamera(InputError):
    """Point has non-positive camera-frame depth and cannot be projected."""


class OutOfGrid(InputError):
    """Point falls outside the gridded region."""


class DegenerateInput(InputError):
    """Too few or geometrically degenerate points for the requested fit."""


class Point3(NamedTuple):
    """A 3D point with reflective intensity (unitless sensor scale)."""

    x: float
    y: float
    z: float
    intensity: float = 0.0


class PixelCoord(NamedTuple):
    """Continuous pixel coordinates."""

    u: float
    v: float


def _readonly(a: np.ndarray) -> np.ndarray:
    a = np.ascontiguousarray(a, dtype=np.float64)
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class CameraCalibration:
    """Pinhole intrinsics plus world-to-camera extrinsics.

    f is the focal length in metres, dx/dy the physical pixel pitch in
    metres per pixel, (u0, v0) the principal point in pixels.  rotation is
    the 3x3 world-to-camera rotation, translation the world-to-camera
    offset in metres: p_cam = R @ p_world + T.
    """

    f: float
    dx: float
    dy: float
    u0: float
    v0: float
    rotation: np.ndarray
    translation: np.ndarray
    image_width: int
    image_height: int

    def __post_init__(self):
        if not (self.f > 0 and self.dx > 0 and self.dy > 0):
            raise InputError("focal length and pixel pitch must be positive")
        if self.image_width <= 0 or self.image_height <= 0:
            raise InputError("image dimensions must be positive")
        r = np.asarray(self.rotation, dtype=np.float64).reshape(3, 3)
        t = np.asarray(self.translation, dtype=np.float64).reshape(3)
        if not np.all(np.isfinite(r)) or not np.all(np.isfinite(t)):
            raise InputError("calibration contains non-finite values")
        if np.max(np.abs(r @ r.T - np.eye(3))) > 1e-6:
            raise InputError("rotation matrix is not orthonormal")
        if abs(np.linalg.det(r) - 1.0) > 1e-6:
            raise InputError("rotation matrix determinant is not +1")
        object.__setattr__(self, "rotation", _readonly(r))
        object.__setattr__(self, "translation", _readonly(t))

    @property
    def fx(self) -> float:
        return self.f / self.dx

    @property
    def fy(self) -> float:
        return self.f / self.dy

    def camera_center(self) -> np.ndarray:
        """Camera position in world coordinates."""
        return -self.rotation.T @ self.translation

    def to_json_dict(self) -> dict:
        return {
            "f": self.f,
            "dx": self.dx,
            "dy": self.dy,
            "u0": self.u0,
            "v0": self.v0,
            "R": [float(v) for v in self.rotation.ravel()],
            "T": [float(v) for v in self.translation],
            "image_width": self.image_width,
            "image_height": self.image_height,
        }

    @classmethod
    def from_json_dict(cls, d: dict) -> "CameraCalibration":
        try:
            return cls(
                f=float(d["f"]),
                dx=float(d["dx"]),
                dy=float(d["dy"]),
                u0=float(d["u0"]),
                v0=float(d["v0"]),
                rotation=np.asarray(d["R"], dtype=np.float64).reshape(3, 3),
                translation=np.asarray(d["T"], dtype=np.float64),
                image_width=int(d["image_width"]),
                image_height=int(d["image_height"]),
            )
        except (KeyError, ValueError, TypeError) as exc:
            raise InputError(f"invalid calibration data: {exc}") from exc


def write_calibration(calib: CameraCalibration, path: str | Path) -> None:
    Path(path).write_text(json.dumps(calib.to_json_dict(), indent=2) + "\n", encoding="utf-8")


def read_calibration(path: str | Path) -> CameraCalibration:
    path = Path(path)
    if not path.exists():
        raise InputError(f"calibration file not found: {path}")
    return CameraCalibration.from_json_dict(json.loads(path.read_text(encoding="utf-8")))


@dataclass(frozen=True)
class GridSpec:
    """BEV gridding parameters: lower bounds, cell edge lengths, extent."""

    x_min: float
    y_min: float
    cell_size_x: float
    cell_size_y: float
    cols: int
    rows: int

    def __post_init__(self):
        if self.cell_size_x <= 0 or self.cell_size_y <= 0:
            raise InputError("grid cell sizes must be positive")
        if self.cols <= 0 or self.rows <= 0:
            raise InputError("grid extent must be positive")

    @property
    def x_max(self) -> float:
        return self.x_min + self.cols * self.cell_size_x

    @property
    def y_max(self) -> float:
        return self.y_min + self.rows * self.cell_size_y

    def bounds(self) -> tuple[float, float, float, float]:
        return (self.x_min, self.y_min, self.x_max, self.y_max)

    def cell_centers(self) -> tuple[np.ndarray, np.ndarray]:
        """Center coordinates per column (x) and per row (y)."""
        xs = self.x_min + (np.arange(self.cols) + 0.5) * self.cell_size_x
        ys = self.y_min + (np.arange(self.rows) + 0.5) * self.cell_size_y
        return xs, ys

    @classmethod
    def from_bounds(
        cls,
        x_min: float,
        y_min: float,
        x_max: float,
        y_max: float,
        cell_size: float,
    ) -> "GridSpec":
        """Smallest grid with the given cell size covering the bounds."""
        if not (x_max > x_min and y_max > y_min):
            raise InputError("empty bounds for grid construction")
        cols = int(np.floor((x_max - x_min) / cell_size)) + 1
        rows = int(np.floor((y_max - y_min) / cell_size)) + 1
        return cls(x_min, y_min, cell_size, cell_size, cols, rows)

    def to_json_dict(self) -> dict:
        return {
            "x_min": self.x_min,
            "y_min": self.y_min,
            "cell_size_x": self.cell_size_x,
            "cell_size_y": self.cell_size_y,
            "cols": self.cols,
            "rows": self.rows,
        }

    @classmethod
    def from_json_dict(cls, d: dict) -> "GridSpec":
        return cls(
            x_min=float(d["x_min"]),
            y_min=float(d["y_min"]),
            cell_size_x=float(d["cell_size_x"]),
            cell_size_y=float(d["cell_size_y"]),
            cols=int(d["cols"]),
            rows=int(d["rows"]),
        )


@dataclass(frozen=True)
class Plane:
    """Plane n . p + d = 0 with unit normal n."""

    normal: np.ndarray
    d: float

    def __post_init__(self):
        n = np.asarray(self.normal, dtype=np.float64).reshape(3)
        norm = np.linalg.norm(n)
        if not np.isfinite(norm) or norm == 0.0:
            raise InputError("plane normal must be a finite non-zero vector")
        object.__setattr__(self, "normal", _readonly(n / norm))

    def signed_distance(self, xyz: np.ndarray) -> np.ndarray:
        xyz = np.asarray(xyz, dtype=np.float64)
        return xyz @ self.normal + self.d

    def distance(self, xyz: np.ndarray) -> np.ndarray:
        return np.abs(self.signed_distance(xyz))


def project_point(p: Point3 | Iterable[float], calib: CameraCalibration) -> tuple[PixelCoord, float]:
    """Project one world point to pixel coordinates.

    Returns (PixelCoord, z_c) where z_c is the camera-frame depth.  Raises
    RejectedBehindCamera when the depth is at or below EPS_DEPTH.
    """
    xyz = np.asarray(tuple(p)[:3], dtype=np.float64)
    cam = calib.rotation @ xyz + calib.translation
    zc = float(cam[2])
    if zc <= EPS_DEPTH:
        raise RejectedBehindCamera(f"camera-frame depth {zc:.3g} <= {EPS_DEPTH:g}")
    u = calib.fx * cam[0] / zc + calib.u0
    v = calib.fy * cam[1] / zc + calib.v0
    return PixelCoord(float(u), float(v)), zc


def project_points(xyz: np.ndarray, calib: CameraCalibration) -> tuple[np.ndarray, np.ndarray]:
    """Vectorised projection of an (N, 3) array.

    Returns (uv, z_c) with uv shape (N, 2).  Points with depth <= EPS_DEPTH
    get uv = NaN; callers filter on z_c.
    """
    xyz = np.asarray(xyz, dtype=np.float64).reshape(-1, 3)
    cam = xyz @ calib.rotation.T + calib.translation
    zc = cam[:, 2]
    with np.errstate(divide="ignore", invalid="ignore"):
        u = calib.fx * cam[:, 0] / zc + calib.u0
        v = calib.fy * cam[:, 1] / zc + calib.v0
    bad = zc <= EPS_DEPTH
    uv = np.column_stack([u, v])
    uv[bad] = np.nan
    return uv, zc


def back_project(uv: np.ndarray, zc: np.ndarray, calib: CameraCalibration) -> np.ndarray:
    """Invert the projection given pixel coordinates and camera depth."""
    uv = np.asarray(uv, dtype=np.float64).reshape(-1, 2)
    zc = np.asarray(zc, dtype=np.float64).reshape(-1)
    xc = (uv[:, 0] - calib.u0) / calib.fx * zc
    yc = (uv[:, 1] - calib.v0) / calib.fy * zc
    cam = np.column_stack([xc, yc, zc])
    return (cam - calib.translation) @ calib.rotation


def grid_index(p: Point3 | Iterable[float], spec: GridSpec) -> tuple[int, int]:
    """Grid cell (x_i, y_i) containing a point; floor semantics, half-open cells."""
    xy = tuple(p)[:2]
    xi = int(np.floor((xy[0] - spec.x_min) / spec.cell_size_x))
    yi = int(np.floor((xy[1] - spec.y_min) / spec.cell_size_y))
    if not (0 <= xi < spec.cols and 0 <= yi < spec.rows):
        raise OutOfGrid(f"point {xy} outside grid [{spec.cols}x{spec.rows}]")
    return xi, yi


def grid_indices(xy: np.ndarray, spec: GridSpec) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Vectorised grid_index: returns (x_i, y_i, inside) for an (N, 2) array."""
    xy = np.asarray(xy, dtype=np.float64).reshape(-1, 2)
    xi = np.floor((xy[:, 0] - spec.x_min) / spec.cell_size_x).astype(np.int64)
    yi = np.floor((xy[:, 1] - spec.y_min) / spec.cell_size_y).astype(np.int64)
    inside = (xi >= 0) & (xi < spec.cols) & (yi >= 0) & (yi < spec.rows)
    return xi, yi, inside


def fit_plane_least_squares(points: np.ndarray | Iterable) -> Plane:
    """Total-least-squares plane through >= 3 non-collinear points.

    Minimises the sum of squared point-to-plane distances via the
    eigen-decomposition of the centred covariance; the normal is the
    eigenvector of the smallest eigenvalue.  The normal is oriented to
    positive z (ties broken toward positive y, then positive x) so that
    repeated fits of the same data compare equal.
    """
    pts = np.asarray([tuple(p)[:3] for p in points] if not isinstance(points, np.ndarray) else points,
                     dtype=np.float64).reshape(-1, 3)
    if pts.shape[0] < 3:
        raise DegenerateInput(f"plane fit needs >= 3 points, got {pts.shape[0]}")
    centroid = pts.mean(axis=0)
    centered = pts - centroid
    cov = centered.T @ centered / pts.shape[0]
    eigvals, eigvecs = np.linalg.eigh(cov)
    # eigvals ascending: [normal dir, in-plane minor, in-plane major]
    if eigvals[1] <= 1e-12 * max(eigvals[2], 1e-300):
        raise DegenerateInput("points are collinear or coincident")
    normal = eigvecs[:, 0]
    normal = _orient_normal(normal)
    d = -float(normal @ centroid)
    return Plane(normal=normal, d=d)


def _orient_normal(n: np.ndarray) -> np.ndarray:
    if n[2] < 0:
        return -n
    if n[2] == 0:
        if n[1] < 0:
            return -n
        if n[1] == 0 and n[0] < 0:
            return -n
    return n
