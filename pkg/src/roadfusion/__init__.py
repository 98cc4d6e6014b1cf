"""roadfusion: vectorized semantic road maps from roadside camera masks
and LiDAR point clouds, with evaluation metrics and a synthetic scene
generator for desk-scale experiments."""

from .config import PipelineConfig
from .errors import ConfigError, InputError, InternalError, RoadFusionError
from .geometry import (
    CameraCalibration,
    GridSpec,
    PixelCoord,
    Plane,
    Point3,
    fit_plane_least_squares,
    grid_index,
    project_point,
)
from .ground import PointCloud, RansacConfig, extract_ground
from .metrics import EvalConfig, EvalReport, chamfer_one_way, evaluate, iou
from .raster import IntensityImage, LabelMask, rasterize_intensity
from .synth import Scene, SceneSpec, generate_scene, write_scene
from .vectorize import MapElement, VectorMap, VectorizeConfig, vectorize_map

__version__ = "0.1.0"

__all__ = [
    "CameraCalibration",
    "ConfigError",
    "EvalConfig",
    "EvalReport",
    "GridSpec",
    "InputError",
    "IntensityImage",
    "InternalError",
    "LabelMask",
    "MapElement",
    "PipelineConfig",
    "PixelCoord",
    "Plane",
    "Point3",
    "PointCloud",
    "RansacConfig",
    "RoadFusionError",
    "Scene",
    "SceneSpec",
    "VectorMap",
    "VectorizeConfig",
    "chamfer_one_way",
    "evaluate",
    "extract_ground",
    "fit_plane_least_squares",
    "generate_scene",
    "grid_index",
    "iou",
    "project_point",
    "rasterize_intensity",
    "vectorize_map",
    "write_scene",
]
