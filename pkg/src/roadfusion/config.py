"""Pipeline configuration: every tunable named by the processing stages.

Config files are plain ``key = value`` text: one pair per line, ``#``
comments, blank lines ignored.  Unknown keys are rejected.
"""

from __future__ import annotations

from dataclasses import dataclass, fields
from pathlib import Path

from .errors import ConfigError
from .ground import RansacConfig
from .metrics import EvalConfig
from .vectorize import VectorizeConfig


@dataclass
class PipelineConfig:
    # BEV gridding
    grid_cell: float = 0.01
    # Vectorisation
    cluster_radius: float = 0.5
    min_cluster_size: int = 10
    sor_k: int = 16
    sor_n_sigma: float = 2.0
    alpha: float = 0.5
    split_length: float = 20.0
    split_interval: float = 10.0
    # Ground extraction
    ransac_iterations: int = 500
    ransac_threshold: float = 0.05
    ransac_min_inliers: float = 0.2
    # Evaluation
    eval_cell: float = 0.1
    line_width: float = 0.2
    cd_threshold: float = 1.0
    iou_threshold: float = 0.1
    sample_step: float = 0.1
    # Frame handling
    sync_tolerance: float = 0.02
    frame_count: int = 0  # 0 = use every available frame
    jobs: int = 1
    seed: int = 0
    # Built-in intensity segmentation (used when a scene ships no
    # intensity masks of its own)
    intensity_threshold: float = 128.0
    seg_close_radius: float = 0.5
    seg_crossing_min_width: float = 1.2
    seg_divider_min_length: float = 8.0
    seg_stop_min_length: float = 4.0
    seg_stop_min_width: float = 0.25

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        positive = (
            "grid_cell", "cluster_radius", "sor_n_sigma", "alpha", "split_length",
            "split_interval", "ransac_threshold", "eval_cell", "line_width",
            "cd_threshold", "sample_step", "sync_tolerance", "intensity_threshold",
            "seg_close_radius", "seg_crossing_min_width", "seg_divider_min_length",
            "seg_stop_min_length", "seg_stop_min_width",
        )
        for name in positive:
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive, got {getattr(self, name)}")
        if self.min_cluster_size < 1 or self.sor_k < 1:
            raise ConfigError("min_cluster_size and sor_k must be >= 1")
        if self.ransac_iterations < 1:
            raise ConfigError("ransac_iterations must be >= 1")
        if not 0 < self.ransac_min_inliers <= 1:
            raise ConfigError("ransac_min_inliers must be in (0, 1]")
        if not 0 <= self.iou_threshold < 1:
            raise ConfigError("iou_threshold must be in [0, 1)")
        if self.frame_count < 0:
            raise ConfigError("frame_count must be >= 0 (0 = all frames)")
        if self.jobs < 1:
            raise ConfigError("jobs must be >= 1")

    def ransac_cfg(self, seed_offset: int = 0) -> RansacConfig:
        return RansacConfig(
            max_iterations=self.ransac_iterations,
            inlier_threshold=self.ransac_threshold,
            min_inliers_fraction=self.ransac_min_inliers,
            seed=self.seed + seed_offset,
        )

    def vectorize_cfg(self) -> VectorizeConfig:
        return VectorizeConfig(
            sor_k=self.sor_k,
            sor_n_sigma=self.sor_n_sigma,
            cluster_radius=self.cluster_radius,
            min_cluster_size=self.min_cluster_size,
            alpha=self.alpha,
            split_length=self.split_length,
            split_interval=self.split_interval,
        )

    def eval_cfg(self) -> EvalConfig:
        return EvalConfig(
            eval_cell=self.eval_cell,
            line_width=self.line_width,
            cd_thresh=self.cd_threshold,
            iou_thresh=self.iou_threshold,
            sample_step=self.sample_step,
        )

    @classmethod
    def from_file(cls, path: str | Path) -> "PipelineConfig":
        path = Path(path)
        if not path.exists():
            raise ConfigError(f"config file not found: {path}")
        values: dict[str, object] = {}
        types = {f.name: f.type for f in fields(cls)}
        for lineno, raw in enumerate(path.read_text(encoding="utf-8").splitlines(), start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"{path}:{lineno}: expected 'key = value'")
            key, _, value = line.partition("=")
            key = key.strip()
            value = value.strip()
            if key not in types:
                raise ConfigError(f"{path}:{lineno}: unknown configuration key {key!r}")
            try:
                if types[key] == "int":
                    values[key] = int(value)
                else:
                    values[key] = float(value)
            except ValueError as exc:
                raise ConfigError(f"{path}:{lineno}: {exc}") from exc
        return cls(**values)

    def apply_overrides(self, overrides: dict[str, object]) -> "PipelineConfig":
        known = {f.name for f in fields(self)}
        for key, value in overrides.items():
            if value is None:
                continue
            if key not in known:
                raise ConfigError(f"unknown configuration key {key!r}")
            setattr(self, key, value)
        self.validate()
        return self
