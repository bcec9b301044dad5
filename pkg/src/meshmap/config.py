"""Pipeline configuration: one flat, validated set of keys covering every
stage, loadable from YAML with key=value overrides."""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path

import yaml

from .keyframe import DEFAULT_DOWNSAMPLE_SIZES, DEFAULT_KEYFRAME_THRESHOLDS


class ConfigError(ValueError):
    pass


@dataclass
class PipelineConfig:
    # inputs / outputs
    scan_dir: str | None = None
    scan_format: str = "bin_xyzi"
    pose_file: str | None = None
    pose_format: str = "tum"
    pose_source: str = "file"            # "file" or "constant_velocity"
    output_mesh: str | None = None
    output_trajectory: str | None = None
    output_trajectory_format: str = "tum"
    report_path: str | None = None
    seed: int = 0
    scan_rate_hz: float = 10.0
    max_scans: int | None = None

    # keyframe module
    window_size: int = 5
    alpha: float = 0.95
    beta: float = 0.05
    keyframe_thresholds: list = field(
        default_factory=lambda: [list(r) for r in DEFAULT_KEYFRAME_THRESHOLDS])
    downsample_sizes: list = field(
        default_factory=lambda: [list(r) for r in DEFAULT_DOWNSAMPLE_SIZES])
    enable_adaptive_downsample: bool = True
    fixed_downsample_m: float = 0.1      # used when adaptive downsampling is off

    # coarse dynamic removal
    enable_coarse_removal: bool = True
    range_image_rows: int = 64
    range_image_cols: int = 900
    fov_up_deg: float = 3.0
    fov_down_deg: float = -25.0
    r_th_m: float = 1.0

    # mesher
    voxel_size_m: float = 1.0
    grid_g: int = 4
    kernel_sigma_f: float = 1.0
    kernel_length_scale_m: float | None = None   # None -> voxel_size_m / 2
    sigma_in_sq: float = 1e-2
    sigma_match_sq: float = 0.05
    sigma_update_sq: float = 0.1
    w1: float = 0.5
    w2: float = 0.5
    c_th: float = 0.2
    neighborhood_k: int = 6
    enable_continuity: bool = True
    continuity_exclude_high: bool = True
    fusion_inverse_variance: bool = True
    axis_mode: str = "all"

    # registration
    enable_registration: bool = True
    huber_delta_m: float = 0.1
    max_outer: int = 10
    max_lm_iters: int = 20
    min_inliers: int = 50
    lambda_init: float = 1e-4

    # fine dynamic removal
    enable_fine_removal: bool = True
    p_hit: float = 0.7
    p_miss: float = 0.4
    p_occ: float = 0.8
    p_free: float = 0.3
    occupancy_voxel_size_m: float | None = None  # None -> voxel_size_m
    logodds_clamp: float = 10.0
    occupancy_max_range_m: float = 80.0

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if abs(self.alpha + self.beta - 1.0) > 1e-9:
            raise ConfigError("alpha + beta must equal 1")
        if abs(self.w1 + self.w2 - 1.0) > 1e-9 or self.w1 < 0 or self.w2 < 0:
            raise ConfigError("w1/w2 must be non-negative and sum to 1")
        for name in ("p_hit", "p_miss", "p_occ", "p_free"):
            value = getattr(self, name)
            if not 0.0 < value < 1.0:
                raise ConfigError(f"{name} must lie in (0, 1)")
        for name in ("voxel_size_m", "sigma_in_sq", "sigma_match_sq",
                     "sigma_update_sq", "r_th_m", "huber_delta_m",
                     "scan_rate_hz", "logodds_clamp", "fixed_downsample_m"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive")
        for name in ("window_size", "grid_g", "range_image_rows",
                     "range_image_cols", "neighborhood_k", "max_outer",
                     "max_lm_iters"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be at least 1")
        if self.grid_g < 2:
            raise ConfigError("grid_g must be at least 2")
        if self.pose_source not in ("file", "constant_velocity"):
            raise ConfigError("pose_source must be 'file' or 'constant_velocity'")
        if self.axis_mode not in ("all", "best"):
            raise ConfigError("axis_mode must be 'all' or 'best'")
        if self.scan_format not in ("bin_xyzi", "ply", "pcd_ascii"):
            raise ConfigError(f"unknown scan_format {self.scan_format!r}")
        if self.pose_format not in ("kitti_3x4", "tum"):
            raise ConfigError(f"unknown pose_format {self.pose_format!r}")
        if self.fov_up_deg <= self.fov_down_deg:
            raise ConfigError("fov_up_deg must exceed fov_down_deg")

    # -- construction --------------------------------------------------
    @classmethod
    def field_names(cls) -> set[str]:
        return {f.name for f in dataclasses.fields(cls)}

    @classmethod
    def from_dict(cls, data: dict) -> "PipelineConfig":
        unknown = set(data) - cls.field_names()
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        return cls(**data)

    @classmethod
    def from_yaml(cls, path) -> "PipelineConfig":
        data = yaml.safe_load(Path(path).read_text()) or {}
        if not isinstance(data, dict):
            raise ConfigError(f"{path}: config must be a mapping")
        return cls.from_dict(data)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def with_overrides(self, overrides) -> "PipelineConfig":
        """Apply 'key=value' strings; values are parsed as YAML scalars."""
        data = self.to_dict()
        for item in overrides:
            if "=" not in item:
                raise ConfigError(f"override {item!r} is not key=value")
            key, _, raw = item.partition("=")
            key = key.strip()
            if key not in self.field_names():
                raise ConfigError(f"unknown config key {key!r}")
            data[key] = yaml.safe_load(raw)
        return self.from_dict(data)
