"""End-to-end orchestration: scan stream -> keyframing -> coarse removal ->
aggregation -> downsampling -> continuity -> registration -> meshing -> fine
removal -> pose publication. Includes the sklearn-style estimator facade."""
from __future__ import annotations

import json
import logging
import os
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from sklearn.base import BaseEstimator

from . import io as mio
from .config import PipelineConfig
from .geometry import Frame, Mesh, PointCloud, PoseSE3
from .keyframe import (Keyframe, SlidingWindow, SpaciousnessState,
                       aggregate_window, downsample_size, keyframe_thresholds,
                       should_select, spaciousness_update, voxel_downsample)
from .mesher import ContinuityParams, MesherConfig, MeshMap, \
    continuity_filter, continuity_scores
from .occupancy import OccupancyConfig, OccupancyGrid, cull_dynamic
from .range_image import RangeImageGeometry, coarse_remove
from .registration import (RegistrationConfig, RegistrationViewCache,
                           constant_velocity_prior, fuse_pose, solve_pose)

log = logging.getLogger(__name__)

STAGES = ("keyframe", "coarse_removal", "aggregation", "continuity",
          "registration", "meshing", "fine_removal", "total")


@dataclass
class RunReport:
    """Counters, per-stage runtime and (when ground truth is supplied)
    quality metrics of one pipeline run."""

    n_scans: int = 0
    n_keyframes: int = 0
    n_failures: int = 0
    n_points_removed_coarse: int = 0
    n_cells_cleared: int = 0
    stage_ms: dict = field(default_factory=lambda: {s: 0.0 for s in STAGES})
    precision: float | None = None
    recall: float | None = None
    f1: float | None = None
    ape_mean: float | None = None
    ape_rmse: float | None = None

    def stage_mean_ms(self, stage: str) -> float:
        return self.stage_ms[stage] / max(self.n_scans, 1)

    def to_text(self) -> str:
        lines = [f"n_scans: {self.n_scans}",
                 f"n_keyframes: {self.n_keyframes}",
                 f"n_failures: {self.n_failures}",
                 f"points_removed_coarse: {self.n_points_removed_coarse}",
                 f"cells_cleared: {self.n_cells_cleared}"]
        for stage in STAGES:
            lines.append(f"time_ms_{stage}: {self.stage_ms[stage]:.1f} "
                         f"(mean {self.stage_mean_ms(stage):.2f})")
        for name in ("precision", "recall", "f1", "ape_mean", "ape_rmse"):
            value = getattr(self, name)
            if value is not None:
                lines.append(f"{name}: {value:.4f}")
        return "\n".join(lines) + "\n"

    def to_json(self) -> str:
        data = {k: v for k, v in self.__dict__.items()}
        return json.dumps(data, indent=2, sort_keys=True)


class MeshPipeline:
    """Stateful per-scan pipeline; feed scans through process_scan and read
    the mesh off extract_mesh when done."""

    def __init__(self, config: PipelineConfig | None = None):
        self.cfg = config or PipelineConfig()
        cfg = self.cfg
        self.spaciousness = SpaciousnessState(alpha=cfg.alpha, beta=cfg.beta)
        self.window = SlidingWindow(capacity=cfg.window_size)
        self.geometry = RangeImageGeometry(
            rows=cfg.range_image_rows, cols=cfg.range_image_cols,
            fov_up=np.deg2rad(cfg.fov_up_deg),
            fov_down=np.deg2rad(cfg.fov_down_deg))
        self.map = MeshMap(MesherConfig(
            voxel_size=cfg.voxel_size_m, grid_g=cfg.grid_g,
            sigma_f=cfg.kernel_sigma_f, length_scale=cfg.kernel_length_scale_m,
            sigma_in_sq=cfg.sigma_in_sq, sigma_match_sq=cfg.sigma_match_sq,
            sigma_update_sq=cfg.sigma_update_sq,
            fusion_inverse_variance=cfg.fusion_inverse_variance,
            axis_mode=cfg.axis_mode))
        self.occupancy = OccupancyGrid(OccupancyConfig(
            p_hit=cfg.p_hit, p_miss=cfg.p_miss, p_occ=cfg.p_occ,
            p_free=cfg.p_free,
            voxel_size=cfg.occupancy_voxel_size_m or cfg.voxel_size_m,
            logodds_clamp=cfg.logodds_clamp,
            max_range=cfg.occupancy_max_range_m))
        self.continuity = ContinuityParams(
            w1=cfg.w1, w2=cfg.w2, neighborhood=cfg.neighborhood_k,
            c_th=cfg.c_th, exclude_high=cfg.continuity_exclude_high)
        self.reg_cfg = RegistrationConfig(
            huber_delta=cfg.huber_delta_m, max_outer=cfg.max_outer,
            max_lm_iters=cfg.max_lm_iters, min_inliers=cfg.min_inliers,
            lambda_init=cfg.lambda_init)
        self.view_cache = RegistrationViewCache()
        self.report = RunReport()
        self.trajectory: list[tuple[float, PoseSE3]] = []

        self._prev_kf_odom: PoseSE3 | None = None
        self._prev_agg: tuple[PointCloud, PoseSE3] | None = None
        self._last_refined: PoseSE3 | None = None
        self._last_odom_at_refine: PoseSE3 | None = None

    # -- pose priors ---------------------------------------------------
    def _internal_odometry(self) -> PoseSE3:
        """Constant-velocity extrapolation of the published trajectory."""
        if len(self.trajectory) == 0:
            return PoseSE3.identity()
        if len(self.trajectory) == 1:
            return self.trajectory[-1][1]
        return constant_velocity_prior(self.trajectory[-2][1],
                                       self.trajectory[-1][1])

    # -- main entry ----------------------------------------------------
    def process_scan(self, cloud: PointCloud, odom_pose: PoseSE3 | None = None,
                     timestamp: float | None = None) -> PoseSE3:
        """Run one scan through the full chain; returns the published pose."""
        cfg = self.cfg
        t = cloud.timestamp if timestamp is None else timestamp
        t_start = time.perf_counter()
        internal_odom = odom_pose is None
        if internal_odom:
            odom_pose = self._internal_odometry()

        tic = time.perf_counter()
        self.spaciousness = spaciousness_update(self.spaciousness, cloud)
        self._mark("keyframe", tic)

        # without external odometry every scan registers against the map,
        # turning the constant-velocity extrapolation into scan odometry
        if (internal_odom and cfg.enable_registration and len(self.map)):
            tic = time.perf_counter()
            size = (downsample_size(self.spaciousness.m, cfg.downsample_sizes)
                    if cfg.enable_adaptive_downsample else cfg.fixed_downsample_m)
            query = voxel_downsample(cloud, size)
            view = self.view_cache.build(self.map)
            odom_pose, _ = solve_pose(odom_pose, view, query, self.reg_cfg)
            self._mark("registration", tic)

        # keyframe decision driven by the spaciousness signal
        tic = time.perf_counter()
        thresholds = keyframe_thresholds(self.spaciousness.m,
                                         cfg.keyframe_thresholds)
        select = (self._prev_kf_odom is None
                  or should_select(self._prev_kf_odom, odom_pose, thresholds))
        self._mark("keyframe", tic)

        if not select:
            published = fuse_pose(odom_pose, self._last_refined,
                                  self._last_odom_at_refine)
            self.trajectory.append((t, published))
            self.report.n_scans += 1
            self._mark("total", t_start)
            return published

        # coarse dynamic removal against the previous aggregated keyframe
        tic = time.perf_counter()
        kf_cloud = cloud
        if cfg.enable_coarse_removal and self._prev_agg is not None:
            prev_cloud, prev_pose = self._prev_agg
            t_rel = odom_pose.inverse() @ prev_pose
            kf_cloud, removed = coarse_remove(cloud, prev_cloud, t_rel,
                                              self.geometry, cfg.r_th_m)
            self.report.n_points_removed_coarse += removed
        self._mark("coarse_removal", tic)

        # window aggregation and adaptive downsampling
        tic = time.perf_counter()
        self.window.push(Keyframe(kf_cloud, odom_pose, t))
        agg = aggregate_window(self.window)
        if cfg.enable_adaptive_downsample:
            size = downsample_size(self.spaciousness.m, cfg.downsample_sizes)
        else:
            size = cfg.fixed_downsample_m
        down = voxel_downsample(agg, size)
        self._mark("aggregation", tic)

        tic = time.perf_counter()
        if cfg.enable_continuity and len(down):
            scores = continuity_scores(down, self.continuity)
            down = continuity_filter(down, scores, self.continuity.c_th,
                                     self.continuity.exclude_high)
        self._mark("continuity", tic)

        # point-to-mesh registration against the current map
        tic = time.perf_counter()
        refined = odom_pose
        if cfg.enable_registration and len(self.map):
            view = self.view_cache.build(self.map)
            refined, _reg = solve_pose(odom_pose, view, down, self.reg_cfg)
        self._mark("registration", tic)

        # keep the refined pose on the keyframe so later aggregations use it
        self.window.newest.pose = refined
        self._prev_agg = (agg, refined)
        self._prev_kf_odom = odom_pose
        self._last_refined = refined
        self._last_odom_at_refine = odom_pose

        tic = time.perf_counter()
        world = down.transformed(refined, Frame.WORLD)
        self.map.update_cells(world)
        self._mark("meshing", tic)

        tic = time.perf_counter()
        if cfg.enable_fine_removal and len(kf_cloud):
            # integrate the current keyframe only, at full resolution: the
            # aggregated window would re-assert stale observations, and
            # downsampling leaves most bearing bins without a far range
            cur = kf_cloud.transformed(refined, Frame.WORLD)
            self.occupancy.integrate_scan(cur.points, refined.translation,
                                          self.geometry)
            self.report.n_cells_cleared += cull_dynamic(
                self.map, self.occupancy, cfg.p_occ, cfg.p_free)
        self._mark("fine_removal", tic)

        self.trajectory.append((t, refined))
        self.report.n_scans += 1
        self.report.n_keyframes += 1
        self._mark("total", t_start)
        return refined

    def _mark(self, stage: str, tic: float) -> None:
        self.report.stage_ms[stage] += (time.perf_counter() - tic) * 1e3

    def extract_mesh(self) -> Mesh:
        return self.map.extract_global_mesh()


class PipelineError(RuntimeError):
    pass


def _list_scans(cfg: PipelineConfig) -> list[Path]:
    ext = {"bin_xyzi": ".bin", "ply": ".ply", "pcd_ascii": ".pcd"}[cfg.scan_format]
    root = Path(cfg.scan_dir)
    if not root.is_dir():
        raise PipelineError(f"scan directory {root} does not exist")
    files = sorted(p for p in root.iterdir() if p.suffix == ext)
    if cfg.max_scans is not None:
        files = files[:cfg.max_scans]
    return files


def run_pipeline(config: PipelineConfig):
    """Batch entry point: read scans/poses from disk, run the pipeline and
    write mesh/trajectory/report atomically. Returns (mesh, trajectory,
    report)."""
    pipeline = MeshPipeline(config)
    files = _list_scans(config)
    if not files:
        raise PipelineError(f"no {config.scan_format} scans in {config.scan_dir}")

    poses = None
    if config.pose_source == "file":
        if not config.pose_file:
            raise PipelineError("pose_source=file requires pose_file")
        poses = mio.read_poses(config.pose_file, config.pose_format,
                               config.scan_rate_hz)
        if len(poses) < len(files):
            raise PipelineError(f"{len(files)} scans but only "
                                f"{len(poses)} poses")

    for k, path in enumerate(files):
        t = poses[k][0] if poses else k / config.scan_rate_hz
        try:
            cloud = mio.read_scan(path, config.scan_format, timestamp=t)
            pipeline.process_scan(cloud, poses[k][1] if poses else None,
                                  timestamp=t)
        except Exception:
            log.exception("scan %s failed, skipping", path.name)
            pipeline.report.n_failures += 1
            pipeline.report.n_scans += 1

    mesh = pipeline.extract_mesh()
    _write_outputs(config, mesh, pipeline.trajectory, pipeline.report)
    return mesh, pipeline.trajectory, pipeline.report


def _atomic(path: Path, writer) -> None:
    tmp = path.with_name(path.name + ".tmp")
    writer(tmp)
    os.replace(tmp, path)


def _write_outputs(cfg: PipelineConfig, mesh, trajectory, report) -> None:
    if cfg.output_mesh:
        _atomic(Path(cfg.output_mesh),
                lambda p: mio.write_mesh_ply(mesh, p, binary=True))
    if cfg.output_trajectory:
        _atomic(Path(cfg.output_trajectory),
                lambda p: mio.write_trajectory(trajectory, p,
                                               cfg.output_trajectory_format))
    if cfg.report_path:
        path = Path(cfg.report_path)
        text = (report.to_json() if path.suffix == ".json"
                else report.to_text())
        _atomic(path, lambda p: p.write_text(text))


class MeshMapper(BaseEstimator):
    """Sklearn-style facade over the mapping pipeline.

    fit(X, y) consumes scans X (list of PointCloud or (N, 3) arrays) and
    optional odometry poses y (list of PoseSE3 or (timestamp, PoseSE3));
    without poses a constant-velocity prior drives registration. Fitted
    attributes: mesh_, trajectory_, map_, report_.
    """

    def __init__(self, voxel_size_m=1.0, grid_g=4, window_size=5,
                 scan_rate_hz=10.0, kernel_sigma_f=1.0,
                 kernel_length_scale_m=None, sigma_in_sq=1e-2,
                 sigma_match_sq=0.05, sigma_update_sq=0.1, c_th=0.2,
                 r_th_m=1.0, enable_coarse_removal=True,
                 enable_fine_removal=True, enable_continuity=True,
                 enable_adaptive_downsample=True, axis_mode="all",
                 range_image_rows=64, range_image_cols=900,
                 fov_up_deg=3.0, fov_down_deg=-25.0, min_inliers=50):
        self.voxel_size_m = voxel_size_m
        self.grid_g = grid_g
        self.window_size = window_size
        self.scan_rate_hz = scan_rate_hz
        self.kernel_sigma_f = kernel_sigma_f
        self.kernel_length_scale_m = kernel_length_scale_m
        self.sigma_in_sq = sigma_in_sq
        self.sigma_match_sq = sigma_match_sq
        self.sigma_update_sq = sigma_update_sq
        self.c_th = c_th
        self.r_th_m = r_th_m
        self.enable_coarse_removal = enable_coarse_removal
        self.enable_fine_removal = enable_fine_removal
        self.enable_continuity = enable_continuity
        self.enable_adaptive_downsample = enable_adaptive_downsample
        self.axis_mode = axis_mode
        self.range_image_rows = range_image_rows
        self.range_image_cols = range_image_cols
        self.fov_up_deg = fov_up_deg
        self.fov_down_deg = fov_down_deg
        self.min_inliers = min_inliers

    def _config(self) -> PipelineConfig:
        params = self.get_params()
        cfg = PipelineConfig.from_dict(params)
        cfg.pose_source = "constant_velocity"
        return cfg

    def fit(self, X, y=None):
        cfg = self._config()
        if y is not None:
            cfg.pose_source = "file"
        pipeline = MeshPipeline(cfg)
        for k, scan in enumerate(X):
            if not isinstance(scan, PointCloud):
                scan = PointCloud(scan, timestamp=k / self.scan_rate_hz)
            pose = None
            t = scan.timestamp
            if y is not None:
                entry = y[k]
                if isinstance(entry, tuple):
                    t, pose = entry
                else:
                    pose = entry
            pipeline.process_scan(scan, pose, timestamp=t)
        self.map_ = pipeline.map
        self.mesh_ = pipeline.extract_mesh()
        self.trajectory_ = pipeline.trajectory
        self.report_ = pipeline.report
        return self

    def transform(self, X):
        """Pass-through so the estimator slots into sklearn pipelines."""
        return X
