"""Spaciousness tracking, adaptive keyframe selection, window aggregation and
adaptive voxel downsampling."""
from __future__ import annotations

import warnings
from collections import deque
from dataclasses import dataclass, field

import numpy as np

from .geometry import Frame, PointCloud, PoseSE3, relative_pose

# (lower bound on spaciousness m, values); first row with m > bound wins,
# the -1 row catches everything down to m = 0.
DEFAULT_KEYFRAME_THRESHOLDS = [
    (20.0, 0.0, 0.0),
    (10.0, 0.3, 0.1),
    (5.0, 0.5, 0.3),
    (-1.0, 1.0, 0.5),
]
DEFAULT_DOWNSAMPLE_SIZES = [
    (20.0, 0.05),
    (10.0, 0.10),
    (5.0, 0.30),
    (-1.0, 0.50),
]


@dataclass
class SpaciousnessState:
    """Exponentially smoothed median scan range."""

    m: float = 0.0
    alpha: float = 0.95
    beta: float = 0.05
    initialized: bool = False


def scan_median_range(cloud: PointCloud) -> float:
    """Median range; even-count lists take the lower-middle element."""
    ranges = np.sort(cloud.ranges)
    return float(ranges[(len(ranges) - 1) // 2])


def spaciousness_update(state: SpaciousnessState, cloud: PointCloud) -> SpaciousnessState:
    if len(cloud) == 0:
        warnings.warn("spaciousness update skipped: empty cloud")
        return state
    median = scan_median_range(cloud)
    if not state.initialized:
        m = median
    else:
        m = state.alpha * state.m + state.beta * median
    return SpaciousnessState(m, state.alpha, state.beta, initialized=True)


def _lookup(table, m: float):
    for row in table:
        if m > row[0]:
            return row[1:]
    return table[-1][1:]


def keyframe_thresholds(m: float, table=None) -> tuple[float, float]:
    """(translation m, rotation rad) selection thresholds for spaciousness m."""
    trans, rot = _lookup(table or DEFAULT_KEYFRAME_THRESHOLDS, m)
    return float(trans), float(rot)


def downsample_size(m: float, table=None) -> float:
    """Adaptive voxel size (m) for the aggregated cloud at spaciousness m."""
    (size,) = _lookup(table or DEFAULT_DOWNSAMPLE_SIZES, m)
    return float(size)


def should_select(prev_kf_pose: PoseSE3, cur_pose: PoseSE3,
                  thresholds: tuple[float, float]) -> bool:
    """True when the pose delta exceeds either threshold (>= comparison, so
    (0, 0) thresholds select every frame)."""
    trans_th, rot_th = thresholds
    delta = relative_pose(prev_kf_pose, cur_pose)
    return (np.linalg.norm(delta.translation) >= trans_th
            or delta.rotation_angle() >= rot_th)


@dataclass
class Keyframe:
    cloud: PointCloud  # sensor frame, after coarse dynamic removal
    pose: PoseSE3      # odometry pose of the keyframe's sensor frame
    timestamp: float = 0.0


@dataclass
class SlidingWindow:
    """Bounded queue of keyframes, newest last."""

    capacity: int = 5
    frames: deque = field(default_factory=deque)

    def __post_init__(self):
        self.frames = deque(self.frames, maxlen=self.capacity)

    def push(self, kf: Keyframe) -> None:
        self.frames.append(kf)

    def __len__(self):
        return len(self.frames)

    @property
    def newest(self) -> Keyframe:
        return self.frames[-1]


def aggregate_window(window: SlidingWindow) -> PointCloud:
    """Union of window keyframes expressed in the newest keyframe's sensor frame."""
    if len(window) == 0:
        raise ValueError("cannot aggregate an empty window")
    newest = window.newest
    inv_newest = newest.pose.inverse()
    chunks = []
    for kf in window.frames:
        rel = inv_newest @ kf.pose
        chunks.append(rel.apply(kf.cloud.points))
    pts = np.vstack(chunks) if chunks else np.zeros((0, 3))
    return PointCloud(pts, timestamp=newest.timestamp, frame=Frame.SENSOR)


def voxel_downsample(cloud: PointCloud, size: float) -> PointCloud:
    """Centroid-per-cell voxel grid reduction."""
    if size <= 0:
        raise ValueError("voxel size must be positive")
    if len(cloud) == 0:
        return cloud
    idx = np.floor(cloud.points / size).astype(np.int64)
    _, inverse, counts = np.unique(idx, axis=0, return_inverse=True,
                                   return_counts=True)
    sums = np.zeros((counts.shape[0], 3))
    np.add.at(sums, inverse, cloud.points)
    return PointCloud(sums / counts[:, None], cloud.timestamp, cloud.frame)
