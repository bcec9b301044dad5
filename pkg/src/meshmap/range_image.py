"""Spherical range-image projection and visibility-based coarse dynamic removal."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .geometry import PointCloud, PoseSE3

MIN_RANGE = 1e-6


@dataclass(frozen=True)
class RangeImageGeometry:
    rows: int = 64
    cols: int = 900
    fov_up: float = np.deg2rad(3.0)    # radians
    fov_down: float = np.deg2rad(-25.0)

    def __post_init__(self):
        if self.rows < 1 or self.cols < 1:
            raise ValueError("range image needs at least one row and column")
        if self.fov_up <= self.fov_down:
            raise ValueError("fov_up must exceed fov_down")


@dataclass
class RangeImage:
    geometry: RangeImageGeometry
    ranges: np.ndarray                       # (rows, cols), +inf where empty
    point_pixels: np.ndarray | None = field(default=None, repr=False)
    point_valid: np.ndarray | None = field(default=None, repr=False)


def pixel_coords(points: np.ndarray, geometry: RangeImageGeometry):
    """Per-point (v, u) pixel indices and a validity mask.

    u = floor((1 - (atan2(y, x)/pi + 1)/2) * W) mod W; v maps elevation
    linearly onto [0, H). Points at the origin or outside the vertical FOV
    are invalid.
    """
    pts = np.asarray(points, dtype=np.float64)
    rng = np.linalg.norm(pts, axis=1)
    valid = rng > MIN_RANGE
    safe = np.where(valid, rng, 1.0)
    yaw = np.arctan2(pts[:, 1], pts[:, 0])
    u = np.floor((1.0 - (yaw / np.pi + 1.0) / 2.0) * geometry.cols).astype(np.int64)
    u %= geometry.cols
    elev = np.arcsin(np.clip(pts[:, 2] / safe, -1.0, 1.0))
    frac = (geometry.fov_up - elev) / (geometry.fov_up - geometry.fov_down)
    v = np.floor(frac * geometry.rows).astype(np.int64)
    valid &= (v >= 0) & (v < geometry.rows)
    return np.stack([v, u], axis=1), valid, rng


def spherical_project(cloud: PointCloud, geometry: RangeImageGeometry) -> RangeImage:
    """Project a cloud; each pixel keeps the minimum range among its points."""
    img = np.full((geometry.rows, geometry.cols), np.inf)
    pix, valid, rng = pixel_coords(cloud.points, geometry)
    if valid.any():
        np.minimum.at(img, (pix[valid, 0], pix[valid, 1]), rng[valid])
    return RangeImage(geometry, img, point_pixels=pix, point_valid=valid)


def range_diff_mask(img_prev: RangeImage, img_cur: RangeImage,
                    r_th: float) -> np.ndarray:
    """Dynamic flags for the points img_cur was built from.

    A point is flagged iff its pixel is finite in both images and the
    absolute range difference exceeds r_th. Pixels empty in either image
    carry no evidence and are never flagged.
    """
    if img_prev.geometry != img_cur.geometry:
        raise ValueError("range images have mismatched geometry")
    if img_cur.point_pixels is None:
        raise ValueError("current image lacks per-point pixel cache")
    both = np.isfinite(img_prev.ranges) & np.isfinite(img_cur.ranges)
    pixel_flag = np.zeros_like(both)
    pixel_flag[both] = np.abs(img_cur.ranges[both] - img_prev.ranges[both]) > r_th
    flags = np.zeros(img_cur.point_pixels.shape[0], dtype=bool)
    vld = img_cur.point_valid
    flags[vld] = pixel_flag[img_cur.point_pixels[vld, 0],
                            img_cur.point_pixels[vld, 1]]
    return flags


def coarse_remove(cur_cloud: PointCloud, prev_agg_cloud: PointCloud,
                  t_rel: PoseSE3, geometry: RangeImageGeometry,
                  r_th: float) -> tuple[PointCloud, int]:
    """Drop points of cur_cloud whose range disagrees with the previous
    aggregated cloud seen from the current sensor frame.

    t_rel maps the previous aggregate's frame into the current sensor frame.
    """
    if len(prev_agg_cloud) == 0 or len(cur_cloud) == 0:
        return cur_cloud, 0
    prev_in_cur = prev_agg_cloud.transformed(t_rel)
    img_prev = spherical_project(prev_in_cur, geometry)
    img_cur = spherical_project(cur_cloud, geometry)
    flags = range_diff_mask(img_prev, img_cur, r_th)
    return cur_cloud.select(~flags), int(flags.sum())
