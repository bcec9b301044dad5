"""Map and trajectory metrics: precision/recall/F1 at distance delta, and
absolute pose error after rigid trajectory alignment."""
from __future__ import annotations

import numpy as np
from scipy.spatial import cKDTree

from .geometry import PoseSE3, PointCloud


def _as_points(cloud) -> np.ndarray:
    if isinstance(cloud, PointCloud):
        return cloud.points
    return np.asarray(cloud, dtype=np.float64).reshape(-1, 3)


def eval_mesh(candidate_samples, gt_cloud, delta: float):
    """Precision/recall/F1 in percent at match distance delta (meters).

    Precision: share of candidate points with a ground-truth point within
    delta; recall: share of ground-truth points with a candidate within delta.
    """
    cand = _as_points(candidate_samples)
    gt = _as_points(gt_cloud)
    if cand.shape[0] == 0 or gt.shape[0] == 0:
        return 0.0, 0.0, 0.0
    d_cand, _ = cKDTree(gt).query(cand, k=1)
    d_gt, _ = cKDTree(cand).query(gt, k=1)
    precision = 100.0 * float((d_cand <= delta).mean())
    recall = 100.0 * float((d_gt <= delta).mean())
    f1 = (2 * precision * recall / (precision + recall)
          if precision + recall > 0 else 0.0)
    return precision, recall, f1


def associate_trajectories(estimated, ground_truth, max_dt: float = 0.05):
    """Pair poses by nearest timestamp within max_dt seconds."""
    gt_times = np.asarray([t for t, _ in ground_truth])
    pairs = []
    for t, pose in estimated:
        if gt_times.size == 0:
            break
        j = int(np.argmin(np.abs(gt_times - t)))
        if abs(gt_times[j] - t) <= max_dt:
            pairs.append((pose, ground_truth[j][1]))
    return pairs


def align_rigid(src: np.ndarray, dst: np.ndarray) -> PoseSE3:
    """Closed-form least-squares SE(3) alignment mapping src onto dst."""
    src = np.asarray(src, dtype=np.float64)
    dst = np.asarray(dst, dtype=np.float64)
    mu_s, mu_d = src.mean(axis=0), dst.mean(axis=0)
    cov = (dst - mu_d).T @ (src - mu_s)
    u, _, vt = np.linalg.svd(cov)
    d = np.sign(np.linalg.det(u @ vt))
    rot = u @ np.diag([1.0, 1.0, d]) @ vt
    return PoseSE3(rot, mu_d - rot @ mu_s)


def eval_ape(estimated, ground_truth, max_dt: float = 0.05):
    """(mean, rmse) of translational APE in meters after rigid alignment.

    Trajectories are lists of (timestamp, PoseSE3), associated by nearest
    timestamp within max_dt.
    """
    pairs = associate_trajectories(estimated, ground_truth, max_dt)
    if not pairs:
        raise ValueError("no associated pose pairs within the time window")
    est = np.asarray([p.translation for p, _ in pairs])
    gt = np.asarray([q.translation for _, q in pairs])
    align = align_rigid(est, gt)
    err = np.linalg.norm(align.apply(est) - gt, axis=1)
    return float(err.mean()), float(np.sqrt((err ** 2).mean()))
