"""Voxel-based probabilistic fine dynamic removal: Bayesian log-odds occupancy
with bearing-binned free-space marking instead of ray tracing."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .range_image import RangeImageGeometry, pixel_coords
from .mesher import MeshMap, cell_index, encode_index, decode_index


def logodds(p: float) -> float:
    return float(np.log(p / (1.0 - p)))


def occupancy_probability(log_odds) -> np.ndarray | float:
    """P = 1 / (1 + exp(-log_odds)); inverse of the log-odds transform."""
    return 1.0 / (1.0 + np.exp(-np.asarray(log_odds, dtype=np.float64)))


def logodds_sequence(observations, p_hit: float, p_miss: float,
                     prior: float = 0.5) -> float:
    """Additive log-odds update over a hit/miss observation sequence."""
    total = logodds(prior)
    for obs in observations:
        total += logodds(p_hit if obs else p_miss)
    return total


def recursive_bayes_sequence(observations, p_hit: float, p_miss: float,
                             prior: float = 0.5) -> float:
    """Recursive Bayes filter over the same sequence; oracle counterpart of
    logodds_sequence. Returns the final probability.

    The recursion carries the odds ratio rather than the probability, which
    would otherwise round to exactly 1.0 under long runs of strong hits and
    break the next update."""
    odds = prior / (1.0 - prior)
    for obs in observations:
        p_obs = p_hit if obs else p_miss
        odds *= (p_obs / (1.0 - p_obs)) * ((1.0 - prior) / prior)
    return odds / (1.0 + odds)


@dataclass
class OccupancyVoxel:
    log_odds: float = 0.0
    last_update: int = -1


def logodds_update(voxel: OccupancyVoxel, observation: str, p_hit: float,
                   p_miss: float, clamp: float = 10.0,
                   scan_id: int = 0) -> OccupancyVoxel:
    """Apply one hit/miss observation; log-odds clamped to +-clamp."""
    if observation not in ("hit", "miss"):
        raise ValueError("observation must be 'hit' or 'miss'")
    delta = logodds(p_hit if observation == "hit" else p_miss)
    lo = float(np.clip(voxel.log_odds + delta, -clamp, clamp))
    return OccupancyVoxel(lo, scan_id)


@dataclass
class OccupancyConfig:
    p_hit: float = 0.7
    p_miss: float = 0.4
    p_occ: float = 0.8
    p_free: float = 0.3
    voxel_size: float = 1.0
    logodds_clamp: float = 10.0
    max_range: float = 80.0


class OccupancyGrid:
    """Hash map from encoded voxel key to log-odds state."""

    def __init__(self, cfg: OccupancyConfig | None = None):
        self.cfg = cfg or OccupancyConfig()
        self.voxels: dict[int, OccupancyVoxel] = {}
        self.scan_counter = 0

    def __len__(self):
        return len(self.voxels)

    # -- observation extraction ---------------------------------------
    def mark_occupied(self, scan_points_world: np.ndarray,
                      region_keys=None) -> set[int]:
        """Keys of voxels holding at least one scan point; optionally
        restricted to voxels overlapping the current map region."""
        pts = np.asarray(scan_points_world, dtype=np.float64).reshape(-1, 3)
        if pts.shape[0] == 0:
            return set()
        keys = set(int(k) for k in
                   np.unique(encode_index(cell_index(pts, self.cfg.voxel_size))))
        if region_keys is not None:
            keys &= set(region_keys)
        return keys

    def mark_free(self, occupied_keys: set[int], sensor_origin_world,
                  bins: RangeImageGeometry, scan_points_world=None) -> set[int]:
        """Known voxels strictly in front of an occupied voxel on the same
        bearing bin are free; free and occupied sets never intersect.

        When the raw scan points are supplied, the per-bin far range comes
        from the measured returns themselves; voxel-center quantization of
        the occupied set leaves most bins empty and starves the miss signal.
        """
        if not occupied_keys or not self.voxels:
            return set()
        origin = np.asarray(sensor_origin_world, dtype=np.float64)
        half = self.cfg.voxel_size / 2.0

        def bin_ranges(keys):
            arr = np.fromiter(keys, dtype=np.int64)
            centers = decode_index(arr) * self.cfg.voxel_size + half
            rel = centers - origin
            pix, valid, rng = pixel_coords(rel, bins)
            flat = pix[:, 0] * bins.cols + pix[:, 1]
            return arr, flat, rng, valid

        # farthest occupied range per bearing bin
        far = {}
        if scan_points_world is not None and len(scan_points_world):
            rel = np.asarray(scan_points_world, dtype=np.float64) - origin
            pix, valid, rng = pixel_coords(rel, bins)
            flat = pix[:, 0] * bins.cols + pix[:, 1]
            keep = valid & (rng <= self.cfg.max_range)
            acc = np.zeros(bins.rows * bins.cols)
            np.maximum.at(acc, flat[keep], rng[keep])
            far = {int(b): acc[b] for b in np.unique(flat[keep])}
        else:
            occ_arr, occ_bin, occ_rng, occ_valid = bin_ranges(occupied_keys)
            for b, r, v in zip(occ_bin, occ_rng, occ_valid):
                if v and r <= self.cfg.max_range:
                    far[int(b)] = max(far.get(int(b), 0.0), float(r))

        known = [k for k in self.voxels if k not in occupied_keys]
        if not known:
            return set()
        k_arr, k_bin, k_rng, k_valid = bin_ranges(known)
        free = set()
        for key, b, r, v in zip(k_arr, k_bin, k_rng, k_valid):
            if not v or r > self.cfg.max_range:
                continue
            r_occ = far.get(int(b))
            if r_occ is not None and r < r_occ - self.cfg.voxel_size:
                free.add(int(key))
        return free

    # -- probabilistic update -----------------------------------------
    def _observe(self, key: int, observation: str) -> None:
        voxel = self.voxels.get(key, OccupancyVoxel())
        self.voxels[key] = logodds_update(voxel, observation, self.cfg.p_hit,
                                          self.cfg.p_miss,
                                          self.cfg.logodds_clamp,
                                          self.scan_counter)

    def integrate_scan(self, scan_points_world, sensor_origin_world,
                       bins: RangeImageGeometry, region_keys=None) -> None:
        """One full update round: hits on occupied voxels, misses on freed ones."""
        occupied = self.mark_occupied(scan_points_world, region_keys)
        free = self.mark_free(occupied, sensor_origin_world, bins,
                              scan_points_world)
        for key in occupied:
            self._observe(key, "hit")
        for key in free:
            self._observe(key, "miss")
        self.scan_counter += 1

    def probability(self, key: int) -> float | None:
        voxel = self.voxels.get(key)
        if voxel is None:
            return None
        return float(occupancy_probability(voxel.log_odds))


def _probe_points(cell, occ_voxel: float) -> np.ndarray:
    """Probe locations inside the mesh cell, one per overlapping occupancy
    voxel when the occupancy grid is finer than the map grid."""
    n = max(1, int(round(cell.cfg.voxel_size / occ_voxel)))
    offs = (np.arange(n) + 0.5) * occ_voxel
    gx, gy, gz = np.meshgrid(offs, offs, offs, indexing="ij")
    return cell.origin + np.stack([gx, gy, gz], axis=-1).reshape(-1, 3)


def cull_dynamic(mesh_map: MeshMap, grid: OccupancyGrid,
                 p_occ: float, p_free: float) -> int:
    """Clear mesh cells with any occupancy voxel below p_free; pin cells
    whose center voxel is above p_occ as static. Returns the cleared count."""
    cleared = 0
    for key in sorted(mesh_map.cells):
        cell = mesh_map.cells[key]
        keys = np.unique(encode_index(cell_index(
            _probe_points(cell, grid.cfg.voxel_size), grid.cfg.voxel_size)))
        probs = [p for p in (grid.probability(int(k)) for k in keys)
                 if p is not None]
        if not probs:
            continue
        center_key = int(encode_index(cell_index(cell.center[None, :],
                                                 grid.cfg.voxel_size))[0])
        p_center = grid.probability(center_key)
        if p_center is not None and p_center > p_occ:
            cell.pinned_static = True
        elif min(probs) < p_free and not cell.pinned_static:
            if cell.points.shape[0] or any(
                    layer.sum_w.any() for layer in cell.layers.values()):
                cell.clear_content()
                cleared += 1
    return cleared
