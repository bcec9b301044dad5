"""Incremental mesh map: continuity filtering, hash-indexed voxel cells,
per-cell Gaussian-process surface regression, uncertainty-gated triangulation
and inverse-variance fusion of repeated predictions."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import cho_factor, cho_solve

from .geometry import Mesh, PointCloud

# ---------------------------------------------------------------------------
# continuity test
# ---------------------------------------------------------------------------

MIN_RANGE = 1e-6


@dataclass
class ContinuityParams:
    w1: float = 0.5
    w2: float = 0.5
    neighborhood: int = 6   # neighbors in scan order, half on each side
    c_th: float = 0.2
    exclude_high: bool = True  # False = literal low-score exclusion

    def __post_init__(self):
        if abs(self.w1 + self.w2 - 1.0) > 1e-12 or self.w1 < 0 or self.w2 < 0:
            raise ValueError("weights must be non-negative and sum to 1")
        if self.neighborhood < 2:
            raise ValueError("neighborhood must hold at least 2 points")


def continuity_scores(cloud: PointCloud, params: ContinuityParams) -> np.ndarray:
    """Per-point discontinuity score: weighted combination of the normalized
    spatial offset and range offset from the scan-order neighborhood.

    Points with near-zero range score 0 (they are skipped downstream anyway).
    """
    pts = cloud.points
    n = len(cloud)
    if n == 0:
        return np.zeros(0)
    rng = cloud.ranges
    half = max(1, params.neighborhood // 2)
    idx = np.arange(n)
    lo = np.maximum(0, idx - half)
    hi = np.minimum(n - 1, idx + half)
    count = (hi - lo).astype(np.float64)  # window size minus the point itself

    cp = np.vstack([np.zeros(3), np.cumsum(pts, axis=0)])
    cr = np.concatenate([[0.0], np.cumsum(rng)])
    sum_p = cp[hi + 1] - cp[lo] - pts     # neighbor sum, excluding i
    sum_r = cr[hi + 1] - cr[lo] - rng

    ok = (rng > MIN_RANGE) & (count > 0)
    safe_r = np.where(ok, rng, 1.0)
    safe_c = np.where(count > 0, count, 1.0)
    c1 = np.linalg.norm(count[:, None] * pts - sum_p, axis=1) / (safe_c * safe_r)
    c2 = np.abs(count * rng - sum_r) / (safe_c * safe_r)
    scores = params.w1 * c1 + params.w2 * c2
    scores[~ok] = 0.0
    return scores


def continuity_filter(cloud: PointCloud, scores: np.ndarray,
                      c_th: float, exclude_high: bool = True) -> PointCloud:
    """Drop discontinuous points; exclude_high=False flips the comparison to
    the literal low-score exclusion."""
    keep = scores <= c_th if exclude_high else scores >= c_th
    return cloud.select(keep)


# ---------------------------------------------------------------------------
# cell indexing
# ---------------------------------------------------------------------------

_OFFSET = 1 << 20
_MASK = (1 << 21) - 1
INDEX_RANGE = 1 << 20  # |i| must stay below this for the packing to be bijective


def cell_index(points: np.ndarray, voxel_size: float) -> np.ndarray:
    """Integer cell coordinates via floor(coordinate / voxel_size)."""
    pts = np.asarray(points, dtype=np.float64)
    return np.floor(pts / voxel_size).astype(np.int64)


def encode_index(idx: np.ndarray) -> np.ndarray:
    """Pack signed 21-bit (ix, iy, iz) into one 63-bit integer key."""
    idx = np.asarray(idx, dtype=np.int64)
    shifted = idx + _OFFSET
    if shifted.min() < 0 or shifted.max() > _MASK:
        raise ValueError(f"cell coordinate out of packable range |i| < {INDEX_RANGE}")
    packed = (shifted[..., 0] << 42) | (shifted[..., 1] << 21) | shifted[..., 2]
    return packed


def decode_index(key) -> np.ndarray:
    key = np.asarray(key, dtype=np.int64)
    out = np.stack([(key >> 42) & _MASK, (key >> 21) & _MASK, key & _MASK],
                   axis=-1)
    return out - _OFFSET


# ---------------------------------------------------------------------------
# Gaussian-process regression per cell
# ---------------------------------------------------------------------------

class CellUnreconstructable(RuntimeError):
    """The cell's kernel matrix is too ill-conditioned to invert."""


def _gauss_kernel(a: np.ndarray, b: np.ndarray, sigma_f: float, ell: float) -> np.ndarray:
    d2 = ((a[:, None, :] - b[None, :, :]) ** 2).sum(axis=2)
    return sigma_f ** 2 * np.exp(-d2 / (2.0 * ell ** 2))


def gp_train_predict(train_loc, train_val, test_loc, kernel=(1.0, 0.5),
                     sigma_in_sq: float = 1e-2, jitter: float = 1e-9,
                     max_cond: float = 1e12):
    """GP posterior mean and variance with a Gaussian kernel.

    mean = k_mn^T (sigma_in^2 I + K_mm)^-1 f
    var  = k_nn  - k_mn^T (sigma_in^2 I + K_mm)^-1 k_mn, clipped to [0, sigma_f^2]
    """
    train_loc = np.atleast_2d(np.asarray(train_loc, dtype=np.float64))
    test_loc = np.atleast_2d(np.asarray(test_loc, dtype=np.float64))
    train_val = np.asarray(train_val, dtype=np.float64).ravel()
    if train_loc.shape[0] == 0:
        raise ValueError("at least one training point required")
    if sigma_in_sq <= 0:
        raise ValueError("sigma_in_sq must be positive")
    sigma_f, ell = kernel
    k_mm = _gauss_kernel(train_loc, train_loc, sigma_f, ell)
    a = k_mm + (sigma_in_sq + jitter * sigma_f ** 2) * np.eye(train_loc.shape[0])
    if np.linalg.cond(a) > max_cond:
        raise CellUnreconstructable("kernel matrix condition number exceeds limit")
    try:
        factor = cho_factor(a, lower=True)
    except np.linalg.LinAlgError as exc:
        raise CellUnreconstructable(str(exc)) from exc
    k_mn = _gauss_kernel(train_loc, test_loc, sigma_f, ell)
    mean = k_mn.T @ cho_solve(factor, train_val)
    var = sigma_f ** 2 - np.einsum("mt,mt->t", k_mn, cho_solve(factor, k_mn))
    return mean, np.clip(var, 0.0, sigma_f ** 2)


# ---------------------------------------------------------------------------
# prediction fusion
# ---------------------------------------------------------------------------

class NoFusableEvidence(RuntimeError):
    """Every history entry failed the sigma_update gate."""


def fuse_prediction(history, sigma_update_sq: float,
                    inverse_variance: bool = True) -> float:
    """Fuse a prediction history [(value, variance), ...].

    Entries with variance >= sigma_update_sq are excluded. The default is
    inverse-variance weighting; inverse_variance=False uses the literal
    variance-proportional weighting.
    """
    kept = [(f, v) for f, v in history if v < sigma_update_sq]
    if not kept:
        raise NoFusableEvidence("no prediction passes the update gate")
    vals = np.asarray([f for f, _ in kept])
    variances = np.asarray([v for _, v in kept])
    if inverse_variance:
        w = 1.0 / variances
    else:
        w = variances
    return float((vals * w).sum() / w.sum())


# ---------------------------------------------------------------------------
# triangulation
# ---------------------------------------------------------------------------

def connect_vertices(positions: np.ndarray, valid: np.ndarray) -> np.ndarray:
    """Triangulate a g x g vertex grid.

    Each 2x2 quad whose four vertices are all valid yields two triangles,
    split along the shorter diagonal. Returns (F, 3) row-major flat indices.
    """
    g = valid.shape[0]
    faces = []
    for i in range(g - 1):
        for j in range(g - 1):
            if not (valid[i, j] and valid[i + 1, j]
                    and valid[i, j + 1] and valid[i + 1, j + 1]):
                continue
            a, b = i * g + j, i * g + j + 1
            c, d = (i + 1) * g + j, (i + 1) * g + j + 1
            diag_ad = np.linalg.norm(positions[i, j] - positions[i + 1, j + 1])
            diag_bc = np.linalg.norm(positions[i, j + 1] - positions[i + 1, j])
            if diag_ad <= diag_bc:
                faces.append((a, b, d))
                faces.append((a, d, c))
            else:
                faces.append((a, b, c))
                faces.append((b, d, c))
    return np.asarray(faces, dtype=np.int64).reshape(-1, 3)


# ---------------------------------------------------------------------------
# cells and the map
# ---------------------------------------------------------------------------

@dataclass
class MesherConfig:
    voxel_size: float = 1.0
    grid_g: int = 4
    sigma_f: float = 1.0
    length_scale: float | None = None     # None -> voxel_size / 2
    sigma_in_sq: float = 1e-2
    sigma_match_sq: float = 0.05
    sigma_update_sq: float = 0.1
    fusion_inverse_variance: bool = True
    axis_mode: str = "all"                # "all" or "best"

    def __post_init__(self):
        if self.length_scale is None:
            self.length_scale = self.voxel_size / 2.0
        if self.axis_mode not in ("all", "best"):
            raise ValueError("axis_mode must be 'all' or 'best'")
        if self.grid_g < 2:
            raise ValueError("grid_g must be at least 2")


class AxisLayer:
    """Fused prediction state for one reconstruction axis of a cell.

    Vertices live on a g x g grid over the two fixed axes; the free-axis
    coordinate is the fused GP prediction.
    """

    def __init__(self, axis: int, g: int):
        self.axis = axis
        self.g = g
        n = g * g
        self.sum_w = np.zeros(n)      # inverse-variance weights
        self.sum_wf = np.zeros(n)
        self.lit_sum_s = np.zeros(n)  # literal-mode accumulators
        self.lit_sum_fs = np.zeros(n)
        self.min_var = np.full(n, np.inf)
        self.updates = 0

    def fuse(self, values: np.ndarray, variances: np.ndarray,
             sigma_update_sq: float) -> None:
        gate = variances < sigma_update_sq
        self.sum_w[gate] += 1.0 / variances[gate]
        self.sum_wf[gate] += values[gate] / variances[gate]
        self.lit_sum_s[gate] += variances[gate]
        self.lit_sum_fs[gate] += values[gate] * variances[gate]
        self.min_var[gate] = np.minimum(self.min_var[gate], variances[gate])
        self.updates += 1

    def fused(self, inverse_variance: bool = True):
        """(value, variance) arrays; unfused vertices are nan / inf."""
        has = self.sum_w > 0
        value = np.full(self.g * self.g, np.nan)
        var = np.full(self.g * self.g, np.inf)
        if inverse_variance:
            value[has] = self.sum_wf[has] / self.sum_w[has]
            var[has] = 1.0 / self.sum_w[has]
        else:
            value[has] = self.lit_sum_fs[has] / self.lit_sum_s[has]
            var[has] = self.min_var[has]
        return value, var

    def clear(self) -> None:
        self.sum_w[:] = 0.0
        self.sum_wf[:] = 0.0
        self.lit_sum_s[:] = 0.0
        self.lit_sum_fs[:] = 0.0
        self.min_var[:] = np.inf


class GPCell:
    """One voxel of the mesh map: deduplicated training points plus per-axis
    fused surface predictions."""

    def __init__(self, index: np.ndarray, cfg: MesherConfig):
        self.index = np.asarray(index, dtype=np.int64)
        self.cfg = cfg
        self.origin = self.index * cfg.voxel_size
        self.center = self.origin + cfg.voxel_size / 2.0
        self.points = np.zeros((0, 3))
        self.layers: dict[int, AxisLayer] = {}
        self.unreconstructable: set[int] = set()
        self.pinned_static = False
        self.last_update = -1
        # grid offsets span the full cell, endpoints inclusive, so neighbor
        # cells share border vertex positions
        self.offsets = np.linspace(0.0, cfg.voxel_size, cfg.grid_g)

    # -- training data -------------------------------------------------
    def _dedupe(self, pts: np.ndarray) -> np.ndarray:
        sub = self.cfg.voxel_size / self.cfg.grid_g
        idx = np.floor((pts - self.origin) / sub).astype(np.int64)
        _, inv, counts = np.unique(idx, axis=0, return_inverse=True,
                                   return_counts=True)
        sums = np.zeros((counts.shape[0], 3))
        np.add.at(sums, inv, pts)
        return sums / counts[:, None]

    def _axes(self) -> list[int]:
        if self.points.shape[0] < 2:
            return [0, 1, 2]
        if self.cfg.axis_mode == "best":
            spread = self.points.std(axis=0)
            return [int(np.argmin(spread))]
        # an axis layer regresses over the other two axes; if the data
        # collapses to a line in that input plane the layer extrapolates a
        # surface from a curve and produces spurious geometry, so skip it
        extent = self.points.max(axis=0) - self.points.min(axis=0)
        min_spread = self.cfg.voxel_size / self.cfg.grid_g
        axes = []
        for axis in (0, 1, 2):
            other = [a for a in (0, 1, 2) if a != axis]
            if extent[other[0]] >= min_spread and extent[other[1]] >= min_spread:
                axes.append(axis)
        return axes or [int(np.argmin(self.points.std(axis=0)))]

    def insert(self, pts: np.ndarray, scan_id: int = 0) -> None:
        """Merge new world-frame points and refresh the per-axis predictions."""
        if pts.shape[0] == 0:
            return
        combined = np.vstack([self.points, pts]) if self.points.size else pts
        self.points = self._dedupe(combined)
        self.last_update = scan_id
        cfg = self.cfg
        kernel = (cfg.sigma_f, cfg.length_scale)
        half = cfg.voxel_size / 2.0
        local = self.points - self.center
        grid = self.offsets - half
        gm, gn = np.meshgrid(grid, grid, indexing="ij")
        test = np.stack([gm.ravel(), gn.ravel()], axis=1)
        for axis in self._axes():
            if axis in self.unreconstructable:
                continue
            other = [a for a in (0, 1, 2) if a != axis]
            inputs = local[:, other]
            values = local[:, axis]
            try:
                # cells crossed by two surfaces (wall meeting floor, room
                # corners) are not single-valued along this axis; trim the
                # points the first fit cannot explain and refit on the rest
                pred, _ = gp_train_predict(inputs, values - values.mean(),
                                           inputs, kernel, cfg.sigma_in_sq)
                resid = np.abs(values - values.mean() - pred)
                keep = resid <= 2.0 * np.sqrt(cfg.sigma_in_sq)
                if 0 < keep.sum() < keep.size:
                    inputs, values = inputs[keep], values[keep]
                # regress deviations about the training mean; a zero-mean
                # prior about the cell center drags sparse border
                # predictions inward
                offset = values.mean()
                mean, var = gp_train_predict(inputs, values - offset,
                                             test, kernel, cfg.sigma_in_sq)
            except CellUnreconstructable:
                self.unreconstructable.add(axis)
                continue
            mean = mean + offset
            layer = self.layers.get(axis)
            if layer is None:
                layer = self.layers[axis] = AxisLayer(axis, cfg.grid_g)
            layer.fuse(mean, var, cfg.sigma_update_sq)

    # -- geometry ------------------------------------------------------
    def layer_geometry(self, axis: int):
        """(positions (g, g, 3), valid (g, g)) for one axis layer.

        Validity = fused variance below sigma_match_sq and the predicted
        coordinate inside the cell with one grid spacing of slack.
        """
        layer = self.layers.get(axis)
        if layer is None:
            return None
        cfg = self.cfg
        g = cfg.grid_g
        value, var = layer.fused(cfg.fusion_inverse_variance)
        half = cfg.voxel_size / 2.0
        slack = cfg.voxel_size / (g - 1)
        valid = (var < cfg.sigma_match_sq) & (np.abs(value) <= half + slack)
        other = [a for a in (0, 1, 2) if a != axis]
        pos = np.zeros((g * g, 3))
        gm, gn = np.meshgrid(self.offsets, self.offsets, indexing="ij")
        pos[:, other[0]] = gm.ravel() + self.origin[other[0]]
        pos[:, other[1]] = gn.ravel() + self.origin[other[1]]
        pos[:, axis] = value + self.center[axis]
        return pos.reshape(g, g, 3), valid.reshape(g, g)

    def clear_content(self) -> None:
        """Drop training data and predictions (fine dynamic removal)."""
        self.points = np.zeros((0, 3))
        for layer in self.layers.values():
            layer.clear()


class MeshMap:
    """Hash map from encoded cell key to GPCell."""

    def __init__(self, cfg: MesherConfig | None = None):
        self.cfg = cfg or MesherConfig()
        self.cells: dict[int, GPCell] = {}
        self.scan_counter = 0

    def __len__(self):
        return len(self.cells)

    @property
    def voxel_size(self) -> float:
        return self.cfg.voxel_size

    def update_cells(self, cloud_world: PointCloud) -> None:
        """Route points to cells, creating cells on demand and re-predicting
        touched ones with their combined training data."""
        if len(cloud_world) == 0:
            return
        idx = cell_index(cloud_world.points, self.cfg.voxel_size)
        keys = encode_index(idx)
        order = np.argsort(keys, kind="stable")
        keys_sorted = keys[order]
        pts_sorted = cloud_world.points[order]
        boundaries = np.flatnonzero(np.diff(keys_sorted)) + 1
        starts = np.concatenate([[0], boundaries])
        ends = np.concatenate([boundaries, [keys_sorted.shape[0]]])
        for s, e in zip(starts, ends):
            key = int(keys_sorted[s])
            cell = self.cells.get(key)
            if cell is None:
                cell = self.cells[key] = GPCell(decode_index(key), self.cfg)
            cell.insert(pts_sorted[s:e], self.scan_counter)
        self.scan_counter += 1

    def layers(self):
        """Deterministic iteration: (key, cell, axis, positions, valid)."""
        for key in sorted(self.cells):
            cell = self.cells[key]
            for axis in sorted(cell.layers):
                geom = cell.layer_geometry(axis)
                if geom is None:
                    continue
                yield key, cell, axis, geom[0], geom[1]

    def extract_global_mesh(self) -> Mesh:
        """Union of every layer that triangulates to at least one face."""
        all_vertices = []
        all_faces = []
        base = 0
        for _key, _cell, _axis, pos, valid in self.layers():
            faces = connect_vertices(pos, valid)
            if faces.shape[0] == 0:
                continue
            g = valid.shape[0]
            flat_valid = valid.ravel()
            remap = -np.ones(g * g, dtype=np.int64)
            remap[flat_valid] = np.arange(int(flat_valid.sum()))
            all_vertices.append(pos.reshape(-1, 3)[flat_valid])
            all_faces.append(remap[faces] + base)
            base += int(flat_valid.sum())
        if not all_vertices:
            return Mesh.empty()
        return Mesh(np.vstack(all_vertices), np.vstack(all_faces))
