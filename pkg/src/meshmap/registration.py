"""Point-to-mesh registration: nearest-vertex association in the 27-cell
neighborhood, smooth normals from ring-ordered grid neighbors, Huber-robust
Levenberg-Marquardt pose refinement, and pose extrapolation/fusion helpers."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree
from scipy.spatial.transform import Rotation

from .geometry import PoseSE3, PointCloud, orthonormalize
from .mesher import MeshMap, cell_index, encode_index

DEGENERATE_NORM = 1e-9

# circular (ring) order of the 8 grid neighbors around a vertex
_RING = [(-1, -1), (-1, 0), (-1, 1), (0, 1), (1, 1), (1, 0), (1, -1), (0, -1)]


# ---------------------------------------------------------------------------
# smooth normals
# ---------------------------------------------------------------------------

def smooth_normal_batch(rings: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Normals for a batch of equal-length ordered vertex rings (V, m, 3).

    Sums cross products (v_q - v_{q-1}) x (v_q - v_{q+2}); rings of length 3
    use the single cross (v_1 - v_0) x (v_1 - v_2). Returns (normals, ok).
    """
    m = rings.shape[1]
    if m < 3:
        raise ValueError("ring must contain at least 3 vertices")
    if m == 3:
        total = np.cross(rings[:, 1] - rings[:, 0], rings[:, 1] - rings[:, 2])
    else:
        mid = rings[:, 1:m - 2]
        a = mid - rings[:, 0:m - 3]
        b = mid - rings[:, 3:m]
        total = np.cross(a, b).sum(axis=1)
    norm = np.linalg.norm(total, axis=1)
    ok = norm > DEGENERATE_NORM
    safe = np.where(ok, norm, 1.0)
    return total / safe[:, None], ok


def smooth_normal(ordered_neighbor_vertices, n_q: int | None = None):
    """Unit smooth normal of one ordered vertex ring, or None when degenerate."""
    ring = np.asarray(ordered_neighbor_vertices, dtype=np.float64).reshape(-1, 3)
    if n_q is not None:
        ring = ring[:n_q]
    if ring.shape[0] < 3:
        return None
    normals, ok = smooth_normal_batch(ring[None])
    return normals[0] if ok[0] else None


# ---------------------------------------------------------------------------
# association
# ---------------------------------------------------------------------------

@dataclass
class Association:
    v_p: np.ndarray  # query point, world frame under the current pose
    v_q: np.ndarray  # nearest valid mesh vertex
    n_q: np.ndarray  # unit smooth normal at v_q


def nearest_vertex(mesh_map: MeshMap, point):
    """Nearest valid vertex among the query point's 27-cell neighborhood.

    Ties break on lowest encoded cell key, then axis, then flat grid index.
    Returns (vertex, cell, (axis, i, j)) or None.
    """
    point = np.asarray(point, dtype=np.float64).reshape(3)
    base = cell_index(point[None, :], mesh_map.voxel_size)[0]
    best = None
    for dx in (-1, 0, 1):
        for dy in (-1, 0, 1):
            for dz in (-1, 0, 1):
                neighbor = base + np.array([dx, dy, dz])
                key = int(encode_index(neighbor[None, :])[0])
                cell = mesh_map.cells.get(key)
                if cell is None:
                    continue
                for axis in sorted(cell.layers):
                    geom = cell.layer_geometry(axis)
                    if geom is None:
                        continue
                    pos, valid = geom
                    g = valid.shape[0]
                    flat = valid.ravel()
                    if not flat.any():
                        continue
                    pts = pos.reshape(-1, 3)
                    dist = np.linalg.norm(pts - point, axis=1)
                    dist[~flat] = np.inf
                    j = int(np.argmin(dist))
                    cand = (float(dist[j]), key, axis, j)
                    if best is None or cand < best[:4]:
                        best = (*cand, pts[j], cell)
    if best is None:
        return None
    _, _, axis, j, vert, cell = best
    g = cell.cfg.grid_g
    return vert, cell, (axis, j // g, j % g)


class MeshVertexView:
    """Read-only registration snapshot: valid vertices with smooth normals.

    Built from a quiescent MeshMap (with per-layer caching across scans) or
    directly from vertex/normal arrays for surfaces that are not voxel maps.
    """

    def __init__(self, vertices, normals, cells=None, voxel_size=None,
                 max_assoc_dist=None):
        self.vertices = np.asarray(vertices, dtype=np.float64).reshape(-1, 3)
        self.normals = np.asarray(normals, dtype=np.float64).reshape(-1, 3)
        self.cells = (np.asarray(cells, dtype=np.int64).reshape(-1, 3)
                      if cells is not None else None)
        self.voxel_size = voxel_size
        self.max_assoc_dist = max_assoc_dist
        self._tree = (cKDTree(self.vertices) if len(self.vertices) else None)

    def __len__(self):
        return self.vertices.shape[0]

    def associate(self, points_world: np.ndarray):
        """Nearest-vertex association; returns (mask, v_q, n_q) with mask over
        the input points. Without cell metadata every match is accepted;
        with it, matches outside the 27-cell neighborhood are dropped."""
        pts = np.asarray(points_world, dtype=np.float64).reshape(-1, 3)
        if self._tree is None or pts.shape[0] == 0:
            return np.zeros(pts.shape[0], dtype=bool), np.zeros((0, 3)), np.zeros((0, 3))
        dist, idx = self._tree.query(pts, k=1)
        mask = np.ones(pts.shape[0], dtype=bool)
        if self.cells is not None and self.voxel_size is not None:
            pcell = cell_index(pts, self.voxel_size)
            delta = np.abs(self.cells[idx] - pcell).max(axis=1)
            mask = delta <= 1
        if self.max_assoc_dist is not None:
            mask &= dist <= self.max_assoc_dist
        return mask, self.vertices[idx[mask]], self.normals[idx[mask]]


class RegistrationViewCache:
    """Builds MeshVertexView snapshots, re-deriving normals only for layers
    whose cell changed since the previous build."""

    def __init__(self):
        self._layers: dict[tuple[int, int], tuple[int, tuple]] = {}

    def build(self, mesh_map: MeshMap) -> MeshVertexView:
        seen = set()
        for key, cell, axis, pos, valid in mesh_map.layers():
            tag = (key, axis)
            seen.add(tag)
            version = cell.layers[axis].updates
            cached = self._layers.get(tag)
            if cached is not None and cached[0] == version:
                continue
            self._layers[tag] = (version,
                                 _layer_vertex_data(cell, axis, pos, valid))
        for tag in list(self._layers):
            if tag not in seen:
                del self._layers[tag]
        verts, normals, cells = [], [], []
        for tag in sorted(self._layers):
            v, n, c = self._layers[tag][1]
            if len(v):
                verts.append(v)
                normals.append(n)
                cells.append(c)
        if not verts:
            return MeshVertexView(np.zeros((0, 3)), np.zeros((0, 3)))
        # distant matches tend to pair a point with an unrelated surface
        # patch, so cap the association radius at half a voxel
        return MeshVertexView(np.vstack(verts), np.vstack(normals),
                              np.vstack(cells), mesh_map.voxel_size,
                              max_assoc_dist=mesh_map.voxel_size / 2.0)


def _layer_vertex_data(cell, axis: int, pos: np.ndarray, valid: np.ndarray):
    """Valid vertices of one layer with their smooth normals and cell index.

    Normal rings may also use finite in-cell neighbor predictions that fall
    short of the match gate; sparse layers (a single scan ring crossing the
    cell) would otherwise yield isolated vertices with no computable normal.
    Vertices whose ring has fewer than 3 members, or whose normal is
    degenerate, are dropped. Rings are grouped by availability pattern so
    each group evaluates vectorized.
    """
    g = valid.shape[0]
    ii, jj = np.nonzero(valid)
    if ii.size == 0:
        return np.zeros((0, 3)), np.zeros((0, 3)), np.zeros((0, 3), dtype=np.int64)
    half = cell.cfg.voxel_size / 2.0
    slack = cell.cfg.voxel_size / (g - 1)
    coord = pos[..., axis] - cell.center[axis]
    usable = np.isfinite(coord) & (np.abs(coord) <= half + slack)
    ring_pos = np.zeros((ii.size, 8, 3))
    ring_ok = np.zeros((ii.size, 8), dtype=bool)
    for r, (di, dj) in enumerate(_RING):
        ni, nj = ii + di, jj + dj
        inside = (ni >= 0) & (ni < g) & (nj >= 0) & (nj < g)
        ok = inside.copy()
        ok[inside] = usable[ni[inside], nj[inside]]
        ring_ok[:, r] = ok
        ring_pos[ok, r] = pos[ni[ok], nj[ok]]

    verts = pos[ii, jj]
    normals = np.zeros((ii.size, 3))
    have = np.zeros(ii.size, dtype=bool)
    patterns = ring_ok @ (1 << np.arange(8))
    for pat in np.unique(patterns):
        members = [r for r in range(8) if pat & (1 << r)]
        if len(members) < 3:
            continue
        sel = patterns == pat
        n, ok = smooth_normal_batch(ring_pos[sel][:, members])
        normals[sel] = n
        have[sel] = ok
    cells = np.repeat(cell.index[None, :], ii.size, axis=0)
    return verts[have], normals[have], cells[have]


# ---------------------------------------------------------------------------
# residual and solver
# ---------------------------------------------------------------------------

def residual(pose: PoseSE3, assoc: Association) -> float:
    """Signed point-to-mesh distance n_q . (R v_p + t - v_q)."""
    return float(assoc.n_q @ (pose.rotation @ assoc.v_p + pose.translation
                              - assoc.v_q))


def _residuals(pose: PoseSE3, vp, vq, nq):
    return ((vp @ pose.rotation.T + pose.translation - vq) * nq).sum(axis=1)


def residual_jacobian(pose: PoseSE3, vp, nq):
    """(N, 6) Jacobian wrt the local update (rotvec, translation)."""
    rn = nq @ pose.rotation  # R^T n per row
    return np.hstack([np.cross(vp, rn), nq])


def huber_cost(e: np.ndarray, delta: float) -> float:
    ae = np.abs(e)
    quad = ae <= delta
    return float((e[quad] ** 2).sum() + (delta * (2 * ae[~quad] - delta)).sum())


def huber_weights(e: np.ndarray, delta: float) -> np.ndarray:
    ae = np.abs(e)
    return np.where(ae <= delta, 1.0, delta / np.maximum(ae, 1e-300))


@dataclass
class RegistrationConfig:
    huber_delta: float = 0.1
    max_outer: int = 10
    max_lm_iters: int = 20
    min_inliers: int = 50
    lambda_init: float = 1e-4
    step_tol: float = 1e-6
    cost_tol: float = 1e-7


@dataclass
class SolverReport:
    iterations: int = 0
    outer_iterations: int = 0
    initial_cost: float = 0.0
    final_cost: float = 0.0
    converged: bool = False
    inlier_count: int = 0


def solve_pose(prior: PoseSE3, view: MeshVertexView, query_cloud: PointCloud,
               cfg: RegistrationConfig | None = None) -> tuple[PoseSE3, SolverReport]:
    """Refine the sensor-to-world prior by minimizing Huber-robust squared
    point-to-mesh residuals, re-associating every outer iteration."""
    cfg = cfg or RegistrationConfig()
    report = SolverReport()
    pose = prior
    pts = query_cloud.points
    if len(view) == 0 or pts.shape[0] == 0:
        return prior, report

    for outer in range(cfg.max_outer):
        mask, vq, nq = view.associate(pose.apply(pts))
        inliers = int(mask.sum())
        if inliers < cfg.min_inliers:
            if outer == 0:
                report.inlier_count = inliers
                return prior, report
            break
        report.inlier_count = inliers
        report.outer_iterations = outer + 1
        vp = pts[mask]
        e = _residuals(pose, vp, vq, nq)
        cost = huber_cost(e, cfg.huber_delta)
        if outer == 0:
            report.initial_cost = cost
        lam = cfg.lambda_init
        step_norm = np.inf
        for _ in range(cfg.max_lm_iters):
            w = huber_weights(e, cfg.huber_delta)
            jac = residual_jacobian(pose, vp, nq)
            jw = jac * w[:, None]
            hess = jac.T @ jw
            grad = jw.T @ e
            diag = np.diag(np.diag(hess)) + 1e-12 * np.eye(6)
            try:
                step = np.linalg.solve(hess + lam * diag, -grad)
            except np.linalg.LinAlgError:
                break
            cand = PoseSE3(pose.rotation @ Rotation.from_rotvec(step[:3]).as_matrix(),
                           pose.translation + step[3:])
            e_cand = _residuals(cand, vp, vq, nq)
            cost_cand = huber_cost(e_cand, cfg.huber_delta)
            report.iterations += 1
            if cost_cand < cost:
                rel = (cost - cost_cand) / max(cost, 1e-300)
                pose, e, cost = cand, e_cand, cost_cand
                lam = max(lam / 10.0, 1e-12)
                step_norm = float(np.linalg.norm(step))
                if step_norm < cfg.step_tol or rel < cfg.cost_tol:
                    break
            else:
                lam *= 10.0
                if lam > 1e8:
                    break
        report.final_cost = cost
        if step_norm < cfg.step_tol:
            break
    report.converged = (report.inlier_count >= cfg.min_inliers
                        and report.final_cost <= report.initial_cost + 1e-12)
    return pose, report


# ---------------------------------------------------------------------------
# pose extrapolation and fusion
# ---------------------------------------------------------------------------

def constant_velocity_prior(t_prev2: PoseSE3, t_prev1: PoseSE3) -> PoseSE3:
    """Extrapolate one step ahead assuming constant velocity.

    The rotation is re-projected onto SO(3): the extrapolation runs every
    scan on its own previous outputs, so even float-level orthonormality
    loss compounds exponentially if it is ever allowed to pass through.
    """
    pred = t_prev1 @ (t_prev2.inverse() @ t_prev1)
    return PoseSE3(orthonormalize(pred.rotation), pred.translation)


def fuse_pose(odom_pose: PoseSE3, last_refined: PoseSE3 | None,
              last_odom_at_refine: PoseSE3 | None) -> PoseSE3:
    """Publish the odometry increment since the last refinement re-applied on
    top of the refined pose. Before any refinement, pass the odometry through."""
    if last_refined is None or last_odom_at_refine is None:
        return odom_pose
    fused = last_refined @ (last_odom_at_refine.inverse() @ odom_pose)
    return PoseSE3(orthonormalize(fused.rotation), fused.translation)
