import numpy as np
import pytest

from meshmap.geometry import PointCloud, PoseSE3
from meshmap.mesher import MeshMap, MesherConfig
from meshmap.registration import (Association, MeshVertexView,
                                  RegistrationConfig, RegistrationViewCache,
                                  constant_velocity_prior, fuse_pose,
                                  huber_cost, huber_weights, nearest_vertex,
                                  residual, residual_jacobian, smooth_normal,
                                  smooth_normal_batch, solve_pose)


def ring_on_plane(normal, center=np.zeros(3), radius=0.5, m=8):
    """Ordered ring of m vertices on the plane through center with the given
    normal, counter-clockwise when seen from the normal side."""
    normal = np.asarray(normal, dtype=float)
    normal = normal / np.linalg.norm(normal)
    a = np.array([1.0, 0, 0]) if abs(normal[0]) < 0.9 else np.array([0, 1.0, 0])
    u = np.cross(normal, a)
    u /= np.linalg.norm(u)
    v = np.cross(normal, u)
    ang = np.linspace(0, 2 * np.pi, m, endpoint=False)
    return center + radius * (np.cos(ang)[:, None] * u + np.sin(ang)[:, None] * v)


# ---------------------------------------------------------------------------
# smooth normals
# ---------------------------------------------------------------------------

@pytest.mark.parametrize("n", [[0, 0, 1], [1, 0, 1], [1, 1, 1], [0, 1, 0]])
def test_smooth_normal_recovers_plane_normal(n):
    expect = np.asarray(n, dtype=float)
    expect /= np.linalg.norm(expect)
    got = smooth_normal(ring_on_plane(n))
    assert got is not None
    assert abs(abs(got @ expect) - 1.0) < 1e-12
    assert np.linalg.norm(got) == pytest.approx(1.0)


def test_smooth_normal_three_vertices():
    got = smooth_normal([[0, 0, 0], [1, 0, 0], [1, 1, 0]])
    np.testing.assert_allclose(np.abs(got), [0, 0, 1], atol=1e-12)


def test_smooth_normal_collinear_degenerate():
    ring = np.stack([np.linspace(0, 1, 5), np.zeros(5), np.zeros(5)], axis=1)
    assert smooth_normal(ring) is None


def test_smooth_normal_too_few():
    assert smooth_normal([[0, 0, 0], [1, 0, 0]]) is None


def test_smooth_normal_batch_matches_scalar():
    rng = np.random.default_rng(0)
    rings = rng.normal(size=(10, 6, 3))
    batch, ok = smooth_normal_batch(rings)
    for k in range(10):
        single = smooth_normal(rings[k])
        if ok[k]:
            np.testing.assert_allclose(batch[k], single, atol=1e-12)
        else:
            assert single is None


def test_smooth_normal_noisy_plane_stable():
    rng = np.random.default_rng(1)
    ring = ring_on_plane([0, 0, 1]) + rng.normal(scale=0.01, size=(8, 3))
    got = smooth_normal(ring)
    assert abs(got[2]) > 0.99


# ---------------------------------------------------------------------------
# association
# ---------------------------------------------------------------------------

def plane_map(z=0.3, extent=3.0, n=4000, seed=0, voxel=1.0):
    mm = MeshMap(MesherConfig(voxel_size=voxel, grid_g=4))
    rng = np.random.default_rng(seed)
    pts = rng.uniform(0, extent, size=(n, 3))
    pts[:, 2] = z
    mm.update_cells(PointCloud(pts))
    return mm


def test_nearest_vertex_on_plane_map():
    mm = plane_map()
    hit = nearest_vertex(mm, [1.5, 1.5, 0.5])
    assert hit is not None
    vert, cell, (axis, i, j) = hit
    assert abs(vert[2] - 0.3) < 0.05
    assert np.linalg.norm(vert[:2] - [1.5, 1.5]) < 0.5


def test_nearest_vertex_far_away_none():
    mm = plane_map()
    assert nearest_vertex(mm, [50.0, 50.0, 50.0]) is None


def test_nearest_vertex_deterministic():
    mm = plane_map()
    a = nearest_vertex(mm, [1.0, 1.0, 0.31])
    b = nearest_vertex(mm, [1.0, 1.0, 0.31])
    np.testing.assert_array_equal(a[0], b[0])
    assert a[2] == b[2]


def test_view_from_cache_planar_normals():
    mm = plane_map()
    view = RegistrationViewCache().build(mm)
    assert len(view) > 0
    near = np.abs(view.vertices[:, 2] - 0.3) < 0.05
    assert near.any()
    nz = np.abs(view.normals[near][:, 2])
    assert np.median(nz) > 0.99


def test_view_cache_reuses_unchanged_layers():
    mm = plane_map()
    cache = RegistrationViewCache()
    v1 = cache.build(mm)
    v2 = cache.build(mm)
    np.testing.assert_array_equal(v1.vertices, v2.vertices)
    np.testing.assert_array_equal(v1.normals, v2.normals)


def test_associate_respects_cell_neighborhood():
    view = MeshVertexView([[0.5, 0.5, 0.5]], [[0, 0, 1]],
                          cells=[[0, 0, 0]], voxel_size=1.0)
    mask, _, _ = view.associate(np.array([[0.6, 0.6, 0.6], [9.0, 9.0, 9.0]]))
    assert mask.tolist() == [True, False]


def test_associate_empty_view():
    view = MeshVertexView(np.zeros((0, 3)), np.zeros((0, 3)))
    mask, vq, nq = view.associate(np.array([[0.0, 0.0, 0.0]]))
    assert not mask.any() and vq.shape == (0, 3)


# ---------------------------------------------------------------------------
# residual and robust weights
# ---------------------------------------------------------------------------

def test_residual_signed_height_above_plane():
    assoc = Association(v_p=np.array([1.0, 2.0, 0.7]),
                        v_q=np.array([1.0, 2.0, 0.3]),
                        n_q=np.array([0.0, 0.0, 1.0]))
    assert residual(PoseSE3.identity(), assoc) == pytest.approx(0.4)
    below = Association(assoc.v_p * [1, 1, 0], assoc.v_q, assoc.n_q)
    assert residual(PoseSE3.identity(), below) == pytest.approx(-0.3)


def test_residual_pose_moves_point():
    assoc = Association(np.zeros(3), np.zeros(3), np.array([0.0, 0.0, 1.0]))
    pose = PoseSE3(np.eye(3), [0, 0, 0.25])
    assert residual(pose, assoc) == pytest.approx(0.25)


def test_huber_quadratic_then_linear():
    assert huber_cost(np.array([0.05]), 0.1) == pytest.approx(0.0025)
    assert huber_cost(np.array([0.5]), 0.1) == pytest.approx(0.1 * (1.0 - 0.1))
    w = huber_weights(np.array([0.05, 0.5]), 0.1)
    np.testing.assert_allclose(w, [1.0, 0.2])


def test_jacobian_matches_central_differences():
    rng = np.random.default_rng(2)
    pose = PoseSE3.from_rotvec(rng.normal(scale=0.3, size=3), rng.normal(size=3))
    vp = rng.normal(size=(40, 3))
    nq = rng.normal(size=(40, 3))
    nq /= np.linalg.norm(nq, axis=1, keepdims=True)
    vq = rng.normal(size=(40, 3))
    from scipy.spatial.transform import Rotation

    def res_at(delta):
        cand = PoseSE3(pose.rotation @ Rotation.from_rotvec(delta[:3]).as_matrix(),
                       pose.translation + delta[3:])
        return ((vp @ cand.rotation.T + cand.translation - vq) * nq).sum(axis=1)

    jac = residual_jacobian(pose, vp, nq)
    h = 1e-6
    for d in range(6):
        step = np.zeros(6)
        step[d] = h
        fd = (res_at(step) - res_at(-step)) / (2 * h)
        denom = np.maximum(np.abs(fd), 1e-3)
        assert (np.abs(jac[:, d] - fd) / denom).max() < 1e-5


# ---------------------------------------------------------------------------
# solver
# ---------------------------------------------------------------------------

def corner_view_and_points(seed=0):
    """Three mutually orthogonal planes meshed into a map, plus world-frame
    sample points on those planes."""
    mm = MeshMap(MesherConfig(voxel_size=1.0, grid_g=4))
    rng = np.random.default_rng(seed)
    n = 3000
    # the patches keep clear of each other so no voxel mixes two surfaces
    floor = rng.uniform(1, 4, size=(n, 3))
    floor[:, 2] = 0.001
    wall_x = rng.uniform(1, 4, size=(n, 3))
    wall_x[:, 0] = 0.001
    wall_y = rng.uniform(1, 4, size=(n, 3))
    wall_y[:, 1] = 0.001
    world = np.vstack([floor, wall_x, wall_y])
    mm.update_cells(PointCloud(world))
    view = RegistrationViewCache().build(mm)
    sample = world[rng.choice(len(world), size=1500, replace=False)]
    return view, sample


def test_solve_recovers_perturbed_pose():
    view, world_pts = corner_view_and_points()
    true_pose = PoseSE3.from_rotvec([0.0, 0.0, 0.1], [1.5, 1.2, 0.8])
    cloud = PointCloud(true_pose.inverse().apply(world_pts))
    prior = true_pose @ PoseSE3.from_rotvec([0.0, 0.0, 0.03], [0.1, -0.08, 0.05])
    refined, report = solve_pose(prior, view, cloud)
    assert report.converged
    err = true_pose.inverse() @ refined
    assert np.linalg.norm(err.translation) < 0.02
    assert err.rotation_angle() < 0.005
    assert report.final_cost <= report.initial_cost


def test_solve_identity_stays_put():
    view, world_pts = corner_view_and_points(seed=1)
    cloud = PointCloud(world_pts)
    refined, report = solve_pose(PoseSE3.identity(), view, cloud)
    assert np.linalg.norm(refined.translation) < 0.01
    assert refined.rotation_angle() < 0.003


def test_solve_too_few_inliers_returns_prior():
    view, _ = corner_view_and_points(seed=2)
    prior = PoseSE3(np.eye(3), [100.0, 100.0, 100.0])
    cloud = PointCloud(np.random.default_rng(3).normal(size=(200, 3)))
    refined, report = solve_pose(prior, view, cloud,
                                 RegistrationConfig(min_inliers=50))
    assert not report.converged
    np.testing.assert_array_equal(refined.translation, prior.translation)


def test_solve_empty_inputs():
    empty_view = MeshVertexView(np.zeros((0, 3)), np.zeros((0, 3)))
    pose, report = solve_pose(PoseSE3.identity(), empty_view,
                              PointCloud(np.zeros((0, 3))))
    assert not report.converged
    assert pose.rotation_angle() == 0.0


# ---------------------------------------------------------------------------
# pose extrapolation and fusion
# ---------------------------------------------------------------------------

def test_constant_velocity_translation():
    p0 = PoseSE3.identity()
    p1 = PoseSE3(np.eye(3), [1.0, 0, 0])
    pred = constant_velocity_prior(p0, p1)
    np.testing.assert_allclose(pred.translation, [2.0, 0, 0], atol=1e-12)


def test_constant_velocity_rotation():
    p0 = PoseSE3.identity()
    p1 = PoseSE3.from_rotvec([0, 0, 0.1], [0, 0, 0])
    pred = constant_velocity_prior(p0, p1)
    assert pred.rotation_angle() == pytest.approx(0.2)


def test_fuse_pose_passthrough_without_refinement():
    odom = PoseSE3(np.eye(3), [3.0, 0, 0])
    out = fuse_pose(odom, None, None)
    np.testing.assert_array_equal(out.translation, odom.translation)


def test_fuse_pose_applies_increment():
    refined = PoseSE3(np.eye(3), [10.0, 0, 0])
    odom_then = PoseSE3(np.eye(3), [2.0, 0, 0])
    odom_now = PoseSE3(np.eye(3), [2.5, 0, 0])
    out = fuse_pose(odom_now, refined, odom_then)
    np.testing.assert_allclose(out.translation, [10.5, 0, 0], atol=1e-12)
