import numpy as np
import pytest

from meshmap.geometry import (Frame, GeometryError, Mesh, PointCloud, PoseSE3,
                              orthonormalize, relative_pose)


def rand_pose(rng):
    return PoseSE3.from_rotvec(rng.normal(size=3), rng.normal(size=3))


def test_cloud_rejects_non_finite():
    with pytest.raises(GeometryError):
        PointCloud([[np.nan, 0, 0]])


def test_cloud_ranges_cached_and_correct():
    cloud = PointCloud([[3.0, 4.0, 0.0], [0, 0, 1]])
    np.testing.assert_allclose(cloud.ranges, [5.0, 1.0])


def test_cloud_select_and_transform():
    cloud = PointCloud([[1.0, 0, 0], [2.0, 0, 0]], timestamp=1.5)
    sub = cloud.select(np.array([False, True]))
    assert len(sub) == 1 and sub.timestamp == 1.5
    moved = cloud.transformed(PoseSE3(np.eye(3), [0, 1, 0]), Frame.WORLD)
    np.testing.assert_allclose(moved.points[:, 1], 1.0)
    assert moved.frame is Frame.WORLD


def test_pose_group_axioms():
    rng = np.random.default_rng(0)
    a, b = rand_pose(rng), rand_pose(rng)
    pts = rng.normal(size=(10, 3))
    np.testing.assert_allclose((a @ b).apply(pts), a.apply(b.apply(pts)),
                               atol=1e-12)
    ident = a @ a.inverse()
    np.testing.assert_allclose(ident.rotation, np.eye(3), atol=1e-12)
    np.testing.assert_allclose(ident.translation, 0.0, atol=1e-12)


def test_pose_matrix_quat_round_trip():
    rng = np.random.default_rng(1)
    pose = rand_pose(rng)
    back = PoseSE3.from_matrix(pose.matrix())
    np.testing.assert_allclose(back.rotation, pose.rotation, atol=1e-12)
    viaq = PoseSE3.from_quat_xyzw(pose.quat_xyzw(), pose.translation)
    np.testing.assert_allclose(viaq.rotation, pose.rotation, atol=1e-12)


def test_pose_validate_rejects_sheared():
    bad = PoseSE3(np.eye(3) + 1e-3, np.zeros(3))
    with pytest.raises(GeometryError):
        bad.validate()
    bad_det = PoseSE3(np.diag([1.0, 1.0, -1.0]), np.zeros(3))
    with pytest.raises(GeometryError):
        bad_det.validate()


def test_orthonormalize_projects():
    rng = np.random.default_rng(2)
    noisy = rand_pose(rng).rotation + rng.normal(scale=1e-3, size=(3, 3))
    rot = orthonormalize(noisy)
    PoseSE3(rot, np.zeros(3)).validate(1e-9)


def test_relative_pose():
    rng = np.random.default_rng(3)
    a, b = rand_pose(rng), rand_pose(rng)
    rel = relative_pose(a, b)
    composed = a @ rel
    np.testing.assert_allclose(composed.rotation, b.rotation, atol=1e-12)
    np.testing.assert_allclose(composed.translation, b.translation, atol=1e-12)


def test_rotation_angle():
    pose = PoseSE3.from_rotvec([0, 0.3, 0], [0, 0, 0])
    assert pose.rotation_angle() == pytest.approx(0.3)


def test_mesh_validate():
    Mesh([[0, 0, 0], [1, 0, 0], [0, 1, 0]], [[0, 1, 2]]).validate()
    with pytest.raises(GeometryError):
        Mesh([[0, 0, 0]], [[0, 0, 1]]).validate()
    with pytest.raises(GeometryError):
        Mesh([[0, 0, 0], [1, 0, 0], [0, 1, 0]], [[0, 1, 3]]).validate()


def test_mesh_face_areas():
    mesh = Mesh([[0, 0, 0], [2, 0, 0], [0, 2, 0]], [[0, 1, 2]])
    np.testing.assert_allclose(mesh.face_areas(), [2.0])
