"""Core geometric types: point clouds, SE(3) poses and triangle meshes."""
from __future__ import annotations

import enum
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial.transform import Rotation


class Frame(enum.Enum):
    SENSOR = "sensor"
    WORLD = "world"


class GeometryError(ValueError):
    pass


@dataclass
class PointCloud:
    """A set of 3D points in meters, tagged with a frame and a timestamp."""

    points: np.ndarray
    timestamp: float = 0.0
    frame: Frame = Frame.SENSOR
    _ranges: np.ndarray | None = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=np.float64).reshape(-1, 3)
        if pts.size and not np.isfinite(pts).all():
            raise GeometryError("point cloud contains non-finite coordinates")
        self.points = pts

    def __len__(self):
        return self.points.shape[0]

    @property
    def ranges(self) -> np.ndarray:
        """Euclidean distance of every point from the origin of its frame."""
        if self._ranges is None or self._ranges.shape[0] != len(self):
            self._ranges = np.linalg.norm(self.points, axis=1)
        return self._ranges

    def select(self, mask_or_idx) -> "PointCloud":
        return PointCloud(self.points[mask_or_idx], self.timestamp, self.frame)

    def transformed(self, pose: "PoseSE3", frame: Frame | None = None) -> "PointCloud":
        return PointCloud(pose.apply(self.points), self.timestamp,
                          frame if frame is not None else self.frame)


@dataclass(frozen=True)
class PoseSE3:
    """Rigid transform: 3x3 rotation plus translation in meters."""

    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "rotation",
                           np.asarray(self.rotation, dtype=np.float64).reshape(3, 3))
        object.__setattr__(self, "translation",
                           np.asarray(self.translation, dtype=np.float64).reshape(3))

    # -- constructors -------------------------------------------------
    @classmethod
    def identity(cls) -> "PoseSE3":
        return cls(np.eye(3), np.zeros(3))

    @classmethod
    def from_matrix(cls, mat: np.ndarray) -> "PoseSE3":
        mat = np.asarray(mat, dtype=np.float64)
        return cls(mat[:3, :3], mat[:3, 3])

    @classmethod
    def from_quat_xyzw(cls, quat, translation) -> "PoseSE3":
        rot = Rotation.from_quat(np.asarray(quat, dtype=np.float64))
        return cls(rot.as_matrix(), translation)

    @classmethod
    def from_rotvec(cls, rotvec, translation) -> "PoseSE3":
        return cls(Rotation.from_rotvec(np.asarray(rotvec, float)).as_matrix(),
                   translation)

    # -- group operations ---------------------------------------------
    def compose(self, other: "PoseSE3") -> "PoseSE3":
        return PoseSE3(self.rotation @ other.rotation,
                       self.rotation @ other.translation + self.translation)

    def __matmul__(self, other: "PoseSE3") -> "PoseSE3":
        return self.compose(other)

    def inverse(self) -> "PoseSE3":
        rt = self.rotation.T
        return PoseSE3(rt, -rt @ self.translation)

    def apply(self, points: np.ndarray) -> np.ndarray:
        pts = np.asarray(points, dtype=np.float64)
        return pts @ self.rotation.T + self.translation

    # -- accessors ----------------------------------------------------
    def matrix(self) -> np.ndarray:
        mat = np.eye(4)
        mat[:3, :3] = self.rotation
        mat[:3, 3] = self.translation
        return mat

    def quat_xyzw(self) -> np.ndarray:
        return Rotation.from_matrix(self.rotation).as_quat()

    def rotation_angle(self) -> float:
        """Axis-angle magnitude of the rotation part, radians."""
        return float(np.linalg.norm(Rotation.from_matrix(self.rotation).as_rotvec()))

    def validate(self, tol: float = 1e-9) -> None:
        err = np.abs(self.rotation.T @ self.rotation - np.eye(3)).max()
        if err > tol:
            raise GeometryError(f"rotation is not orthonormal (error {err:.3e})")
        det = np.linalg.det(self.rotation)
        if abs(det - 1.0) > tol:
            raise GeometryError(f"rotation determinant {det} != 1")


def orthonormalize(rot: np.ndarray) -> np.ndarray:
    """Project a near-rotation matrix onto SO(3) via SVD."""
    u, _, vt = np.linalg.svd(np.asarray(rot, dtype=np.float64))
    rot_proj = u @ vt
    if np.linalg.det(rot_proj) < 0:
        u[:, -1] *= -1
        rot_proj = u @ vt
    return rot_proj


def relative_pose(prev: PoseSE3, cur: PoseSE3) -> PoseSE3:
    """Delta transform taking prev into cur (prev^-1 * cur)."""
    return prev.inverse() @ cur


@dataclass
class Mesh:
    """Indexed triangle mesh in world coordinates."""

    vertices: np.ndarray
    faces: np.ndarray

    def __post_init__(self):
        self.vertices = np.asarray(self.vertices, dtype=np.float64).reshape(-1, 3)
        self.faces = np.asarray(self.faces, dtype=np.int64).reshape(-1, 3)

    @classmethod
    def empty(cls) -> "Mesh":
        return cls(np.zeros((0, 3)), np.zeros((0, 3), dtype=np.int64))

    @property
    def n_vertices(self) -> int:
        return self.vertices.shape[0]

    @property
    def n_faces(self) -> int:
        return self.faces.shape[0]

    def face_areas(self) -> np.ndarray:
        if self.n_faces == 0:
            return np.zeros(0)
        a = self.vertices[self.faces[:, 0]]
        b = self.vertices[self.faces[:, 1]]
        c = self.vertices[self.faces[:, 2]]
        return 0.5 * np.linalg.norm(np.cross(b - a, c - a), axis=1)

    def validate(self) -> None:
        if self.n_faces:
            if self.faces.min() < 0 or self.faces.max() >= self.n_vertices:
                raise GeometryError("face references vertex out of range")
            degenerate = ((self.faces[:, 0] == self.faces[:, 1])
                          | (self.faces[:, 1] == self.faces[:, 2])
                          | (self.faces[:, 0] == self.faces[:, 2]))
            if degenerate.any():
                raise GeometryError("mesh contains degenerate faces")
