"""Synthetic spinning-beam LiDAR over scripted worlds of rectangles and boxes.

Scenes provide exact ray-primitive intersections, per-point static/dynamic
labels and an analytic ground-truth mesh, which makes them usable as oracles
for dynamic removal and mapping quality checks.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .geometry import Frame, Mesh, PointCloud, PoseSE3

_EPS = 1e-9


@dataclass
class BoxBody:
    """Axis-aligned box; nonzero velocity makes every return from it dynamic."""

    center: np.ndarray
    size: np.ndarray
    velocity: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        self.center = np.asarray(self.center, dtype=np.float64).reshape(3)
        self.size = np.asarray(self.size, dtype=np.float64).reshape(3)
        self.velocity = np.asarray(self.velocity, dtype=np.float64).reshape(3)

    @property
    def dynamic(self) -> bool:
        return bool(np.linalg.norm(self.velocity) > 0)

    def center_at(self, t: float) -> np.ndarray:
        return self.center + self.velocity * t

    def intersect(self, origin, dirs, t: float) -> np.ndarray:
        """Slab-method hit distances per ray; inf where missed."""
        lo = self.center_at(t) - self.size / 2.0
        hi = self.center_at(t) + self.size / 2.0
        safe = np.where(np.abs(dirs) < _EPS, _EPS, dirs)
        t1 = (lo - origin) / safe
        t2 = (hi - origin) / safe
        tmin = np.minimum(t1, t2).max(axis=1)
        tmax = np.maximum(t1, t2).min(axis=1)
        hit = (tmax >= tmin) & (tmax > _EPS)
        dist = np.where(tmin > _EPS, tmin, tmax)  # inside the box: exit face
        return np.where(hit, dist, np.inf)

    def mesh(self) -> Mesh:
        c, s = self.center, self.size / 2.0
        corners = np.array([[sx, sy, sz] for sx in (-s[0], s[0])
                            for sy in (-s[1], s[1]) for sz in (-s[2], s[2])]) + c
        faces = np.array([
            [0, 1, 3], [0, 3, 2],  # x-
            [4, 6, 7], [4, 7, 5],  # x+
            [0, 4, 5], [0, 5, 1],  # y-
            [2, 3, 7], [2, 7, 6],  # y+
            [0, 2, 6], [0, 6, 4],  # z-
            [1, 5, 7], [1, 7, 3],  # z+
        ], dtype=np.int64)
        return Mesh(corners, faces)


@dataclass
class RectBody:
    """Axis-aligned rectangle: normal along `axis`, extents over the others."""

    center: np.ndarray
    axis: int
    extents: np.ndarray  # lengths along the two in-plane axes, ascending order

    def __post_init__(self):
        self.center = np.asarray(self.center, dtype=np.float64).reshape(3)
        self.extents = np.asarray(self.extents, dtype=np.float64).reshape(2)

    dynamic = False

    def intersect(self, origin, dirs, t: float) -> np.ndarray:
        a = self.axis
        other = [i for i in (0, 1, 2) if i != a]
        da = dirs[:, a]
        safe = np.where(np.abs(da) < _EPS, _EPS, da)
        dist = (self.center[a] - origin[a]) / safe
        pts = origin[None, :] + dist[:, None] * dirs
        inside = ((np.abs(pts[:, other[0]] - self.center[other[0]])
                   <= self.extents[0] / 2.0 + _EPS)
                  & (np.abs(pts[:, other[1]] - self.center[other[1]])
                     <= self.extents[1] / 2.0 + _EPS))
        hit = (dist > _EPS) & (np.abs(da) >= _EPS) & inside
        return np.where(hit, dist, np.inf)

    def mesh(self) -> Mesh:
        other = [i for i in (0, 1, 2) if i != self.axis]
        corners = np.repeat(self.center[None, :], 4, axis=0)
        du = np.array([-0.5, 0.5, 0.5, -0.5]) * self.extents[0]
        dv = np.array([-0.5, -0.5, 0.5, 0.5]) * self.extents[1]
        corners[:, other[0]] += du
        corners[:, other[1]] += dv
        return Mesh(corners, np.array([[0, 1, 2], [0, 2, 3]], dtype=np.int64))


@dataclass
class SensorModel:
    rows: int = 16
    cols: int = 360
    fov_up_deg: float = 15.0
    fov_down_deg: float = -15.0
    min_range: float = 0.1
    max_range: float = 80.0
    noise_std: float = 0.0

    def directions(self) -> np.ndarray:
        elev = np.deg2rad(np.linspace(self.fov_down_deg, self.fov_up_deg, self.rows))
        azim = np.linspace(-np.pi, np.pi, self.cols, endpoint=False)
        ee, aa = np.meshgrid(elev, azim, indexing="ij")
        return np.stack([np.cos(ee) * np.cos(aa),
                         np.cos(ee) * np.sin(aa),
                         np.sin(ee)], axis=-1).reshape(-1, 3)


@dataclass
class SyntheticScene:
    gt_mesh: Mesh                       # static geometry only
    trajectory: list                    # [(timestamp, PoseSE3)]
    scans: list                         # PointCloud per scan, sensor frame
    labels: list                        # bool array per scan, True = dynamic
    seed: int = 0


def _trajectory_pose(spec: dict, t: float) -> PoseSE3:
    kind = spec.get("type", "static")
    if kind == "static":
        pos = np.asarray(spec.get("position", [0, 0, 0]), dtype=np.float64)
        yaw = float(spec.get("yaw", 0.0))
    elif kind == "line":
        start = np.asarray(spec.get("start", [0, 0, 0]), dtype=np.float64)
        vel = np.asarray(spec.get("velocity", [1, 0, 0]), dtype=np.float64)
        pos = start + vel * t
        yaw = (float(np.arctan2(vel[1], vel[0])) if np.linalg.norm(vel[:2]) > 0
               else 0.0) + float(spec.get("yaw_rate", 0.0)) * t
    elif kind == "circle":
        cx, cy = spec.get("center", [0.0, 0.0])
        radius = float(spec.get("radius", 10.0))
        omega = float(spec.get("angular_speed", 0.1))
        phase = omega * t + float(spec.get("phase", 0.0))
        pos = np.array([cx + radius * np.cos(phase),
                        cy + radius * np.sin(phase),
                        float(spec.get("z", 0.0))])
        yaw = phase + np.pi / 2.0  # tangent heading
    else:
        raise ValueError(f"unknown trajectory type {kind!r}")
    cos_y, sin_y = np.cos(yaw), np.sin(yaw)
    rot = np.array([[cos_y, -sin_y, 0.0], [sin_y, cos_y, 0.0], [0.0, 0.0, 1.0]])
    return PoseSE3(rot, pos)


def _parse_bodies(script: dict):
    bodies = []
    for spec in script.get("boxes", []):
        bodies.append(BoxBody(spec["center"], spec["size"],
                              spec.get("velocity", [0, 0, 0])))
    for spec in script.get("rects", []):
        bodies.append(RectBody(spec["center"], int(spec["axis"]),
                               spec["extents"]))
    return bodies


def scene_gt_mesh(script: dict) -> Mesh:
    """Analytic mesh of the static scene bodies."""
    vertices, faces, base = [], [], 0
    for body in _parse_bodies(script):
        if body.dynamic:
            continue
        mesh = body.mesh()
        vertices.append(mesh.vertices)
        faces.append(mesh.faces + base)
        base += mesh.n_vertices
    if not vertices:
        return Mesh.empty()
    return Mesh(np.vstack(vertices), np.vstack(faces))


def synth_scene(script: dict, seed: int = 0) -> SyntheticScene:
    """Simulate the scripted scene deterministically for the given seed."""
    sensor = SensorModel(**script.get("sensor", {}))
    bodies = _parse_bodies(script)
    n_scans = int(script.get("n_scans", 1))
    rate = float(script.get("rate_hz", 10.0))
    traj_spec = script.get("trajectory", {"type": "static"})
    rng = np.random.default_rng(seed)
    dirs_sensor = sensor.directions()

    trajectory, scans, labels = [], [], []
    for k in range(n_scans):
        t = k / rate
        pose = _trajectory_pose(traj_spec, t)
        trajectory.append((t, pose))
        dirs_world = dirs_sensor @ pose.rotation.T
        best = np.full(dirs_world.shape[0], np.inf)
        dyn = np.zeros(dirs_world.shape[0], dtype=bool)
        for body in bodies:
            dist = body.intersect(pose.translation, dirs_world, t)
            closer = dist < best
            best[closer] = dist[closer]
            dyn[closer] = body.dynamic
        hit = np.isfinite(best) & (best >= sensor.min_range) \
            & (best <= sensor.max_range)
        rng_hit = best[hit]
        if sensor.noise_std > 0:
            rng_hit = rng_hit + rng.normal(0.0, sensor.noise_std, rng_hit.shape)
        pts = dirs_sensor[hit] * rng_hit[:, None]
        scans.append(PointCloud(pts, timestamp=t, frame=Frame.SENSOR))
        labels.append(dyn[hit])
    return SyntheticScene(scene_gt_mesh(script), trajectory, scans, labels, seed)
