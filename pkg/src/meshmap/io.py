"""Dataset readers and writers: scans, pose files, PLY meshes, surface sampling."""
from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .geometry import Frame, Mesh, PointCloud, PoseSE3, orthonormalize

SCAN_FORMATS = ("bin_xyzi", "ply", "pcd_ascii")
POSE_FORMATS = ("kitti_3x4", "tum")


class FormatError(ValueError):
    """Malformed input file; message carries a byte offset or line number."""


class EmptyScanError(ValueError):
    """The file parsed cleanly but contains zero points."""


# ---------------------------------------------------------------------------
# scans
# ---------------------------------------------------------------------------

def read_scan(path, format: str = "bin_xyzi", timestamp: float = 0.0) -> PointCloud:
    """Read a single scan in sensor frame, preserving point order.

    bin_xyzi is a flat little-endian float32 sequence of (x, y, z, intensity)
    records; intensity is discarded.
    """
    path = Path(path)
    if format == "bin_xyzi":
        raw = path.read_bytes()
        if len(raw) % 16 != 0:
            offset = len(raw) - len(raw) % 16
            raise FormatError(f"{path}: truncated bin_xyzi record at byte {offset}")
        pts = np.frombuffer(raw, dtype="<f4").reshape(-1, 4)[:, :3].astype(np.float64)
    elif format == "ply":
        pts, _ = _read_ply(path)
    elif format == "pcd_ascii":
        pts = _read_pcd_ascii(path)
    else:
        raise ValueError(f"unknown scan format {format!r}")
    if pts.shape[0] == 0:
        raise EmptyScanError(f"{path}: scan contains no points")
    return PointCloud(pts, timestamp=timestamp, frame=Frame.SENSOR)


def write_scan_bin(cloud: PointCloud, path) -> None:
    """Writer counterpart of read_scan(..., 'bin_xyzi'); intensity written as 0."""
    pts = np.zeros((len(cloud), 4), dtype="<f4")
    pts[:, :3] = cloud.points
    Path(path).write_bytes(pts.tobytes())


def _read_pcd_ascii(path: Path) -> np.ndarray:
    fields, count, data_started, rows = None, None, False, []
    with open(path, "r") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            if not data_started:
                token = line.split()[0].upper()
                if token == "FIELDS":
                    fields = line.split()[1:]
                elif token == "POINTS":
                    count = int(line.split()[1])
                elif token == "DATA":
                    if line.split()[1].lower() != "ascii":
                        raise FormatError(f"{path}:{lineno}: only ascii PCD supported")
                    data_started = True
                continue
            rows.append([float(v) for v in line.split()])
    if not data_started:
        raise FormatError(f"{path}: missing DATA header")
    arr = np.asarray(rows, dtype=np.float64).reshape(len(rows), -1)
    if fields is not None:
        try:
            cols = [fields.index(c) for c in ("x", "y", "z")]
        except ValueError as exc:
            raise FormatError(f"{path}: PCD lacks x/y/z fields") from exc
        arr = arr[:, cols]
    else:
        arr = arr[:, :3]
    if count is not None and arr.shape[0] != count:
        raise FormatError(f"{path}: POINTS={count} but {arr.shape[0]} rows")
    return arr


# ---------------------------------------------------------------------------
# PLY
# ---------------------------------------------------------------------------

def _read_ply(path: Path):
    """Minimal PLY reader for float vertex x/y/z and triangular faces."""
    raw = path.read_bytes()
    end = raw.find(b"end_header\n")
    if not raw.startswith(b"ply") or end < 0:
        raise FormatError(f"{path}: not a PLY file (bad header at byte 0)")
    header = raw[:end].decode("ascii", errors="replace").splitlines()
    body = raw[end + len(b"end_header\n"):]

    fmt = None
    elements = []  # (name, count, [(proptype, propname) or ('list', idx_t, cnt_t, name)])
    for line in header[1:]:
        tok = line.split()
        if not tok:
            continue
        if tok[0] == "format":
            fmt = tok[1]
        elif tok[0] == "element":
            elements.append((tok[1], int(tok[2]), []))
        elif tok[0] == "property":
            if tok[1] == "list":
                elements[-1][2].append(("list", tok[2], tok[3], tok[4]))
            else:
                elements[-1][2].append((tok[1], tok[2]))
    if fmt not in ("ascii", "binary_little_endian"):
        raise FormatError(f"{path}: unsupported PLY format {fmt!r}")

    scalar_np = {"float": "<f4", "float32": "<f4", "double": "<f8", "float64": "<f8",
                 "uchar": "u1", "uint8": "u1", "char": "i1", "int8": "i1",
                 "short": "<i2", "ushort": "<u2", "int": "<i4", "int32": "<i4",
                 "uint": "<u4", "uint32": "<u4"}

    vertices = np.zeros((0, 3))
    faces = np.zeros((0, 3), dtype=np.int64)
    if fmt == "ascii":
        lines = body.decode("ascii").splitlines()
        cursor = 0
        for name, count, props in elements:
            chunk, cursor = lines[cursor:cursor + count], cursor + count
            if name == "vertex" and count:
                names = [p[1] for p in props]
                arr = np.asarray([[float(v) for v in ln.split()] for ln in chunk])
                vertices = arr[:, [names.index(c) for c in ("x", "y", "z")]]
            elif name == "face" and count:
                rows = []
                for i, ln in enumerate(chunk):
                    vals = [int(v) for v in ln.split()]
                    if vals[0] != 3:
                        raise FormatError(f"{path}: face {i} is not a triangle")
                    rows.append(vals[1:4])
                faces = np.asarray(rows, dtype=np.int64)
    else:
        offset = 0
        for name, count, props in elements:
            if name == "vertex":
                if any(p[0] == "list" for p in props):
                    raise FormatError(f"{path}: list property in vertex element")
                dtype = np.dtype([(p[1], scalar_np[p[0]]) for p in props])
                arr = np.frombuffer(body, dtype=dtype, count=count, offset=offset)
                offset += dtype.itemsize * count
                vertices = np.stack([arr["x"], arr["y"], arr["z"]], axis=1).astype(np.float64)
            elif name == "face":
                rows = np.zeros((count, 3), dtype=np.int64)
                cnt_t = np.dtype(scalar_np[props[0][1]])
                idx_t = np.dtype(scalar_np[props[0][2]])
                for i in range(count):
                    n = int(np.frombuffer(body, dtype=cnt_t, count=1, offset=offset)[0])
                    offset += cnt_t.itemsize
                    if n != 3:
                        raise FormatError(f"{path}: face {i} is not a triangle "
                                          f"(byte {end + 11 + offset})")
                    rows[i] = np.frombuffer(body, dtype=idx_t, count=3, offset=offset)
                    offset += idx_t.itemsize * 3
                faces = rows
            else:
                dtype = np.dtype([(p[1], scalar_np[p[0]]) for p in props])
                offset += dtype.itemsize * count
    return vertices, faces


def read_mesh_ply(path) -> Mesh:
    vertices, faces = _read_ply(Path(path))
    return Mesh(vertices, faces)


def write_mesh_ply(mesh: Mesh, path, binary: bool = True) -> None:
    """Write a standard PLY 1.0 mesh with float32 vertices and int32 face indices."""
    path = Path(path)
    fmt = "binary_little_endian" if binary else "ascii"
    header = (
        "ply\n"
        f"format {fmt} 1.0\n"
        f"element vertex {mesh.n_vertices}\n"
        "property float x\nproperty float y\nproperty float z\n"
        f"element face {mesh.n_faces}\n"
        "property list uchar int vertex_indices\n"
        "end_header\n"
    )
    with open(path, "wb") as fh:
        fh.write(header.encode("ascii"))
        if binary:
            fh.write(mesh.vertices.astype("<f4").tobytes())
            for face in mesh.faces:
                fh.write(struct.pack("<B3i", 3, *face))
        else:
            for v in mesh.vertices:
                fh.write(f"{v[0]:.9g} {v[1]:.9g} {v[2]:.9g}\n".encode("ascii"))
            for face in mesh.faces:
                fh.write(f"3 {face[0]} {face[1]} {face[2]}\n".encode("ascii"))


# ---------------------------------------------------------------------------
# trajectories
# ---------------------------------------------------------------------------

def read_poses(path, format: str = "kitti_3x4",
               scan_rate_hz: float = 10.0) -> list[tuple[float, PoseSE3]]:
    """Read a trajectory; kitti_3x4 rows get timestamps index/scan_rate_hz."""
    path = Path(path)
    out: list[tuple[float, PoseSE3]] = []
    with open(path, "r") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            vals = [float(v) for v in line.split()]
            if format == "kitti_3x4":
                if len(vals) != 12:
                    raise FormatError(f"{path}:{lineno}: expected 12 values, "
                                      f"got {len(vals)}")
                mat = np.asarray(vals).reshape(3, 4)
                rot = mat[:, :3]
                err = np.abs(rot.T @ rot - np.eye(3)).max()
                if err > 1e-4:
                    raise FormatError(f"{path}:{lineno}: rotation not orthonormal "
                                      f"(error {err:.3e})")
                pose = PoseSE3(orthonormalize(rot), mat[:, 3])
                out.append((len(out) / scan_rate_hz, pose))
            elif format == "tum":
                if len(vals) != 8:
                    raise FormatError(f"{path}:{lineno}: expected 8 values, "
                                      f"got {len(vals)}")
                t, x, y, z, qx, qy, qz, qw = vals
                norm = np.linalg.norm([qx, qy, qz, qw])
                if norm < 1e-12:
                    raise FormatError(f"{path}:{lineno}: zero quaternion")
                quat = np.asarray([qx, qy, qz, qw]) / norm
                out.append((t, PoseSE3.from_quat_xyzw(quat, [x, y, z])))
            else:
                raise ValueError(f"unknown pose format {format!r}")
    return out


def write_trajectory(traj, path, format: str = "kitti_3x4") -> None:
    path = Path(path)
    with open(path, "w") as fh:
        for t, pose in traj:
            if format == "kitti_3x4":
                mat = pose.matrix()[:3, :]
                fh.write(" ".join(f"{v:.12g}" for v in mat.ravel()) + "\n")
            elif format == "tum":
                q = pose.quat_xyzw()
                x, y, z = pose.translation
                fh.write(f"{t:.9f} {x:.12g} {y:.12g} {z:.12g} "
                         f"{q[0]:.12g} {q[1]:.12g} {q[2]:.12g} {q[3]:.12g}\n")
            else:
                raise ValueError(f"unknown pose format {format!r}")


# ---------------------------------------------------------------------------
# mesh surface sampling
# ---------------------------------------------------------------------------

def sample_mesh_surface(mesh: Mesh, density: float, seed: int = 0) -> PointCloud:
    """Sample points uniformly by area; expected count = density * total area."""
    if density <= 0:
        raise ValueError("density must be positive")
    areas = mesh.face_areas()
    total = float(areas.sum())
    if mesh.n_faces == 0 or total <= 0:
        return PointCloud(np.zeros((0, 3)), frame=Frame.WORLD)
    rng = np.random.default_rng(seed)
    n = int(rng.poisson(density * total))
    if n == 0:
        return PointCloud(np.zeros((0, 3)), frame=Frame.WORLD)
    face_idx = rng.choice(mesh.n_faces, size=n, p=areas / total)
    u = rng.random(n)
    v = rng.random(n)
    flip = u + v > 1
    u[flip], v[flip] = 1 - u[flip], 1 - v[flip]
    a = mesh.vertices[mesh.faces[face_idx, 0]]
    b = mesh.vertices[mesh.faces[face_idx, 1]]
    c = mesh.vertices[mesh.faces[face_idx, 2]]
    pts = a + u[:, None] * (b - a) + v[:, None] * (c - a)
    return PointCloud(pts, frame=Frame.WORLD)
