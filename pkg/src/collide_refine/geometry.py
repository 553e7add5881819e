"""Rigid-body poses, point sets and triangle meshes.

Poses are stored as a unit quaternion (w, x, y, z) plus a translation in
meters. Incremental optimizer updates are parametrized as twists: an
axis-angle rotation applied on the left of the current rotation, and an
additive translation. All values are immutable after construction.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

_QUAT_NORM_TOL = 1e-9


def _as_readonly(a, dtype=np.float64):
    arr = np.ascontiguousarray(a, dtype=dtype)
    arr.flags.writeable = False
    return arr


@dataclass(frozen=True)
class Pose:
    """Rigid transform: rotation quaternion (w, x, y, z) + translation (m)."""

    q: np.ndarray
    t: np.ndarray

    def __post_init__(self):
        q = np.asarray(self.q, dtype=np.float64).reshape(4)
        t = np.asarray(self.t, dtype=np.float64).reshape(3)
        if not (np.all(np.isfinite(q)) and np.all(np.isfinite(t))):
            raise ValueError("pose components must be finite")
        n = np.linalg.norm(q)
        if n < 1e-12:
            raise ValueError("zero-norm quaternion")
        q = q / n
        if q[0] < 0.0:  # canonical sign, keeps serialization unique
            q = -q
        object.__setattr__(self, "q", _as_readonly(q))
        object.__setattr__(self, "t", _as_readonly(t))

    @staticmethod
    def identity() -> "Pose":
        return Pose(np.array([1.0, 0.0, 0.0, 0.0]), np.zeros(3))

    def rotation_matrix(self) -> np.ndarray:
        return quat_to_matrix(self.q)

    def matrix(self) -> np.ndarray:
        """4x4 homogeneous matrix."""
        m = np.eye(4)
        m[:3, :3] = self.rotation_matrix()
        m[:3, 3] = self.t
        return m

    def to_json_dict(self) -> dict:
        return {"q": [float(v) for v in self.q], "t": [float(v) for v in self.t]}

    @staticmethod
    def from_json_dict(d: dict) -> "Pose":
        return Pose(np.asarray(d["q"], dtype=np.float64), np.asarray(d["t"], dtype=np.float64))

    def to_json(self) -> str:
        return json.dumps(self.to_json_dict())

    @staticmethod
    def from_json(s: str) -> "Pose":
        return Pose.from_json_dict(json.loads(s))


@dataclass(frozen=True)
class Twist:
    """Incremental rigid motion: axis-angle rotation (rad) + translation (m)."""

    rot: np.ndarray
    trans: np.ndarray

    def __post_init__(self):
        rot = np.asarray(self.rot, dtype=np.float64).reshape(3)
        trans = np.asarray(self.trans, dtype=np.float64).reshape(3)
        if not (np.all(np.isfinite(rot)) and np.all(np.isfinite(trans))):
            raise ValueError("twist components must be finite")
        object.__setattr__(self, "rot", _as_readonly(rot))
        object.__setattr__(self, "trans", _as_readonly(trans))

    @staticmethod
    def zero() -> "Twist":
        return Twist(np.zeros(3), np.zeros(3))


def quat_multiply(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    aw, ax, ay, az = a
    bw, bx, by, bz = b
    return np.array([
        aw * bw - ax * bx - ay * by - az * bz,
        aw * bx + ax * bw + ay * bz - az * by,
        aw * by - ax * bz + ay * bw + az * bx,
        aw * bz + ax * by - ay * bx + az * bw,
    ])


def quat_conjugate(q: np.ndarray) -> np.ndarray:
    return np.array([q[0], -q[1], -q[2], -q[3]])


def quat_to_matrix(q: np.ndarray) -> np.ndarray:
    w, x, y, z = q
    xx, yy, zz = x * x, y * y, z * z
    xy, xz, yz = x * y, x * z, y * z
    wx, wy, wz = w * x, w * y, w * z
    return np.array([
        [1.0 - 2.0 * (yy + zz), 2.0 * (xy - wz), 2.0 * (xz + wy)],
        [2.0 * (xy + wz), 1.0 - 2.0 * (xx + zz), 2.0 * (yz - wx)],
        [2.0 * (xz - wy), 2.0 * (yz + wx), 1.0 - 2.0 * (xx + yy)],
    ])


def quat_from_matrix(m: np.ndarray) -> np.ndarray:
    """Quaternion (w, x, y, z) of a rotation matrix (Shepperd's method)."""
    m = np.asarray(m, dtype=np.float64)
    tr = m[0, 0] + m[1, 1] + m[2, 2]
    if tr > 0.0:
        s = np.sqrt(tr + 1.0) * 2.0
        q = np.array([0.25 * s, (m[2, 1] - m[1, 2]) / s,
                      (m[0, 2] - m[2, 0]) / s, (m[1, 0] - m[0, 1]) / s])
    elif m[0, 0] >= m[1, 1] and m[0, 0] >= m[2, 2]:
        s = np.sqrt(1.0 + m[0, 0] - m[1, 1] - m[2, 2]) * 2.0
        q = np.array([(m[2, 1] - m[1, 2]) / s, 0.25 * s,
                      (m[0, 1] + m[1, 0]) / s, (m[0, 2] + m[2, 0]) / s])
    elif m[1, 1] >= m[2, 2]:
        s = np.sqrt(1.0 + m[1, 1] - m[0, 0] - m[2, 2]) * 2.0
        q = np.array([(m[0, 2] - m[2, 0]) / s, (m[0, 1] + m[1, 0]) / s,
                      0.25 * s, (m[1, 2] + m[2, 1]) / s])
    else:
        s = np.sqrt(1.0 + m[2, 2] - m[0, 0] - m[1, 1]) * 2.0
        q = np.array([(m[1, 0] - m[0, 1]) / s, (m[0, 2] + m[2, 0]) / s,
                      (m[1, 2] + m[2, 1]) / s, 0.25 * s])
    return q / np.linalg.norm(q)


def pose_from_rt(r: np.ndarray, t: np.ndarray) -> Pose:
    return Pose(quat_from_matrix(r), t)


def axis_angle_to_quat(w: np.ndarray) -> np.ndarray:
    """Quaternion of the rotation exp(w) for an axis-angle vector w (rad)."""
    theta = float(np.linalg.norm(w))
    if theta < 1e-12:
        q = np.array([1.0, 0.5 * w[0], 0.5 * w[1], 0.5 * w[2]])
        return q / np.linalg.norm(q)
    axis = np.asarray(w, dtype=np.float64) / theta
    half = 0.5 * theta
    s = np.sin(half)
    return np.array([np.cos(half), s * axis[0], s * axis[1], s * axis[2]])


def compose(a: Pose, b: Pose) -> Pose:
    """Pose applying b first, then a."""
    q = quat_multiply(a.q, b.q)
    t = a.rotation_matrix() @ b.t + a.t
    return Pose(q, t)


def invert(p: Pose) -> Pose:
    qi = quat_conjugate(p.q)
    ti = -(quat_to_matrix(qi) @ p.t)
    return Pose(qi, ti)


def transform_points(p: Pose, pts: np.ndarray) -> np.ndarray:
    pts = np.asarray(pts, dtype=np.float64)
    return pts @ p.rotation_matrix().T + p.t


def exp_update(p: Pose, d: Twist) -> Pose:
    """Gradient-descent step on the pose.

    The rotation part of the twist is applied on the left of the current
    rotation (exp(rot) * R), the translation is added. For |rot| -> 0 the
    derivative of the moved point w.r.t. the twist is exactly the
    cross-product matrix, which is what the refinement gradients assume.
    """
    q = quat_multiply(axis_angle_to_quat(d.rot), p.q)
    return Pose(q, p.t + d.trans)


def rotation_angle(p: Pose) -> float:
    """Rotation angle of the pose in radians, in [0, pi]."""
    w = min(1.0, abs(float(p.q[0])))
    return 2.0 * float(np.arccos(w))


# ---------------------------------------------------------------------------
# Triangle meshes


@dataclass(frozen=True)
class Mesh:
    """Triangle mesh: vertices (V, 3) in meters, faces (F, 3) vertex indices."""

    vertices: np.ndarray
    faces: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.vertices, dtype=np.float64).reshape(-1, 3)
        f = np.asarray(self.faces, dtype=np.int64).reshape(-1, 3)
        if len(v) < 3 or len(f) < 1:
            raise ValueError("mesh needs at least 3 vertices and 1 face")
        if f.min() < 0 or f.max() >= len(v):
            raise ValueError("face index out of range")
        object.__setattr__(self, "vertices", _as_readonly(v))
        object.__setattr__(self, "faces", _as_readonly(f, dtype=np.int64))

    def bounds(self):
        return self.vertices.min(axis=0), self.vertices.max(axis=0)

    def bbox_diagonal(self) -> float:
        lo, hi = self.bounds()
        return float(np.linalg.norm(hi - lo))

    def triangles(self) -> np.ndarray:
        """(F, 3, 3) array of triangle corner coordinates."""
        return self.vertices[self.faces]


def mesh_is_watertight(mesh: Mesh) -> bool:
    """True if every directed edge appears exactly once and is matched by
    its reverse (consistently wound, closed 2-manifold)."""
    edges = {}
    for a, b, c in mesh.faces:
        for e in ((a, b), (b, c), (c, a)):
            if e in edges:
                return False
            edges[e] = True
    for a, b in edges:
        if (b, a) not in edges:
            return False
    return True


# Fixed oblique ray direction: avoids hitting axis-aligned edges/vertices
# of the procedural primitives.
_PARITY_DIR = np.array([0.2987102937, 0.5430128414, 0.7847615302])
_PARITY_DIR = _PARITY_DIR / np.linalg.norm(_PARITY_DIR)


def points_in_mesh(points: np.ndarray, mesh: Mesh, chunk: int = 65536) -> np.ndarray:
    """Ray-parity containment test. Returns a bool array, True = inside.

    Casts a fixed oblique ray from each point and counts triangle
    crossings; odd parity means inside. Requires a closed mesh.
    """
    points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    tri = mesh.triangles()
    v0 = tri[:, 0]
    e1 = tri[:, 1] - tri[:, 0]
    e2 = tri[:, 2] - tri[:, 0]
    d = _PARITY_DIR
    # Moller-Trumbore terms independent of the ray origin
    pvec = np.cross(d, e2)
    det = np.einsum("ij,ij->i", e1, pvec)
    ok = np.abs(det) > 1e-14
    inv_det = np.where(ok, 1.0 / np.where(ok, det, 1.0), 0.0)

    inside = np.zeros(len(points), dtype=bool)
    for lo in range(0, len(points), chunk):
        p = points[lo:lo + chunk]
        tvec = p[:, None, :] - v0[None, :, :]
        u = np.einsum("nij,ij->ni", tvec, pvec) * inv_det
        qvec = np.cross(tvec, e1[None, :, :])
        v = np.einsum("nij,j->ni", qvec, d) * inv_det
        t = np.einsum("nij,ij->ni", qvec, e2) * inv_det
        hit = (ok[None, :] & (u >= 0.0) & (v >= 0.0) & (u + v <= 1.0) & (t > 1e-12))
        inside[lo:lo + chunk] = (hit.sum(axis=1) % 2).astype(bool)
    return inside


# ---------------------------------------------------------------------------
# Object models


@dataclass(frozen=True)
class ObjectModel:
    """Object mesh plus a fixed sampled point set (surface and interior).

    The sampled points drive the occupancy voxelization; the bounding-box
    diagonal sets the per-object voxel size of the surrounding grid.
    """

    mesh: Mesh
    points: np.ndarray
    diagonal: float
    symmetric: bool = False
    name: str = field(default="", compare=False)

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=np.float64).reshape(-1, 3)
        if len(pts) < 1:
            raise ValueError("model needs at least one sampled point")
        if self.diagonal <= 0:
            raise ValueError("diagonal must be positive")
        object.__setattr__(self, "points", _as_readonly(pts))


def sample_model_points(mesh: Mesh, n: int, seed: int, interior: bool = True) -> np.ndarray:
    """Sample n points uniformly from the mesh volume (or surface).

    Interior sampling rejects bounding-box draws against the ray-parity
    containment test, so the mesh must be watertight. Deterministic for a
    fixed seed.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    if not interior:
        return sample_surface_points(mesh, n, seed)
    if not mesh_is_watertight(mesh):
        raise ValueError("interior sampling requires a watertight mesh")
    rng = np.random.default_rng(seed)
    lo, hi = mesh.bounds()
    out = np.empty((n, 3))
    got = 0
    batch = max(256, 2 * n)
    while got < n:
        cand = rng.uniform(lo, hi, size=(batch, 3))
        keep = cand[points_in_mesh(cand, mesh)]
        take = min(n - got, len(keep))
        out[got:got + take] = keep[:take]
        got += take
    return out


def sample_surface_points(mesh: Mesh, n: int, seed: int) -> np.ndarray:
    """Area-weighted uniform sample of the mesh surface."""
    if n < 1:
        raise ValueError("n must be >= 1")
    rng = np.random.default_rng(seed)
    tri = mesh.triangles()
    e1 = tri[:, 1] - tri[:, 0]
    e2 = tri[:, 2] - tri[:, 0]
    area = 0.5 * np.linalg.norm(np.cross(e1, e2), axis=1)
    probs = area / area.sum()
    idx = rng.choice(len(tri), size=n, p=probs)
    r1 = np.sqrt(rng.uniform(size=n))
    r2 = rng.uniform(size=n)
    a, b, c = tri[idx, 0], tri[idx, 1], tri[idx, 2]
    return (1 - r1)[:, None] * a + (r1 * (1 - r2))[:, None] * b + (r1 * r2)[:, None] * c


def make_object_model(mesh: Mesh, n_points: int = 5000, seed: int = 0,
                      symmetric: bool = False, name: str = "") -> ObjectModel:
    pts = sample_model_points(mesh, n_points, seed)
    return ObjectModel(mesh=mesh, points=pts, diagonal=mesh.bbox_diagonal(),
                       symmetric=symmetric, name=name)


# ---------------------------------------------------------------------------
# ASCII mesh I/O (OFF format: vertex list + face index list)


def save_mesh(mesh: Mesh, path) -> None:
    with open(path, "w") as f:
        f.write("OFF\n")
        f.write(f"{len(mesh.vertices)} {len(mesh.faces)} 0\n")
        for v in mesh.vertices:
            f.write(f"{v[0]!r} {v[1]!r} {v[2]!r}\n")
        for face in mesh.faces:
            f.write(f"3 {face[0]} {face[1]} {face[2]}\n")


def load_mesh(path) -> Mesh:
    with open(path) as f:
        tokens = []
        for line in f:
            line = line.split("#", 1)[0].strip()
            if line:
                tokens.extend(line.split())
    if not tokens or tokens[0] != "OFF":
        raise ValueError(f"{path}: not an OFF mesh")
    nv, nf = int(tokens[1]), int(tokens[2])
    pos = 4
    verts = np.array(tokens[pos:pos + 3 * nv], dtype=np.float64).reshape(nv, 3)
    pos += 3 * nv
    faces = []
    for _ in range(nf):
        k = int(tokens[pos])
        if k != 3:
            raise ValueError(f"{path}: only triangle faces supported")
        faces.append([int(tokens[pos + 1]), int(tokens[pos + 2]), int(tokens[pos + 3])])
        pos += 4
    return Mesh(verts, np.array(faces, dtype=np.int64))
