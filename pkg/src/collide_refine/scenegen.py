"""Synthetic cluttered scenes: placement, depth rendering, perturbation.

Stands in for the datasets and sensor of the original pipeline. Objects
are procedural primitives placed by rejection sampling with a
conservative clearance test, so generated scenes never contain
inter-object penetration. The renderer ray-casts every pixel against all
triangles and reports camera-frame z depth plus instance ids.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from . import primitives
from .fusion import FrameObservation, Intrinsics
from .geometry import (
    Mesh,
    ObjectModel,
    Pose,
    Twist,
    exp_update,
    load_mesh,
    make_object_model,
    pose_from_rt,
    points_in_mesh,
    transform_points,
)

PLACEMENT_PITCH = 0.002   # lattice pitch of the placement clearance test
PLACEMENT_MARGIN = 0.004  # > sqrt(3) * pitch: no penetration can slip through
DROP_GAP = 1e-4           # binary-search resolution of drop contacts


@dataclass(frozen=True)
class ModelSpec:
    """Recipe for an object model; scenes serialize this, not the mesh."""

    kind: str
    params: dict = field(default_factory=dict)
    n_points: int = 5000
    sample_seed: int = 0

    def build(self) -> ObjectModel:
        if self.kind == "mesh":
            mesh = load_mesh(self.params["path"])
            return make_object_model(mesh, n_points=self.n_points,
                                     seed=self.sample_seed,
                                     symmetric=bool(self.params.get("symmetric", False)),
                                     name=self.params.get("name", "mesh"))
        return primitives.make_primitive(self.kind, self.params,
                                         n_points=self.n_points,
                                         seed=self.sample_seed)

    def to_json_dict(self) -> dict:
        return {"kind": self.kind, "params": self.params,
                "n_points": self.n_points, "sample_seed": self.sample_seed}

    @staticmethod
    def from_json_dict(d: dict) -> "ModelSpec":
        return ModelSpec(kind=d["kind"], params=dict(d.get("params", {})),
                         n_points=int(d.get("n_points", 5000)),
                         sample_seed=int(d.get("sample_seed", 0)))


@dataclass
class CameraView:
    pose: Pose
    intrinsics: Intrinsics
    width: int
    height: int


@dataclass
class PlacedObject:
    instance_id: int
    spec: ModelSpec
    pose: Pose
    model: ObjectModel


@dataclass
class Scene:
    seed: int
    bounds_min: np.ndarray
    bounds_max: np.ndarray
    objects: list
    cameras: list
    ground: bool = False

    def poses(self) -> dict:
        return {o.instance_id: o.pose for o in self.objects}

    def models(self) -> dict:
        return {o.instance_id: o.model for o in self.objects}


@dataclass
class SceneSpec:
    """Recipe for a random scene: model pool, workspace, count range and
    camera trajectory."""

    seed: int
    model_pool: list
    bounds_min: np.ndarray
    bounds_max: np.ndarray
    min_objects: int = 1
    max_objects: int = 5
    cameras: list = field(default_factory=list)
    drop: bool = False
    ground: bool = False

    def __post_init__(self):
        self.bounds_min = np.asarray(self.bounds_min, dtype=np.float64)
        self.bounds_max = np.asarray(self.bounds_max, dtype=np.float64)
        if np.any(self.bounds_max <= self.bounds_min):
            raise ValueError("workspace bounds must have positive volume")
        if not self.model_pool:
            raise ValueError("model pool must not be empty")
        if not (1 <= self.min_objects <= self.max_objects):
            raise ValueError("need 1 <= min_objects <= max_objects")
        if not self.cameras:
            raise ValueError("need at least one camera")


def look_at(eye, target, up=(0.0, 0.0, 1.0)) -> Pose:
    """Camera-to-world pose: z forward toward target, x right, y down."""
    eye = np.asarray(eye, dtype=np.float64)
    f = np.asarray(target, dtype=np.float64) - eye
    nf = np.linalg.norm(f)
    if nf < 1e-12:
        raise ValueError("eye and target coincide")
    f = f / nf
    up = np.asarray(up, dtype=np.float64)
    x = np.cross(f, up)
    if np.linalg.norm(x) < 1e-9:
        x = np.cross(f, np.array([1.0, 0.0, 0.0]))
    x = x / np.linalg.norm(x)
    y = np.cross(f, x)
    r = np.column_stack([x, y, f])
    return pose_from_rt(r, eye)


def orbit_cameras(center, radius: float, height: float, count: int,
                  intrinsics: Intrinsics, width: int, height_px: int,
                  full_turns: float = 1.0) -> list:
    """Evenly spaced look-at cameras on a circle above the scene."""
    center = np.asarray(center, dtype=np.float64)
    views = []
    for k in range(count):
        ang = 2.0 * np.pi * full_turns * k / max(count, 1)
        eye = center + np.array([radius * np.cos(ang), radius * np.sin(ang), height])
        views.append(CameraView(pose=look_at(eye, center),
                                intrinsics=intrinsics,
                                width=width, height=height_px))
    return views


# ---------------------------------------------------------------------------
# Point-to-mesh distance (clearance test)


def point_triangle_distance(points: np.ndarray, tri: np.ndarray,
                            chunk: int = 4096) -> np.ndarray:
    """Unsigned distance from each point to the closest of the triangles."""
    points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    a, b, c = tri[:, 0], tri[:, 1], tri[:, 2]
    ab = b - a
    ac = c - a
    out = np.full(len(points), np.inf)
    for lo in range(0, len(points), chunk):
        p = points[lo:lo + chunk]
        ap = p[:, None, :] - a[None, :, :]
        d1 = np.einsum("ij,nij->ni", ab, ap)
        d2 = np.einsum("ij,nij->ni", ac, ap)
        bp = p[:, None, :] - b[None, :, :]
        d3 = np.einsum("ij,nij->ni", ab, bp)
        d4 = np.einsum("ij,nij->ni", ac, bp)
        cp = p[:, None, :] - c[None, :, :]
        d5 = np.einsum("ij,nij->ni", ab, cp)
        d6 = np.einsum("ij,nij->ni", ac, cp)

        va = d3 * d6 - d5 * d4
        vb = d5 * d2 - d1 * d6
        vc = d1 * d4 - d3 * d2
        denom = va + vb + vc
        with np.errstate(divide="ignore", invalid="ignore"):
            v = np.where(denom != 0, vb / denom, 0.0)
            w = np.where(denom != 0, vc / denom, 0.0)
        # interior projection, then clamp to the closest edge region
        v = np.clip(v, 0.0, 1.0)
        w = np.clip(w, 0.0, np.maximum(0.0, 1.0 - v))
        proj = (a[None, :, :] + v[..., None] * ab[None, :, :]
                + w[..., None] * ac[None, :, :])
        d_face = np.linalg.norm(p[:, None, :] - proj, axis=2)

        def edge_dist(origin, direction, pvec):
            t = np.einsum("nij,ij->ni", pvec, direction)
            t = np.clip(t / np.maximum(np.einsum("ij,ij->i", direction, direction),
                                       1e-300)[None, :], 0.0, 1.0)
            q = origin[None, :, :] + t[..., None] * direction[None, :, :]
            return np.linalg.norm(p[:, None, :] - q, axis=2)

        d_e1 = edge_dist(a, ab, ap)
        d_e2 = edge_dist(a, ac, ap)
        d_e3 = edge_dist(b, c - b, bp)
        d_all = np.minimum(np.minimum(d_face, d_e1), np.minimum(d_e2, d_e3))
        out[lo:lo + chunk] = d_all.min(axis=1)
    return out


def volume_lattice(mesh: Mesh, pitch: float = PLACEMENT_PITCH) -> np.ndarray:
    """Regular lattice of interior points at the given pitch (object frame)."""
    lo, hi = mesh.bounds()
    axes = [np.arange(lo[i] + 0.5 * pitch, hi[i], pitch) for i in range(3)]
    gx, gy, gz = np.meshgrid(*axes, indexing="ij")
    pts = np.column_stack([gx.ravel(), gy.ravel(), gz.ravel()])
    return pts[points_in_mesh(pts, mesh)]


class _PlacedGeom:
    """Cached world-frame geometry of an accepted object."""

    def __init__(self, mesh: Mesh, lattice: np.ndarray, pose: Pose):
        self.tri = transform_points(pose, mesh.vertices)[mesh.faces]
        self.lattice = transform_points(pose, lattice)
        self.aabb_min = self.tri.reshape(-1, 3).min(axis=0)
        self.aabb_max = self.tri.reshape(-1, 3).max(axis=0)


def _clear_of(cand: _PlacedGeom, placed: list, margin: float) -> bool:
    """Conservative separation test: candidate and placed objects must not
    intersect; volume lattice points stay at least margin away from the
    other mesh and strictly outside it."""
    for other in placed:
        if np.any(cand.aabb_min > other.aabb_max + margin) or \
           np.any(cand.aabb_max < other.aabb_min - margin):
            continue
        for pts, geom in ((cand.lattice, other), (other.lattice, cand)):
            sel = np.all((pts > geom.aabb_min - margin)
                         & (pts < geom.aabb_max + margin), axis=1)
            near = pts[sel]
            if len(near) == 0:
                continue
            if point_triangle_distance(near, geom.tri).min() < margin:
                return False
            # distance > margin to the surface can still mean deep inside
            if np.any(points_in_mesh(near, Mesh(geom.tri.reshape(-1, 3),
                                                np.arange(geom.tri.size // 3).reshape(-1, 3)))):
                return False
    return True


def _random_pose(rng, bounds_min, bounds_max) -> Pose:
    q = rng.normal(size=4)
    t = rng.uniform(bounds_min, bounds_max)
    return Pose(q, t)


def generate_scene(spec: SceneSpec, max_rejections: int = 10000) -> Scene:
    """Place objects by rejection sampling.

    A candidate pose is accepted when the object lies inside the
    workspace and clears every accepted object. In drop mode each
    accepted object is then translated along -z until first contact
    (binary search)."""
    rng = np.random.default_rng(spec.seed)
    n = int(rng.integers(spec.min_objects, spec.max_objects + 1))
    pool = spec.model_pool
    built = {}
    placed_geom = []
    objects = []
    rejections = 0
    for i in range(n):
        mspec = pool[int(rng.integers(len(pool)))]
        if id(mspec) not in built:
            model = mspec.build()
            built[id(mspec)] = (model, volume_lattice(model.mesh))
        model, lattice = built[id(mspec)]
        while True:
            pose = _random_pose(rng, spec.bounds_min, spec.bounds_max)
            geom = _PlacedGeom(model.mesh, lattice, pose)
            ok = (np.all(geom.aabb_min >= spec.bounds_min)
                  and np.all(geom.aabb_max <= spec.bounds_max)
                  and _clear_of(geom, placed_geom, PLACEMENT_MARGIN))
            if ok:
                break
            rejections += 1
            if rejections >= max_rejections:
                raise RuntimeError(
                    f"placement failed after {max_rejections} rejections; "
                    "workspace too full")
        if spec.drop:
            pose, geom = _drop(model.mesh, lattice, pose, geom, placed_geom,
                               spec.bounds_min)
        placed_geom.append(geom)
        objects.append(PlacedObject(instance_id=i + 1, spec=mspec,
                                    pose=pose, model=model))
    return Scene(seed=spec.seed, bounds_min=spec.bounds_min.copy(),
                 bounds_max=spec.bounds_max.copy(), objects=objects,
                 cameras=list(spec.cameras), ground=spec.ground)


def _drop(mesh, lattice, pose, geom, placed, bounds_min):
    """Translate along -z until first contact, to DROP_GAP resolution."""
    max_drop = float(geom.aabb_min[2] - bounds_min[2])
    if max_drop <= 0:
        return pose, geom

    def shifted(d):
        p = Pose(pose.q, pose.t - np.array([0.0, 0.0, d]))
        return p, _PlacedGeom(mesh, lattice, p)

    def clear(d):
        if d > max_drop:
            return False
        _, g = shifted(d)
        return _clear_of(g, placed, PLACEMENT_MARGIN)

    lo = 0.0
    hi = max_drop
    if clear(max_drop):
        lo = max_drop
    else:
        while hi - lo > DROP_GAP:
            mid = 0.5 * (lo + hi)
            if clear(mid):
                lo = mid
            else:
                hi = mid
    return shifted(lo)


# ---------------------------------------------------------------------------
# Rendering


def _ground_mesh(bounds_min, bounds_max, thickness: float = 0.02) -> Mesh:
    lx = float(bounds_max[0] - bounds_min[0])
    ly = float(bounds_max[1] - bounds_min[1])
    m = primitives.box_mesh(lx, ly, thickness)
    center = 0.5 * (np.asarray(bounds_min) + np.asarray(bounds_max))
    offset = np.array([center[0], center[1],
                       bounds_min[2] - 0.5 * thickness])
    return Mesh(m.vertices + offset, m.faces)


def scene_triangles(scene: Scene, extra_poses: dict | None = None):
    """World-frame triangle soup of the scene with per-triangle instance
    ids. Optionally override object poses (e.g. to render a hypothesis)."""
    tris = []
    owners = []
    if scene.ground:
        g = _ground_mesh(scene.bounds_min, scene.bounds_max)
        tris.append(g.triangles())
        owners.append(np.zeros(len(g.faces), dtype=np.int32))
    for obj in scene.objects:
        pose = obj.pose if extra_poses is None else extra_poses.get(obj.instance_id, obj.pose)
        v = transform_points(pose, obj.model.mesh.vertices)
        tris.append(v[obj.model.mesh.faces])
        owners.append(np.full(len(obj.model.mesh.faces), obj.instance_id,
                              dtype=np.int32))
    if not tris:
        raise ValueError("scene has no geometry")
    return np.concatenate(tris), np.concatenate(owners)


def _ray_cast(origins, dirs, tri, eps: float = 1e-12):
    """First-hit parameter and triangle index per ray (-1 if no hit).

    Hit parameter is measured along the given (not normalized) direction.
    """
    v0 = tri[:, 0]
    e1 = tri[:, 1] - tri[:, 0]
    e2 = tri[:, 2] - tri[:, 0]
    t_best = np.full(len(dirs), np.inf)
    idx_best = np.full(len(dirs), -1, dtype=np.int64)
    chunk = max(1, int(2e6) // max(len(tri), 1))
    for lo in range(0, len(dirs), chunk):
        d = dirs[lo:lo + chunk]
        o = origins if origins.ndim == 1 else origins[lo:lo + chunk]
        pvec = np.cross(d[:, None, :], e2[None, :, :])
        det = np.einsum("ij,nij->ni", e1, pvec)
        ok = np.abs(det) > eps
        inv = np.where(ok, 1.0 / np.where(ok, det, 1.0), 0.0)
        tvec = (o[:, None, :] if o.ndim == 2 else o[None, None, :]) - v0[None, :, :]
        u = np.einsum("nij,nij->ni", tvec, pvec) * inv
        qvec = np.cross(tvec, e1[None, :, :])
        v = np.einsum("nij,nj->ni", qvec, d) * inv
        t = np.einsum("nij,ij->ni", qvec, e2) * inv
        hit = ok & (u >= 0.0) & (v >= 0.0) & (u + v <= 1.0) & (t > eps)
        t = np.where(hit, t, np.inf)
        j = np.argmin(t, axis=1)
        rows = np.arange(len(d))
        tm = t[rows, j]
        t_best[lo:lo + chunk] = tm
        idx_best[lo:lo + chunk] = np.where(tm < np.inf, j, -1)
    return t_best, idx_best


def render_depth(scene: Scene, camera: Pose, intrinsics: Intrinsics,
                 resolution) -> FrameObservation:
    """Ray-cast depth and instance images for one camera.

    Depth is the camera-frame z of the nearest hit; misses are 0.
    """
    w, h = int(resolution[0]), int(resolution[1])
    tri, owners = scene_triangles(scene)
    uu, vv = np.meshgrid(np.arange(w), np.arange(h))
    dirs_cam = np.column_stack([
        ((uu.ravel() - intrinsics.cx) / intrinsics.fx),
        ((vv.ravel() - intrinsics.cy) / intrinsics.fy),
        np.ones(w * h),
    ])
    r = camera.rotation_matrix()
    dirs = dirs_cam @ r.T
    t, idx = _ray_cast(camera.t, dirs, tri)
    depth = np.where(idx >= 0, t, 0.0).reshape(h, w)
    inst = np.where(idx >= 0, owners[np.maximum(idx, 0)], 0).astype(np.int32).reshape(h, w)
    return FrameObservation(depth=depth, instance_ids=inst,
                            camera_pose=camera, intrinsics=intrinsics)


def render_views(scene: Scene):
    """Render every camera of the scene in order."""
    return [render_depth(scene, cam.pose, cam.intrinsics,
                         (cam.width, cam.height)) for cam in scene.cameras]


def visibility(scene: Scene, n_samples: int = 400, seed: int = 0) -> dict:
    """Fraction of each object's surface samples visible in at least one
    camera, under the same ray caster the renderer uses."""
    from .geometry import sample_surface_points

    tri, _ = scene_triangles(scene)
    out = {}
    for obj in scene.objects:
        pts = sample_surface_points(obj.model.mesh, n_samples,
                                    seed + obj.instance_id)
        pts = transform_points(obj.pose, pts)
        seen = np.zeros(len(pts), dtype=bool)
        for cam in scene.cameras:
            dirs = pts - cam.pose.t
            t, idx = _ray_cast(cam.pose.t, dirs, tri)
            seen |= (idx >= 0) & (t >= 1.0 - 1e-7)
        out[obj.instance_id] = float(seen.mean())
    return out


# ---------------------------------------------------------------------------
# Perturbation


def _truncated_normal(rng, sigma: float, size: int, limit: float = 3.0) -> np.ndarray:
    """Zero-mean normal draws rejected outside +-limit*sigma."""
    if sigma == 0.0:
        return np.zeros(size)
    out = rng.normal(0.0, sigma, size=size)
    bad = np.abs(out) > limit * sigma
    while np.any(bad):
        out[bad] = rng.normal(0.0, sigma, size=int(bad.sum()))
        bad = np.abs(out) > limit * sigma
    return out


def _random_axis(rng) -> np.ndarray:
    while True:
        v = rng.normal(size=3)
        n = np.linalg.norm(v)
        if n > 1e-9:
            return v / n


def perturb_poses(poses: dict, sigma_t: float, sigma_r: float, seed: int) -> dict:
    """Noisy copies of the poses: truncated-Gaussian translation plus a
    random-axis rotation with truncated-Gaussian angle. Pose order is the
    sorted instance id order, so the draw sequence is reproducible."""
    if sigma_t < 0 or sigma_r < 0:
        raise ValueError("sigmas must be >= 0")
    rng = np.random.default_rng(seed)
    out = {}
    for inst in sorted(poses):
        dt = _truncated_normal(rng, sigma_t, 3)
        axis = _random_axis(rng)
        ang = float(_truncated_normal(rng, sigma_r, 1)[0])
        out[inst] = exp_update(poses[inst], Twist(ang * axis, dt))
    return out


# ---------------------------------------------------------------------------
# Scene and frame files


def scene_to_json_dict(scene: Scene) -> dict:
    return {
        "seed": scene.seed,
        "workspace": {"min": [float(v) for v in scene.bounds_min],
                      "max": [float(v) for v in scene.bounds_max]},
        "ground": scene.ground,
        "objects": [{"id": o.instance_id,
                     "model": o.spec.to_json_dict(),
                     "pose": o.pose.to_json_dict()} for o in scene.objects],
        "cameras": [{"pose": c.pose.to_json_dict(),
                     "intrinsics": c.intrinsics.to_json_dict(),
                     "width": c.width, "height": c.height}
                    for c in scene.cameras],
    }


def save_scene(scene: Scene, path) -> None:
    with open(path, "w") as f:
        json.dump(scene_to_json_dict(scene), f, indent=2, sort_keys=True)
        f.write("\n")


def load_scene(path) -> Scene:
    with open(path) as f:
        d = json.load(f)
    objects = []
    for entry in d["objects"]:
        mspec = ModelSpec.from_json_dict(entry["model"])
        objects.append(PlacedObject(instance_id=int(entry["id"]),
                                    spec=mspec,
                                    pose=Pose.from_json_dict(entry["pose"]),
                                    model=mspec.build()))
    cameras = [CameraView(pose=Pose.from_json_dict(c["pose"]),
                          intrinsics=Intrinsics.from_json_dict(c["intrinsics"]),
                          width=int(c["width"]), height=int(c["height"]))
               for c in d["cameras"]]
    return Scene(seed=int(d["seed"]),
                 bounds_min=np.asarray(d["workspace"]["min"], dtype=np.float64),
                 bounds_max=np.asarray(d["workspace"]["max"], dtype=np.float64),
                 objects=objects, cameras=cameras,
                 ground=bool(d.get("ground", False)))


def save_frame(obs: FrameObservation, stem) -> None:
    """Write depth (<f4) and instance (<u2) rasters plus a JSON header."""
    depth_file = f"{stem}_depth.bin"
    inst_file = f"{stem}_instance.bin"
    with open(depth_file, "wb") as f:
        f.write(obs.depth.astype("<f4").tobytes())
    with open(inst_file, "wb") as f:
        f.write(obs.instance_ids.astype("<u2").tobytes())
    h, w = obs.depth.shape
    header = {"width": w, "height": h,
              "depth_file": depth_file.rsplit("/", 1)[-1],
              "instance_file": inst_file.rsplit("/", 1)[-1],
              "depth_dtype": "<f4", "instance_dtype": "<u2",
              "camera_pose": obs.camera_pose.to_json_dict(),
              "intrinsics": obs.intrinsics.to_json_dict()}
    with open(f"{stem}.json", "w") as f:
        json.dump(header, f, indent=2, sort_keys=True)
        f.write("\n")


def load_frame(stem) -> FrameObservation:
    import os

    with open(f"{stem}.json") as f:
        header = json.load(f)
    base = os.path.dirname(str(stem))
    w, h = int(header["width"]), int(header["height"])
    depth = np.fromfile(os.path.join(base, header["depth_file"]),
                        dtype=header["depth_dtype"]).reshape(h, w).astype(np.float64)
    inst = np.fromfile(os.path.join(base, header["instance_file"]),
                       dtype=header["instance_dtype"]).reshape(h, w).astype(np.int32)
    return FrameObservation(depth=depth, instance_ids=inst,
                            camera_pose=Pose.from_json_dict(header["camera_pose"]),
                            intrinsics=Intrinsics.from_json_dict(header["intrinsics"]))
