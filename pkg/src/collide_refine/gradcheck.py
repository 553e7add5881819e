"""Central finite-difference verification of the analytic gradients.

Fixtures are rejected while any voxel distance sits within 1e-3 voxel
units of the threshold kink, two points are near co-minimal for a cell,
or a nontarget max is near a tie with the impenetrable grid, so the
objective is smooth across the difference step.
"""

from __future__ import annotations

import numpy as np

from .fusion import SurroundGrids
from .geometry import ObjectModel, Pose, Twist, exp_update
from .refine import (
    ObjectHypothesis,
    RefineConfig,
    SceneHypothesis,
    scene_collision_gradients,
    scene_collision_loss,
)
from .voxelize import GridSpec, voxelize_occupancy, voxelize_occupancy_backward

POINT_TOL = 1e-4
TWIST_TOL = 1e-3
FD_STEP = 1e-5
MARGIN = 1e-3  # voxel units


def _rel_err(a: float, b: float, floor: float = 1e-8) -> float:
    denom = max(abs(a), abs(b))
    if denom < floor:
        return 0.0
    return abs(a - b) / denom


def _cell_distances(points: np.ndarray, spec: GridSpec) -> np.ndarray:
    """(n_points, D^3) distances in voxel units, brute force."""
    u = spec.to_voxel(points)
    d = spec.dim
    idx = np.arange(d)
    ii, jj, kk = np.meshgrid(idx, idx, idx, indexing="ij")
    centers = np.stack([ii, jj, kk], axis=-1).reshape(-1, 3) + 0.5
    diff = u[:, None, :] - centers[None, :, :]
    return np.sqrt((diff ** 2).sum(axis=2))


def _degenerate(points: np.ndarray, spec: GridSpec) -> bool:
    dist = _cell_distances(points, spec)
    if np.any(np.abs(dist - spec.delta_t) < MARGIN):
        return True
    if np.any(dist < MARGIN):
        return True
    if len(points) >= 2:
        top2 = np.sort(dist, axis=0)[:2]
        near = top2[0] < spec.delta_t
        if np.any(near & (top2[1] - top2[0] < MARGIN)):
            return True
    return False


def point_fixture(seed: int):
    """Non-degenerate (points, spec, upstream) triple."""
    for attempt in range(1000):
        rng = np.random.default_rng(seed * 1009 + attempt)
        dim = int(rng.choice([8, 12, 16]))
        n = int(rng.integers(5, 25))
        delta_t = float(rng.choice([0.5, 1.0, 1.5, 2.0]))
        s = float(rng.uniform(0.02, 0.08))
        origin = rng.uniform(-0.5, 0.5, size=3)
        pts = origin + rng.uniform(0.05, 0.95, size=(n, 3)) * dim * s
        spec = GridSpec(origin, s, dim, delta_t)
        if not _degenerate(pts, spec):
            upstream = rng.normal(size=(dim, dim, dim))
            return pts, spec, upstream
    raise RuntimeError("could not draw a non-degenerate point fixture")


def check_point_gradients(seed: int) -> float:
    """Max relative error of the voxelization backward pass on one fixture."""
    pts, spec, upstream = point_fixture(seed)
    grads = voxelize_occupancy_backward(pts, spec, upstream)

    def objective(p):
        return float((voxelize_occupancy(p, spec).values * upstream).sum())

    worst = 0.0
    for q in range(len(pts)):
        for axis in range(3):
            hi = pts.copy()
            hi[q, axis] += FD_STEP
            lo = pts.copy()
            lo[q, axis] -= FD_STEP
            fd = (objective(hi) - objective(lo)) / (2 * FD_STEP)
            worst = max(worst, _rel_err(fd, grads[q, axis]))
    return worst


def _random_surround(rng, origin, s: float, dim: int) -> SurroundGrids:
    state = rng.choice(4, size=(dim, dim, dim),
                       p=[0.06, 0.05, 0.14, 0.75])
    if not np.any(state == 0):
        state.reshape(-1)[int(rng.integers(dim ** 3))] = 0
    return SurroundGrids(origin=np.asarray(origin, dtype=np.float64),
                         voxel_size=s, dim=dim,
                         g_self=state == 0, g_other=state == 1,
                         g_free=state == 2, g_unknown=state == 3)


def _cube_model(rng, side: float, n: int) -> ObjectModel:
    from .primitives import cube_mesh
    from .geometry import make_object_model

    return make_object_model(cube_mesh(side), n_points=n,
                             seed=int(rng.integers(1 << 31)))


def twist_fixture(seed: int):
    """Non-degenerate two-object SceneHypothesis plus its RefineConfig."""
    cfg = RefineConfig(delta_t=1.0)
    for attempt in range(1000):
        rng = np.random.default_rng(seed * 2003 + attempt)
        dim = 12
        s = float(rng.uniform(0.02, 0.04))
        side = 0.5 * dim * s
        centers = [rng.uniform(-0.05, 0.05, size=3),
                   rng.uniform(-0.05, 0.05, size=3) + np.array([0.3 * dim * s, 0, 0])]
        objects = []
        for k, c in enumerate(centers):
            model = _cube_model(rng, side, 80)
            pose = Pose(rng.normal(size=4), c)
            origin = c - 0.5 * dim * s + rng.uniform(-s, s, size=3)
            sur = _random_surround(rng, origin, s, dim)
            objects.append(ObjectHypothesis(instance_id=k + 1, model=model,
                                            pose=pose, surround=sur))
        scene = SceneHypothesis(objects=objects)
        if not _twist_degenerate(scene, cfg):
            return scene, cfg
    raise RuntimeError("could not draw a non-degenerate twist fixture")


def _twist_degenerate(scene: SceneHypothesis, cfg: RefineConfig) -> bool:
    from .geometry import transform_points

    posed = [transform_points(o.pose, o.model.points) for o in scene.objects]
    specs = [GridSpec(o.surround.origin, o.surround.voxel_size,
                      o.surround.dim, cfg.delta_t) for o in scene.objects]
    for m, o in enumerate(scene.objects):
        vals = {}
        for n in range(len(scene.objects)):
            if _degenerate(posed[n], specs[m]):
                return True
            vals[n] = voxelize_occupancy(posed[n], specs[m]).values
        impen = (o.surround.g_other | o.surround.g_free).astype(np.float64)
        tgt = vals[m]
        for n in range(len(scene.objects)):
            if n == m:
                continue
            # near-tie between a live nontarget cell and the constant grid
            live = (tgt > 0) & (vals[n] > 0)
            if np.any(live & (np.abs(vals[n] - impen) < MARGIN)):
                return True
        if float(tgt.sum()) < 1e-6:
            return True
    return False


def check_twist_gradients(seed: int) -> float:
    """Max relative error of the scene-loss twist gradients on one fixture."""
    scene, cfg = twist_fixture(seed)
    poses = [o.pose for o in scene.objects]
    _, z0, grads = scene_collision_gradients(scene, cfg, poses=poses)
    worst = 0.0
    for n in range(len(poses)):
        packed = np.concatenate(grads[n])
        for c in range(6):
            tw = np.zeros(6)
            tw[c] = FD_STEP
            p_hi = list(poses)
            p_hi[n] = exp_update(poses[n], Twist(tw[:3], tw[3:]))
            p_lo = list(poses)
            p_lo[n] = exp_update(poses[n], Twist(-tw[:3], -tw[3:]))
            hi, _, _, _ = scene_collision_loss(scene, cfg, poses=p_hi, frozen_z=z0)
            lo, _, _, _ = scene_collision_loss(scene, cfg, poses=p_lo, frozen_z=z0)
            fd = (hi - lo) / (2 * FD_STEP)
            worst = max(worst, _rel_err(fd, packed[c]))
    return worst


def run_suite(seed: int, n_fixtures: int = 10):
    """Run both checks over a batch of fixtures.

    Returns (max point rel err, max twist rel err, ok).
    """
    worst_p = max(check_point_gradients(seed + k) for k in range(n_fixtures))
    worst_t = max(check_twist_gradients(seed + k) for k in range(n_fixtures))
    return worst_p, worst_t, (worst_p < POINT_TOL and worst_t < TWIST_TOL)
