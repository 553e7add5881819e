"""Joint multi-object pose refinement.

ICC (iterative collision check) voxelizes each object's sampled model
points under its hypothesized pose into its own surrounding-grid frame
and into every other object's frame, evaluates the collision and
surface-alignment losses, and descends all pose twists simultaneously.
ICP is the classic point-to-point baseline with a closed-form rigid step.
The combination runs ICC first to resolve collisions in the discretized
space, then ICP to align surfaces precisely.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np
from scipy.spatial import cKDTree

from .geometry import ObjectModel, Pose, Twist, exp_update, pose_from_rt, transform_points
from .voxelize import GridSpec, _backward_from_internals, _voxelize_full


class DivergenceError(RuntimeError):
    """ICC loss ran away; carries the trace accumulated so far."""

    def __init__(self, message, trace):
        super().__init__(message)
        self.trace = trace


@dataclass(frozen=True)
class RefineConfig:
    max_iters: int = 200
    lr_rot: float = 0.01          # rad per unit gradient
    lr_trans: float = 0.002       # m per unit gradient
    conv_tol: float = 1e-6        # |dL| below this ...
    conv_iters: int = 10          # ... for this many consecutive iterations
    delta_t: float = 1.0          # voxelization distance threshold (voxels)
    n_model_points: int = 5000
    step_decay: float = 1.0       # optional per-iteration decay, e.g. 0.99
    divergence_factor: float = 10.0
    divergence_iters: int = 20

    def __post_init__(self):
        if self.max_iters < 1 or self.lr_rot <= 0 or self.lr_trans <= 0:
            raise ValueError("iters and learning rates must be positive")


@dataclass
class ObjectHypothesis:
    """One object in a scene hypothesis: identity, model, current pose,
    its surrounding grids, and optionally its observed surface points
    (world frame) for the ICP stage."""

    instance_id: int
    model: ObjectModel
    pose: Pose
    surround: object
    observed_points: np.ndarray | None = None


@dataclass
class SceneHypothesis:
    objects: list

    def __post_init__(self):
        ids = [o.instance_id for o in self.objects]
        if len(set(ids)) != len(ids):
            raise ValueError("instance ids must be unique")

    def poses(self) -> dict:
        return {o.instance_id: o.pose for o in self.objects}


class _SceneState:
    """Pose-independent per-object data for the ICC loss."""

    def __init__(self, scene: SceneHypothesis, cfg: RefineConfig):
        self.objects = scene.objects
        self.specs = []
        self.g_self = []
        self.g_impen = []
        self.s_sums = []
        self.points = []
        for o in scene.objects:
            sur = o.surround
            self.specs.append(GridSpec(sur.origin, sur.voxel_size, sur.dim,
                                       cfg.delta_t))
            gs = sur.g_self.astype(np.float64)
            if gs.sum() <= 0:
                raise ValueError(
                    f"instance {o.instance_id} has an empty self grid")
            self.g_self.append(gs)
            self.g_impen.append((sur.g_other | sur.g_free).astype(np.float64))
            self.s_sums.append(float(gs.sum()))
            self.points.append(np.asarray(o.model.points, dtype=np.float64))


def _evaluate(state: _SceneState, poses, frozen_z=None, want_grads=True):
    """Collision loss of the scene and, optionally, its twist gradients.

    Normalizers (the target occupancy sums) are frozen: either taken from
    frozen_z or from the current poses, and treated as constants by the
    gradients. Returns (total, l_col list, l_surf list, z list, grads),
    grads as a list of (d_rot, d_trans) per object.
    """
    m_objs = len(poses)
    posed = [transform_points(poses[m], state.points[m]) for m in range(m_objs)]
    vox = [[None] * m_objs for _ in range(m_objs)]
    for m in range(m_objs):
        for n in range(m_objs):
            vox[m][n] = _voxelize_full(posed[n], state.specs[m])
    z = [float(vox[m][m][0].sum()) for m in range(m_objs)]
    if frozen_z is not None:
        z = list(frozen_z)
    for m, zm in enumerate(z):
        if zm <= 0:
            raise ValueError(f"object {m}: hypothesized occupancy sums to zero")

    l_col, l_surf = [], []
    negs, masks = [], []
    for m in range(m_objs):
        tgt = vox[m][m][0]
        others = [n for n in range(m_objs) if n != m]
        if others:
            stack = np.stack([vox[m][n][0] for n in others])
            g_nt = stack.max(axis=0)
            amax = stack.argmax(axis=0)  # first max wins ties
        else:
            g_nt = np.zeros_like(tgt)
            amax = None
        g_neg = np.maximum(g_nt, state.g_impen[m])
        l_col.append(float((tgt * g_neg).sum()) / z[m])
        l_surf.append(float((tgt * state.g_self[m]).sum()) / state.s_sums[m])
        negs.append(g_neg)
        # a nontarget only receives gradient where it beats the observed
        # impenetrable cells (max is saturated by a constant otherwise)
        masks.append((others, amax, g_nt > state.g_impen[m]))
    total = float(np.mean([c - s for c, s in zip(l_col, l_surf)]))
    if not want_grads:
        return total, l_col, l_surf, z, None

    pt_grads = [np.zeros_like(p) for p in posed]
    for m in range(m_objs):
        up_target = (negs[m] / z[m] - state.g_self[m] / state.s_sums[m]) / m_objs
        _, arg, dist = vox[m][m]
        pt_grads[m] += _backward_from_internals(posed[m], state.specs[m],
                                                up_target, arg, dist)
        others, amax, beats = masks[m]
        tgt = vox[m][m][0]
        for pos, n in enumerate(others):
            contrib = (amax == pos) & beats
            if not contrib.any():
                continue
            ups = tgt * contrib / (z[m] * m_objs)
            _, arg_n, dist_n = vox[m][n]
            pt_grads[n] += _backward_from_internals(posed[n], state.specs[m],
                                                    ups, arg_n, dist_n)
    grads = []
    for n in range(m_objs):
        lever = posed[n] - poses[n].t  # rotated body vectors R x
        d_trans = pt_grads[n].sum(axis=0)
        d_rot = np.cross(lever, pt_grads[n]).sum(axis=0)
        grads.append((d_rot, d_trans))
    return total, l_col, l_surf, z, grads


def scene_collision_loss(scene: SceneHypothesis, cfg: RefineConfig,
                         poses=None, frozen_z=None):
    """Total collision loss (and per-object terms) for given poses."""
    state = _SceneState(scene, cfg)
    if poses is None:
        poses = [o.pose for o in scene.objects]
    total, l_col, l_surf, z, _ = _evaluate(state, poses, frozen_z, want_grads=False)
    return total, l_col, l_surf, z


def scene_collision_gradients(scene: SceneHypothesis, cfg: RefineConfig,
                              poses=None):
    """Twist gradients of the frozen-normalizer collision loss."""
    state = _SceneState(scene, cfg)
    if poses is None:
        poses = [o.pose for o in scene.objects]
    total, l_col, l_surf, z, grads = _evaluate(state, poses, want_grads=True)
    return total, z, grads


def icc_refine(scene: SceneHypothesis, cfg: RefineConfig | None = None):
    """Jointly descend all object poses on the collision loss.

    Returns (refined scene, trace) where trace has one row per evaluated
    iteration: (iteration, mean collision, mean surface reward, total).
    Raises DivergenceError when the loss runs away.
    """
    cfg = cfg or RefineConfig()
    state = _SceneState(scene, cfg)
    poses = [o.pose for o in scene.objects]
    trace = []
    initial = None
    calm = 0
    runaway = 0
    lr_r, lr_t = cfg.lr_rot, cfg.lr_trans
    for it in range(cfg.max_iters):
        total, l_col, l_surf, _, grads = _evaluate(state, poses)
        if not np.isfinite(total):
            raise DivergenceError(f"loss not finite at iteration {it}",
                                  np.array(trace))
        trace.append((it, float(np.mean(l_col)), float(np.mean(l_surf)), total))
        if initial is None:
            initial = total
        if total > cfg.divergence_factor * abs(initial) + 1e-12:
            runaway += 1
            if runaway >= cfg.divergence_iters:
                raise DivergenceError(
                    f"loss above {cfg.divergence_factor}x initial for "
                    f"{cfg.divergence_iters} iterations", np.array(trace))
        else:
            runaway = 0
        if len(trace) >= 2 and abs(trace[-1][3] - trace[-2][3]) < cfg.conv_tol:
            calm += 1
            if calm >= cfg.conv_iters:
                break
        else:
            calm = 0
        poses = [exp_update(p, Twist(-lr_r * g[0], -lr_t * g[1]))
                 for p, g in zip(poses, grads)]
        lr_r *= cfg.step_decay
        lr_t *= cfg.step_decay
    total, l_col, l_surf, _, _ = _evaluate(state, poses, want_grads=False)
    trace.append((len(trace), float(np.mean(l_col)), float(np.mean(l_surf)), total))
    refined = SceneHypothesis(objects=[replace(o, pose=p)
                                       for o, p in zip(scene.objects, poses)])
    return refined, np.array(trace)


@dataclass
class IcpResult:
    pose: Pose
    n_iters: int
    converged: bool
    degenerate: bool
    rms: float


def icp_refine(observed_points: np.ndarray, model: ObjectModel, init: Pose,
               cfg: RefineConfig | None = None) -> IcpResult:
    """Point-to-point ICP: observed points against the posed model cloud.

    Correspondence goes observed -> nearest model point (the observed
    cloud is partial, the model complete); each step solves the rigid
    alignment in closed form. Stops when the correspondence set repeats.
    A rank-deficient cross-covariance returns the initial pose flagged
    degenerate.
    """
    cfg = cfg or RefineConfig()
    obs = np.asarray(observed_points, dtype=np.float64).reshape(-1, 3)
    if len(obs) < 3:
        return IcpResult(pose=init, n_iters=0, converged=False,
                         degenerate=True, rms=float("nan"))
    pose = init
    prev_idx = None
    prev_rms = np.inf
    n_done = 0
    converged = False
    for it in range(cfg.max_iters):
        posed = transform_points(pose, model.points)
        dist, idx = cKDTree(posed).query(obs, k=1)
        rms = float(np.sqrt(np.mean(dist ** 2)))
        # closed-form step is the exact minimizer, re-matching only
        # shrinks residuals: the rms must be non-increasing
        assert rms <= prev_rms + 1e-9, "ICP residual increased"
        prev_rms = rms
        n_done = it + 1
        if prev_idx is not None and np.array_equal(idx, prev_idx):
            converged = True
            break
        prev_idx = idx
        x = model.points[idx]
        xc = x.mean(axis=0)
        oc = obs.mean(axis=0)
        h = (x - xc).T @ (obs - oc)
        u, s, vt = np.linalg.svd(h)
        if s[2] <= 1e-12 * max(s[0], 1e-300):
            return IcpResult(pose=init, n_iters=n_done, converged=False,
                             degenerate=True, rms=rms)
        d = np.sign(np.linalg.det(vt.T @ u.T))
        r = vt.T @ np.diag([1.0, 1.0, d]) @ u.T
        pose = pose_from_rt(r, oc - r @ xc)
    return IcpResult(pose=pose, n_iters=n_done, converged=converged,
                     degenerate=False, rms=prev_rms)


def refine_combined(scene: SceneHypothesis,
                    cfg: RefineConfig | None = None) -> SceneHypothesis:
    """ICC followed by per-object ICP against each object's observed
    self-surface points. Objects without observed points keep their ICC
    pose."""
    cfg = cfg or RefineConfig()
    refined, _ = icc_refine(scene, cfg)
    objects = []
    for o in refined.objects:
        if o.observed_points is not None and len(o.observed_points) >= 3:
            res = icp_refine(o.observed_points, o.model, o.pose, cfg)
            o = replace(o, pose=res.pose)
        objects.append(o)
    return SceneHypothesis(objects=objects)
