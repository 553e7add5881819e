"""Pose losses and the collision / surface-alignment intersection losses.

The pose losses compare the model point cloud under two poses: the
standard loss uses one-to-one correspondence, the symmetric variant the
nearest transformed neighbor. The collision losses compare a hypothesized
occupancy grid of a target object against the impenetrable space around
it (other objects and observed free space) and against its own observed
surface.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree

from .geometry import Pose, transform_points
from .voxelize import OccupancyGrid


def add_loss(pose_gt: Pose, pose_hat: Pose, model_points: np.ndarray) -> float:
    """Mean distance between corresponding model points under both poses."""
    pts = np.asarray(model_points, dtype=np.float64).reshape(-1, 3)
    if len(pts) < 1:
        raise ValueError("need at least one model point")
    a = transform_points(pose_gt, pts)
    b = transform_points(pose_hat, pts)
    return float(np.mean(np.linalg.norm(a - b, axis=1)))


def adds_loss(pose_gt: Pose, pose_hat: Pose, model_points: np.ndarray) -> float:
    """Mean nearest-neighbor distance between the two transformed clouds."""
    pts = np.asarray(model_points, dtype=np.float64).reshape(-1, 3)
    if len(pts) < 1:
        raise ValueError("need at least one model point")
    a = transform_points(pose_gt, pts)
    b = transform_points(pose_hat, pts)
    dist, _ = cKDTree(b).query(a, k=1)
    return float(np.mean(dist))


def confidence_weighted_loss(per_point_losses, confidences, lam: float = 0.015) -> float:
    """Confidence-weighted mean: (1/N) sum_i (L_i c_i - lam log c_i)."""
    losses = np.asarray(per_point_losses, dtype=np.float64).ravel()
    conf = np.asarray(confidences, dtype=np.float64).ravel()
    if losses.shape != conf.shape or len(losses) < 1:
        raise ValueError("losses and confidences must have equal nonzero length")
    if np.any(conf <= 0.0):
        raise ValueError("confidences must be positive")
    return float(np.mean(losses * conf - lam * np.log(conf)))


def loss_schedule(epoch: int, warmup_epochs: int) -> str:
    """Loss kind for this epoch: 'standard' during warm-up, then
    'symmetric' (applied to symmetry-flagged objects only)."""
    if epoch < 0:
        raise ValueError("epoch must be >= 0")
    return "standard" if epoch < warmup_epochs else "symmetric"


@dataclass(frozen=True)
class CollisionLossTerms:
    """Per-object collision penalty and surface-alignment reward."""

    l_col: float
    l_surf: float

    @property
    def total(self) -> float:
        return self.l_col - self.l_surf


def collision_losses(target_grid: OccupancyGrid, nontarget_grids,
                     surround) -> CollisionLossTerms:
    """Intersection losses of a target's hypothesized occupancy.

    The impenetrable grid is the union of observed other-object space and
    observed free space; hypothesized surrounding objects are aggregated
    into it by element-wise max. The penalty is the normalized overlap of
    the target occupancy with that grid, the reward its normalized overlap
    with the target's own observed surface cells.
    """
    target = target_grid.values
    g_neg = aggregate_impenetrable(nontarget_grids, surround, target_grid.spec.dim)
    g_self = surround.g_self.astype(np.float64)

    z = float(target.sum())
    s = float(g_self.sum())
    if z <= 0.0:
        raise ValueError("target occupancy sums to zero")
    if s <= 0.0:
        raise ValueError("target has no observed self cells")
    l_col = float((target * g_neg).sum()) / z
    l_surf = float((target * g_self).sum()) / s
    return CollisionLossTerms(l_col=l_col, l_surf=l_surf)


def aggregate_impenetrable(nontarget_grids, surround, dim: int) -> np.ndarray:
    """Element-wise max of hypothesized nontarget grids and the observed
    impenetrable cells (other | free)."""
    g_impen = (surround.g_other | surround.g_free).astype(np.float64)
    g_neg = g_impen
    for g in nontarget_grids:
        if g.values.shape != (dim,) * 3:
            raise ValueError("nontarget grid shape mismatch")
        g_neg = np.maximum(g_neg, g.values)
    return g_neg


def total_scene_loss(terms) -> float:
    """Mean over objects of (collision penalty - surface reward)."""
    terms = list(terms)
    if len(terms) < 1:
        raise ValueError("need at least one object")
    return float(np.mean([t.l_col - t.l_surf for t in terms]))
