"""Differentiable occupancy voxelization of a point set.

A point p is mapped to voxel coordinates u = (p - origin) / s. Each cell k
with center v_k = index + 0.5 gets the occupancy value

    o_k = 1 - min(delta_t, min_q ||u_q - v_k||) / delta_t,

which is piecewise-differentiable in the points: the gradient of o_k flows
entirely to the unique closest point (ties to the lowest point index) and
is zero where the threshold saturates.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class GridSpec:
    """Voxel grid frame: origin (left-bottom corner, m), voxel size s (m),
    cells per axis D, and the distance threshold delta_t in voxel units."""

    origin: np.ndarray
    voxel_size: float
    dim: int = 32
    delta_t: float = 1.0

    def __post_init__(self):
        origin = np.asarray(self.origin, dtype=np.float64).reshape(3).copy()
        origin.flags.writeable = False
        object.__setattr__(self, "origin", origin)
        object.__setattr__(self, "voxel_size", float(self.voxel_size))
        if self.voxel_size <= 0:
            raise ValueError("voxel_size must be positive")
        if self.dim < 2:
            raise ValueError("dim must be >= 2")
        if self.delta_t <= 0:
            raise ValueError("delta_t must be positive")

    def to_voxel(self, points: np.ndarray) -> np.ndarray:
        return (np.asarray(points, dtype=np.float64) - self.origin) / self.voxel_size

    def cell_centers_world(self) -> np.ndarray:
        """(D, D, D, 3) world coordinates of all cell centers."""
        idx = np.arange(self.dim)
        ii, jj, kk = np.meshgrid(idx, idx, idx, indexing="ij")
        centers = np.stack([ii, jj, kk], axis=-1) + 0.5
        return self.origin + centers * self.voxel_size

    def to_json_dict(self) -> dict:
        return {"origin": [float(v) for v in self.origin],
                "voxel_size": self.voxel_size,
                "dim": self.dim,
                "delta_t": self.delta_t}

    @staticmethod
    def from_json_dict(d: dict) -> "GridSpec":
        return GridSpec(np.asarray(d["origin"], dtype=np.float64),
                        d["voxel_size"], d["dim"], d["delta_t"])


@dataclass(frozen=True)
class OccupancyGrid:
    """Dense real-valued occupancy values in [0, 1], indexed [ix, iy, iz]."""

    spec: GridSpec
    values: np.ndarray

    def __post_init__(self):
        vals = np.asarray(self.values, dtype=np.float64)
        if vals.shape != (self.spec.dim,) * 3:
            raise ValueError("values shape does not match spec.dim")
        if vals.size and (vals.min() < 0.0 or vals.max() > 1.0):
            raise ValueError("occupancy values must lie in [0, 1]")
        object.__setattr__(self, "values", vals)


def _neighborhood(points_vox: np.ndarray, dim: int, delta_t: float):
    """Candidate (cell index, distance, point index) triples.

    Only cells whose center can be within delta_t of the point are
    generated: per axis, |u - (c + 0.5)| <= delta_t. Cells outside this
    block are exactly zero unless another point covers them.
    """
    n = len(points_vox)
    lo = np.ceil(points_vox - delta_t - 0.5).astype(np.int64)
    hi = np.floor(points_vox + delta_t - 0.5).astype(np.int64)
    span = int(max(1, (hi - lo).max() + 1))
    offs = np.arange(span)
    # (n, span) per-axis candidate indices with out-of-range mask
    cand = lo[:, None, :] + offs[None, :, None]
    ok_axis = (cand <= hi[:, None, :]) & (cand >= 0) & (cand < dim)

    ix = cand[:, :, 0][:, :, None, None]
    iy = cand[:, :, 1][:, None, :, None]
    iz = cand[:, :, 2][:, None, None, :]
    mask = (ok_axis[:, :, 0][:, :, None, None]
            & ok_axis[:, :, 1][:, None, :, None]
            & ok_axis[:, :, 2][:, None, None, :])

    dx = ix + 0.5 - points_vox[:, 0][:, None, None, None]
    dy = iy + 0.5 - points_vox[:, 1][:, None, None, None]
    dz = iz + 0.5 - points_vox[:, 2][:, None, None, None]
    dist = np.sqrt(dx * dx + dy * dy + dz * dz)

    flat = ((ix * dim + iy) * dim + iz)
    flat = np.broadcast_to(flat, mask.shape)[mask]
    dist = dist[mask]
    pidx = np.broadcast_to(np.arange(n)[:, None, None, None], mask.shape)[mask]
    return flat, dist, pidx


def _voxelize_full(points: np.ndarray, spec: GridSpec):
    """Forward pass returning (values, argmin point per cell, min distance).

    argmin is -1 where no point is closer than delta_t; ties go to the
    lowest point index, so the result does not depend on reduction order.
    """
    points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    if len(points) == 0:
        raise ValueError("empty point set")
    if not np.all(np.isfinite(points)):
        raise ValueError("points must be finite")
    d = spec.dim
    u = spec.to_voxel(points)
    flat, dist, pidx = _neighborhood(u, d, spec.delta_t)

    best = np.full(d ** 3, spec.delta_t)
    barg = np.full(d ** 3, -1, dtype=np.int64)
    if len(flat):
        order = np.lexsort((pidx, dist))  # by distance, then point index
        flat, dist, pidx = flat[order], dist[order], pidx[order]
        first = np.unique(flat, return_index=True)[1]
        cells, cdist, carg = flat[first], dist[first], pidx[first]
        win = cdist < spec.delta_t
        best[cells[win]] = cdist[win]
        barg[cells[win]] = carg[win]
    values = 1.0 - best / spec.delta_t
    return values.reshape(d, d, d), barg.reshape(d, d, d), best.reshape(d, d, d)


def voxelize_occupancy(points: np.ndarray, spec: GridSpec) -> OccupancyGrid:
    values, _, _ = _voxelize_full(points, spec)
    return OccupancyGrid(spec=spec, values=values)


def voxelize_occupancy_backward(points: np.ndarray, spec: GridSpec,
                                upstream: np.ndarray) -> np.ndarray:
    """Gradient of sum_k upstream_k * o_k with respect to the points (m).

    Saturated cells (min distance >= delta_t) contribute nothing; a cell
    with a point exactly at its center has an undefined direction and
    contributes zero (subgradient convention).
    """
    points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    upstream = np.asarray(upstream, dtype=np.float64)
    if upstream.shape != (spec.dim,) * 3:
        raise ValueError("upstream shape does not match spec.dim")
    _, barg, bdist = _voxelize_full(points, spec)
    return _backward_from_internals(points, spec, upstream, barg, bdist)


def _backward_from_internals(points: np.ndarray, spec: GridSpec,
                             upstream: np.ndarray, barg: np.ndarray,
                             bdist: np.ndarray) -> np.ndarray:
    d = spec.dim
    u = spec.to_voxel(points)
    barg = barg.ravel()
    bdist = bdist.ravel()
    w = upstream.ravel()
    live = (barg >= 0) & (bdist > 0.0) & (w != 0.0)
    grads = np.zeros_like(points)
    if not np.any(live):
        return grads
    cells = np.nonzero(live)[0]
    pid = barg[cells]
    iz = cells % d
    iy = (cells // d) % d
    ix = cells // (d * d)
    centers = np.column_stack([ix, iy, iz]) + 0.5
    diff = u[pid] - centers
    coef = -w[cells] / (bdist[cells] * spec.delta_t * spec.voxel_size)
    np.add.at(grads, pid, coef[:, None] * diff)
    return grads


# ---------------------------------------------------------------------------
# Export: flat little-endian f32, x-fastest order, JSON sidecar with the spec.


def save_occupancy_grid(grid: OccupancyGrid, path_bin, path_json) -> None:
    flat = grid.values.astype("<f4").ravel(order="F")  # x varies fastest
    with open(path_bin, "wb") as f:
        f.write(flat.tobytes())
    with open(path_json, "w") as f:
        json.dump(grid.spec.to_json_dict(), f, indent=2, sort_keys=True)
        f.write("\n")


def load_occupancy_grid(path_bin, path_json) -> OccupancyGrid:
    with open(path_json) as f:
        spec = GridSpec.from_json_dict(json.load(f))
    data = np.fromfile(path_bin, dtype="<f4")
    d = spec.dim
    if data.size != d ** 3:
        raise ValueError(f"{path_bin}: expected {d ** 3} floats, got {data.size}")
    values = data.astype(np.float64).reshape((d, d, d), order="F")
    return OccupancyGrid(spec=spec, values=values)
