"""Object-level occupancy fusion from posed depth frames.

Each object instance (and the background, id 0) accumulates hit evidence
in its own sparse log-odds voxel map; carved free space goes to a single
shared free-space map. Leaves are cubes of a fixed size on a lattice
anchored at the workspace minimum corner. A leaf is occupied if its
log-odds is positive, free if negative, unknown if absent.

Instance maps only ever receive positive (hit) increments and the free
map only negative (miss) increments, so clamped accumulation commutes
across frames and integration order does not matter.
"""

from __future__ import annotations

import json
import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .geometry import Pose
from .util import thread_cap

L_HIT = 0.85
L_MISS = -0.4
L_CLAMP = 3.5


@dataclass(frozen=True)
class Intrinsics:
    fx: float
    fy: float
    cx: float
    cy: float

    def to_json_dict(self) -> dict:
        return {"fx": self.fx, "fy": self.fy, "cx": self.cx, "cy": self.cy}

    @staticmethod
    def from_json_dict(d: dict) -> "Intrinsics":
        return Intrinsics(float(d["fx"]), float(d["fy"]), float(d["cx"]), float(d["cy"]))


@dataclass
class FrameObservation:
    """Depth frame with per-pixel instance ids and a camera-to-world pose.

    depth is the camera-frame z coordinate in meters, 0 marks invalid
    pixels. instance id 0 is background / unrecognized structure.
    """

    depth: np.ndarray
    instance_ids: np.ndarray
    camera_pose: Pose
    intrinsics: Intrinsics

    def __post_init__(self):
        self.depth = np.asarray(self.depth, dtype=np.float64)
        self.instance_ids = np.asarray(self.instance_ids, dtype=np.int32)
        if self.depth.ndim != 2 or self.instance_ids.shape != self.depth.shape:
            raise ValueError("depth and instance images must share an HxW shape")
        if np.any(self.depth < 0):
            raise ValueError("depth must be non-negative")


class SparseVoxelMap:
    """Sparse leaf storage: packed index -> clamped log-odds."""

    def __init__(self, clamp: float = L_CLAMP):
        self.cells: dict[int, float] = {}
        self.clamp = clamp

    def __len__(self):
        return len(self.cells)

    def get(self, key: int) -> float:
        return self.cells.get(key, 0.0)

    def bulk_add(self, keys: np.ndarray, deltas: np.ndarray) -> None:
        c = self.clamp
        cells = self.cells
        for k, d in zip(keys.tolist(), deltas.tolist()):
            v = cells.get(k, 0.0) + d
            cells[k] = -c if v < -c else (c if v > c else v)

    def arrays(self):
        n = len(self.cells)
        keys = np.fromiter(self.cells.keys(), dtype=np.int64, count=n)
        vals = np.fromiter(self.cells.values(), dtype=np.float64, count=n)
        return keys, vals


@dataclass
class SurroundGrids:
    """Four disjoint binary 32^3 grids around a target object: its own
    observed space, other occupied space, observed free space, and the
    unobserved remainder. Together they cover every cell."""

    origin: np.ndarray
    voxel_size: float
    dim: int
    g_self: np.ndarray
    g_other: np.ndarray
    g_free: np.ndarray
    g_unknown: np.ndarray

    def partition_ok(self) -> bool:
        total = (self.g_self.astype(np.int64) + self.g_other + self.g_free
                 + self.g_unknown)
        return bool(np.all(total == 1))


class SceneMap:
    """Per-instance occupancy maps plus shared free space over a bounded
    workspace. Single writer; reads may run concurrently between
    integrations."""

    def __init__(self, bounds_min, bounds_max, leaf_size: float = 0.005,
                 l_hit: float = L_HIT, l_miss: float = L_MISS,
                 clamp: float = L_CLAMP):
        self.bounds_min = np.asarray(bounds_min, dtype=np.float64).reshape(3)
        self.bounds_max = np.asarray(bounds_max, dtype=np.float64).reshape(3)
        if np.any(self.bounds_max <= self.bounds_min):
            raise ValueError("workspace bounds must have positive volume")
        self.leaf_size = float(leaf_size)
        self.dims = np.ceil((self.bounds_max - self.bounds_min) / self.leaf_size).astype(np.int64)
        self.l_hit = float(l_hit)
        self.l_miss = float(l_miss)
        self.clamp = float(clamp)
        self.instance_maps: dict[int, SparseVoxelMap] = {}
        self.free_map = SparseVoxelMap(clamp=self.clamp)

    # -- leaf index helpers ------------------------------------------------

    def leaf_index(self, points: np.ndarray) -> np.ndarray:
        pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
        return np.floor((pts - self.bounds_min) / self.leaf_size).astype(np.int64)

    def index_in_bounds(self, idx: np.ndarray) -> np.ndarray:
        return np.all((idx >= 0) & (idx < self.dims), axis=-1)

    def pack(self, idx: np.ndarray) -> np.ndarray:
        nx, ny, nz = (int(v) for v in self.dims)
        return (idx[..., 0] * ny + idx[..., 1]) * nz + idx[..., 2]

    def unpack(self, keys: np.ndarray) -> np.ndarray:
        ny, nz = int(self.dims[1]), int(self.dims[2])
        iz = keys % nz
        iy = (keys // nz) % ny
        ix = keys // (nz * ny)
        return np.stack([ix, iy, iz], axis=-1)

    def leaf_centers(self, keys: np.ndarray) -> np.ndarray:
        return self.bounds_min + (self.unpack(keys) + 0.5) * self.leaf_size

    def _map_for(self, instance_id: int) -> SparseVoxelMap:
        m = self.instance_maps.get(instance_id)
        if m is None:
            m = SparseVoxelMap(clamp=self.clamp)
            self.instance_maps[instance_id] = m
        return m

    # -- integration ---------------------------------------------------------

    def integrate_frame(self, obs: FrameObservation, max_range: float = 10.0,
                        workers: int | None = None) -> "SceneMap":
        """Fuse one depth frame: endpoint hits into per-instance maps,
        carved leaves along each ray (endpoint excluded) into the free map.
        Pixels beyond max_range only carve, up to max_range."""
        if not np.all(np.isfinite(obs.camera_pose.t)):
            raise ValueError("camera pose must be finite")
        h, w = obs.depth.shape
        vv, uu = np.nonzero(obs.depth > 0)
        if len(vv) == 0:
            return self
        z = obs.depth[vv, uu]
        ids = obs.instance_ids[vv, uu]
        K = obs.intrinsics
        dirs = np.column_stack([(uu - K.cx) / K.fx * z, (vv - K.cy) / K.fy * z, z])
        rng = np.linalg.norm(dirs, axis=1)
        over = rng > max_range
        scale = np.where(over, max_range / rng, 1.0)
        ends_cam = dirs * scale[:, None]
        R = obs.camera_pose.rotation_matrix()
        ends = ends_cam @ R.T + obs.camera_pose.t
        origin = obs.camera_pose.t
        has_hit = ~over

        workers = thread_cap() if workers is None else max(1, int(workers))
        if workers == 1 or len(vv) < 4096:
            shards = [self._trace_shard(origin, ends, has_hit, ids)]
        else:
            bounds = np.linspace(0, len(vv), workers + 1).astype(int)
            chunks = [(origin, ends[a:b], has_hit[a:b], ids[a:b])
                      for a, b in zip(bounds[:-1], bounds[1:]) if b > a]
            with ThreadPoolExecutor(max_workers=workers) as pool:
                shards = list(pool.map(lambda c: self._trace_shard(*c), chunks))

        free_parts = [s[0] for s in shards]
        free_keys = (np.concatenate(free_parts) if free_parts
                     else np.empty(0, dtype=np.int64))
        if len(free_keys):
            keys, counts = np.unique(free_keys, return_counts=True)
            self.free_map.bulk_add(keys, counts * self.l_miss)
        hit_keys = np.concatenate([s[1] for s in shards])
        hit_ids = np.concatenate([s[2] for s in shards])
        for inst in np.unique(hit_ids):
            sel = hit_keys[hit_ids == inst]
            keys, counts = np.unique(sel, return_counts=True)
            self._map_for(int(inst)).bulk_add(keys, counts * self.l_hit)
        return self

    def _trace_shard(self, origin, ends, has_hit, ids):
        """Ray-trace one batch of pixels. Returns (free leaf keys with one
        entry per ray crossing, hit keys, hit instance ids)."""
        seg = ends - origin[None, :]

        # clip [origin, end] to the workspace (slab method), t in [0, 1]
        with np.errstate(divide="ignore", invalid="ignore"):
            inv = 1.0 / seg
        t_lo = (self.bounds_min[None, :] - origin[None, :]) * inv
        t_hi = (self.bounds_max[None, :] - origin[None, :]) * inv
        par = seg == 0.0
        inside_par = ((origin[None, :] >= self.bounds_min) &
                      (origin[None, :] <= self.bounds_max))
        t_near = np.where(par, np.where(inside_par, -np.inf, np.inf), np.minimum(t_lo, t_hi))
        t_far = np.where(par, np.where(inside_par, np.inf, -np.inf), np.maximum(t_lo, t_hi))
        t0 = np.clip(t_near.max(axis=1), 0.0, 1.0)
        t1 = np.clip(t_far.min(axis=1), 0.0, 1.0)
        alive = (t1 > t0) & (np.linalg.norm(seg, axis=1) > 0)

        end_idx = self.leaf_index(ends)
        end_in = self.index_in_bounds(end_idx)
        hit_mask = has_hit & end_in
        hit_keys = self.pack(end_idx[hit_mask])
        hit_ids = ids[hit_mask]

        n = len(ends)
        start = origin[None, :] + t0[:, None] * seg
        cur = np.clip(self.leaf_index(start), 0, self.dims - 1)
        step = np.sign(seg).astype(np.int64)
        with np.errstate(divide="ignore"):
            tdelta = np.where(seg != 0.0, self.leaf_size / np.abs(seg), np.inf)
        next_bound = (self.bounds_min[None, :]
                      + (cur + (step > 0)) * self.leaf_size)
        with np.errstate(divide="ignore", invalid="ignore"):
            tmax = np.where(seg != 0.0, (next_bound - origin[None, :]) / seg, np.inf)

        # endpoint cell is excluded; rays clipped by the workspace stop at t1
        end_cell = np.where(end_in[:, None], end_idx, np.full_like(end_idx, -9))
        entry_t = t0.copy()
        free_chunks = []
        max_steps = int(np.sum(self.dims) + 3)
        for _ in range(max_steps):
            at_end = np.all(cur == end_cell, axis=1)
            past = entry_t >= t1 - 1e-15
            alive &= ~(at_end | past)
            if not np.any(alive):
                break
            free_chunks.append(self.pack(cur[alive]))
            axis = np.argmin(tmax, axis=1)
            rows = np.nonzero(alive)[0]
            ax = axis[rows]
            entry_t[rows] = tmax[rows, ax]
            cur[rows, ax] += step[rows, ax]
            tmax[rows, ax] += tdelta[rows, ax]
        free_keys = (np.concatenate(free_chunks) if free_chunks
                     else np.empty(0, dtype=np.int64))
        return free_keys, hit_keys, hit_ids

    # -- queries -------------------------------------------------------------

    def occupied_owners(self):
        """Occupied leaves resolved to a single owner per leaf: the
        instance with the highest cumulative log-odds, ties to the lower
        id. Returns (keys, owner ids, log-odds)."""
        parts = []
        for inst in sorted(self.instance_maps):
            keys, vals = self.instance_maps[inst].arrays()
            occ = vals > 0.0
            if np.any(occ):
                parts.append((keys[occ], vals[occ],
                              np.full(int(occ.sum()), inst, dtype=np.int64)))
        if not parts:
            return (np.empty(0, dtype=np.int64), np.empty(0, dtype=np.int64),
                    np.empty(0))
        keys = np.concatenate([p[0] for p in parts])
        vals = np.concatenate([p[1] for p in parts])
        ids = np.concatenate([p[2] for p in parts])
        order = np.lexsort((ids, -vals, keys))
        keys, vals, ids = keys[order], vals[order], ids[order]
        first = np.ones(len(keys), dtype=bool)
        first[1:] = keys[1:] != keys[:-1]
        return keys[first], ids[first], vals[first]

    def query_occupancy(self, point):
        """State of the leaf containing the point:
        ("occupied", instance_id), ("free", None) or ("unknown", None)."""
        idx = self.leaf_index(np.asarray(point, dtype=np.float64))[0]
        if not self.index_in_bounds(idx):
            return ("unknown", None)
        key = int(self.pack(idx[None, :])[0])
        best_id, best_val = None, 0.0
        for inst in sorted(self.instance_maps):
            v = self.instance_maps[inst].cells.get(key)
            if v is not None and v > 0.0 and v > best_val:
                best_id, best_val = inst, v
        if best_id is not None:
            return ("occupied", best_id)
        v = self.free_map.cells.get(key)
        if v is not None and v < 0.0:
            return ("free", None)
        return ("unknown", None)

    # -- surrounding grid extraction ------------------------------------------

    def extract_grids(self, target_id: int, model, dim: int = 32) -> SurroundGrids:
        """Four-state surrounding grid for a target instance, centered at
        the centroid of its occupied leaves, with voxel size
        model.diagonal / dim. Cell states are resolved with priority
        self > other > free > unknown over the leaves each cell overlaps."""
        keys, owners, _ = self.occupied_owners()
        tgt = keys[owners == target_id]
        if len(tgt) == 0:
            raise ValueError(f"instance {target_id} has no occupied leaves")
        centroid = self.leaf_centers(tgt).mean(axis=0)
        s = float(model.diagonal) / dim
        origin = centroid - 0.5 * dim * s

        state = np.full((dim, dim, dim), 3, dtype=np.uint8)  # unknown
        fkeys, fvals = self.free_map.arrays()
        self._paint(state, fkeys[fvals < 0.0], origin, s, dim, 2)
        self._paint(state, keys[owners != target_id], origin, s, dim, 1)
        self._paint(state, tgt, origin, s, dim, 0)
        return SurroundGrids(origin=origin, voxel_size=s, dim=dim,
                             g_self=state == 0, g_other=state == 1,
                             g_free=state == 2, g_unknown=state == 3)

    def _paint(self, state: np.ndarray, keys: np.ndarray, origin, s: float,
               dim: int, value: int) -> None:
        """Set state[c] = value for every grid cell whose volume overlaps
        any of the given leaves (half-open boxes on both sides)."""
        if len(keys) == 0:
            return
        idx = self.unpack(keys)
        leaf_min = self.bounds_min + idx * self.leaf_size
        leaf_max = leaf_min + self.leaf_size
        grid_max = origin + dim * s
        near = np.all((leaf_min < grid_max) & (leaf_max > origin), axis=1)
        if not np.any(near):
            return
        leaf_min, leaf_max = leaf_min[near], leaf_max[near]
        c_lo = np.floor((leaf_min - origin) / s).astype(np.int64)
        c_hi = (np.ceil((leaf_max - origin) / s) - 1).astype(np.int64)
        c_lo = np.maximum(c_lo, 0)
        c_hi = np.minimum(c_hi, dim - 1)
        span = c_hi - c_lo + 1
        ok = np.all(span > 0, axis=1)
        if not np.any(ok):
            return
        c_lo, c_hi = c_lo[ok], c_hi[ok]
        smax = int((c_hi - c_lo).max()) + 1
        offs = np.arange(smax)
        cand = c_lo[:, None, :] + offs[None, :, None]
        valid = cand <= c_hi[:, None, :]
        cx = cand[:, :, 0][:, :, None, None]
        cy = cand[:, :, 1][:, None, :, None]
        cz = cand[:, :, 2][:, None, None, :]
        m = (valid[:, :, 0][:, :, None, None]
             & valid[:, :, 1][:, None, :, None]
             & valid[:, :, 2][:, None, None, :])
        flat = ((cx * dim + cy) * dim + cz)
        cells = np.unique(np.broadcast_to(flat, m.shape)[m])
        state.reshape(-1)[cells] = value


def backproject(obs: FrameObservation, max_range: float = 10.0):
    """World-frame point cloud per instance id from one frame's valid
    depth pixels."""
    vv, uu = np.nonzero((obs.depth > 0))
    z = obs.depth[vv, uu]
    K = obs.intrinsics
    pts_cam = np.column_stack([(uu - K.cx) / K.fx * z, (vv - K.cy) / K.fy * z, z])
    keep = np.linalg.norm(pts_cam, axis=1) <= max_range
    pts_cam, vv, uu = pts_cam[keep], vv[keep], uu[keep]
    R = obs.camera_pose.rotation_matrix()
    pts = pts_cam @ R.T + obs.camera_pose.t
    ids = obs.instance_ids[vv, uu]
    return {int(i): pts[ids == i] for i in np.unique(ids)}


# ---------------------------------------------------------------------------
# Serialization

_MAP_MAGIC = b"CRMAP001"


def save_scene_map(scene_map: SceneMap, path) -> None:
    """Binary chunked map file: header with leaf size and bounds, then one
    leaf-list chunk per instance map (id -1 is the free-space map)."""
    chunks = [(-1, scene_map.free_map)]
    chunks += [(i, scene_map.instance_maps[i]) for i in sorted(scene_map.instance_maps)]
    with open(path, "wb") as f:
        f.write(_MAP_MAGIC)
        f.write(struct.pack("<d", scene_map.leaf_size))
        f.write(struct.pack("<3d", *scene_map.bounds_min))
        f.write(struct.pack("<3d", *scene_map.bounds_max))
        f.write(struct.pack("<3d", scene_map.l_hit, scene_map.l_miss, scene_map.clamp))
        f.write(struct.pack("<I", len(chunks)))
        for inst, vmap in chunks:
            keys, vals = vmap.arrays()
            order = np.argsort(keys)
            keys, vals = keys[order], vals[order]
            idx = scene_map.unpack(keys).astype("<i4")
            f.write(struct.pack("<iq", inst, len(keys)))
            rec = np.empty((len(keys), 3 + 2), dtype="<i4")
            rec[:, :3] = idx
            rec[:, 3:] = vals.astype("<f8").view("<i4").reshape(-1, 2)
            f.write(rec.tobytes())


def load_scene_map(path) -> SceneMap:
    with open(path, "rb") as f:
        data = f.read()
    if data[:8] != _MAP_MAGIC:
        raise ValueError(f"{path}: not a scene map file")
    off = 8
    leaf, = struct.unpack_from("<d", data, off); off += 8
    bmin = struct.unpack_from("<3d", data, off); off += 24
    bmax = struct.unpack_from("<3d", data, off); off += 24
    l_hit, l_miss, clamp = struct.unpack_from("<3d", data, off); off += 24
    n_chunks, = struct.unpack_from("<I", data, off); off += 4
    m = SceneMap(bmin, bmax, leaf_size=leaf, l_hit=l_hit, l_miss=l_miss, clamp=clamp)
    for _ in range(n_chunks):
        inst, count = struct.unpack_from("<iq", data, off); off += 12
        rec = np.frombuffer(data, dtype="<i4", count=count * 5, offset=off)
        off += count * 5 * 4
        rec = rec.reshape(count, 5)
        idx = rec[:, :3].astype(np.int64)
        vals = np.ascontiguousarray(rec[:, 3:]).view("<f8").ravel()
        keys = m.pack(idx)
        vmap = m.free_map if inst == -1 else m._map_for(inst)
        vmap.bulk_add(keys, vals)
    return m


def save_surround_grids(grids: SurroundGrids, path_bin, path_json) -> None:
    """Flat binary of four D^3 bitmasks (x-fastest bit order) plus a JSON
    sidecar with the grid frame."""
    blobs = []
    for g in (grids.g_self, grids.g_other, grids.g_free, grids.g_unknown):
        blobs.append(np.packbits(g.ravel(order="F")).tobytes())
    with open(path_bin, "wb") as f:
        for b in blobs:
            f.write(b)
    side = {"origin": [float(v) for v in grids.origin],
            "voxel_size": grids.voxel_size,
            "dim": grids.dim,
            "order": "x-fastest",
            "grids": ["self", "other", "free", "unknown"]}
    with open(path_json, "w") as f:
        json.dump(side, f, indent=2, sort_keys=True)
        f.write("\n")


def load_surround_grids(path_bin, path_json) -> SurroundGrids:
    with open(path_json) as f:
        side = json.load(f)
    dim = int(side["dim"])
    nbits = dim ** 3
    nbytes = (nbits + 7) // 8
    with open(path_bin, "rb") as f:
        raw = f.read()
    if len(raw) != 4 * nbytes:
        raise ValueError(f"{path_bin}: expected {4 * nbytes} bytes, got {len(raw)}")
    out = []
    for i in range(4):
        bits = np.unpackbits(np.frombuffer(raw, dtype=np.uint8,
                                           count=nbytes, offset=i * nbytes))
        out.append(bits[:nbits].astype(bool).reshape((dim,) * 3, order="F"))
    return SurroundGrids(origin=np.asarray(side["origin"], dtype=np.float64),
                         voxel_size=float(side["voxel_size"]), dim=dim,
                         g_self=out[0], g_other=out[1], g_free=out[2],
                         g_unknown=out[3])
