"""Procedural watertight primitive meshes used by the synthetic scenes.

All primitives are centered so the origin is a sensible rotation center,
wound consistently (outward normals), and pass the watertightness check.
"""

from __future__ import annotations

import numpy as np

from .geometry import Mesh, make_object_model, ObjectModel

_BOX_FACES = np.array([
    [0, 2, 1], [0, 3, 2],  # -z
    [4, 5, 6], [4, 6, 7],  # +z
    [0, 1, 5], [0, 5, 4],  # -y
    [2, 3, 7], [2, 7, 6],  # +y
    [0, 4, 7], [0, 7, 3],  # -x
    [1, 2, 6], [1, 6, 5],  # +x
], dtype=np.int64)


def box_mesh(lx: float, ly: float, lz: float) -> Mesh:
    """Axis-aligned box centered at the origin."""
    hx, hy, hz = 0.5 * lx, 0.5 * ly, 0.5 * lz
    verts = np.array([
        [-hx, -hy, -hz], [hx, -hy, -hz], [hx, hy, -hz], [-hx, hy, -hz],
        [-hx, -hy, hz], [hx, -hy, hz], [hx, hy, hz], [-hx, hy, hz],
    ])
    return Mesh(verts, _BOX_FACES)


def cube_mesh(side: float) -> Mesh:
    return box_mesh(side, side, side)


def cylinder_mesh(radius: float, height: float, segments: int = 24) -> Mesh:
    """Cylinder along z, centered at the origin."""
    ang = 2.0 * np.pi * np.arange(segments) / segments
    ring = np.stack([radius * np.cos(ang), radius * np.sin(ang)], axis=1)
    hz = 0.5 * height
    verts = [np.array([0.0, 0.0, -hz]), np.array([0.0, 0.0, hz])]
    bot = []
    top = []
    for x, y in ring:
        bot.append(len(verts))
        verts.append(np.array([x, y, -hz]))
        top.append(len(verts))
        verts.append(np.array([x, y, hz]))
    faces = []
    for i in range(segments):
        j = (i + 1) % segments
        faces.append([0, bot[j], bot[i]])          # bottom cap, normal -z
        faces.append([1, top[i], top[j]])          # top cap, normal +z
        faces.append([bot[i], bot[j], top[j]])     # side
        faces.append([bot[i], top[j], top[i]])
    return Mesh(np.array(verts), np.array(faces, dtype=np.int64))


def lshape_mesh(width: float, height: float, depth: float,
                arm: float | None = None) -> Mesh:
    """L-shaped prism: an x-y L cross-section extruded along z, centered.

    The cross-section is the union of [0,width]x[0,arm] and
    [0,arm]x[0,height] with arm < width, height. Asymmetric by design.
    """
    if arm is None:
        arm = 0.4 * min(width, height)
    if not (0 < arm < width and arm < height):
        raise ValueError("arm must be smaller than width and height")
    poly = np.array([
        [0.0, 0.0], [width, 0.0], [width, arm],
        [arm, arm], [arm, height], [0.0, height],
    ])
    poly -= poly.mean(axis=0)  # center-ish; exact centroid not needed
    hz = 0.5 * depth
    n = len(poly)
    verts = np.concatenate([
        np.column_stack([poly, np.full(n, -hz)]),
        np.column_stack([poly, np.full(n, hz)]),
    ])
    # caps: triangle fan from vertex 0 stays inside this L
    faces = []
    for i in range(1, n - 1):
        faces.append([0, i + 1, i])            # bottom, normal -z
        faces.append([n, n + i, n + i + 1])    # top, normal +z
    for i in range(n):
        j = (i + 1) % n
        faces.append([i, j, n + j])
        faces.append([i, n + j, n + i])
    return Mesh(verts, np.array(faces, dtype=np.int64))


def bowl_mesh(radius: float, thickness: float | None = None,
              segments: int = 20, rings: int = 6) -> Mesh:
    """Hollow hemisphere opening upward, rim in the z=0 plane, centered
    on the rim circle's center."""
    if thickness is None:
        thickness = 0.15 * radius
    r_in = radius - thickness
    if r_in <= 0:
        raise ValueError("thickness must be smaller than radius")

    def shell(r):
        rows = []
        for k in range(rings):  # rim (z=0) down toward the pole, pole excluded
            phi = 0.5 * np.pi * k / rings
            z = -r * np.sin(phi)
            rr = r * np.cos(phi)
            ang = 2.0 * np.pi * np.arange(segments) / segments
            rows.append(np.column_stack([rr * np.cos(ang), rr * np.sin(ang),
                                         np.full(segments, z)]))
        return rows, np.array([0.0, 0.0, -r])

    out_rows, out_pole = shell(radius)
    in_rows, in_pole = shell(r_in)
    verts = []
    out_idx = []
    for row in out_rows:
        out_idx.append(list(range(len(verts), len(verts) + segments)))
        verts.extend(row)
    op = len(verts)
    verts.append(out_pole)
    in_idx = []
    for row in in_rows:
        in_idx.append(list(range(len(verts), len(verts) + segments)))
        verts.extend(row)
    ip = len(verts)
    verts.append(in_pole)

    faces = []
    for k in range(rings - 1):
        a, b = out_idx[k], out_idx[k + 1]
        for i in range(segments):
            j = (i + 1) % segments
            faces.append([a[i], a[j], b[j]])   # outer shell, normals outward
            faces.append([a[i], b[j], b[i]])
    last = out_idx[-1]
    for i in range(segments):
        j = (i + 1) % segments
        faces.append([last[i], last[j], op])
    for k in range(rings - 1):
        a, b = in_idx[k], in_idx[k + 1]
        for i in range(segments):
            j = (i + 1) % segments
            faces.append([a[j], a[i], b[j]])   # inner shell, normals inward
            faces.append([b[j], a[i], b[i]])
    last = in_idx[-1]
    for i in range(segments):
        j = (i + 1) % segments
        faces.append([last[j], last[i], ip])
    rim_out, rim_in = out_idx[0], in_idx[0]
    for i in range(segments):
        j = (i + 1) % segments
        faces.append([rim_out[j], rim_out[i], rim_in[i]])  # rim annulus, +z
        faces.append([rim_out[j], rim_in[i], rim_in[j]])
    return Mesh(np.array(verts), np.array(faces, dtype=np.int64))


# Continuous rotational symmetry about z for cylinder and bowl; the boxy
# shapes only have discrete symmetries and are treated as asymmetric.
_CATALOG = {
    "cube": (lambda p: cube_mesh(p.get("side", 0.08)), False),
    "box": (lambda p: box_mesh(p.get("lx", 0.10), p.get("ly", 0.06), p.get("lz", 0.05)), False),
    "cylinder": (lambda p: cylinder_mesh(p.get("radius", 0.035), p.get("height", 0.10),
                                         p.get("segments", 24)), True),
    "lshape": (lambda p: lshape_mesh(p.get("width", 0.10), p.get("height", 0.08),
                                     p.get("depth", 0.04), p.get("arm")), False),
    "bowl": (lambda p: bowl_mesh(p.get("radius", 0.06), p.get("thickness"),
                                 p.get("segments", 20), p.get("rings", 6)), True),
}


def primitive_names():
    return sorted(_CATALOG)


def make_primitive(kind: str, params: dict | None = None,
                   n_points: int = 5000, seed: int = 0) -> ObjectModel:
    """Build a named primitive as a sampled ObjectModel."""
    if kind not in _CATALOG:
        raise ValueError(f"unknown primitive {kind!r}; choose from {primitive_names()}")
    params = dict(params or {})
    builder, symmetric = _CATALOG[kind]
    mesh = builder(params)
    return make_object_model(mesh, n_points=n_points, seed=seed,
                             symmetric=symmetric, name=kind)
