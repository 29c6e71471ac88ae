"""Analytic closed meshes and SDFs used as fixtures."""
from __future__ import annotations

import numpy as np

from .meshing import TriMesh


def icosphere(subdivisions: int = 3, radius: float = 1.0, center=(0.0, 0.0, 0.0)) -> TriMesh:
    t = (1.0 + 5 ** 0.5) / 2.0
    verts = [
        (-1, t, 0), (1, t, 0), (-1, -t, 0), (1, -t, 0),
        (0, -1, t), (0, 1, t), (0, -1, -t), (0, 1, -t),
        (t, 0, -1), (t, 0, 1), (-t, 0, -1), (-t, 0, 1),
    ]
    faces = [
        (0, 11, 5), (0, 5, 1), (0, 1, 7), (0, 7, 10), (0, 10, 11),
        (1, 5, 9), (5, 11, 4), (11, 10, 2), (10, 7, 6), (7, 1, 8),
        (3, 9, 4), (3, 4, 2), (3, 2, 6), (3, 6, 8), (3, 8, 9),
        (4, 9, 5), (2, 4, 11), (6, 2, 10), (8, 6, 7), (9, 8, 1),
    ]
    v = np.array(verts, dtype=np.float64)
    v /= np.linalg.norm(v, axis=1, keepdims=True)
    f = np.array(faces, dtype=np.int64)
    for _ in range(subdivisions):
        edges = np.sort(f[:, [0, 1, 1, 2, 2, 0]].reshape(-1, 2), axis=1)
        uniq, inv = np.unique(edges, axis=0, return_inverse=True)
        mids = v[uniq[:, 0]] + v[uniq[:, 1]]
        mids /= np.linalg.norm(mids, axis=1, keepdims=True)
        m = (inv.reshape(-1) + len(v)).reshape(-1, 3)
        a, b, c = f[:, 0], f[:, 1], f[:, 2]
        ab, bc, ca = m[:, 0], m[:, 1], m[:, 2]
        f = np.concatenate([
            np.stack([a, ab, ca], 1), np.stack([b, bc, ab], 1),
            np.stack([c, ca, bc], 1), np.stack([ab, bc, ca], 1),
        ])
        v = np.concatenate([v, mids])
    return TriMesh(v * radius + np.asarray(center, float), f)


def box(half_extent=0.5, center=(0.0, 0.0, 0.0), divisions: int = 1) -> TriMesh:
    """Closed axis-aligned box, each side split into ``divisions``² quads."""
    he = np.broadcast_to(np.asarray(half_extent, float), (3,))
    n = int(divisions)
    grid = np.linspace(-1.0, 1.0, n + 1)
    all_v, all_f = [], []
    offset = 0
    for axis in range(3):
        for sign in (-1.0, 1.0):
            u_ax, v_ax = (axis + 1) % 3, (axis + 2) % 3
            uu, vv = np.meshgrid(grid, grid, indexing="ij")
            pts = np.zeros((n + 1, n + 1, 3))
            pts[..., axis] = sign
            pts[..., u_ax] = uu
            pts[..., v_ax] = vv
            ids = np.arange((n + 1) ** 2).reshape(n + 1, n + 1) + offset
            q0, q1 = ids[:-1, :-1].ravel(), ids[1:, :-1].ravel()
            q2, q3 = ids[1:, 1:].ravel(), ids[:-1, 1:].ravel()
            # u x v = +axis, so (q0,q1,q2) faces +axis; flip for the negative side.
            tris = np.concatenate([np.stack([q0, q1, q2], 1), np.stack([q0, q2, q3], 1)])
            if sign < 0:
                tris = tris[:, ::-1]
            all_v.append(pts.reshape(-1, 3))
            all_f.append(tris)
            offset += (n + 1) ** 2
    v = np.concatenate(all_v)
    f = np.concatenate(all_f)
    uniq, inv = np.unique(np.round(v, 9), axis=0, return_inverse=True)
    return TriMesh(uniq * he + np.asarray(center, float), inv.reshape(-1)[f])


def torus(major: float = 0.6, minor: float = 0.25, n_major: int = 48, n_minor: int = 24) -> TriMesh:
    """Torus around the z axis."""
    u = np.arange(n_major) * (2 * np.pi / n_major)
    v = np.arange(n_minor) * (2 * np.pi / n_minor)
    uu, vv = np.meshgrid(u, v, indexing="ij")
    x = (major + minor * np.cos(vv)) * np.cos(uu)
    y = (major + minor * np.cos(vv)) * np.sin(uu)
    z = minor * np.sin(vv)
    verts = np.stack([x, y, z], -1).reshape(-1, 3)
    i, j = np.meshgrid(np.arange(n_major), np.arange(n_minor), indexing="ij")
    i, j = i.ravel(), j.ravel()
    a = i * n_minor + j
    b = ((i + 1) % n_major) * n_minor + j
    c = ((i + 1) % n_major) * n_minor + (j + 1) % n_minor
    d = i * n_minor + (j + 1) % n_minor
    faces = np.concatenate([np.stack([a, b, c], 1), np.stack([a, c, d], 1)])
    return TriMesh(verts, faces)


def composite() -> TriMesh:
    """A sphere and a box, disjoint, so the union stays a valid closed mesh."""
    s = icosphere(3, radius=0.35, center=(-0.35, 0.0, 0.0))
    b = box((0.22, 0.3, 0.25), center=(0.4, 0.05, 0.0), divisions=4)
    return merge(s, b)


def merge(*meshes: TriMesh) -> TriMesh:
    verts, faces, off = [], [], 0
    for m in meshes:
        verts.append(m.vertices)
        faces.append(m.faces + off)
        off += m.n_vertices
    return TriMesh(np.concatenate(verts), np.concatenate(faces))


def plane_grid(n: int = 8, size: float = 1.0, z: float = 0.0) -> TriMesh:
    """Flat (n x n)-quad grid in the plane z = const, normals facing +z."""
    g = np.linspace(-size / 2, size / 2, n + 1)
    xx, yy = np.meshgrid(g, g, indexing="ij")
    verts = np.stack([xx, yy, np.full_like(xx, z)], -1).reshape(-1, 3)
    ids = np.arange((n + 1) ** 2).reshape(n + 1, n + 1)
    q0, q1 = ids[:-1, :-1].ravel(), ids[1:, :-1].ravel()
    q2, q3 = ids[1:, 1:].ravel(), ids[:-1, 1:].ravel()
    faces = np.concatenate([np.stack([q0, q1, q2], 1), np.stack([q0, q2, q3], 1)])
    return TriMesh(verts, faces)


def shape_by_name(name: str) -> TriMesh:
    if name == "sphere":
        return icosphere(4, radius=0.6)
    if name == "cube":
        return box(0.45, divisions=6)
    if name == "torus":
        return torus()
    if name == "composite":
        return composite()
    raise ValueError(f"unknown shape {name!r}; expected sphere, cube, torus or composite")


# Analytic signed distance functions (negative inside).

def sphere_sdf(points, radius=1.0, center=(0.0, 0.0, 0.0)):
    p = np.asarray(points, float) - np.asarray(center, float)
    return np.linalg.norm(p, axis=-1) - radius


def box_sdf(points, half_extent=0.5):
    q = np.abs(np.asarray(points, float)) - np.asarray(half_extent, float)
    outside = np.linalg.norm(np.maximum(q, 0.0), axis=-1)
    return outside + np.minimum(np.max(q, axis=-1), 0.0)


def torus_sdf(points, major=0.6, minor=0.25):
    p = np.asarray(points, float)
    q = np.stack([np.hypot(p[..., 0], p[..., 1]) - major, p[..., 2]], -1)
    return np.linalg.norm(q, axis=-1) - minor
