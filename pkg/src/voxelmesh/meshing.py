"""Triangle meshes, dual isosurface extraction and small mesh utilities."""
from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import TYPE_CHECKING

import numpy as np
import scipy.sparse as sp
from scipy.sparse.csgraph import connected_components

if TYPE_CHECKING:
    from .volume import DenseVolume

# Exactly-zero corner values are pushed to the positive side before extraction.
ZERO_NUDGE = 1e-8


@dataclass(frozen=True, eq=False)
class TriMesh:
    """Indexed triangle mesh with optional per-vertex color and normal textures.

    ``colors`` holds RGB in [0, 1]; ``normals`` holds the *normal texture*
    (unit vectors attached to vertices), which is not necessarily the
    geometric normal of the surface.
    """

    vertices: np.ndarray
    faces: np.ndarray
    colors: np.ndarray | None = None
    normals: np.ndarray | None = None

    def __post_init__(self):
        v = np.asarray(self.vertices, dtype=np.float64).reshape(-1, 3)
        f = np.asarray(self.faces, dtype=np.int64).reshape(-1, 3)
        if f.size and (f.min() < 0 or f.max() >= len(v)):
            raise ValueError("face index out of range")
        object.__setattr__(self, "vertices", v)
        object.__setattr__(self, "faces", f)
        for name in ("colors", "normals"):
            attr = getattr(self, name)
            if attr is None:
                continue
            attr = np.asarray(attr, dtype=np.float64).reshape(-1, 3)
            if len(attr) != len(v):
                raise ValueError(f"{name} has {len(attr)} entries for {len(v)} vertices")
            object.__setattr__(self, name, attr)

    @property
    def n_vertices(self) -> int:
        return len(self.vertices)

    @property
    def n_faces(self) -> int:
        return len(self.faces)

    @property
    def is_empty(self) -> bool:
        return self.n_faces == 0

    def copy_with(self, **changes) -> "TriMesh":
        return replace(self, **changes)

    def transformed(self, matrix: np.ndarray) -> "TriMesh":
        """Apply a 4x4 similarity transform to positions (and rotate normals)."""
        matrix = np.asarray(matrix, dtype=np.float64)
        lin = matrix[:3, :3]
        verts = self.vertices @ lin.T + matrix[:3, 3]
        normals = self.normals
        if normals is not None:
            normals = normals @ lin.T
            normals = normals / np.maximum(np.linalg.norm(normals, axis=1, keepdims=True), 1e-300)
        return replace(self, vertices=verts, normals=normals)

    def flipped(self) -> "TriMesh":
        return replace(self, faces=self.faces[:, ::-1].copy())

    def bounds(self) -> tuple[np.ndarray, np.ndarray]:
        return self.vertices.min(axis=0), self.vertices.max(axis=0)

    def face_vectors(self) -> np.ndarray:
        """Unnormalized face normals (length = twice the triangle area)."""
        tri = self.vertices[self.faces]
        return np.cross(tri[:, 1] - tri[:, 0], tri[:, 2] - tri[:, 0])

    def face_areas(self) -> np.ndarray:
        return 0.5 * np.linalg.norm(self.face_vectors(), axis=1)

    def edges(self) -> tuple[np.ndarray, np.ndarray]:
        """Unique undirected edges and how many faces use each one."""
        e = np.sort(self.faces[:, [0, 1, 1, 2, 2, 0]].reshape(-1, 2), axis=1)
        uniq, counts = np.unique(e, axis=0, return_counts=True)
        return uniq, counts

    def open_edge_count(self) -> int:
        if self.is_empty:
            return 0
        _, counts = self.edges()
        return int(np.count_nonzero(counts != 2))

    def is_closed(self) -> bool:
        return not self.is_empty and self.open_edge_count() == 0

    def euler_characteristic(self) -> int:
        used = np.unique(self.faces)
        return int(len(used) - len(self.edges()[0]) + self.n_faces)

    def signed_volume(self) -> float:
        tri = self.vertices[self.faces]
        return float(np.einsum("ij,ij->i", tri[:, 0], np.cross(tri[:, 1], tri[:, 2])).sum() / 6.0)


def edge_vertex(sdf_a: float, sdf_b: float, pos_a, pos_b):
    """Zero crossing on the segment ``pos_a -> pos_b`` by linear interpolation.

    Returns ``(position, d_position/d_sdf_a, d_position/d_sdf_b)``.
    """
    if not sdf_a * sdf_b < 0:
        raise ValueError(f"edge_vertex needs a sign change, got {sdf_a} and {sdf_b}")
    pos, da, db = _edge_crossings(
        np.array([sdf_a], float), np.array([sdf_b], float),
        np.asarray(pos_a, float)[None], np.asarray(pos_b, float)[None],
    )
    return pos[0], da[0], db[0]


def _edge_crossings(a, b, pa, pb):
    denom = a - b
    t = a / denom
    d = pb - pa
    pos = pa + t[:, None] * d
    dt_da = -b / denom**2
    dt_db = a / denom**2
    return pos, dt_da[:, None] * d, dt_db[:, None] * d


def _build_patch_tables():
    """Marching-cubes patch of each cell edge for all 256 corner sign configurations.

    Edge ``4a + 2p + q`` runs along axis ``a`` with coordinates ``p`` and ``q``
    on axes ``(a+1)%3`` and ``(a+2)%3``. On a face with four crossings the
    inside corners are cut off separately; the rule depends only on the face,
    so neighboring cells agree.
    """
    def corner(x):
        return (x[0] << 2) | (x[1] << 1) | x[2]

    edges = []
    for a in range(3):
        for p in (0, 1):
            for q in (0, 1):
                lo = [0, 0, 0]
                lo[(a + 1) % 3], lo[(a + 2) % 3] = p, q
                hi = list(lo)
                hi[a] = 1
                edges.append((corner(lo), corner(hi), a, p, q))
    faces = []
    for a in range(3):
        for s in (0, 1):
            on = []
            for e, (_, _, b, p, q) in enumerate(edges):
                if b == a:
                    continue
                if ((b + 1) % 3 == a and p == s) or ((b + 2) % 3 == a and q == s):
                    on.append(e)
            faces.append(on)

    comp = np.full((256, 12), -1, dtype=np.int64)
    count = np.zeros(256, dtype=np.int64)
    for cfg in range(256):
        ins = [(cfg >> k) & 1 for k in range(8)]
        crossing = [ins[c0] != ins[c1] for c0, c1, *_ in edges]
        parent = list(range(12))

        def find(i):
            while parent[i] != i:
                parent[i] = parent[parent[i]]
                i = parent[i]
            return i

        for on in faces:
            cx = [e for e in on if crossing[e]]
            if len(cx) == 2:
                parent[find(cx[0])] = find(cx[1])
            elif len(cx) == 4:
                for c in {edges[e][0] for e in on} | {edges[e][1] for e in on}:
                    if ins[c]:
                        pair = [e for e in cx if c in edges[e][:2]]
                        parent[find(pair[0])] = find(pair[1])
        roots = {}
        for e in range(12):
            if crossing[e]:
                comp[cfg, e] = roots.setdefault(find(e), len(roots))
        count[cfg] = len(roots)
    return comp, count


_PATCH_OF_EDGE, _PATCH_COUNT = _build_patch_tables()


def _sample_positions(spec, shape):
    axes = [spec.lo[a] + (np.arange(shape[a]) + 0.5) * spec.voxel_size[a] for a in range(3)]
    return axes


def extract_mesh(sdf: "DenseVolume", iso: float = 0.0, return_jacobian: bool = False):
    """Dual contouring of ``sdf`` at level ``iso`` (Surface Nets with per-patch vertices).

    Samples live at voxel centers. Every cell of the sample lattice that
    straddles the level set gets one vertex per marching-cubes patch (the
    mean of that patch's edge crossings; a single vertex in the common case),
    and one quad is emitted per sign-changing lattice edge, split along its
    shorter diagonal. Outward orientation points towards increasing values.

    With ``return_jacobian`` the result is ``(mesh, J)`` where ``J`` is a
    sparse ``(3 * n_vertices, n_samples)`` matrix of d(vertex coords)/d(sample
    values), columns indexing ``sdf.values.ravel()``.
    """
    vals = np.asarray(sdf.values, dtype=np.float64) - iso
    vals = np.where(vals == 0.0, ZERO_NUDGE, vals)
    shape = vals.shape
    n_samples = vals.size
    axes = _sample_positions(sdf.spec, shape)
    inside = vals < 0
    cell_shape = tuple(s - 1 for s in shape)

    empty = TriMesh(np.zeros((0, 3)), np.zeros((0, 3), np.int64))
    if min(cell_shape) < 1 or inside.all() or not inside.any():
        return (empty, sp.csr_matrix((0, n_samples))) if return_jacobian else empty

    # Gather crossings per axis.
    cross_idx, cross_pos, cross_da, cross_db, cross_ia, cross_ib, cross_axis, cross_lower_inside = (
        [], [], [], [], [], [], [], []
    )
    for axis in range(3):
        lo_sl = [slice(None)] * 3
        hi_sl = [slice(None)] * 3
        lo_sl[axis] = slice(0, -1)
        hi_sl[axis] = slice(1, None)
        mask = inside[tuple(lo_sl)] != inside[tuple(hi_sl)]
        idx = np.argwhere(mask)
        if len(idx) == 0:
            continue
        idx_b = idx.copy()
        idx_b[:, axis] += 1
        a = vals[tuple(idx.T)]
        b = vals[tuple(idx_b.T)]
        pa = np.stack([axes[k][idx[:, k]] for k in range(3)], axis=1)
        pb = np.stack([axes[k][idx_b[:, k]] for k in range(3)], axis=1)
        pos, da, db = _edge_crossings(a, b, pa, pb)
        cross_idx.append(idx)
        cross_pos.append(pos)
        cross_da.append(da)
        cross_db.append(db)
        cross_ia.append(np.ravel_multi_index(tuple(idx.T), shape))
        cross_ib.append(np.ravel_multi_index(tuple(idx_b.T), shape))
        cross_axis.append(np.full(len(idx), axis))
        cross_lower_inside.append(a < 0)

    idx = np.concatenate(cross_idx)
    pos = np.concatenate(cross_pos)
    da = np.concatenate(cross_da)
    db = np.concatenate(cross_db)
    ia = np.concatenate(cross_ia)
    ib = np.concatenate(cross_ib)
    axis_of = np.concatenate(cross_axis)
    lower_inside = np.concatenate(cross_lower_inside)

    # Corner sign configuration of every cell; bit k is corner (k>>2, k>>1 & 1, k & 1).
    cfg = np.zeros(cell_shape, dtype=np.int64)
    for k in range(8):
        kx, ky, kz = (k >> 2) & 1, (k >> 1) & 1, k & 1
        sub = inside[kx:kx + cell_shape[0], ky:ky + cell_shape[1], kz:kz + cell_shape[2]]
        cfg |= sub.astype(np.int64) << k
    cfg = cfg.ravel()
    n_patch = _PATCH_COUNT[cfg]
    base = np.cumsum(n_patch) - n_patch

    def vertex_of(edge_idx, axes_of, du, dv):
        """Vertex of the cell at offset (du, dv) from each crossing edge, -1 if off-grid."""
        cell = edge_idx.copy()
        for axis in range(3):
            sel = axes_of == axis
            u, v = (axis + 1) % 3, (axis + 2) % 3
            cell[sel, u] += du
            cell[sel, v] += dv
        ok = np.all((cell >= 0) & (cell < np.array(cell_shape)), axis=1)
        out = np.full(len(edge_idx), -1, dtype=np.int64)
        cid = np.ravel_multi_index(tuple(cell[ok].T), cell_shape)
        local = 4 * axes_of[ok] + 2 * (-du) + (-dv)
        out[ok] = base[cid] + _PATCH_OF_EDGE[cfg[cid], local]
        return out

    # Each crossing edge touches up to four cells: offsets -1/0 on the two other axes.
    inc_cross, inc_vid = [], []
    for du in (-1, 0):
        for dv in (-1, 0):
            vid = vertex_of(idx, axis_of, du, dv)
            ok = vid >= 0
            inc_cross.append(np.nonzero(ok)[0])
            inc_vid.append(vid[ok])
    inc_cross = np.concatenate(inc_cross)
    inc_vid = np.concatenate(inc_vid)

    n_verts = int(n_patch.sum())
    counts = np.bincount(inc_vid, minlength=n_verts).astype(np.float64)
    sums = np.zeros((n_verts, 3))
    np.add.at(sums, inc_vid, pos[inc_cross])
    verts = sums / counts[:, None]

    # Quads around interior crossing edges.
    quads, quad_flip = [], []
    for axis in range(3):
        sel = np.nonzero(axis_of == axis)[0]
        e = idx[sel]
        u, v = (axis + 1) % 3, (axis + 2) % 3
        ok = (e[:, u] >= 1) & (e[:, u] <= shape[u] - 2) & (e[:, v] >= 1) & (e[:, v] <= shape[v] - 2)
        e = e[ok]
        sel = sel[ok]
        ax = np.full(len(e), axis)
        ring = [vertex_of(e, ax, du, dv) for du, dv in ((-1, -1), (0, -1), (0, 0), (-1, 0))]
        quads.append(np.stack(ring, axis=1))
        quad_flip.append(~lower_inside[sel])
    quads = np.concatenate(quads)
    flip = np.concatenate(quad_flip)
    quads[flip] = quads[flip][:, ::-1]

    d02 = np.linalg.norm(verts[quads[:, 0]] - verts[quads[:, 2]], axis=1)
    d13 = np.linalg.norm(verts[quads[:, 1]] - verts[quads[:, 3]], axis=1)
    short02 = d02 <= d13
    tris = np.concatenate([
        quads[short02][:, [0, 1, 2]], quads[short02][:, [0, 2, 3]],
        quads[~short02][:, [0, 1, 3]], quads[~short02][:, [1, 2, 3]],
    ])

    # Cleanup: degenerate triangles, then unreferenced vertices.
    tri_pts = verts[tris]
    area2 = np.linalg.norm(np.cross(tri_pts[:, 1] - tri_pts[:, 0], tri_pts[:, 2] - tri_pts[:, 0]), axis=1)
    tiny = 1e-12 * float(np.max(sdf.spec.voxel_size)) ** 2
    tris = tris[area2 > tiny]
    used = np.unique(tris)
    remap = np.full(len(verts), -1, dtype=np.int64)
    remap[used] = np.arange(len(used))
    tris, source = _split_pinched_edges(remap[tris], len(used))
    mesh = TriMesh(verts[used][source], tris)
    if not return_jacobian:
        return mesh

    vert_of_inc = remap[inc_vid]
    keep = vert_of_inc >= 0
    vert_of_inc = vert_of_inc[keep]
    c = inc_cross[keep]
    w = 1.0 / counts[inc_vid[keep]]
    rows = (3 * vert_of_inc[:, None] + np.arange(3)).ravel()
    rows = np.concatenate([rows, rows])
    cols = np.concatenate([np.repeat(ia[c], 3), np.repeat(ib[c], 3)])
    data = np.concatenate([(da[c] * w[:, None]).ravel(), (db[c] * w[:, None]).ravel()])
    jac = sp.csr_matrix((data, (rows, cols)), shape=(3 * len(used), n_samples))
    jac = jac[(3 * source[:, None] + np.arange(3)).ravel()]
    return mesh, jac


def vertex_fans(faces, n_vertices: int):
    """Group the face corners around each vertex into edge-connected fans.

    Corners ``(f, k)`` of one vertex are linked when their faces share an
    edge through that vertex that has exactly two faces. Returns a fan label
    per corner (shape ``(F, 3)``) and the number of fans per vertex.
    """
    faces = np.asarray(faces, np.int64)
    n_faces = len(faces)
    if n_faces == 0:
        return np.zeros((0, 3), np.int64), np.zeros(n_vertices, np.int64)
    k0 = np.tile(np.arange(3), n_faces)
    k1 = (k0 + 1) % 3
    f = np.repeat(np.arange(n_faces), 3)
    p, q = faces[f, k0], faces[f, k1]
    swap = p > q
    lo_k = np.where(swap, k1, k0)
    hi_k = np.where(swap, k0, k1)
    key = np.minimum(p, q) * np.int64(n_vertices) + np.maximum(p, q)
    order = np.argsort(key, kind="stable")
    ks = key[order]
    start = np.r_[True, ks[1:] != ks[:-1]]
    group_start = np.nonzero(start)[0]
    sizes = np.diff(np.r_[group_start, len(ks)])
    pairs = group_start[sizes == 2]
    a, b = order[pairs], order[pairs + 1]
    rows = np.concatenate([3 * f[a] + lo_k[a], 3 * f[a] + hi_k[a]])
    cols = np.concatenate([3 * f[b] + lo_k[b], 3 * f[b] + hi_k[b]])
    graph = sp.coo_matrix((np.ones(len(rows)), (rows, cols)), shape=(3 * n_faces, 3 * n_faces))
    _, labels = connected_components(graph, directed=False)
    labels = labels.reshape(n_faces, 3)
    pairs_vl = np.unique(np.stack([faces.ravel(), labels.ravel()], axis=1), axis=0)
    fans = np.bincount(pairs_vl[:, 0], minlength=n_vertices)
    return labels, fans


def _split_fans(tris, n_vertices):
    """Give every fan of a non-manifold vertex its own vertex. Returns (faces, source)."""
    labels, fans = vertex_fans(tris, n_vertices)
    if not np.any(fans > 1):
        return tris, np.arange(n_vertices)
    pairs, inv = np.unique(np.stack([tris.ravel(), labels.ravel()], axis=1), axis=0, return_inverse=True)
    unused = np.setdiff1d(np.arange(n_vertices), pairs[:, 0])
    if len(unused):
        raise ValueError("fan splitting expects every vertex to be referenced")
    return inv.reshape(tris.shape), pairs[:, 0]


def _split_pinched_edges(tris, n_vertices, max_rounds: int = 20):
    """Duplicate vertices so that no edge is shared by more than two faces.

    A tunnel crossing a cell face makes two surface sheets meet along one
    edge ``(a, b)``. The faces around ``a``, linked through their edges other
    than ``(a, b)``, then fall into separate fans; every fan after the first
    gets its own copy of ``a``. Returns the new faces and, for every output
    vertex, the index of the vertex it copies.
    """
    tris = tris.copy()
    source = list(range(n_vertices))
    for _ in range(max_rounds):
        e = np.sort(np.concatenate([tris[:, [0, 1]], tris[:, [1, 2]], tris[:, [2, 0]]]), axis=1)
        uniq, counts = np.unique(e, axis=0, return_counts=True)
        bad = uniq[counts > 2]
        if not len(bad):
            break
        touched = set()
        changed = False
        for a, b in bad:
            if a in touched or b in touched:
                continue
            faces = np.nonzero(np.any(tris == a, axis=1))[0]
            parent = {int(f): int(f) for f in faces}

            def find(f):
                while parent[f] != f:
                    parent[f] = parent[parent[f]]
                    f = parent[f]
                return f

            by_other = {}
            for f in faces:
                for x in tris[f]:
                    if x != a and x != b:
                        by_other.setdefault(int(x), []).append(int(f))
            for group in by_other.values():
                for f in group[1:]:
                    parent[find(f)] = find(group[0])
            fans = {}
            for f in faces:
                fans.setdefault(find(int(f)), []).append(int(f))
            if len(fans) < 2:
                continue
            for fan in list(fans.values())[1:]:
                sub = tris[fan]
                sub[sub == a] = len(source)
                tris[fan] = sub
                source.append(source[a])
            touched.update((int(a), int(b)))
            changed = True
        if not changed:
            break
    source = np.asarray(source, dtype=np.int64)
    tris, fan_source = _split_fans(tris, len(source))
    return tris, source[fan_source]


def vertex_normals(mesh: TriMesh, return_isolated: bool = False):
    """Area-weighted unit vertex normals; vertices without faces get zeros."""
    fv = mesh.face_vectors()
    acc = np.zeros((mesh.n_vertices, 3))
    for k in range(3):
        np.add.at(acc, mesh.faces[:, k], fv)
    norm = np.linalg.norm(acc, axis=1)
    isolated = norm == 0
    normals = np.zeros_like(acc)
    normals[~isolated] = acc[~isolated] / norm[~isolated, None]
    if return_isolated:
        return normals, isolated
    return normals


def sample_surface(mesh: TriMesh, n: int, seed: int = 0, return_faces: bool = False):
    """Area-weighted uniform samples on the surface."""
    if mesh.is_empty:
        raise ValueError("cannot sample an empty mesh")
    areas = mesh.face_areas()
    total = areas.sum()
    if not total > 0:
        raise ValueError("cannot sample a mesh with zero surface area")
    rng = np.random.default_rng(seed)
    face = rng.choice(len(areas), size=n, p=areas / total)
    r1 = np.sqrt(rng.random(n))
    r2 = rng.random(n)
    tri = mesh.vertices[mesh.faces[face]]
    pts = ((1 - r1)[:, None] * tri[:, 0]
           + (r1 * (1 - r2))[:, None] * tri[:, 1]
           + (r1 * r2)[:, None] * tri[:, 2])
    if return_faces:
        return pts, face
    return pts


def normalize_unit_box(mesh: TriMesh) -> tuple[TriMesh, np.ndarray]:
    """Center the bounding box at the origin and scale its longest side to 1.

    Returns the normalized mesh and the 4x4 similarity that was applied.
    """
    if mesh.n_vertices == 0:
        raise ValueError("cannot normalize an empty mesh")
    lo, hi = mesh.bounds()
    extent = float(np.max(hi - lo))
    if extent <= 0:
        raise ValueError("mesh has zero extent")
    m = unit_box_transform(lo, hi)
    return mesh.transformed(m), m


def unit_box_transform(lo, hi) -> np.ndarray:
    lo = np.asarray(lo, float)
    hi = np.asarray(hi, float)
    s = 1.0 / float(np.max(hi - lo))
    center = 0.5 * (lo + hi)
    m = np.eye(4)
    m[:3, :3] *= s
    m[:3, 3] = -s * center
    return m


@dataclass
class MeshStats:
    n_vertices: int
    n_faces: int
    open_edges: int
    nonmanifold_edges: int
    euler: int
    nonmanifold_vertices: int = 0
    extra: dict = field(default_factory=dict)


def mesh_stats(mesh: TriMesh) -> MeshStats:
    if mesh.is_empty:
        return MeshStats(mesh.n_vertices, 0, 0, 0, 0)
    _, counts = mesh.edges()
    return MeshStats(
        mesh.n_vertices, mesh.n_faces,
        int(np.count_nonzero(counts == 1)), int(np.count_nonzero(counts > 2)),
        mesh.euler_characteristic(),
        int(np.count_nonzero(vertex_fans(mesh.faces, mesh.n_vertices)[1] > 1)),
    )
