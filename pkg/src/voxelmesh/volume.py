"""Dense and sparse regular-grid volumes.

Conventions:

* ``DenseVolume`` samples sit at voxel *centers*: voxel ``(i, j, k)`` lives at
  ``lo + (ijk + 0.5) * voxel_size``.
* ``SparseVoxelGrid`` features sit at voxel *corners*: coordinate ``c`` lives
  at ``lo + c * voxel_size``. A sparse voxel therefore stores the feature of
  its minimum corner, and trilinear lookups blend ``c .. c + 1``.

Signed distances are negative inside.
"""
from __future__ import annotations

import io
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.spatial import cKDTree

from .meshing import TriMesh

U32_MAX = 2**32 - 1
VXM_MAGIC = b"VXM1"
TAG_SCALAR, TAG_BINARY, TAG_FEATURE, TAG_SPARSE = 0, 1, 2, 3


@dataclass(frozen=True)
class GridSpec:
    resolution: int
    lo: tuple = (-1.0, -1.0, -1.0)
    hi: tuple = (1.0, 1.0, 1.0)

    def __post_init__(self):
        if int(self.resolution) != self.resolution or self.resolution < 2:
            raise ValueError(f"resolution must be an integer >= 2, got {self.resolution}")
        lo = tuple(float(x) for x in np.broadcast_to(self.lo, (3,)))
        hi = tuple(float(x) for x in np.broadcast_to(self.hi, (3,)))
        if not all(a < b for a, b in zip(lo, hi)):
            raise ValueError(f"bounds must satisfy lo < hi on every axis, got {lo} {hi}")
        object.__setattr__(self, "resolution", int(self.resolution))
        object.__setattr__(self, "lo", lo)
        object.__setattr__(self, "hi", hi)

    @classmethod
    def cube(cls, resolution: int, half_extent: float = 1.0, center=(0.0, 0.0, 0.0)) -> "GridSpec":
        c = np.asarray(center, float)
        return cls(resolution, tuple(c - half_extent), tuple(c + half_extent))

    @property
    def shape(self) -> tuple[int, int, int]:
        return (self.resolution,) * 3

    @property
    def extent(self) -> np.ndarray:
        return np.asarray(self.hi) - np.asarray(self.lo)

    @property
    def voxel_size(self) -> np.ndarray:
        return self.extent / self.resolution

    @property
    def voxel_diagonal(self) -> float:
        return float(np.linalg.norm(self.voxel_size))

    def centers(self) -> np.ndarray:
        """Voxel-center positions, shape ``(R, R, R, 3)``."""
        axes = [self.lo[a] + (np.arange(self.resolution) + 0.5) * self.voxel_size[a] for a in range(3)]
        return np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1)

    def corner_positions(self, coords) -> np.ndarray:
        return np.asarray(self.lo) + np.asarray(coords, float) * self.voxel_size

    def refined(self, factor: int) -> "GridSpec":
        return GridSpec(self.resolution * factor, self.lo, self.hi)

    def translated(self, offset) -> "GridSpec":
        off = np.asarray(offset, float)
        return GridSpec(self.resolution, tuple(np.asarray(self.lo) + off), tuple(np.asarray(self.hi) + off))

    def contains(self, points) -> np.ndarray:
        p = np.asarray(points, float)
        return np.all((p >= np.asarray(self.lo)) & (p <= np.asarray(self.hi)), axis=-1)


@dataclass(frozen=True, eq=False)
class DenseVolume:
    """Scalar (``(R, R, R)``) or feature (``(R, R, R, C)``) field at voxel centers."""

    spec: GridSpec
    values: np.ndarray

    def __post_init__(self):
        vals = np.asarray(self.values)
        if vals.shape[:3] != self.spec.shape or vals.ndim not in (3, 4):
            raise ValueError(f"values shape {vals.shape} does not match grid {self.spec.shape}")
        if vals.dtype.kind == "f" and not np.all(np.isfinite(vals)):
            raise ValueError("volume contains non-finite values")
        vals = vals.copy()
        vals.setflags(write=False)
        object.__setattr__(self, "values", vals)

    @property
    def is_binary(self) -> bool:
        return self.values.dtype == np.uint8 or self.values.dtype == bool

    @property
    def channels(self) -> int:
        return 1 if self.values.ndim == 3 else self.values.shape[3]


@dataclass(frozen=True, eq=False)
class SparseVoxelGrid:
    """Features stored only at listed integer coordinates (sorted, unique)."""

    spec: GridSpec
    coords: np.ndarray
    features: np.ndarray

    def __post_init__(self):
        coords = np.asarray(self.coords, dtype=np.int64).reshape(-1, 3)
        feats = np.asarray(self.features, dtype=np.float64)
        if feats.ndim != 2 or len(feats) != len(coords):
            raise ValueError(f"need one feature row per coordinate, got {feats.shape} for {len(coords)} coords")
        if len(coords) and (coords.min() < 0 or coords.max() >= self.spec.resolution):
            raise ValueError("sparse coordinates out of range")
        keys = _flat_keys(coords, self.spec.resolution)
        order = np.argsort(keys, kind="stable")
        keys = keys[order]
        if len(keys) > 1 and np.any(keys[1:] == keys[:-1]):
            raise ValueError("duplicate sparse coordinates")
        coords, feats = coords[order], feats[order]
        for arr in (coords, feats, keys):
            arr.setflags(write=False)
        object.__setattr__(self, "coords", coords)
        object.__setattr__(self, "features", feats)
        object.__setattr__(self, "_keys", keys)

    def __len__(self) -> int:
        return len(self.coords)

    @property
    def channels(self) -> int:
        return self.features.shape[1]

    def lookup(self, coords) -> np.ndarray:
        """Row index of each coordinate, or -1 where absent / out of range."""
        c = np.asarray(coords, dtype=np.int64)
        flat = c.reshape(-1, 3)
        ok = np.all((flat >= 0) & (flat < self.spec.resolution), axis=1)
        out = np.full(len(flat), -1, dtype=np.int64)
        if len(self._keys) and ok.any():
            k = _flat_keys(flat[ok], self.spec.resolution)
            pos = np.searchsorted(self._keys, k)
            pos_c = np.minimum(pos, len(self._keys) - 1)
            hit = self._keys[pos_c] == k
            sub = np.full(len(k), -1, dtype=np.int64)
            sub[hit] = pos_c[hit]
            out[ok] = sub
        return out.reshape(c.shape[:-1])

    def with_features(self, features) -> "SparseVoxelGrid":
        return SparseVoxelGrid(self.spec, self.coords, features)

    def positions(self) -> np.ndarray:
        return self.spec.corner_positions(self.coords)


def _flat_keys(coords, resolution):
    r = np.int64(resolution)
    return (coords[:, 0] * r + coords[:, 1]) * r + coords[:, 2]


# --------------------------------------------------------------------------
# Point / triangle distance


def closest_point_on_triangles(p, a, b, c):
    """Closest points on triangles ``(a, b, c)`` to ``p`` (all ``(N, 3)``)."""
    ab, ac, ap = b - a, c - a, p - a
    d1 = np.einsum("ij,ij->i", ab, ap)
    d2 = np.einsum("ij,ij->i", ac, ap)
    bp = p - b
    d3 = np.einsum("ij,ij->i", ab, bp)
    d4 = np.einsum("ij,ij->i", ac, bp)
    cp = p - c
    d5 = np.einsum("ij,ij->i", ab, cp)
    d6 = np.einsum("ij,ij->i", ac, cp)
    va = d3 * d6 - d5 * d4
    vb = d5 * d2 - d1 * d6
    vc = d1 * d4 - d3 * d2

    with np.errstate(divide="ignore", invalid="ignore"):
        denom = va + vb + vc
        v_in = vb / denom
        w_in = vc / denom
        out = a + v_in[:, None] * ab + w_in[:, None] * ac
        done = np.zeros(len(p), dtype=bool)

        def assign(mask, value):
            nonlocal done
            m = mask & ~done
            out[m] = value[m] if value.ndim == 2 else value
            done |= m

        assign((d1 <= 0) & (d2 <= 0), a)
        assign((d3 >= 0) & (d4 <= d3), b)
        assign((d6 >= 0) & (d5 <= d6), c)
        t_ab = d1 / (d1 - d3)
        assign((vc <= 0) & (d1 >= 0) & (d3 <= 0), a + t_ab[:, None] * ab)
        t_ac = d2 / (d2 - d6)
        assign((vb <= 0) & (d2 >= 0) & (d6 <= 0), a + t_ac[:, None] * ac)
        t_bc = (d4 - d3) / ((d4 - d3) + (d5 - d6))
        assign((va <= 0) & ((d4 - d3) >= 0) & ((d5 - d6) >= 0), b + t_bc[:, None] * (c - b))
    return out


def point_triangle_distance(p, a, b, c) -> np.ndarray:
    return np.linalg.norm(p - closest_point_on_triangles(p, a, b, c), axis=1)


def unsigned_distance(mesh: TriMesh, points, workers: int = 1, chunk: int = 2_000_000) -> np.ndarray:
    """Exact distance from each point to the nearest triangle.

    Candidates are pruned with a KD-tree over triangle centroids: a triangle
    whose centroid is farther than ``upper_bound + max_radius`` cannot be the
    closest one.
    """
    pts = np.asarray(points, float).reshape(-1, 3)
    tri = mesh.vertices[mesh.faces]
    centroids = tri.mean(axis=1)
    radius = np.max(np.linalg.norm(tri - centroids[:, None], axis=2), axis=1)
    r_max = float(radius.max())
    tree = cKDTree(centroids)

    k = min(8, len(centroids))
    _, nn = tree.query(pts, k=k, workers=workers)
    nn = nn.reshape(len(pts), k)
    pi = np.repeat(np.arange(len(pts)), k)
    ti = nn.ravel()
    d = point_triangle_distance(pts[pi], tri[ti, 0], tri[ti, 1], tri[ti, 2]).reshape(len(pts), k)
    best = d.min(axis=1)

    cands = tree.query_ball_point(pts, best + r_max + 1e-12, workers=workers, return_sorted=False)
    lens = np.fromiter((len(c) for c in cands), dtype=np.int64, count=len(cands))
    flat_t = np.fromiter((t for c in cands for t in c), dtype=np.int64, count=int(lens.sum()))
    flat_p = np.repeat(np.arange(len(pts)), lens)
    for s in range(0, len(flat_p), chunk):
        pp, tt = flat_p[s:s + chunk], flat_t[s:s + chunk]
        dd = point_triangle_distance(pts[pp], tri[tt, 0], tri[tt, 1], tri[tt, 2])
        np.minimum.at(best, pp, dd)
    return best


# Fixed, irrational-looking jitters keep rays away from edges and vertices.
_RAY_DIRECTIONS = np.array([
    [1.0, 0.1234567, 0.0456789],
    [-0.0712345, 1.0, 0.1523456],
    [0.1345678, -0.0634567, 1.0],
])


def _ray_hits(tri, pts, direction):
    """Number of triangles hit by the ray ``pts + t * direction``, t > 0."""
    d = direction / np.linalg.norm(direction)
    helper = np.array([0.0, 0.0, 1.0]) if abs(d[2]) < 0.9 else np.array([1.0, 0.0, 0.0])
    e1 = np.cross(d, helper)
    e1 /= np.linalg.norm(e1)
    e2 = np.cross(d, e1)
    basis = np.stack([e1, e2, d], axis=1)
    t3 = tri @ basis                  # (F, 3 verts, 3)
    p3 = pts @ basis

    lo2 = t3[..., :2].min(axis=(0, 1))
    hi2 = t3[..., :2].max(axis=(0, 1))
    n_bins = int(np.clip(2 * np.sqrt(len(tri)), 8, 256))
    cell = (hi2 - lo2) / n_bins + 1e-12

    tmin = np.floor((t3[..., :2].min(axis=1) - lo2) / cell).astype(np.int64).clip(0, n_bins - 1)
    tmax = np.floor((t3[..., :2].max(axis=1) - lo2) / cell).astype(np.int64).clip(0, n_bins - 1)
    nx = tmax[:, 0] - tmin[:, 0] + 1
    ny = tmax[:, 1] - tmin[:, 1] + 1
    per_tri = nx * ny
    tri_id = np.repeat(np.arange(len(tri)), per_tri)
    local = np.arange(per_tri.sum()) - np.repeat(np.cumsum(per_tri) - per_tri, per_tri)
    bx = tmin[tri_id, 0] + local % nx[tri_id]
    by = tmin[tri_id, 1] + local // nx[tri_id]
    bin_id = bx * n_bins + by
    order = np.argsort(bin_id, kind="stable")
    bin_sorted, tri_sorted = bin_id[order], tri_id[order]
    starts = np.searchsorted(bin_sorted, np.arange(n_bins * n_bins))
    ends = np.searchsorted(bin_sorted, np.arange(n_bins * n_bins), side="right")

    pq = np.floor((p3[:, :2] - lo2) / cell).astype(np.int64)
    inside_box = np.all((pq >= 0) & (pq < n_bins), axis=1)
    hits = np.zeros(len(pts), dtype=np.int64)
    pidx = np.nonzero(inside_box)[0]
    pb = pq[pidx, 0] * n_bins + pq[pidx, 1]
    cnt = ends[pb] - starts[pb]
    pair_p = np.repeat(pidx, cnt)
    offs = np.arange(cnt.sum()) - np.repeat(np.cumsum(cnt) - cnt, cnt)
    pair_t = tri_sorted[np.repeat(starts[pb], cnt) + offs]

    q = p3[pair_p]
    v = t3[pair_t]
    x0, y0 = v[:, 0, 0], v[:, 0, 1]
    ux, uy = v[:, 1, 0] - x0, v[:, 1, 1] - y0
    wx, wy = v[:, 2, 0] - x0, v[:, 2, 1] - y0
    det = ux * wy - uy * wx
    qx, qy = q[:, 0] - x0, q[:, 1] - y0
    with np.errstate(divide="ignore", invalid="ignore"):
        s = (qx * wy - qy * wx) / det
        t = (ux * qy - uy * qx) / det
    inside = (det != 0) & (s >= 0) & (t >= 0) & (s + t <= 1)
    depth = v[:, 0, 2] + s * (v[:, 1, 2] - v[:, 0, 2]) + t * (v[:, 2, 2] - v[:, 0, 2])
    hit = inside & (depth > q[:, 2])
    np.add.at(hits, pair_p[hit], 1)
    return hits


def inside_mask(mesh: TriMesh, points) -> np.ndarray:
    """Ray-parity inside test, majority vote over three jittered rays."""
    pts = np.asarray(points, float).reshape(-1, 3)
    tri = mesh.vertices[mesh.faces]
    votes = sum((_ray_hits(tri, pts, d) % 2) for d in _RAY_DIRECTIONS)
    return votes >= 2


def _check_closed(mesh: TriMesh):
    if mesh.is_empty:
        raise ValueError("mesh_to_sdf: mesh is empty")
    n_open = mesh.open_edge_count()
    if n_open:
        raise ValueError(f"mesh_to_sdf: mesh is not closed ({n_open} open edges)")


def sdf_at_points(mesh: TriMesh, points, workers: int = 1) -> np.ndarray:
    """Signed distance (negative inside) from a closed mesh at arbitrary points."""
    _check_closed(mesh)
    pts = np.asarray(points, float)
    flat = pts.reshape(-1, 3)
    dist = unsigned_distance(mesh, flat, workers=workers)
    sign = np.where(inside_mask(mesh, flat), -1.0, 1.0)
    return (sign * dist).reshape(pts.shape[:-1])


def mesh_to_sdf(mesh: TriMesh, spec: GridSpec, workers: int = 1) -> DenseVolume:
    """Sample the signed distance of a closed, oriented mesh at voxel centers."""
    _check_closed(mesh)
    lo, hi = mesh.bounds()
    if np.any(lo < np.asarray(spec.lo)) or np.any(hi > np.asarray(spec.hi)):
        raise ValueError("mesh_to_sdf: mesh does not fit inside the grid bounds")
    values = sdf_at_points(mesh, spec.centers(), workers=workers)
    return DenseVolume(spec, values)


def default_band(spec: GridSpec) -> float:
    return 1.5 * float(np.max(spec.voxel_size))


def occupancy_from_sdf(sdf: DenseVolume, band: float | None = None) -> DenseVolume:
    """Binary volume marking voxels with ``|sdf| <= band``."""
    if band is None:
        band = default_band(sdf.spec)
    if not band > 0:
        raise ValueError(f"band must be positive, got {band}")
    occ = (np.abs(sdf.values) <= band).astype(np.uint8)
    return DenseVolume(sdf.spec, occ)


def subdivide_occupied(occ: DenseVolume, factor: int, channels: int, token=None, seed: int = 0) -> SparseVoxelGrid:
    """Split every occupied coarse voxel into ``factor**3`` sparse children.

    All children start from the same feature ``token`` (seeded normal draw
    when not given).
    """
    if int(factor) != factor or factor < 2:
        raise ValueError(f"factor must be an integer >= 2, got {factor}")
    vals = np.asarray(occ.values)
    if vals.ndim != 3 or not np.all((vals == 0) | (vals == 1)):
        raise ValueError("subdivide_occupied expects a binary occupancy volume")
    fine_res = occ.spec.resolution * int(factor)
    if fine_res - 1 > U32_MAX:
        raise OverflowError(f"refined resolution {fine_res} overflows u32 coordinates")
    parents = np.argwhere(vals == 1)
    offs = np.stack(np.meshgrid(*[np.arange(factor)] * 3, indexing="ij"), -1).reshape(-1, 3)
    coords = (parents[:, None, :] * factor + offs[None]).reshape(-1, 3)
    if token is None:
        token = np.random.default_rng(seed).standard_normal(channels)
    token = np.asarray(token, float).reshape(-1)
    if token.shape != (channels,):
        raise ValueError(f"token width {token.shape} does not match channels={channels}")
    feats = np.broadcast_to(token, (len(coords), channels))
    return SparseVoxelGrid(occ.spec.refined(int(factor)), coords, feats)


# --------------------------------------------------------------------------
# Trilinear sampling


def _blend(corner_vals, t):
    """Blend corner values ``(N, 8, C)`` ordered by (dx, dy, dz) bits."""
    out = 0.0
    for n, (dx, dy, dz) in enumerate(_CORNERS):
        w = ((t[:, 0] if dx else 1 - t[:, 0])
             * (t[:, 1] if dy else 1 - t[:, 1])
             * (t[:, 2] if dz else 1 - t[:, 2]))
        out = out + w[:, None] * corner_vals[:, n]
    return out


_CORNERS = [(dx, dy, dz) for dx in (0, 1) for dy in (0, 1) for dz in (0, 1)]


def _corner_weights(t):
    w = np.empty((len(t), 8))
    for n, (dx, dy, dz) in enumerate(_CORNERS):
        w[:, n] = ((t[:, 0] if dx else 1 - t[:, 0])
                   * (t[:, 1] if dy else 1 - t[:, 1])
                   * (t[:, 2] if dz else 1 - t[:, 2]))
    return w


def trilinear_sample(grid, points, return_missing: bool = False):
    """Trilinearly interpolate a dense or sparse grid at world ``points``.

    Points outside the grid bounds raise ``ValueError``. For sparse grids,
    corners that are absent contribute zero; ``return_missing`` additionally
    returns a boolean mask of points that touched such a corner with nonzero
    weight.
    """
    pts = np.asarray(points, float)
    flat = pts.reshape(-1, 3)
    spec = grid.spec
    if not np.all(spec.contains(flat)):
        raise ValueError("trilinear_sample: point outside grid bounds")
    res = spec.resolution
    lo = np.asarray(spec.lo)
    h = spec.voxel_size

    if isinstance(grid, DenseVolume):
        g = np.clip((flat - lo) / h - 0.5, 0.0, res - 1)
        i0 = np.clip(np.floor(g).astype(np.int64), 0, res - 2)
        t = g - i0
        vals = np.asarray(grid.values, float)
        scalar = vals.ndim == 3
        if scalar:
            vals = vals[..., None]
        corner = np.stack([vals[i0[:, 0] + dx, i0[:, 1] + dy, i0[:, 2] + dz] for dx, dy, dz in _CORNERS], axis=1)
        out = _blend(corner, t)
        if scalar:
            out = out[:, 0]
        missing = np.zeros(len(flat), dtype=bool)
    else:
        g = (flat - lo) / h
        i0 = np.clip(np.floor(g).astype(np.int64), 0, res - 1)
        t = g - i0
        corners = i0[:, None, :] + np.array(_CORNERS)[None]
        rows = grid.lookup(corners)
        feats = grid.features
        corner = np.where((rows >= 0)[..., None], feats[np.maximum(rows, 0)], 0.0)
        out = _blend(corner, t)
        missing = np.any((rows < 0) & (_corner_weights(t) > 0), axis=1)

    out = out.reshape(pts.shape[:-1] + out.shape[1:])
    if return_missing:
        return out, missing.reshape(pts.shape[:-1])
    return out


# --------------------------------------------------------------------------
# VXM1 binary format


def _write_header(buf, spec, tag):
    buf.write(VXM_MAGIC)
    buf.write(struct.pack("<3I", *spec.shape))
    buf.write(struct.pack("<6f", *spec.lo, *spec.hi))
    buf.write(struct.pack("<B", tag))


def volume_to_bytes(vol) -> bytes:
    buf = io.BytesIO()
    if isinstance(vol, SparseVoxelGrid):
        _write_header(buf, vol.spec, TAG_SPARSE)
        buf.write(struct.pack("<II", vol.channels, len(vol)))
        buf.write(vol.coords.astype("<u4").tobytes())
        buf.write(vol.features.astype("<f4").tobytes())
        return buf.getvalue()
    vals = np.asarray(vol.values)
    if vol.is_binary:
        _write_header(buf, vol.spec, TAG_BINARY)
        buf.write(np.ascontiguousarray(vals.astype("<u1").transpose(2, 1, 0)).tobytes())
    elif vals.ndim == 3:
        _write_header(buf, vol.spec, TAG_SCALAR)
        buf.write(np.ascontiguousarray(vals.astype("<f4").transpose(2, 1, 0)).tobytes())
    else:
        _write_header(buf, vol.spec, TAG_FEATURE)
        buf.write(struct.pack("<I", vals.shape[3]))
        buf.write(np.ascontiguousarray(vals.astype("<f4").transpose(2, 1, 0, 3)).tobytes())
    return buf.getvalue()


def volume_from_bytes(data: bytes):
    if data[:4] != VXM_MAGIC:
        raise ValueError("not a VXM1 volume (bad magic)")
    res = struct.unpack_from("<3I", data, 4)
    bounds = struct.unpack_from("<6f", data, 16)
    (tag,) = struct.unpack_from("<B", data, 40)
    if len(set(res)) != 1:
        raise ValueError(f"only cubic grids are supported, got {res}")
    spec = GridSpec(res[0], bounds[:3], bounds[3:])
    off = 41
    n = res[0] ** 3
    if tag == TAG_SCALAR:
        vals = np.frombuffer(data, "<f4", n, off).reshape(res[::-1]).transpose(2, 1, 0)
        return DenseVolume(spec, vals.astype(np.float64))
    if tag == TAG_BINARY:
        vals = np.frombuffer(data, "<u1", n, off).reshape(res[::-1]).transpose(2, 1, 0)
        return DenseVolume(spec, vals.astype(np.uint8))
    if tag == TAG_FEATURE:
        (ch,) = struct.unpack_from("<I", data, off)
        vals = np.frombuffer(data, "<f4", n * ch, off + 4).reshape(res[::-1] + (ch,)).transpose(2, 1, 0, 3)
        return DenseVolume(spec, vals.astype(np.float64))
    if tag == TAG_SPARSE:
        ch, count = struct.unpack_from("<II", data, off)
        off += 8
        coords = np.frombuffer(data, "<u4", 3 * count, off).reshape(count, 3).astype(np.int64)
        off += 12 * count
        feats = np.frombuffer(data, "<f4", ch * count, off).reshape(count, ch).astype(np.float64)
        return SparseVoxelGrid(spec, coords, feats)
    raise ValueError(f"unknown VXM1 dtype tag {tag}")


def save_volume(vol, path) -> None:
    Path(path).write_bytes(volume_to_bytes(vol))


def load_volume(path):
    return volume_from_bytes(Path(path).read_bytes())
