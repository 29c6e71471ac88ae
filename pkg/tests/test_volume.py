import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from voxelmesh.meshing import TriMesh
from voxelmesh.shapes import box, icosphere, plane_grid, sphere_sdf
from voxelmesh.volume import (
    DenseVolume,
    GridSpec,
    SparseVoxelGrid,
    default_band,
    load_volume,
    mesh_to_sdf,
    occupancy_from_sdf,
    save_volume,
    sdf_at_points,
    subdivide_occupied,
    trilinear_sample,
    unsigned_distance,
    volume_from_bytes,
    volume_to_bytes,
)

from conftest import brute_force_distance


@pytest.fixture(scope="module")
def sphere_sdf32():
    return mesh_to_sdf(icosphere(4), GridSpec.cube(32, 1.2))


class TestGridSpec:
    def test_rejects_small_resolution(self):
        with pytest.raises(ValueError):
            GridSpec(1)

    def test_rejects_inverted_bounds(self):
        with pytest.raises(ValueError):
            GridSpec(4, (0, 0, 0), (1, -1, 1))

    def test_voxel_size_uniform(self):
        g = GridSpec(8, (-1, -2, 0), (1, 2, 8))
        np.testing.assert_allclose(g.voxel_size, [0.25, 0.5, 1.0])

    def test_centers(self):
        c = GridSpec(4).centers()
        assert c.shape == (4, 4, 4, 3)
        np.testing.assert_allclose(c[0, 0, 0], [-0.75] * 3)


class TestMeshToSdf:
    def test_sphere_center(self, sphere_sdf32):
        spec = sphere_sdf32.spec
        c = spec.centers().reshape(-1, 3)
        i = np.argmin(np.linalg.norm(c, axis=1))
        assert abs(sphere_sdf32.values.reshape(-1)[i] + 1.0) <= spec.voxel_diagonal

    def test_cube_outside_point(self):
        d = sdf_at_points(box(0.5), np.array([[0.75, 0.0, 0.0]]))
        assert d[0] == pytest.approx(0.25, abs=1e-3)

    def test_matches_brute_force(self, sphere_sdf32):
        mesh = icosphere(4)
        rng = np.random.default_rng(1)
        flat = sphere_sdf32.values.reshape(-1)
        idx = rng.choice(flat.size, 150, replace=False)
        pts = sphere_sdf32.spec.centers().reshape(-1, 3)[idx]
        ref = brute_force_distance(pts, mesh.vertices, mesh.faces)
        np.testing.assert_allclose(np.abs(flat[idx]), ref, atol=1e-5)

    def test_sign_negative_inside(self, sphere_sdf32):
        c = sphere_sdf32.spec.centers()
        r = np.linalg.norm(c, axis=-1)
        v = sphere_sdf32.values
        assert np.all(v[r < 0.9] < 0)
        assert np.all(v[r > 1.05] > 0)

    def test_small_values_near_surface(self, sphere_sdf32):
        mesh = icosphere(4)
        eps = 0.05
        v = sphere_sdf32.values
        pts = sphere_sdf32.spec.centers()[np.abs(v) < eps]
        d = unsigned_distance(mesh, pts)
        assert np.all(d <= eps + sphere_sdf32.spec.voxel_diagonal)

    @pytest.mark.parametrize("mesh_fn", [lambda: icosphere(3, 0.7), lambda: box(0.45, divisions=3)])
    def test_single_sign_flip_along_ray(self, mesh_fn):
        mesh = mesh_fn()
        t = np.linspace(-1.0, 1.0, 401)
        direction = np.array([1.0, 0.37, -0.21])
        direction /= np.linalg.norm(direction)
        pts = t[:, None] * direction + np.array([0.0, 0.02, 0.01])
        s = np.sign(sdf_at_points(mesh, pts))
        # a ray through the center crosses the convex surface twice
        assert np.count_nonzero(np.diff(s) != 0) == 2
        assert s[0] > 0 and s[-1] > 0

    def test_open_mesh_error_names_count(self):
        mesh = plane_grid(2)
        with pytest.raises(ValueError, match=r"\d+ open edges"):
            mesh_to_sdf(mesh, GridSpec(8))

    def test_empty_mesh_error(self):
        empty = TriMesh(np.zeros((0, 3)), np.zeros((0, 3), dtype=np.int64))
        with pytest.raises(ValueError, match="empty"):
            mesh_to_sdf(empty, GridSpec(8))

    def test_mesh_must_fit(self):
        with pytest.raises(ValueError, match="fit"):
            mesh_to_sdf(icosphere(2, 2.0), GridSpec(8))


class TestOccupancy:
    def test_plane_slab(self):
        spec = GridSpec(32)
        z = spec.centers()[..., 2]
        occ = occupancy_from_sdf(DenseVolume(spec, z), 2 * spec.voxel_size[2])
        layers = np.nonzero(occ.values.any(axis=(0, 1)))[0]
        assert 0 < len(layers) <= 5
        assert occ.values[:, :, layers].all()

    def test_far_field_empty(self):
        spec = GridSpec(8)
        occ = occupancy_from_sdf(DenseVolume(spec, np.full(spec.shape, 10.0)), 0.1)
        assert not occ.values.any()

    def test_sphere_count_matches_threshold(self, sphere_sdf32):
        band = float(sphere_sdf32.spec.voxel_size[0])
        occ = occupancy_from_sdf(sphere_sdf32, band)
        assert occ.values.sum() == np.count_nonzero(np.abs(sphere_sdf32.values) <= band)

    def test_default_band(self):
        spec = GridSpec(10)
        assert default_band(spec) == pytest.approx(0.3)

    @pytest.mark.parametrize("band", [0.0, -1.0])
    def test_rejects_nonpositive_band(self, band):
        spec = GridSpec(4)
        with pytest.raises(ValueError):
            occupancy_from_sdf(DenseVolume(spec, np.zeros(spec.shape)), band)

    @settings(max_examples=30, deadline=None)
    @given(b1=st.floats(0.01, 1.0), b2=st.floats(0.01, 1.0))
    def test_band_monotone(self, b1, b2):
        lo, hi = sorted((b1, b2))
        spec = GridSpec(12)
        vol = DenseVolume(spec, sphere_sdf(spec.centers(), 0.6))
        a = occupancy_from_sdf(vol, lo).values.astype(bool)
        b = occupancy_from_sdf(vol, hi).values.astype(bool)
        assert np.all(~a | b)


class TestSubdivide:
    def test_counting(self):
        rng = np.random.default_rng(0)
        spec = GridSpec(16)
        occ = DenseVolume(spec, (rng.random(spec.shape) < 0.05).astype(np.uint8))
        grid = subdivide_occupied(occ, 4, 3)
        assert grid.spec.resolution == 64
        assert len(grid) == 64 * int(occ.values.sum())

    def test_single_corner_voxel(self):
        spec = GridSpec(4)
        vals = np.zeros(spec.shape, np.uint8)
        vals[0, 0, 0] = 1
        grid = subdivide_occupied(DenseVolume(spec, vals), 2, 2)
        expected = {(i, j, k) for i in (0, 1) for j in (0, 1) for k in (0, 1)}
        assert set(map(tuple, grid.coords.tolist())) == expected

    def test_parents_occupied_exhaustive(self):
        rng = np.random.default_rng(3)
        spec = GridSpec(8)
        vals = (rng.random(spec.shape) < 0.3).astype(np.uint8)
        grid = subdivide_occupied(DenseVolume(spec, vals), 4, 2)
        parents = grid.coords // 4
        assert np.all(vals[parents[:, 0], parents[:, 1], parents[:, 2]] == 1)

    def test_shared_token(self):
        spec = GridSpec(4)
        vals = np.ones(spec.shape, np.uint8)
        grid = subdivide_occupied(DenseVolume(spec, vals), 2, 5, seed=7)
        assert np.all(grid.features == grid.features[0])

    def test_extent_preserved(self):
        rng = np.random.default_rng(5)
        spec = GridSpec(6)
        vals = (rng.random(spec.shape) < 0.4).astype(np.uint8)
        grid = subdivide_occupied(DenseVolume(spec, vals), 3, 1)
        # every fine cell center falls in an occupied coarse voxel, and children tile each parent
        fine_centers = grid.spec.corner_positions(grid.coords + 0.5)
        parent = np.floor((fine_centers - np.asarray(spec.lo)) / spec.voxel_size).astype(int)
        assert np.all(vals[parent[:, 0], parent[:, 1], parent[:, 2]] == 1)
        assert len(grid) == 27 * vals.sum()

    @pytest.mark.parametrize("factor", [1, 0, 2.5])
    def test_bad_factor(self, factor):
        spec = GridSpec(4)
        with pytest.raises(ValueError):
            subdivide_occupied(DenseVolume(spec, np.ones(spec.shape, np.uint8)), factor, 1)

    def test_overflow(self):
        spec = GridSpec(2)
        with pytest.raises(OverflowError):
            subdivide_occupied(DenseVolume(spec, np.ones(spec.shape, np.uint8)), 2**32, 1)


def _loop_trilinear(corner_feats, t):
    """Eight-term formula written out explicitly."""
    tx, ty, tz = t
    out = 0.0
    for dx in (0, 1):
        for dy in (0, 1):
            for dz in (0, 1):
                wx = tx if dx else 1 - tx
                wy = ty if dy else 1 - ty
                wz = tz if dz else 1 - tz
                out = out + wx * wy * wz * corner_feats[(dx, dy, dz)]
    return out


class TestTrilinear:
    @pytest.fixture
    def full_sparse(self):
        spec = GridSpec(5)
        coords = np.stack(np.meshgrid(*[np.arange(5)] * 3, indexing="ij"), -1).reshape(-1, 3)
        feats = np.random.default_rng(0).normal(size=(len(coords), 4))
        return SparseVoxelGrid(spec, coords, feats)

    def test_corner_exact(self, full_sparse):
        c = np.array([2, 1, 3])
        out = trilinear_sample(full_sparse, full_sparse.spec.corner_positions(c)[None])
        np.testing.assert_allclose(out[0], full_sparse.features[full_sparse.lookup(c)])

    def test_cell_center_mean(self, full_sparse):
        base = np.array([1, 2, 0])
        out = trilinear_sample(full_sparse, full_sparse.spec.corner_positions(base + 0.5)[None])
        corners = base + np.array([[i, j, k] for i in (0, 1) for j in (0, 1) for k in (0, 1)])
        np.testing.assert_allclose(out[0], full_sparse.features[full_sparse.lookup(corners)].mean(0))

    def test_random_matches_formula(self, full_sparse):
        rng = np.random.default_rng(2)
        g = full_sparse.spec
        for _ in range(50):
            # corners span lo .. lo + (R - 1) h
            p = rng.uniform(g.lo[0], g.lo[0] + (g.resolution - 1) * g.voxel_size[0] - 1e-9, 3)
            c = (p - np.asarray(g.lo)) / g.voxel_size
            i0 = np.floor(c).astype(int)
            feats = {(dx, dy, dz): full_sparse.features[full_sparse.lookup(i0 + [dx, dy, dz])]
                     for dx in (0, 1) for dy in (0, 1) for dz in (0, 1)}
            np.testing.assert_allclose(trilinear_sample(full_sparse, p[None])[0],
                                       _loop_trilinear(feats, c - i0), atol=1e-6)

    def test_missing_corner_flagged(self):
        spec = GridSpec(4)
        grid = SparseVoxelGrid(spec, np.array([[1, 1, 1]]), np.ones((1, 2)))
        out, missing = trilinear_sample(grid, spec.corner_positions(np.array([[1.5, 1.5, 1.5]])),
                                        return_missing=True)
        assert missing[0]
        np.testing.assert_allclose(out[0], 0.125)

    def test_present_corner_not_flagged(self):
        spec = GridSpec(4)
        grid = SparseVoxelGrid(spec, np.array([[1, 1, 1]]), np.ones((1, 2)))
        _, missing = trilinear_sample(grid, spec.corner_positions(np.array([[1, 1, 1]])), return_missing=True)
        assert not missing[0]

    def test_out_of_bounds(self, full_sparse):
        with pytest.raises(ValueError):
            trilinear_sample(full_sparse, np.array([[2.0, 0.0, 0.0]]))

    @settings(max_examples=40, deadline=None)
    @given(coef=st.lists(st.floats(-3, 3), min_size=4, max_size=4),
           p=st.lists(st.floats(-0.74, 0.74), min_size=3, max_size=3))
    def test_dense_affine_exact(self, coef, p):
        spec = GridSpec(4)
        a = np.asarray(coef)
        vol = DenseVolume(spec, spec.centers() @ a[:3] + a[3])
        out = trilinear_sample(vol, np.asarray(p)[None])[0]
        assert out == pytest.approx(np.dot(a[:3], p) + a[3], abs=1e-9)

    @settings(max_examples=40, deadline=None)
    @given(coef=st.lists(st.floats(-3, 3), min_size=4, max_size=4),
           p=st.lists(st.floats(-1.0, 1.0), min_size=3, max_size=3))
    def test_sparse_affine_exact(self, coef, p):
        spec = GridSpec(4)
        coords = np.stack(np.meshgrid(*[np.arange(4)] * 3, indexing="ij"), -1).reshape(-1, 3)
        a = np.asarray(coef)
        grid = SparseVoxelGrid(spec, coords, (spec.corner_positions(coords) @ a[:3] + a[3])[:, None])
        p = np.minimum(np.asarray(p), 0.5 - 1e-9)  # stay inside the last stored cell
        out = trilinear_sample(grid, p[None])[0, 0]
        assert out == pytest.approx(np.dot(a[:3], p) + a[3], abs=1e-9)


class TestSparseGrid:
    def test_sorted_unique(self):
        spec = GridSpec(4)
        g = SparseVoxelGrid(spec, np.array([[3, 0, 0], [0, 1, 2], [0, 1, 0]]), np.arange(3.0)[:, None])
        assert g.coords.tolist() == [[0, 1, 0], [0, 1, 2], [3, 0, 0]]
        assert g.features[:, 0].tolist() == [2.0, 1.0, 0.0]

    def test_duplicates_rejected(self):
        with pytest.raises(ValueError, match="duplicate"):
            SparseVoxelGrid(GridSpec(4), np.array([[1, 1, 1], [1, 1, 1]]), np.zeros((2, 1)))

    def test_range_checked(self):
        with pytest.raises(ValueError, match="range"):
            SparseVoxelGrid(GridSpec(4), np.array([[4, 0, 0]]), np.zeros((1, 1)))

    def test_lookup_absent(self):
        g = SparseVoxelGrid(GridSpec(4), np.array([[1, 1, 1]]), np.zeros((1, 1)))
        assert g.lookup(np.array([[1, 1, 1], [0, 0, 0], [-1, 0, 0]])).tolist() == [0, -1, -1]


class TestVxm:
    @pytest.mark.parametrize("kind", ["scalar", "binary", "feature"])
    def test_dense_roundtrip(self, kind, tmp_path):
        spec = GridSpec(5, (-1, -2, -3), (1, 2, 3))
        rng = np.random.default_rng(0)
        vals = {"scalar": rng.normal(size=spec.shape).astype(np.float32),
                "binary": (rng.random(spec.shape) < 0.5).astype(np.uint8),
                "feature": rng.normal(size=spec.shape + (3,)).astype(np.float32)}[kind]
        save_volume(DenseVolume(spec, vals), tmp_path / "v.vxm")
        back = load_volume(tmp_path / "v.vxm")
        np.testing.assert_array_equal(back.values, vals)
        assert back.spec == spec

    def test_x_fastest_order(self):
        spec = GridSpec(2)
        vals = np.arange(8, dtype=np.float32).reshape(2, 2, 2)
        raw = np.frombuffer(volume_to_bytes(DenseVolume(spec, vals)), "<f4", 8, 41)
        # x index varies fastest
        assert raw[:2].tolist() == [vals[0, 0, 0], vals[1, 0, 0]]

    def test_header_layout(self):
        data = volume_to_bytes(DenseVolume(GridSpec(3), np.zeros((3, 3, 3), np.uint8)))
        assert data[:4] == b"VXM1"
        assert np.frombuffer(data, "<u4", 3, 4).tolist() == [3, 3, 3]
        assert data[40] == 1

    def test_sparse_roundtrip(self):
        g = SparseVoxelGrid(GridSpec(8), np.array([[1, 2, 3], [7, 0, 0]]), np.array([[1.5, 2.0], [-1.0, 0.25]]))
        back = volume_from_bytes(volume_to_bytes(g))
        np.testing.assert_array_equal(back.coords, g.coords)
        np.testing.assert_array_equal(back.features, g.features)

    def test_bad_magic(self):
        with pytest.raises(ValueError, match="magic"):
            volume_from_bytes(b"XXXX" + bytes(40))


def test_volumes_immutable():
    vol = DenseVolume(GridSpec(2), np.zeros((2, 2, 2)))
    with pytest.raises(ValueError):
        vol.values[0, 0, 0] = 1.0


def test_nonfinite_rejected():
    vals = np.zeros((2, 2, 2))
    vals[0, 0, 0] = np.nan
    with pytest.raises(ValueError, match="finite"):
        DenseVolume(GridSpec(2), vals)
