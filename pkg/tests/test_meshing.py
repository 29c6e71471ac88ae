import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.spatial.transform import Rotation

from voxelmesh.meshing import (
    TriMesh,
    edge_vertex,
    extract_mesh,
    mesh_stats,
    normalize_unit_box,
    sample_surface,
    vertex_normals,
)
from voxelmesh.meshio import load_mesh, save_mesh
from voxelmesh.shapes import box, box_sdf, icosphere, sphere_sdf, torus, torus_sdf
from voxelmesh.volume import DenseVolume, GridSpec, trilinear_sample


def field(spec, fn):
    return DenseVolume(spec, fn(spec.centers()))


@pytest.fixture(scope="module")
def sphere64():
    spec = GridSpec.cube(64, 1.2)
    return field(spec, sphere_sdf), extract_mesh(field(spec, sphere_sdf))


def square():
    return TriMesh(np.array([[0, 0, 0], [1, 0, 0], [1, 1, 0], [0, 1, 0]], float), np.array([[0, 1, 2], [0, 2, 3]]))


class TestEdgeVertex:
    def test_midpoint(self):
        p, _, _ = edge_vertex(-1.0, 1.0, [0, 0, 0], [2, 0, 0])
        np.testing.assert_allclose(p, [1, 0, 0])

    def test_quarter(self):
        p, _, _ = edge_vertex(-1.0, 3.0, [0, 0, 0], [1, 0, 0])
        np.testing.assert_allclose(p, [0.25, 0, 0])

    @pytest.mark.parametrize("a,b", [(1.0, 2.0), (-1.0, -0.5), (0.0, 1.0)])
    def test_same_sign_error(self, a, b):
        with pytest.raises(ValueError):
            edge_vertex(a, b, [0, 0, 0], [1, 0, 0])

    @settings(max_examples=60, deadline=None)
    @given(a=st.floats(-5, -0.05), b=st.floats(0.05, 5), swap=st.booleans(),
           pa=st.lists(st.floats(-2, 2), min_size=3, max_size=3),
           pb=st.lists(st.floats(-2, 2), min_size=3, max_size=3))
    def test_derivatives_match_central_differences(self, a, b, swap, pa, pb):
        if swap:
            a, b = b, a
        h = 1e-4
        _, da, db = edge_vertex(a, b, pa, pb)
        fd_a = (edge_vertex(a + h, b, pa, pb)[0] - edge_vertex(a - h, b, pa, pb)[0]) / (2 * h)
        fd_b = (edge_vertex(a, b + h, pa, pb)[0] - edge_vertex(a, b - h, pa, pb)[0]) / (2 * h)
        scale = max(np.abs(da).max(), np.abs(db).max(), 1e-8)
        assert np.abs(fd_a - da).max() <= 1e-4 * scale
        assert np.abs(fd_b - db).max() <= 1e-4 * scale


class TestExtract:
    def test_all_positive_empty(self):
        spec = GridSpec(8)
        assert extract_mesh(DenseVolume(spec, np.ones(spec.shape))).is_empty

    def test_plane_exact(self):
        spec = GridSpec(32)
        mesh = extract_mesh(field(spec, lambda p: p[..., 2] - 0.25))
        assert mesh.n_vertices > 0
        np.testing.assert_allclose(mesh.vertices[:, 2], 0.25, atol=1e-5)

    def test_sphere_radius(self, sphere64):
        vol, mesh = sphere64
        r = np.linalg.norm(mesh.vertices, axis=1)
        assert np.abs(r - 1).max() < vol.spec.voxel_size[0]

    def test_sphere_chamfer(self, sphere64):
        vol, mesh = sphere64
        pts = sample_surface(mesh, 20000, seed=0)
        d = np.abs(np.linalg.norm(pts, axis=1) - 1).mean()
        assert d < 0.5 * vol.spec.voxel_size[0]

    def test_sdf_consistency(self, sphere64):
        vol, mesh = sphere64
        v = trilinear_sample(vol, mesh.vertices)
        assert np.abs(v).max() < 1e-3 * vol.spec.extent[0]

    def test_vertices_near_level_set(self, sphere64):
        vol, mesh = sphere64
        assert np.abs(sphere_sdf(mesh.vertices)).max() < vol.spec.voxel_diagonal

    @pytest.mark.parametrize("fn,euler", [
        (lambda p: sphere_sdf(p, 0.7), 2),
        (torus_sdf, 0),
        (lambda p: box_sdf(p, 0.55), 2),
    ])
    def test_topology(self, fn, euler):
        mesh = extract_mesh(field(GridSpec(40), fn))
        s = mesh_stats(mesh)
        assert s.open_edges == 0 and s.nonmanifold_edges == 0 and s.nonmanifold_vertices == 0
        assert s.euler == euler

    def test_no_unreferenced_or_duplicate(self, sphere64):
        _, mesh = sphere64
        assert len(np.unique(mesh.faces)) == mesh.n_vertices
        key = np.sort(mesh.faces, axis=1)
        assert len(np.unique(key, axis=0)) == mesh.n_faces

    def test_no_degenerate_faces(self, sphere64):
        _, mesh = sphere64
        assert mesh.face_areas().min() > 0

    def test_outward_orientation(self, sphere64):
        _, mesh = sphere64
        assert mesh.signed_volume() == pytest.approx(4 / 3 * np.pi, rel=0.02)

    def test_exact_zero_nudged(self):
        spec = GridSpec(8)
        vals = spec.centers()[..., 0].copy()
        vals[np.abs(vals) < 0.2] = 0.0
        mesh = extract_mesh(DenseVolume(spec, vals))
        assert mesh.n_faces > 0 and mesh_stats(mesh).nonmanifold_edges == 0

    def test_saddle_field_manifold(self):
        rng = np.random.default_rng(0)
        spec = GridSpec(12)
        mesh = extract_mesh(DenseVolume(spec, rng.normal(size=spec.shape)))
        s = mesh_stats(mesh)
        assert s.nonmanifold_edges == 0 and s.nonmanifold_vertices == 0

    def test_iso_level(self):
        spec = GridSpec(24)
        mesh = extract_mesh(field(spec, lambda p: np.linalg.norm(p, axis=-1)), iso=0.5)
        assert np.abs(np.linalg.norm(mesh.vertices, axis=1) - 0.5).max() < spec.voxel_diagonal

    def test_jacobian_matches_finite_differences(self):
        spec = GridSpec(10)
        rng = np.random.default_rng(1)
        vals = sphere_sdf(spec.centers(), 0.55) + 0.01 * rng.normal(size=spec.shape)
        mesh, jac = extract_mesh(DenseVolume(spec, vals), return_jacobian=True)
        assert jac.shape == (3 * mesh.n_vertices, vals.size)
        cols = rng.choice(np.unique(jac.nonzero()[1]), 10, replace=False)
        h = 1e-6
        for c in cols:
            up, dn = vals.copy().ravel(), vals.copy().ravel()
            up[c] += h
            dn[c] -= h
            mu = extract_mesh(DenseVolume(spec, up.reshape(spec.shape)))
            md = extract_mesh(DenseVolume(spec, dn.reshape(spec.shape)))
            assert mu.n_vertices == md.n_vertices == mesh.n_vertices
            fd = ((mu.vertices - md.vertices) / (2 * h)).ravel()
            np.testing.assert_allclose(jac[:, c].toarray().ravel(), fd, atol=1e-5)


class TestVertexNormals:
    def test_cube_face_interior(self):
        mesh = box(0.5, divisions=3)
        n = vertex_normals(mesh)
        interior = np.sum(np.isclose(np.abs(mesh.vertices), 0.5), axis=1) == 1
        axis_aligned = np.isclose(np.abs(n[interior]).max(axis=1), 1.0)
        assert interior.any() and axis_aligned.all()

    def test_icosphere_radial(self):
        mesh = icosphere(3)
        n = vertex_normals(mesh)
        radial = mesh.vertices / np.linalg.norm(mesh.vertices, axis=1, keepdims=True)
        ang = np.degrees(np.arccos(np.clip(np.sum(n * radial, axis=1), -1, 1)))
        assert ang.max() < 2.0

    def test_flip_negates(self):
        mesh = torus()
        np.testing.assert_allclose(vertex_normals(mesh.flipped()), -vertex_normals(mesh), atol=1e-12)

    def test_isolated_flagged(self):
        mesh = TriMesh(np.vstack([square().vertices, [[5, 5, 5]]]), square().faces)
        n, iso = vertex_normals(mesh, return_isolated=True)
        assert iso.tolist() == [False] * 4 + [True]
        assert not n[4].any()

    def test_unit_length(self):
        n = vertex_normals(icosphere(2))
        np.testing.assert_allclose(np.linalg.norm(n, axis=1), 1.0)


class TestSampleSurface:
    def test_square_mean(self):
        pts = sample_surface(square(), 100_000, seed=0)
        np.testing.assert_allclose(pts.mean(0), [0.5, 0.5, 0.0], atol=0.01)

    def test_on_face_plane(self):
        mesh = icosphere(2)
        pts, face = sample_surface(mesh, 2000, seed=1, return_faces=True)
        tri = mesh.vertices[mesh.faces[face]]
        n = np.cross(tri[:, 1] - tri[:, 0], tri[:, 2] - tri[:, 0])
        n /= np.linalg.norm(n, axis=1, keepdims=True)
        assert np.abs(np.sum((pts - tri[:, 0]) * n, axis=1)).max() < 1e-6

    def test_deterministic(self):
        a = sample_surface(torus(), 500, seed=3)
        b = sample_surface(torus(), 500, seed=3)
        np.testing.assert_array_equal(a, b)
        assert not np.array_equal(a, sample_surface(torus(), 500, seed=4))

    def test_zero_area_error(self):
        mesh = TriMesh(np.zeros((3, 3)), np.array([[0, 1, 2]]))
        with pytest.raises(ValueError, match="zero"):
            sample_surface(mesh, 10)

    def test_empty_error(self):
        with pytest.raises(ValueError):
            sample_surface(TriMesh(np.zeros((0, 3)), np.zeros((0, 3), int)), 10)


class TestNormalize:
    def test_extent_two(self):
        _, m = normalize_unit_box(box(1.0))
        assert m[0, 0] == pytest.approx(0.5)

    def test_idempotent(self):
        once, _ = normalize_unit_box(torus())
        _, m = normalize_unit_box(once)
        np.testing.assert_allclose(m, np.eye(4), atol=1e-6)

    @settings(max_examples=25, deadline=None)
    @given(s=st.floats(0.1, 10), t=st.lists(st.floats(-5, 5), min_size=3, max_size=3),
           r=st.lists(st.floats(-3, 3), min_size=3, max_size=3))
    def test_roundtrip_and_box(self, s, t, r):
        mesh = icosphere(1)
        mesh = mesh.copy_with(vertices=s * mesh.vertices @ Rotation.from_rotvec(r).as_matrix().T + t)
        out, m = normalize_unit_box(mesh)
        lo, hi = out.bounds()
        assert np.max(hi - lo) == pytest.approx(1.0)
        np.testing.assert_allclose(lo + hi, 0.0, atol=1e-9)
        back = out.transformed(np.linalg.inv(m))
        np.testing.assert_allclose(back.vertices, mesh.vertices, atol=1e-6)


class TestTriMesh:
    def test_index_range(self):
        with pytest.raises(ValueError):
            TriMesh(np.zeros((3, 3)), np.array([[0, 1, 3]]))

    def test_attribute_length(self):
        with pytest.raises(ValueError):
            TriMesh(np.zeros((3, 3)), np.array([[0, 1, 2]]), colors=np.zeros((2, 3)))

    @pytest.mark.parametrize("mesh_fn,euler", [(lambda: icosphere(2), 2), (torus, 0), (lambda: box(0.5, divisions=2), 2)])
    def test_fixture_shapes_closed(self, mesh_fn, euler):
        mesh = mesh_fn()
        assert mesh.is_closed() and mesh.euler_characteristic() == euler
        assert mesh.signed_volume() > 0


class TestMeshIO:
    @pytest.mark.parametrize("suffix", [".obj", ".ply"])
    def test_roundtrip(self, suffix, tmp_path):
        mesh = icosphere(1)
        rng = np.random.default_rng(0)
        mesh = mesh.copy_with(colors=rng.random((mesh.n_vertices, 3)), normals=vertex_normals(mesh))
        save_mesh(mesh, tmp_path / f"m{suffix}")
        back = load_mesh(tmp_path / f"m{suffix}")
        np.testing.assert_allclose(back.vertices, mesh.vertices, atol=1e-6)
        np.testing.assert_array_equal(back.faces, mesh.faces)
        color_tol = 1 / 255 if suffix == ".ply" else 1e-5
        np.testing.assert_allclose(back.colors, mesh.colors, atol=color_tol)
        np.testing.assert_allclose(back.normals, mesh.normals, atol=1e-6)

    def test_plain_obj(self, tmp_path):
        save_mesh(square(), tmp_path / "s.obj")
        back = load_mesh(tmp_path / "s.obj")
        assert back.colors is None and back.normals is None
        np.testing.assert_array_equal(back.faces, square().faces)

    def test_unsupported(self, tmp_path):
        with pytest.raises(ValueError, match="unsupported"):
            save_mesh(square(), tmp_path / "s.stl")

    def test_missing(self, tmp_path):
        with pytest.raises(FileNotFoundError):
            load_mesh(tmp_path / "nope.obj")
