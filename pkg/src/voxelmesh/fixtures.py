"""Synthetic textured fixtures: analytic shapes rendered by this package's rasterizer."""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .camera import View, ViewSet, ring_rig, save_views
from .meshing import TriMesh, vertex_normals
from .meshio import save_mesh
from .render.raster import rasterize
from .shapes import shape_by_name
from .volume import GridSpec, mesh_to_sdf, save_volume

SHAPES = ("sphere", "cube", "torus", "composite")


def position_colors(vertices) -> np.ndarray:
    """Smooth, deterministic color texture derived from position."""
    v = np.asarray(vertices, float)
    phase = np.array([0.0, 2.1, 4.2])
    return 0.5 + 0.4 * np.sin(3.0 * v @ np.array([[1.0, 0.3, -0.5], [0.2, 1.0, 0.4], [-0.4, 0.1, 1.0]]) + phase)


def textured_shape(name: str) -> TriMesh:
    """Named fixture mesh with position colors and geometric vertex normals."""
    mesh = shape_by_name(name)
    return mesh.copy_with(colors=position_colors(mesh.vertices), normals=vertex_normals(mesh))


def render_views(mesh: TriMesh, cameras) -> ViewSet:
    """Render RGB, camera-frame normals and masks for each camera."""
    views = []
    for cam in cameras:
        t = rasterize(mesh, cam, normal_frame="camera")
        views.append(View(cam, t.rgb, t.normal, t.mask))
    return ViewSet(tuple(views))


def fixture_grid(resolution: int) -> GridSpec:
    return GridSpec.cube(resolution, 1.0)


@dataclass(frozen=True)
class FixturePaths:
    root: Path
    mesh: Path
    sdf: Path
    rig: Path


def write_fixture(out_dir, shape: str = "sphere", n_views: int = 6, image_size: int = 64,
                  sdf_resolution: int = 32, workers: int = 1) -> FixturePaths:
    """Write views, rig, ground-truth mesh (``mesh.obj``) and SDF (``sdf.vxm``)."""
    if shape not in SHAPES:
        raise ValueError(f"unknown fixture shape {shape!r}; choose from {list(SHAPES)}")
    if n_views < 1:
        raise ValueError("need at least one view")
    root = Path(out_dir)
    root.mkdir(parents=True, exist_ok=True)
    mesh = textured_shape(shape)
    views = render_views(mesh, ring_rig(n_views, size=image_size))
    save_views(views, root)
    save_mesh(mesh, root / "mesh.obj")
    sdf = mesh_to_sdf(mesh, fixture_grid(sdf_resolution), workers=workers)
    save_volume(sdf, root / "sdf.vxm")
    return FixturePaths(root, root / "mesh.obj", root / "sdf.vxm", root / "rig.json")
