"""Gradient of a rendering loss with respect to SDF sample values.

Chain: SDF samples -> edge crossings -> dual vertices (extraction Jacobian)
-> rasterizer weights -> image -> MSE.
"""
from __future__ import annotations

import numpy as np

from ..camera import Camera
from ..meshing import extract_mesh
from ..volume import DenseVolume
from .loss import image_mse
from .raster import backprop_positions, rasterize


def sdf_color_loss(sdf: DenseVolume, camera: Camera, colors, reference_rgb, resolution=None):
    """Unmasked color MSE of the extracted, rendered surface.

    ``colors`` are per-vertex colors of the extracted mesh; they are held
    fixed (indexed by vertex) so only vertex positions depend on the SDF.
    Returns ``(loss, mesh, target)``.
    """
    mesh = extract_mesh(sdf)
    mesh = mesh.copy_with(colors=colors)
    target = rasterize(mesh, camera, resolution)
    return image_mse(target.rgb, reference_rgb), mesh, target


def sdf_color_loss_grad(sdf: DenseVolume, camera: Camera, colors, reference_rgb, resolution=None):
    """Loss and its gradient with respect to ``sdf.values`` (same shape)."""
    mesh, jac = extract_mesh(sdf, return_jacobian=True)
    mesh = mesh.copy_with(colors=colors)
    target = rasterize(mesh, camera, resolution)
    loss, g_img = image_mse(target.rgb, reference_rgb, return_grad=True)
    g_pos = backprop_positions(target, mesh, mesh.colors, g_img)
    g_sdf = jac.T @ g_pos.ravel()
    return loss, np.asarray(g_sdf).reshape(sdf.values.shape)
