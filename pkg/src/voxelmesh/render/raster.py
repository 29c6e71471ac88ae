"""Z-buffered triangle rasterizer with analytic interior gradients.

Perspective-correct barycentrics are computed directly from camera-frame
vertex positions ``P0, P1, P2`` and the pixel ray ``r``::

    n_k = r . (P_{k+1} x P_{k+2}),   w_k = n_k / sum(n),   depth = det(P) / sum(n)

which are exactly the barycentrics of the ray/triangle intersection. The same
expressions give closed-form derivatives with respect to vertex positions.
Silhouette (coverage) changes are not differentiated.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

from ..camera import Camera
from ..meshing import TriMesh, vertex_normals

NEAR = 1e-6


@dataclass(frozen=True, eq=False)
class RenderTarget:
    rgb: np.ndarray        # (H, W, 3), black background
    normal: np.ndarray     # (H, W, 3), zero background
    mask: np.ndarray       # (H, W) bool
    depth: np.ndarray      # (H, W), inf background
    face_ids: np.ndarray   # (H, W), -1 background
    weights: np.ndarray    # (H, W, 3) perspective-correct barycentrics
    camera: Camera
    normal_frame: str = "camera"

    @property
    def resolution(self) -> tuple[int, int]:
        return self.camera.width, self.camera.height

    def attribute_jacobian(self, faces: np.ndarray, n_vertices: int) -> sp.csr_matrix:
        """d(pixel attribute)/d(vertex attribute), shape ``(H*W, n_vertices)``."""
        fid = self.face_ids.ravel()
        pix = np.nonzero(fid >= 0)[0]
        verts = faces[fid[pix]]
        w = self.weights.reshape(-1, 3)[pix]
        return sp.csr_matrix(
            (w.ravel(), (np.repeat(pix, 3), verts.ravel())),
            shape=(fid.size, n_vertices),
        )


def _scaled_camera(camera: Camera, resolution) -> Camera:
    if resolution is None:
        return camera
    w, h = (resolution, resolution) if np.isscalar(resolution) else resolution
    sx, sy = w / camera.width, h / camera.height
    return Camera(camera.fx * sx, camera.fy * sy, (camera.cx + 0.5) * sx - 0.5, (camera.cy + 0.5) * sy - 0.5,
                  int(w), int(h), camera.cam_to_world)


def _pixel_rays(camera, u, v):
    return np.stack([(u - camera.cx) / camera.fx, (v - camera.cy) / camera.fy, np.ones_like(u, dtype=float)], -1)


def rasterize(mesh: TriMesh, camera: Camera, resolution=None, normal_frame: str = "camera",
              chunk: int = 4_000_000) -> RenderTarget:
    """Render per-vertex color and normal textures of ``mesh``.

    Meshes without a color texture render mid-gray; without a normal texture
    the geometric vertex normals stand in. Normal pixels are renormalized
    after interpolation and expressed in ``normal_frame`` ("camera" or "world").
    """
    cam = _scaled_camera(camera, resolution)
    h, w = cam.height, cam.width
    face_ids = np.full(h * w, -1, dtype=np.int64)
    weights = np.zeros((h * w, 3))
    depth = np.full(h * w, np.inf)

    if not mesh.is_empty:
        pc = cam.world_to_camera(mesh.vertices)
        tri = pc[mesh.faces]                         # (F, 3, 3)
        ok = np.all(tri[:, :, 2] > NEAR, axis=1)
        fidx = np.nonzero(ok)[0]
        tri = tri[fidx]
        uu = cam.fx * tri[:, :, 0] / tri[:, :, 2] + cam.cx
        vv = cam.fy * tri[:, :, 1] / tri[:, :, 2] + cam.cy
        u0 = np.clip(np.ceil(uu.min(1)), 0, w).astype(np.int64)
        u1 = np.clip(np.floor(uu.max(1)), -1, w - 1).astype(np.int64)
        v0 = np.clip(np.ceil(vv.min(1)), 0, h).astype(np.int64)
        v1 = np.clip(np.floor(vv.max(1)), -1, h - 1).astype(np.int64)
        nu = np.maximum(u1 - u0 + 1, 0)
        nv = np.maximum(v1 - v0 + 1, 0)
        per = nu * nv
        keep = per > 0
        fidx, tri, u0, v0, nu, per = fidx[keep], tri[keep], u0[keep], v0[keep], nu[keep], per[keep]
        cross = np.stack([np.cross(tri[:, 1], tri[:, 2]), np.cross(tri[:, 2], tri[:, 0]),
                          np.cross(tri[:, 0], tri[:, 1])], axis=1)   # (F, 3, 3)
        det = np.einsum("ij,ij->i", tri[:, 0], cross[:, 0])

        best_pix, best_face, best_depth, best_w = [], [], [], []
        ends = np.cumsum(per)
        start = 0
        while start < len(per):
            stop = int(np.searchsorted(ends, ends[start] - per[start] + chunk, side="right"))
            stop = max(stop, start + 1)
            sl = slice(start, stop)
            cnt = per[sl]
            t = np.repeat(np.arange(start, stop), cnt)
            local = np.arange(cnt.sum()) - np.repeat(np.cumsum(cnt) - cnt, cnt)
            px = u0[t] + local % nu[t]
            py = v0[t] + local // nu[t]
            r = _pixel_rays(cam, px.astype(float), py.astype(float))
            n = np.einsum("pj,pkj->pk", r, cross[t])
            s = n.sum(1)
            with np.errstate(divide="ignore", invalid="ignore"):
                bw = n / s[:, None]
                z = det[t] / s
            inside = (s != 0) & np.all(bw >= 0, axis=1) & (z > NEAR)
            best_pix.append(py[inside] * w + px[inside])
            best_face.append(fidx[t[inside]])
            best_depth.append(z[inside])
            best_w.append(bw[inside])
            start = stop

        pix = np.concatenate(best_pix) if best_pix else np.zeros(0, np.int64)
        if len(pix):
            fc = np.concatenate(best_face)
            zz = np.concatenate(best_depth)
            ww = np.concatenate(best_w)
            order = np.lexsort((fc, zz, pix))
            first = order[np.r_[True, pix[order][1:] != pix[order][:-1]]]
            face_ids[pix[first]] = fc[first]
            depth[pix[first]] = zz[first]
            weights[pix[first]] = ww[first]

    covered = face_ids >= 0
    colors = mesh.colors if mesh.colors is not None else np.full((mesh.n_vertices, 3), 0.5)
    tex_n = mesh.normals if mesh.normals is not None else vertex_normals(mesh)
    rgb = np.zeros((h * w, 3))
    nrm = np.zeros((h * w, 3))
    if covered.any():
        fv = mesh.faces[face_ids[covered]]
        wc = weights[covered]
        rgb[covered] = np.einsum("pk,pkc->pc", wc, colors[fv])
        nn = np.einsum("pk,pkc->pc", wc, tex_n[fv])
        nn /= np.maximum(np.linalg.norm(nn, axis=1, keepdims=True), 1e-12)
        if normal_frame == "camera":
            nn = nn @ cam.rotation
        elif normal_frame != "world":
            raise ValueError(f"normal_frame must be 'camera' or 'world', got {normal_frame!r}")
        nrm[covered] = nn
    return RenderTarget(
        rgb.reshape(h, w, 3), nrm.reshape(h, w, 3), covered.reshape(h, w), depth.reshape(h, w),
        face_ids.reshape(h, w), weights.reshape(h, w, 3), cam, normal_frame,
    )


def backprop_attributes(target: RenderTarget, faces, n_vertices: int, grad_image) -> np.ndarray:
    """Vertex-attribute gradient of a loss given dL/d(image), shape ``(V, C)``."""
    g = np.asarray(grad_image, float).reshape(target.face_ids.size, -1)
    return np.asarray(target.attribute_jacobian(faces, n_vertices).T @ g)


def backprop_positions(target: RenderTarget, mesh: TriMesh, attributes, grad_image) -> np.ndarray:
    """Gradient w.r.t. world vertex positions through the interpolation weights.

    Only covered pixels contribute; coverage itself is treated as constant.
    """
    cam = target.camera
    attrs = np.asarray(attributes, float)
    g = np.asarray(grad_image, float).reshape(target.face_ids.size, -1)
    fid = target.face_ids.ravel()
    pix = np.nonzero(fid >= 0)[0]
    grad = np.zeros((mesh.n_vertices, 3))
    if len(pix) == 0:
        return grad
    fv = mesh.faces[fid[pix]]
    w = target.weights.reshape(-1, 3)[pix]
    px = (pix % cam.width).astype(float)
    py = (pix // cam.width).astype(float)
    r = _pixel_rays(cam, px, py)
    P = cam.world_to_camera(mesh.vertices)[fv]           # (N, 3, 3)
    s = np.einsum("pj,pj->p", r, np.cross(P[:, 1], P[:, 2]) + np.cross(P[:, 2], P[:, 0]) + np.cross(P[:, 0], P[:, 1]))
    G = np.einsum("pc,pkc->pk", g[pix], attrs[fv])      # dL/dw_k
    H = G - np.sum(G * w, axis=1, keepdims=True)
    dP = np.zeros_like(P)
    for k in range(3):
        a, b = (k + 1) % 3, (k + 2) % 3
        # n_k = r . (P_a x P_b)
        dP[:, a] += H[:, k, None] * np.cross(P[:, b], r)
        dP[:, b] += H[:, k, None] * np.cross(r, P[:, a])
    dP /= s[:, None, None]
    dX = dP @ cam.rotation.T
    for k in range(3):
        np.add.at(grad, fv[:, k], dX[:, k])
    return grad
