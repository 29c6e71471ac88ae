"""Pinhole cameras, multi-view image sets and their file formats.

Camera frame: +x right, +y down, +z forward. Pixel ``(u, v)`` = (column, row),
with integer coordinates at pixel centers.
"""
from __future__ import annotations

import json
import re
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image


@dataclass(frozen=True, eq=False)
class Camera:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    cam_to_world: np.ndarray = field(default_factory=lambda: np.eye(4))

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise ValueError("focal lengths must be positive")
        m = np.asarray(self.cam_to_world, dtype=np.float64).reshape(4, 4)
        r = m[:3, :3]
        if not np.allclose(r.T @ r, np.eye(3), atol=1e-6) or np.linalg.det(r) < 0:
            raise ValueError("cam_to_world rotation must be orthonormal with det +1")
        m = m.copy()
        m.setflags(write=False)
        object.__setattr__(self, "cam_to_world", m)
        object.__setattr__(self, "width", int(self.width))
        object.__setattr__(self, "height", int(self.height))

    @property
    def rotation(self) -> np.ndarray:
        return self.cam_to_world[:3, :3]

    @property
    def center(self) -> np.ndarray:
        return self.cam_to_world[:3, 3]

    @property
    def K(self) -> np.ndarray:
        return np.array([[self.fx, 0, self.cx], [0, self.fy, self.cy], [0, 0, 1.0]])

    def world_to_camera(self, points) -> np.ndarray:
        p = np.asarray(points, float)
        return (p - self.center) @ self.rotation

    def camera_to_world(self, points) -> np.ndarray:
        return np.asarray(points, float) @ self.rotation.T + self.center

    def moved(self, motion) -> "Camera":
        """Camera after applying the rigid 4x4 ``motion`` to the world."""
        return Camera(self.fx, self.fy, self.cx, self.cy, self.width, self.height,
                      np.asarray(motion, float) @ self.cam_to_world)

    def to_dict(self) -> dict:
        return {
            "fx": self.fx, "fy": self.fy, "cx": self.cx, "cy": self.cy,
            "width": self.width, "height": self.height,
            "cam_to_world": [float(x) for x in self.cam_to_world.ravel()],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Camera":
        return cls(float(d["fx"]), float(d["fy"]), float(d["cx"]), float(d["cy"]),
                   int(d["width"]), int(d["height"]), np.asarray(d["cam_to_world"], float).reshape(4, 4))


def project(camera: Camera, points):
    """Project world points. Returns ``(uv, depth, valid)``; ``valid`` is depth > 0."""
    pc = camera.world_to_camera(points)
    z = pc[..., 2]
    valid = z > 0
    safe = np.where(valid, z, 1.0)
    u = camera.fx * pc[..., 0] / safe + camera.cx
    v = camera.fy * pc[..., 1] / safe + camera.cy
    return np.stack([u, v], axis=-1), z, valid


def unproject(camera: Camera, uv, depth):
    uv = np.asarray(uv, float)
    depth = np.asarray(depth, float)
    x = (uv[..., 0] - camera.cx) / camera.fx * depth
    y = (uv[..., 1] - camera.cy) / camera.fy * depth
    return camera.camera_to_world(np.stack([x, y, depth], axis=-1))


def sample_image(image, uv):
    """Bilinear lookup at continuous pixel coordinates.

    Returns ``(values, in_view)``. Coordinates outside ``[0, W-1] x [0, H-1]``
    are clamped to the border and reported as out of view.
    """
    img = np.asarray(image, float)
    squeeze = img.ndim == 2
    if squeeze:
        img = img[..., None]
    h, w = img.shape[:2]
    uv = np.asarray(uv, float)
    flat = uv.reshape(-1, 2)
    u, v = flat[:, 0], flat[:, 1]
    in_view = (u >= 0) & (u <= w - 1) & (v >= 0) & (v <= h - 1) & np.isfinite(u) & np.isfinite(v)
    u = np.clip(np.nan_to_num(u), 0, w - 1)
    v = np.clip(np.nan_to_num(v), 0, h - 1)
    u0 = np.clip(np.floor(u).astype(np.int64), 0, max(w - 2, 0))
    v0 = np.clip(np.floor(v).astype(np.int64), 0, max(h - 2, 0))
    u1 = np.minimum(u0 + 1, w - 1)
    v1 = np.minimum(v0 + 1, h - 1)
    a = (u - u0)[:, None]
    b = (v - v0)[:, None]
    out = ((1 - a) * (1 - b) * img[v0, u0] + a * (1 - b) * img[v0, u1]
           + (1 - a) * b * img[v1, u0] + a * b * img[v1, u1])
    if squeeze:
        out = out[:, 0]
    return out.reshape(uv.shape[:-1] + out.shape[1:]), in_view.reshape(uv.shape[:-1])


def normals_to_world(normal_map, camera: Camera) -> np.ndarray:
    """Rotate a camera-frame normal map into the world frame.

    Background (zero) pixels stay zero.
    """
    n = np.asarray(normal_map, float)
    return n @ camera.rotation.T


def normals_to_camera(normal_map, camera: Camera) -> np.ndarray:
    return np.asarray(normal_map, float) @ camera.rotation


def look_at(eye, target=(0.0, 0.0, 0.0), up=(0.0, 1.0, 0.0)) -> np.ndarray:
    """cam_to_world for a camera at ``eye`` looking at ``target`` (y-down image)."""
    eye = np.asarray(eye, float)
    f = np.asarray(target, float) - eye
    f /= np.linalg.norm(f)
    x = np.cross(-np.asarray(up, float), f)
    if np.linalg.norm(x) < 1e-9:
        x = np.cross(np.array([0.0, 0.0, -1.0]), f)
    x /= np.linalg.norm(x)
    y = np.cross(f, x)
    m = np.eye(4)
    m[:3, 0], m[:3, 1], m[:3, 2], m[:3, 3] = x, y, f, eye
    return m


def ring_rig(n_views: int, size: int = 64, radius: float = 2.6, elevations=(20.0, -10.0),
             fov_deg: float = 40.0, azimuth_offset: float = 30.0) -> list[Camera]:
    """Cameras on a ring around the origin, alternating between elevations.

    This is a fixture rig: azimuths are evenly spaced starting at
    ``azimuth_offset`` degrees, world up is +y.
    """
    f = 0.5 * size / np.tan(np.radians(fov_deg) / 2)
    c = (size - 1) / 2.0
    cams = []
    for i in range(n_views):
        az = np.radians(azimuth_offset + 360.0 * i / n_views)
        el = np.radians(elevations[i % len(elevations)])
        eye = radius * np.array([np.cos(el) * np.sin(az), np.sin(el), np.cos(el) * np.cos(az)])
        cams.append(Camera(f, f, c, c, size, size, look_at(eye)))
    return cams


@dataclass(frozen=True, eq=False)
class View:
    camera: Camera
    rgb: np.ndarray
    normal: np.ndarray
    mask: np.ndarray

    def __post_init__(self):
        h, w = self.camera.height, self.camera.width
        for name, ch in (("rgb", 3), ("normal", 3)):
            arr = np.asarray(getattr(self, name), float)
            if arr.shape != (h, w, ch):
                raise ValueError(f"{name} has shape {arr.shape}, expected {(h, w, ch)}")
            object.__setattr__(self, name, arr)
        mask = np.asarray(self.mask).astype(bool)
        if mask.shape != (h, w):
            raise ValueError(f"mask has shape {mask.shape}, expected {(h, w)}")
        object.__setattr__(self, "mask", mask)


@dataclass(frozen=True, eq=False)
class ViewSet:
    views: tuple

    def __post_init__(self):
        views = tuple(self.views)
        if not views:
            raise ValueError("a ViewSet needs at least one view")
        sizes = {(v.camera.width, v.camera.height) for v in views}
        if len(sizes) != 1:
            raise ValueError(f"all views must share one image size, got {sorted(sizes)}")
        object.__setattr__(self, "views", views)

    def __len__(self) -> int:
        return len(self.views)

    def __iter__(self):
        return iter(self.views)

    def __getitem__(self, i):
        return self.views[i]

    @property
    def image_size(self) -> tuple[int, int]:
        v = self.views[0].camera
        return v.width, v.height

    @property
    def cameras(self) -> list[Camera]:
        return [v.camera for v in self.views]

    def permuted(self, order) -> "ViewSet":
        return ViewSet(tuple(self.views[i] for i in order))

    def check_normals(self, atol: float = 1e-3) -> None:
        for i, v in enumerate(self.views):
            norms = np.linalg.norm(v.normal[v.mask], axis=-1)
            if norms.size and np.max(np.abs(norms - 1)) > atol:
                raise ValueError(f"view {i}: masked normals are not unit length")


# --------------------------------------------------------------------------
# File formats


def save_rig(cameras, path) -> None:
    Path(path).write_text(json.dumps([c.to_dict() for c in cameras], indent=1))


def load_rig(path) -> list[Camera]:
    return [Camera.from_dict(d) for d in json.loads(Path(path).read_text())]


def write_pfm(path, image) -> None:
    """Little-endian PFM, rows stored bottom-to-top as the format requires."""
    img = np.asarray(image, dtype="<f4")
    color = img.ndim == 3
    h, w = img.shape[:2]
    with open(path, "wb") as fh:
        fh.write(b"PF\n" if color else b"Pf\n")
        fh.write(f"{w} {h}\n-1.0\n".encode())
        fh.write(np.ascontiguousarray(img[::-1]).tobytes())


def read_pfm(path) -> np.ndarray:
    data = Path(path).read_bytes()
    m = re.match(rb"(P[Ff])\s+(\d+)\s+(\d+)\s+(\S+)\s", data)
    if not m:
        raise ValueError(f"{path}: not a PFM file")
    color = m.group(1) == b"PF"
    w, h, scale = int(m.group(2)), int(m.group(3)), float(m.group(4))
    dtype = "<f4" if scale < 0 else ">f4"
    ch = 3 if color else 1
    arr = np.frombuffer(data, dtype, w * h * ch, m.end()).reshape((h, w, ch) if color else (h, w))
    return arr[::-1].astype(np.float64)


def write_png(path, image) -> None:
    """8-bit PNG from float data in [0, 1]."""
    arr = np.clip(np.round(np.asarray(image, float) * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(arr).save(path, format="PNG", optimize=False, compress_level=6)


def read_png(path) -> np.ndarray:
    with Image.open(path) as im:
        return np.asarray(im, dtype=np.float64) / 255.0


def encode_normals(normals) -> np.ndarray:
    """Map unit vectors from [-1, 1] to [0, 1] for 8-bit storage."""
    return (np.asarray(normals, float) + 1.0) * 0.5


def decode_normals(encoded, mask=None) -> np.ndarray:
    n = np.asarray(encoded, float)[..., :3] * 2.0 - 1.0
    norm = np.linalg.norm(n, axis=-1, keepdims=True)
    n = np.where(norm > 0, n / np.maximum(norm, 1e-12), 0.0)
    if mask is not None:
        n = np.where(np.asarray(mask, bool)[..., None], n, 0.0)
    return n


def save_views(views: ViewSet, out_dir) -> None:
    """Write rig.json plus per-view rgb/normal/mask PNGs and float PFMs."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    save_rig(views.cameras, out / "rig.json")
    for i, v in enumerate(views):
        write_png(out / f"rgb_{i:03d}.png", v.rgb)
        write_png(out / f"normal_{i:03d}.png", np.where(v.mask[..., None], encode_normals(v.normal), 0.0))
        write_png(out / f"mask_{i:03d}.png", v.mask.astype(float))
        write_pfm(out / f"rgb_{i:03d}.pfm", v.rgb)
        write_pfm(out / f"normal_{i:03d}.pfm", v.normal)


def load_views(views_dir, prefer_float: bool = True) -> ViewSet:
    d = Path(views_dir)
    rig_path = d / "rig.json"
    if not rig_path.exists():
        raise FileNotFoundError(rig_path)
    cams = load_rig(rig_path)
    views = []
    for i, cam in enumerate(cams):
        mask = read_png(d / f"mask_{i:03d}.png") > 0.5
        if mask.ndim == 3:
            mask = mask[..., 0]
        if prefer_float and (d / f"rgb_{i:03d}.pfm").exists():
            rgb = read_pfm(d / f"rgb_{i:03d}.pfm")
            normal = read_pfm(d / f"normal_{i:03d}.pfm")
        else:
            rgb = read_png(d / f"rgb_{i:03d}.png")[..., :3]
            normal = decode_normals(read_png(d / f"normal_{i:03d}.png"), mask)
        views.append(View(cam, rgb, normal, mask))
    return ViewSet(tuple(views))
