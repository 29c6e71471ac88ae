"""Fixture 2D encoder and projection of voxel positions into the views.

Each view gets two independent feature maps (RGB stream and normal stream):
a stride-``s`` patch embedding followed by a 3x3 convolution. Weights are
seeded, not learned.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..camera import Camera, ViewSet, normals_to_world, project, sample_image
from .config import ArchConfig
from .layers import gelu, param


@dataclass(frozen=True, eq=False)
class EncodedViews:
    """Per-view feature maps plus the raw images needed for pixel features."""

    cameras: tuple
    rgb_features: tuple      # each (H/s, W/s, F)
    normal_features: tuple   # each (H/s, W/s, F)
    rgb: tuple               # each (H, W, 3)
    normals: tuple           # world frame, zero off-mask, each (H, W, 3)
    stride: int

    def __len__(self) -> int:
        return len(self.cameras)

    def permuted(self, order) -> "EncodedViews":
        pick = lambda seq: tuple(seq[i] for i in order)  # noqa: E731
        return EncodedViews(pick(self.cameras), pick(self.rgb_features), pick(self.normal_features),
                            pick(self.rgb), pick(self.normals), self.stride)


def _conv2d_3x3(x, w, b):
    h, wd, _ = x.shape
    xp = np.pad(x, ((1, 1), (1, 1), (0, 0)))
    out = np.zeros((h, wd, w.shape[2]))
    k = 0
    for dy in (-1, 0, 1):
        for dx in (-1, 0, 1):
            out += xp[1 + dy:1 + dy + h, 1 + dx:1 + dx + wd] @ w[k]
            k += 1
    return out + b


def encode_image(image, weights, stream: str, stride: int) -> np.ndarray:
    """Feature map of one ``(H, W, 3)`` image for the given stream."""
    img = np.asarray(image, float)
    h, w = img.shape[:2]
    if h % stride or w % stride:
        raise ValueError(f"image size {w}x{h} is not divisible by the encoder stride {stride}")
    patches = img.reshape(h // stride, stride, w // stride, stride, 3).transpose(0, 2, 1, 3, 4)
    patches = patches.reshape(h // stride, w // stride, -1)
    hid = gelu(patches @ param(weights, f"encoder/{stream}/patch/w") + param(weights, f"encoder/{stream}/patch/b"))
    return _conv2d_3x3(hid, param(weights, f"encoder/{stream}/conv/w"), param(weights, f"encoder/{stream}/conv/b"))


def receptive_field(pixel, image_shape, stride: int) -> np.ndarray:
    """Boolean ``(H/s, W/s)`` mask of feature cells that depend on ``pixel = (row, col)``."""
    h, w = image_shape[0] // stride, image_shape[1] // stride
    r, c = pixel[0] // stride, pixel[1] // stride
    mask = np.zeros((h, w), bool)
    mask[max(r - 1, 0):r + 2, max(c - 1, 0):c + 2] = True
    return mask


def encode_views(views: ViewSet, config: ArchConfig, weights) -> EncodedViews:
    """Run both streams on every view. Normals are rotated to the world frame first."""
    s = config.encoder_stride
    rgb_f, nrm_f, rgbs, nrms = [], [], [], []
    for view in views:
        n_world = normals_to_world(view.normal, view.camera) * view.mask[..., None]
        rgb_f.append(encode_image(view.rgb, weights, "rgb", s))
        nrm_f.append(encode_image(n_world, weights, "normal", s))
        rgbs.append(np.asarray(view.rgb, float))
        nrms.append(n_world)
    return EncodedViews(tuple(views.cameras), tuple(rgb_f), tuple(nrm_f), tuple(rgbs), tuple(nrms), s)


def project_to_view(camera: Camera, positions):
    """Pixel coordinates of world positions and whether they land inside the image."""
    uv, _, front = project(camera, positions)
    u, v = uv[..., 0], uv[..., 1]
    inside = front & (u >= 0) & (u <= camera.width - 1) & (v >= 0) & (v <= camera.height - 1)
    return uv, inside


def gather_pixel_features(encoded: EncodedViews, positions):
    """Projected pixel features ``p = [f, g, c, n]`` of every position in every view.

    Returns ``(p, valid)`` with shapes ``(N, m, 2F + 6)`` and ``(N, m)``;
    rows of invalid (behind-camera or off-image) views are zero.
    """
    pos = np.asarray(positions, float).reshape(-1, 3)
    s = encoded.stride
    feats, valids = [], []
    for i, cam in enumerate(encoded.cameras):
        uv, inside = project_to_view(cam, pos)
        fuv = (uv - 0.5 * (s - 1)) / s
        f, _ = sample_image(encoded.rgb_features[i], fuv)
        g, _ = sample_image(encoded.normal_features[i], fuv)
        c, _ = sample_image(encoded.rgb[i], uv)
        n, _ = sample_image(encoded.normals[i], uv)
        norm = np.linalg.norm(n, axis=1, keepdims=True)
        n = np.where(norm > 1e-8, n / np.maximum(norm, 1e-300), 0.0)
        p = np.concatenate([f, g, np.clip(c, 0.0, 1.0), n], axis=1)
        p[~inside] = 0.0
        feats.append(p)
        valids.append(inside)
    return np.stack(feats, axis=1), np.stack(valids, axis=1)
