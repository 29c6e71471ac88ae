"""Projection-aware cross-attention.

One query per voxel; its keys and values are the voxel's projected pixel
features from each valid view plus the voxel feature itself, so every
voxel attends over ``m + 1`` tokens.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .layers import param, softmax


@dataclass(frozen=True, eq=False)
class CrossAttentionParams:
    """Projection matrices (``in x out``). ``out_w`` may be None for no output map."""

    q: np.ndarray
    k_voxel: np.ndarray
    k_pixel: np.ndarray
    v_voxel: np.ndarray
    v_pixel: np.ndarray
    out_w: np.ndarray | None = None
    out_b: np.ndarray | None = None

    def __post_init__(self):
        c, d = self.q.shape
        if self.k_voxel.shape != (c, d) or self.k_pixel.shape[1] != d:
            raise ValueError("query and key projections must share the attention width")
        if self.v_voxel.shape != (c, c) or self.v_pixel.shape != (self.k_pixel.shape[0], c):
            raise ValueError("value projections must map to the voxel width")

    @property
    def voxel_width(self) -> int:
        return self.q.shape[0]

    @property
    def pixel_width(self) -> int:
        return self.k_pixel.shape[0]

    @classmethod
    def from_weights(cls, weights, path: str) -> "CrossAttentionParams":
        return cls(*(param(weights, f"{path}/{n}/w") for n in ("q", "k_voxel", "k_pixel", "v_voxel", "v_pixel")),
                   param(weights, f"{path}/out/w"), param(weights, f"{path}/out/b"))

    @classmethod
    def identity(cls, width: int) -> "CrossAttentionParams":
        """All projections identity; voxel and pixel features share ``width``."""
        e = np.eye(width)
        return cls(e, e, e, e, e)


def projection_aware_cross_attention(v, pixels, params: CrossAttentionParams, valid=None, heads: int = 1):
    """Attend from voxel feature(s) ``v`` over projected pixel features plus ``v``.

    Args:
        v: ``(C,)`` or ``(N, C)`` voxel features.
        pixels: ``(m, P)`` or ``(N, m, P)`` projected pixel features.
        params: projection matrices.
        valid: optional ``(m,)`` / ``(N, m)`` mask; invalid views contribute
            neither key nor value. The voxel token is always present.
        heads: number of heads; the attention and voxel widths are split evenly.

    Returns:
        Updated voxel feature(s), same shape as ``v``.
    """
    v = np.asarray(v, float)
    pixels = np.asarray(pixels, float)
    single = v.ndim == 1
    if single:
        v, pixels = v[None], pixels[None]
        valid = None if valid is None else np.asarray(valid)[None]
    if pixels.ndim != 3 or len(pixels) != len(v):
        raise ValueError(f"pixel features of shape {pixels.shape} do not pair with voxels {v.shape}")
    n, m, p_w = pixels.shape
    if m < 1:
        raise ValueError("cross-attention needs at least one view")
    if v.shape[1] != params.voxel_width:
        raise ValueError(f"voxel width {v.shape[1]} does not match the projections ({params.voxel_width})")
    if p_w != params.pixel_width:
        raise ValueError(f"pixel width {p_w} does not match the projections ({params.pixel_width})")
    c, d = params.q.shape
    if d % heads or c % heads:
        raise ValueError(f"widths {d}/{c} are not divisible by {heads} heads")

    q = v @ params.q
    keys = np.concatenate([pixels @ params.k_pixel, (v @ params.k_voxel)[:, None]], axis=1)
    vals = np.concatenate([pixels @ params.v_pixel, (v @ params.v_voxel)[:, None]], axis=1)
    dh, ch = d // heads, c // heads
    qh = q.reshape(n, heads, dh)
    kh = keys.reshape(n, m + 1, heads, dh)
    vh = vals.reshape(n, m + 1, heads, ch)
    logits = np.einsum("nhd,nthd->nht", qh, kh) / np.sqrt(dh)
    if valid is not None:
        keep = np.concatenate([np.asarray(valid, bool).reshape(n, m), np.ones((n, 1), bool)], axis=1)
        logits = np.where(keep[:, None, :], logits, -np.inf)
    att = softmax(logits, axis=-1)
    out = np.einsum("nht,nthc->nhc", att, vh).reshape(n, c)
    if params.out_w is not None:
        out = out @ params.out_w
        if params.out_b is not None:
            out = out + params.out_b
    return out[0] if single else out
