"""Dense and sparse 3D UNets with per-level cross-attention and a transformer bottleneck.

Both UNets share one skeleton; only the voxel layout differs. Features are
always kept flat as ``(N, C)`` rows ordered lexicographically by integer
coordinate, so a fully occupied sparse layout lines up row-for-row with the
dense one.
"""
from __future__ import annotations

import numpy as np

from ..camera import ViewSet
from ..volume import DenseVolume, GridSpec, SparseVoxelGrid
from . import layers as L
from .attention import CrossAttentionParams, projection_aware_cross_attention
from .config import ArchConfig, UNetConfig
from .encoder import EncodedViews, encode_views, gather_pixel_features


class DenseLayout:
    """All ``R**3`` voxels of one level; ``offset`` 0.5 puts positions at centers."""

    def __init__(self, resolution: int, lo, hi, offset: float = 0.5):
        self.resolution = int(resolution)
        self.lo = np.asarray(lo, float)
        self.hi = np.asarray(hi, float)
        self.offset = offset
        self.coords = np.indices((self.resolution,) * 3).reshape(3, -1).T

    def __len__(self):
        return len(self.coords)

    def positions(self):
        return self.lo + (self.coords + self.offset) * (self.hi - self.lo) / self.resolution

    def _grid(self, feats):
        return feats.reshape((self.resolution,) * 3 + (feats.shape[1],))

    def conv(self, feats, w, b):
        return L.dense_conv3(self._grid(feats), w, b).reshape(len(self), -1)

    def down(self, feats, w, b, factor):
        out = L.dense_down(self._grid(feats), w, b, factor)
        nxt = DenseLayout(self.resolution // factor, self.lo, self.hi, self.offset)
        return nxt, out.reshape(len(nxt), -1)

    def up_from(self, coarse, feats, w, b, factor):
        return L.dense_up(coarse._grid(feats), w, b, factor).reshape(len(self), -1)


class SparseLayout:
    """Occupied sites of one level; positions sit at lattice corners (offset 0)."""

    def __init__(self, resolution: int, lo, hi, coords, offset: float = 0.0):
        self.resolution = int(resolution)
        self.lo = np.asarray(lo, float)
        self.hi = np.asarray(hi, float)
        self.offset = offset
        self.coords = np.asarray(coords, np.int64)
        self._keys = self._key(self.coords)
        if len(self._keys) > 1 and np.any(np.diff(self._keys) <= 0):
            raise ValueError("sparse coords must be sorted and unique")
        self._nbr = None
        self.parent_index = None

    def __len__(self):
        return len(self.coords)

    def _key(self, c):
        r = self.resolution
        return (c[..., 0] * r + c[..., 1]) * r + c[..., 2]

    def lookup(self, coords):
        c = np.asarray(coords, np.int64)
        ok = np.all((c >= 0) & (c < self.resolution), axis=-1)
        k = self._key(np.where(ok[..., None], c, 0))
        pos = np.minimum(np.searchsorted(self._keys, k), len(self._keys) - 1)
        hit = ok & (self._keys[pos] == k)
        return np.where(hit, pos, -1)

    def positions(self):
        return self.lo + (self.coords + self.offset) * (self.hi - self.lo) / self.resolution

    def conv(self, feats, w, b):
        if self._nbr is None:
            self._nbr = L.sparse_neighbors(self.lookup, self.coords)
        return L.sparse_conv3(feats, self._nbr, w, b)

    def down(self, feats, w, b, factor):
        parents, out = L.sparse_down(self.coords, feats, w, b, factor)
        nxt = SparseLayout(self.resolution // factor, self.lo, self.hi, parents, self.offset)
        self.parent_index = nxt.lookup(self.coords // factor)
        return nxt, out

    def up_from(self, coarse, feats, w, b, factor):
        return L.sparse_up(self.coords, self.parent_index, feats, w, b, factor)


def check_divisible(resolution: int, ucfg: UNetConfig) -> None:
    total = int(np.prod(ucfg.down_factors)) if ucfg.down_factors else 1
    if resolution % total:
        raise ValueError(
            f"resolution {resolution} is not divisible through all {ucfg.levels} levels (needs a multiple of {total})")


def _resblock(layout, x, weights, path):
    h = layout.conv(L.gelu(L.layer_norm(x, weights, f"{path}/norm1")),
                    L.param(weights, f"{path}/conv1/w"), L.param(weights, f"{path}/conv1/b"))
    h = layout.conv(L.gelu(L.layer_norm(h, weights, f"{path}/norm2")),
                    L.param(weights, f"{path}/conv2/w"), L.param(weights, f"{path}/conv2/b"))
    skip = x @ L.param(weights, f"{path}/skip/w") if f"{path}/skip/w" in weights else x
    return skip + h


def _bottleneck(x, coords, ucfg: UNetConfig, weights, prefix):
    if ucfg.transformer_layers == 0:
        return x
    proj = f"{prefix}/bottleneck/in/w" in weights
    h = L.linear(x, weights, f"{prefix}/bottleneck/in") if proj else x
    h = h + L.sinusoidal_encoding(coords, ucfg.transformer_width)
    for t in range(ucfg.transformer_layers):
        h = L.transformer_layer(h, weights, f"{prefix}/bottleneck/layer{t}", ucfg.transformer_heads)
    return L.linear(h, weights, f"{prefix}/bottleneck/out") if proj else h


def unet_forward(layout, feats, ucfg: UNetConfig, weights, prefix: str, pixel_fn,
                 attention_heads: int = 1, return_intermediates: bool = False):
    """Shared UNet skeleton.

    Args:
        layout: ``DenseLayout`` or ``SparseLayout`` of the finest level.
        feats: ``(N, C0)`` input features.
        ucfg: level widths and bottleneck settings.
        weights: parameter mapping.
        prefix: weight path prefix (``"voxel"`` or ``"sparse"``).
        pixel_fn: maps ``(N, 3)`` world positions to ``(p, valid)`` pixel features.
        attention_heads: heads of the cross-attention.
        return_intermediates: also return a dict with per-level skips and the
            bottleneck input (``"pre_bottleneck"``).
    """
    check_divisible(layout.resolution, ucfg)
    x = np.asarray(feats, float)
    if x.shape != (len(layout), ucfg.channels[0]):
        raise ValueError(f"input features {x.shape} do not match ({len(layout)}, {ucfg.channels[0]})")
    factors = ucfg.down_factors
    layouts, skips = [], []
    for lvl in range(ucfg.levels):
        x = _resblock(layout, x, weights, f"{prefix}/down{lvl}/res")
        path = f"{prefix}/down{lvl}/attn"
        p, valid = pixel_fn(layout.positions())
        x = projection_aware_cross_attention(L.layer_norm(x, weights, f"{path}/norm"), p,
                                             CrossAttentionParams.from_weights(weights, path),
                                             valid, attention_heads)
        layouts.append(layout)
        skips.append(x)
        if lvl < ucfg.levels - 1:
            layout, x = layout.down(x, L.param(weights, f"{prefix}/down{lvl}/down/w"),
                                    L.param(weights, f"{prefix}/down{lvl}/down/b"), factors[lvl])
    pre = x
    x = _bottleneck(x, layout.coords, ucfg, weights, prefix)
    post = x
    for lvl in range(ucfg.levels - 2, -1, -1):
        x = layouts[lvl].up_from(layouts[lvl + 1], x, L.param(weights, f"{prefix}/up{lvl}/up/w"),
                                 L.param(weights, f"{prefix}/up{lvl}/up/b"), factors[lvl])
        x = _resblock(layouts[lvl], np.concatenate([x, skips[lvl]], axis=1), weights, f"{prefix}/up{lvl}/res")
    out = L.linear(L.layer_norm(x, weights, f"{prefix}/out_norm"), weights, f"{prefix}/out")
    if return_intermediates:
        return out, {"pre_bottleneck": pre, "post_bottleneck": post, "skips": skips,
                     "bottleneck_coords": layout.coords}
    return out


def _pixel_fn(encoded: EncodedViews):
    return lambda positions: gather_pixel_features(encoded, positions)


def voxelformer_forward(views: ViewSet, config: ArchConfig, weights, spec: GridSpec | None = None,
                        encoded: EncodedViews | None = None, return_intermediates: bool = False):
    """Coarse occupancy logits on a dense grid (default ``[-1, 1]^3`` at the first level resolution)."""
    spec = spec or GridSpec.cube(config.voxel.resolutions[0])
    check_divisible(spec.resolution, config.voxel)
    encoded = encoded if encoded is not None else encode_views(views, config, weights)
    layout = DenseLayout(spec.resolution, spec.lo, spec.hi, offset=0.5)
    token = L.param(weights, "voxel/token")
    feats = np.broadcast_to(token, (len(layout), len(token)))
    res = unet_forward(layout, feats, config.voxel, weights, "voxel", _pixel_fn(encoded),
                       config.attention_heads, return_intermediates)
    out, inter = res if return_intermediates else (res, None)
    vals = out.reshape(spec.shape + (out.shape[1],))
    if out.shape[1] == 1:
        vals = vals[..., 0]
    vol = DenseVolume(spec, vals)
    return (vol, inter) if return_intermediates else vol


def sparse_unet_forward(sparse: SparseVoxelGrid, config: ArchConfig, weights, pixel_fn,
                        return_intermediates: bool = False):
    """Sparse UNet on ``sparse`` with an arbitrary pixel-feature provider."""
    if len(sparse) == 0:
        raise ValueError("sparse voxel grid is empty")
    spec = sparse.spec
    layout = SparseLayout(spec.resolution, spec.lo, spec.hi, sparse.coords, offset=0.0)
    return unet_forward(layout, sparse.features, config.sparse, weights, "sparse", pixel_fn,
                        config.attention_heads, return_intermediates)


def sparsevoxelformer_forward(views: ViewSet, sparse: SparseVoxelGrid, config: ArchConfig, weights,
                              encoded: EncodedViews | None = None, return_intermediates: bool = False):
    """Per-site output features on the same coordinates as ``sparse``."""
    if len(sparse) == 0:
        raise ValueError("sparse voxel grid is empty")
    encoded = encoded if encoded is not None else encode_views(views, config, weights)
    res = sparse_unet_forward(sparse, config, weights, _pixel_fn(encoded), return_intermediates)
    out, inter = res if return_intermediates else (res, None)
    grid = sparse.with_features(out)
    return (grid, inter) if return_intermediates else grid
