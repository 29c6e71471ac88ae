"""Numpy building blocks shared by the encoder, UNets and heads.

All activations are float64; parameters are stored as float32 and upcast on use.
"""
from __future__ import annotations

import numpy as np

# 3x3x3 neighbor offsets; index k = 9*(dx+1) + 3*(dy+1) + (dz+1).
OFFSETS_27 = np.array([(dx, dy, dz) for dx in (-1, 0, 1) for dy in (-1, 0, 1) for dz in (-1, 0, 1)])
# 2x2x2 child offsets; index k = 4*ox + 2*oy + oz.
OFFSETS_8 = np.array([(ox, oy, oz) for ox in (0, 1) for oy in (0, 1) for oz in (0, 1)])


def param(weights, path) -> np.ndarray:
    return np.asarray(weights[path], dtype=np.float64)


def linear(x, weights, path, bias=True):
    y = x @ param(weights, f"{path}/w")
    if bias:
        y = y + param(weights, f"{path}/b")
    return y


def layer_norm(x, weights, path, eps=1e-5):
    mu = x.mean(axis=-1, keepdims=True)
    var = x.var(axis=-1, keepdims=True)
    return (x - mu) / np.sqrt(var + eps) * param(weights, f"{path}/g") + param(weights, f"{path}/b")


def gelu(x):
    return 0.5 * x * (1.0 + np.tanh(0.7978845608028654 * (x + 0.044715 * x ** 3)))


def relu(x):
    return np.maximum(x, 0.0)


def sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def softmax(logits, axis=-1):
    z = logits - np.max(logits, axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


def sinusoidal_encoding(coords, width: int, base: float = 10000.0) -> np.ndarray:
    """Parameter-free encoding of integer coordinates, zero-padded to ``width``.

    Each axis gets ``width // 6`` frequencies, each contributing a sin and a cos.
    """
    c = np.asarray(coords, float)
    nf = width // 6
    out = np.zeros((len(c), width))
    if nf == 0:
        return out
    freqs = base ** (-np.arange(nf) / nf)
    for a in range(3):
        ang = c[:, a:a + 1] * freqs
        out[:, a * 2 * nf:a * 2 * nf + nf] = np.sin(ang)
        out[:, a * 2 * nf + nf:(a + 1) * 2 * nf] = np.cos(ang)
    return out


def self_attention(x, weights, path, heads: int):
    n, w = x.shape
    qkv = linear(x, weights, f"{path}/qkv")
    q, k, v = np.split(qkv, 3, axis=1)
    dh = w // heads
    q = q.reshape(n, heads, dh).transpose(1, 0, 2)
    k = k.reshape(n, heads, dh).transpose(1, 0, 2)
    v = v.reshape(n, heads, dh).transpose(1, 0, 2)
    att = softmax(q @ k.transpose(0, 2, 1) / np.sqrt(dh))
    out = (att @ v).transpose(1, 0, 2).reshape(n, w)
    return linear(out, weights, f"{path}/proj")


def transformer_layer(x, weights, path, heads: int):
    """Pre-norm block: attention then MLP, each with a residual."""
    x = x + self_attention(layer_norm(x, weights, f"{path}/norm1"), weights, path, heads)
    h = gelu(linear(layer_norm(x, weights, f"{path}/norm2"), weights, f"{path}/mlp1"))
    return x + linear(h, weights, f"{path}/mlp2")


# --------------------------------------------------------------------------
# Dense 3D operators on (R, R, R, C) arrays

def dense_conv3(x, w, b):
    """3x3x3 convolution with zero padding; ``w`` is ``(27, C_in, C_out)``."""
    r0, r1, r2, _ = x.shape
    xp = np.pad(x, ((1, 1), (1, 1), (1, 1), (0, 0)))
    out = np.zeros((r0, r1, r2, w.shape[2]))
    for k, (dx, dy, dz) in enumerate(OFFSETS_27):
        out += xp[1 + dx:1 + dx + r0, 1 + dy:1 + dy + r1, 1 + dz:1 + dz + r2] @ w[k]
    return out + b


def dense_down(x, w, b, factor: int):
    if factor == 1:
        return x @ w[0] + b
    r = x.shape[0]
    if r % 2:
        raise ValueError(f"cannot halve odd resolution {r}")
    out = 0.0
    for k, (ox, oy, oz) in enumerate(OFFSETS_8):
        out = out + x[ox::2, oy::2, oz::2] @ w[k]
    return out + b


def dense_up(x, w, b, factor: int):
    if factor == 1:
        return x @ w[0] + b
    r = x.shape[0]
    out = np.zeros((2 * r,) * 3 + (w.shape[2],))
    for k, (ox, oy, oz) in enumerate(OFFSETS_8):
        out[ox::2, oy::2, oz::2] = x @ w[k] + b
    return out


# --------------------------------------------------------------------------
# Sparse operators on (coords, features) with sorted unique coords

def sparse_neighbors(grid_lookup, coords) -> np.ndarray:
    """``(N, 27)`` row index of each neighbor, ``-1`` where the site is absent."""
    nbr = coords[:, None, :] + OFFSETS_27[None]
    return grid_lookup(nbr)


def sparse_conv3(feats, nbr, w, b):
    """Submanifold 3x3x3 convolution: outputs only at input sites, absent neighbors are zero."""
    out = np.zeros((len(feats), w.shape[2]))
    for k in range(27):
        idx = nbr[:, k]
        have = idx >= 0
        g = np.zeros_like(feats)
        g[have] = feats[idx[have]]
        out += g @ w[k]
    return out + b


def sparse_down(coords, feats, w, b, factor: int):
    """Strided 2x2x2 convolution onto the parents of occupied sites.

    Returns ``(parent_coords, parent_feats)`` sorted lexicographically.
    """
    if factor == 1:
        return coords, feats @ w[0] + b
    parents, inv = np.unique(coords // 2, axis=0, return_inverse=True)
    inv = inv.reshape(-1)
    child = coords % 2
    k_of = 4 * child[:, 0] + 2 * child[:, 1] + child[:, 2]
    out = np.zeros((len(parents), w.shape[2]))
    for k in range(8):
        sel = k_of == k
        if sel.any():
            # each parent has at most one child per offset, so plain indexing is safe
            out[inv[sel]] += feats[sel] @ w[k]
    return parents, out + b


def sparse_up(fine_coords, parent_index, coarse_feats, w, b, factor: int):
    """Transposed counterpart of ``sparse_down`` evaluated at the fine sites."""
    if factor == 1:
        return coarse_feats @ w[0] + b
    child = fine_coords % 2
    k_of = 4 * child[:, 0] + 2 * child[:, 1] + child[:, 2]
    out = np.zeros((len(fine_coords), w.shape[2]))
    for k in range(8):
        sel = k_of == k
        if sel.any():
            out[sel] = coarse_feats[parent_index[sel]] @ w[k]
    return out + b
