"""The three per-point MLP heads: SDF, color texture and normal texture."""
from __future__ import annotations

import numpy as np

from .layers import linear, relu, sigmoid

FALLBACK_NORMAL = np.array([0.0, 0.0, 1.0])


def mlp2(x, weights, path):
    """``relu(x W0 + b0) W1 + b1``."""
    return linear(relu(linear(x, weights, f"{path}/0")), weights, f"{path}/1")


def query_heads(features, weights):
    """Evaluate all heads on ``(N, C)`` (or ``(C,)``) features.

    Returns ``(sdf, color, normal)``: ``sdf`` unbounded, ``color`` through a
    sigmoid, ``normal`` normalized (an exactly-zero output maps to +z).
    """
    x = np.asarray(features, float)
    single = x.ndim == 1
    x = np.atleast_2d(x)
    sdf = mlp2(x, weights, "heads/sdf")[:, 0]
    color = sigmoid(mlp2(x, weights, "heads/color"))
    raw = mlp2(x, weights, "heads/normal")
    norm = np.linalg.norm(raw, axis=1, keepdims=True)
    normal = np.where(norm > 0, raw / np.maximum(norm, 1e-300), FALLBACK_NORMAL)
    if single:
        return float(sdf[0]), color[0], normal[0]
    return sdf, color, normal
