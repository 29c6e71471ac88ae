"""Six-term reconstruction loss: rendering terms plus volume supervision."""
from __future__ import annotations

import json
import warnings
from dataclasses import asdict, dataclass, fields

import numpy as np


class EmptyMaskWarning(UserWarning):
    """Raised as a warning when a masked loss has no pixels to average."""


@dataclass(frozen=True)
class LossWeights:
    color_mse: float = 80.0
    color_perceptual: float = 2.0
    normal_mse: float = 16.0
    normal_perceptual: float = 2.0
    occ: float = 8.0
    sdf: float = 8.0

    def __post_init__(self):
        for f in fields(self):
            if not getattr(self, f.name) >= 0:
                raise ValueError(f"loss weight {f.name} must be non-negative")

    def as_tuple(self) -> tuple[float, ...]:
        return tuple(getattr(self, f.name) for f in fields(self))


TERM_NAMES = ("mse_color", "lpips_color", "mse_normal", "lpips_normal", "occ", "sdf")


@dataclass(frozen=True)
class LossBreakdown:
    """Unweighted terms and the weighted total.

    The ``lpips_*`` fields hold the gradient-pyramid substitute, not LPIPS.
    """

    mse_color: float
    lpips_color: float
    mse_normal: float
    lpips_normal: float
    occ: float
    sdf: float
    total: float

    @classmethod
    def from_terms(cls, terms, weights: LossWeights) -> "LossBreakdown":
        terms = [float(t) for t in terms]
        total = float(sum(w * t for w, t in zip(weights.as_tuple(), terms)))
        return cls(*terms, total)

    def terms(self) -> tuple[float, ...]:
        return tuple(getattr(self, n) for n in TERM_NAMES)

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)


def image_mse(a, b, mask=None, return_grad: bool = False):
    """Mean squared error over masked pixels and all channels.

    ``mask`` is a boolean ``(H, W)`` array (pass the union of the two image
    masks). An empty mask yields 0 and an ``EmptyMaskWarning``.
    """
    a = np.asarray(a, float)
    b = np.asarray(b, float)
    if a.shape != b.shape:
        raise ValueError(f"image shapes differ: {a.shape} vs {b.shape}")
    if mask is None:
        mask = np.ones(a.shape[:2], dtype=bool)
    mask = np.asarray(mask, bool)
    channels = 1 if a.ndim == 2 else a.shape[2]
    n = int(mask.sum()) * channels
    grad = np.zeros_like(a)
    if n == 0:
        warnings.warn("image_mse: empty mask, loss defined as 0", EmptyMaskWarning, stacklevel=2)
        return (0.0, grad) if return_grad else 0.0
    diff = (a - b)[mask]
    value = float(np.sum(diff * diff) / n)
    if return_grad:
        grad[mask] = 2.0 * diff / n
        return value, grad
    return value


def _pool2(img):
    h, w = (img.shape[0] // 2) * 2, (img.shape[1] // 2) * 2
    x = img[:h, :w]
    return 0.25 * (x[0::2, 0::2] + x[1::2, 0::2] + x[0::2, 1::2] + x[1::2, 1::2])


def gradient_magnitude(img) -> np.ndarray:
    """Per-channel forward-difference gradient magnitude on the (H-1, W-1) interior."""
    gx = img[:-1, 1:] - img[:-1, :-1]
    gy = img[1:, :-1] - img[:-1, :-1]
    return np.sqrt(gx * gx + gy * gy)


def perceptual_substitute(a, b, levels: int = 3, level_weights=(1.0, 1.0, 1.0)) -> float:
    """Stand-in for LPIPS: L1 between image-gradient magnitudes on a pyramid.

    Level ``l + 1`` is a 2x2 mean-pool of level ``l``; each level contributes
    ``weight * mean |grad_mag(a) - grad_mag(b)|``. Levels smaller than 2x2 are
    skipped. This is not LPIPS and has no learned component.
    """
    a = np.asarray(a, float)
    b = np.asarray(b, float)
    if a.shape != b.shape:
        raise ValueError(f"image shapes differ: {a.shape} vs {b.shape}")
    if a.ndim == 2:
        a, b = a[..., None], b[..., None]
    total = 0.0
    for level in range(levels):
        if min(a.shape[:2]) < 2:
            break
        total += level_weights[level] * float(np.mean(np.abs(gradient_magnitude(a) - gradient_magnitude(b))))
        a, b = _pool2(a), _pool2(b)
    return total


def volume_mse(pred, gt) -> float:
    p = np.asarray(getattr(pred, "values", pred), float)
    g = np.asarray(getattr(gt, "values", gt), float)
    if p.shape != g.shape:
        raise ValueError(f"volume resolution mismatch: {p.shape} vs {g.shape}")
    return float(np.mean((p - g) ** 2))


def total_loss(rendered, references, pred_occ, gt_occ, pred_sdf, gt_sdf,
               weights: LossWeights | None = None) -> LossBreakdown:
    """Weighted sum of the six terms.

    ``rendered`` and ``references`` are matching sequences of objects with
    ``rgb``, ``normal`` and ``mask`` (render targets or input views); image
    terms are averaged over views using the union of each pair's masks.
    """
    weights = weights or LossWeights()
    rendered, references = list(rendered), list(references)
    if len(rendered) != len(references):
        raise ValueError(f"{len(rendered)} renders for {len(references)} reference views")
    terms = np.zeros(4)
    for r, ref in zip(rendered, references):
        union = np.asarray(r.mask, bool) | np.asarray(ref.mask, bool)
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", EmptyMaskWarning)
            terms[0] += image_mse(r.rgb, ref.rgb, union)
            terms[2] += image_mse(r.normal, ref.normal, union)
        terms[1] += perceptual_substitute(r.rgb, ref.rgb)
        terms[3] += perceptual_substitute(r.normal, ref.normal)
    if rendered:
        terms /= len(rendered)
    occ = volume_mse(pred_occ, gt_occ)
    sdf = volume_mse(pred_sdf, gt_sdf)
    return LossBreakdown.from_terms([*terms, occ, sdf], weights)
