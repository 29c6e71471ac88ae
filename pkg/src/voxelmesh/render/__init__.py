from .chain import sdf_color_loss, sdf_color_loss_grad
from .loss import (
    EmptyMaskWarning,
    LossBreakdown,
    LossWeights,
    image_mse,
    perceptual_substitute,
    total_loss,
    volume_mse,
)
from .raster import RenderTarget, backprop_attributes, backprop_positions, rasterize

__all__ = [
    "EmptyMaskWarning", "LossBreakdown", "LossWeights", "RenderTarget",
    "backprop_attributes", "backprop_positions", "image_mse", "perceptual_substitute",
    "rasterize", "sdf_color_loss", "sdf_color_loss_grad", "total_loss", "volume_mse",
]
