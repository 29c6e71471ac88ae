from .attention import CrossAttentionParams, projection_aware_cross_attention
from .config import PAPER, PRESETS, TOY, ArchConfig, UNetConfig, preset
from .encoder import EncodedViews, encode_image, encode_views, gather_pixel_features, receptive_field
from .heads import query_heads
from .unet import (
    DenseLayout,
    SparseLayout,
    sparse_unet_forward,
    sparsevoxelformer_forward,
    unet_forward,
    voxelformer_forward,
)
from .weights import WeightStore, parameter_count, parameter_shapes

__all__ = [
    "ArchConfig", "CrossAttentionParams", "DenseLayout", "EncodedViews", "PAPER", "PRESETS",
    "SparseLayout", "TOY", "UNetConfig", "WeightStore", "encode_image", "encode_views",
    "gather_pixel_features", "parameter_count", "parameter_shapes", "preset",
    "projection_aware_cross_attention", "query_heads", "receptive_field", "sparse_unet_forward",
    "sparsevoxelformer_forward", "unet_forward", "voxelformer_forward",
]
