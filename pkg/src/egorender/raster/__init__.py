from .iuv import decode_iuv, encode_iuv, iuv_preview, load_iuv, read_iuv_array, save_iuv
from .rasterize import IUVImage, RasterError, rasterize, rasterize_body
from .sampling import (SamplingPlan, feature_render, feature_render_grad, render_features,
                       render_features_batch)

__all__ = [
    "IUVImage", "RasterError", "SamplingPlan", "decode_iuv", "encode_iuv", "feature_render",
    "feature_render_grad", "iuv_preview", "load_iuv", "rasterize", "rasterize_body", "read_iuv_array",
    "render_features", "render_features_batch", "save_iuv",
]
