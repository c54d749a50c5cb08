"""Tiled object-detection inference pipeline and dataset tooling."""

__version__ = "0.1.0"

from .detect import Detection, iou, merge, to_global
from .formats import (FP16, FP32, Q16, FixedPointFormat, QuantizationSpec,
                      Tensor, convert_tensor, dequantize_fixed, from_half,
                      quantize_fixed, to_half)
from .kernels import (GemmBlockParams, GemmShape, conv2d, dsc_conv2d,
                      gemm_blocked, gemm_reference, im2col,
                      select_block_params)
from .model import ModelGraph, bind_weights, parse_cfg, serialize_weights
from .tiling import (AreaProfile, PROFILES, TilePlan, axis_tiles, make_plan,
                     optimal_areas, slice_frame, verify_object_coverage)

__all__ = [
    "Detection", "iou", "merge", "to_global",
    "FP16", "FP32", "Q16", "FixedPointFormat", "QuantizationSpec", "Tensor",
    "convert_tensor", "dequantize_fixed", "from_half", "quantize_fixed",
    "to_half",
    "GemmBlockParams", "GemmShape", "conv2d", "dsc_conv2d", "gemm_blocked",
    "gemm_reference", "im2col", "select_block_params",
    "ModelGraph", "bind_weights", "parse_cfg", "serialize_weights",
    "AreaProfile", "PROFILES", "TilePlan", "axis_tiles", "make_plan",
    "optimal_areas", "slice_frame", "verify_object_coverage",
    "__version__",
]
