"""Layer-by-layer execution of a bound model over frames and tiles.

The engine walks the graph in order, keeping every layer output for route
concatenation. Convolutions run through the blocked GEMM in the requested
numeric format: fp32 end to end, fp16 storage between layers with fp32
accumulation, or the q16 fixed-point GEMM path with fp32 glue around it.
YOLO heads collect decoded detections in tile coordinates.

Frame-level inference slices the frame according to a tile plan, runs tiles
(optionally across worker threads), remaps detections into frame
coordinates and merges cross-tile duplicates. Tile results are reduced in
tile order, so detections are independent of the worker count.
"""

import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import kernels, model
from .detect import merge, to_global
from .tiling import TilePlan, slice_frame

DEFAULT_CONFIDENCE = 0.25
ENGINE_FORMATS = ("fp32", "fp16", "q16")


def _storage(x: np.ndarray, fmt: str) -> np.ndarray:
    # fp16 keeps activations in binary16 between layers; q16 quantizes
    # inside the GEMM only, so activations stay fp32 here
    return x.astype(np.float16) if fmt == "fp16" else x


@dataclass
class TileResult:
    detections: list
    layer_times_ns: list = field(default_factory=list)


def run_layers(graph: model.ModelGraph, x: np.ndarray, fmt: str = "fp32",
               confidence: float = DEFAULT_CONFIDENCE, tile: int | None = None,
               record_times: bool = False) -> TileResult:
    """Run one tile through every layer; x is (H, W, C) float32 in [0, 1]."""
    if not graph.bound:
        raise ValueError("the graph has no bound weights")
    if fmt not in ENGINE_FORMATS:
        raise ValueError(f"unknown engine format {fmt!r}")
    expected = graph.input_shape
    if tuple(x.shape) != tuple(expected):
        raise ValueError(f"input is {x.shape}, the network expects {expected}")

    net_size = (graph.input_shape[1], graph.input_shape[0])  # (W, H)
    x = _storage(np.asarray(x, dtype=np.float32), fmt)
    outputs = []
    detections = []
    times = []
    for i, spec in enumerate(graph.layers):
        t0 = time.perf_counter_ns() if record_times else 0
        params = graph.params[i]
        if spec.kind == model.CONVOLUTIONAL:
            bn = params if spec.batch_normalize else None
            y = kernels.conv2d(
                x.astype(np.float32), params["weights"], bias=params["bias"],
                stride=spec.stride, padding=spec.padding,
                activation=spec.activation, bn=bn, fmt=fmt)
            y = _storage(y, fmt)
        elif spec.kind == model.DEPTHWISE_SEPARABLE:
            bn = params if spec.batch_normalize else None
            y = kernels.dsc_conv2d(
                x.astype(np.float32), params["dw_weights"], params["pw_weights"],
                bias=params["bias"], stride=spec.stride, padding=spec.padding,
                activation=spec.activation, bn=bn, fmt=fmt)
            y = _storage(y, fmt)
        elif spec.kind == model.MAXPOOL:
            y = kernels.maxpool2d(x, spec.size, spec.stride, spec.padding)
        elif spec.kind == model.UPSAMPLE:
            y = kernels.upsample2d(x, spec.stride)
        elif spec.kind == model.ROUTE:
            y = np.concatenate([outputs[s] for s in spec.sources], axis=2)
        elif spec.kind == model.YOLO:
            feature = x.astype(np.float32)
            anchors = [spec.anchors[m] for m in spec.mask]
            detections.extend(kernels.yolo_decode(
                feature, anchors, spec.classes, confidence, net_size, tile=tile))
            y = x
        else:  # pragma: no cover - parse_cfg rejects unknown kinds
            raise ValueError(f"unsupported layer kind {spec.kind}")
        if record_times:
            times.append(time.perf_counter_ns() - t0)
        outputs.append(y)
        x = y
    return TileResult(detections, times)


@dataclass
class FrameResult:
    detections: list              # merged, frame coordinates
    per_tile: list                # raw per-tile detection counts
    stage_times_ns: dict


def run_frame(graph: model.ModelGraph, frame: np.ndarray, plan: TilePlan,
              fmt: str = "fp32", confidence: float = DEFAULT_CONFIDENCE,
              iou_threshold: float = 0.5, workers: int = 1) -> FrameResult:
    """Slice -> per-tile inference -> remap -> merge, with stage timings.

    frame is (H, W, C) uint8 or float; values are scaled to [0, 1] before
    inference. Detections come back merged in frame coordinates.
    """
    stage = {}
    t0 = time.perf_counter_ns()
    tiles = slice_frame(frame, plan)
    stage["slice_ns"] = time.perf_counter_ns() - t0

    def infer(args):
        index, tile_img = args
        x = tile_img.astype(np.float32)
        if frame.dtype == np.uint8:
            x /= 255.0
        if x.ndim == 2:
            x = x[..., None]
        return run_layers(graph, x, fmt=fmt, confidence=confidence, tile=index)

    t0 = time.perf_counter_ns()
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(infer, enumerate(tiles)))
    else:
        results = [infer(item) for item in enumerate(tiles)]
    stage["inference_ns"] = time.perf_counter_ns() - t0

    t0 = time.perf_counter_ns()
    remapped = [to_global(d, plan) for r in results for d in r.detections]
    merged = merge(remapped, iou_threshold)
    stage["postprocess_ns"] = time.perf_counter_ns() - t0

    return FrameResult(
        detections=merged,
        per_tile=[len(r.detections) for r in results],
        stage_times_ns=stage)
