"""Numeric layer kernels.

Convolution is lowered to matrix multiplication: im2col turns the activation
tensor into a (k*k*C, Hout*Wout) matrix and the kernel bank into the
(filters, k*k*C) left operand. The blocked GEMM walks the output in BM x BN
blocks, accumulating over K in BK chunks with TM output rows produced per
inner step; the same four parameters drive cache blocking here that would
drive shared-memory tiling on a GPU. Layers fall into two regimes, C1
(large spatial extent, few channels, the early layers) and C2 (small extent,
many channels, the late layers), each with its own block parameter set.

Three numeric paths share the block walk: fp32, fp16 storage with fp32
accumulation, and signed 16-bit fixed point with int32 accumulation and a
single final rescale.
"""

import math
from dataclasses import dataclass
from fractions import Fraction

import numpy as np
from numba import njit

from .detect import Detection
from .formats import INT16_MAX, fit_frac_bits, quantize_array
from . import model as _model

C1 = "C1"
C2 = "C2"

# C1 applies while the spatial extent dominates the channel depth
REGIME_THRESHOLD = 64

LEAKY_SLOPE = 0.1
BN_EPSILON = 1e-5


@dataclass(frozen=True)
class GemmShape:
    m: int
    n: int
    k: int

    def __post_init__(self):
        if min(self.m, self.n, self.k) < 1:
            raise ValueError(f"matrix dimensions must be >= 1, got {self}")


@dataclass(frozen=True)
class GemmBlockParams:
    bm: int  # rows per C/A block
    bn: int  # columns per C/B block
    bk: int  # A columns / B rows per accumulation chunk
    tm: int  # C elements of one column computed per work item

    def __post_init__(self):
        if min(self.bm, self.bn, self.bk, self.tm) < 1:
            raise ValueError(f"block parameters must be >= 1, got {self}")
        if self.bm % self.tm:
            raise ValueError(f"tm must divide bm, got {self}")


# Per-regime parameter sets; bk is bn/tm for C1 and min(bn, bm)/tm for C2.
C1_PARAMS = GemmBlockParams(bm=16, bn=16, bk=2, tm=8)
C2_PARAMS = GemmBlockParams(bm=64, bn=64, bk=8, tm=8)


def classify_tensor(h: int, w: int, c: int, threshold: int = REGIME_THRESHOLD) -> str:
    """C1 for wide shallow tensors, C2 for narrow deep ones."""
    return C1 if h * w >= threshold * c else C2


def classify_shape(shape: GemmShape, threshold: int = REGIME_THRESHOLD) -> str:
    # in the conv lowering N is the spatial extent and K scales with depth
    return C1 if shape.n >= threshold * shape.k else C2


def select_block_params(shape: GemmShape, threshold: int = REGIME_THRESHOLD) -> GemmBlockParams:
    return C1_PARAMS if classify_shape(shape, threshold) == C1 else C2_PARAMS


# --- im2col ------------------------------------------------------------------

def im2col(x: np.ndarray, size: int, stride: int = 1, padding: int = 0) -> np.ndarray:
    """(H, W, C) tensor -> (size*size*C, Hout*Wout) matrix.

    Column j is the receptive field of output position j (row-major over the
    output grid); rows are ordered channel-major, then kernel row, then kernel
    column. Padding contributes zeros.
    """
    h, w, c = x.shape
    num_h = h + 2 * padding - size
    num_w = w + 2 * padding - size
    if num_h < 0 or num_w < 0 or num_h % stride or num_w % stride:
        raise ValueError(
            f"kernel {size} stride {stride} pad {padding} does not produce an"
            f" integral output for input {h}x{w}")
    out_h = num_h // stride + 1
    out_w = num_w // stride + 1

    if padding:
        padded = np.zeros((h + 2 * padding, w + 2 * padding, c), dtype=x.dtype)
        padded[padding:padding + h, padding:padding + w] = x
    else:
        padded = x
    windows = np.lib.stride_tricks.sliding_window_view(padded, (size, size), axis=(0, 1))
    windows = windows[::stride, ::stride]          # (out_h, out_w, C, size, size)
    cols = windows.transpose(2, 3, 4, 0, 1).reshape(size * size * c, out_h * out_w)
    return np.ascontiguousarray(cols)


# --- reference GEMM ----------------------------------------------------------

@njit(cache=False)
def _gemm_naive_f64(a, b, out):  # pragma: no cover - exercised via wrapper
    m, k = a.shape
    n = b.shape[1]
    for i in range(m):
        for j in range(n):
            acc = 0.0
            for p in range(k):
                acc += a[i, p] * b[p, j]
            out[i, j] = acc


def gemm_reference(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Naive triple-loop product with float64 accumulation (the oracle)."""
    a = np.asarray(a)
    b = np.asarray(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ValueError(f"cannot multiply {a.shape} by {b.shape}")
    out = np.empty((a.shape[0], b.shape[1]), dtype=np.float64)
    _gemm_naive_f64(a.astype(np.float64), b.astype(np.float64), out)
    return out


# --- blocked GEMM ------------------------------------------------------------

def q16_gemm_formats(a: np.ndarray, b: np.ndarray) -> tuple:
    """Fractional-bit choices (fa, fb) for a quantized product.

    Max-abs calibration picks the finest step per operand, then both scales
    give back enough headroom that K worst-case products always fit an int32
    accumulator: 2^(15-ha) * 2^(15-hb) * K <= 2^30 when ha+hb >= log2(K).
    """
    k = a.shape[1]
    total = max(0, math.ceil(math.log2(k))) if k > 1 else 0
    ha = (total + 1) // 2
    hb = total // 2
    max_a = float(np.max(np.abs(a))) if a.size else 0.0
    max_b = float(np.max(np.abs(b))) if b.size else 0.0
    fa = max(0, fit_frac_bits(max_a) - ha)
    fb = max(0, fit_frac_bits(max_b) - hb)
    return fa, fb


def fixed_gemm_error_bound(a: np.ndarray, b: np.ndarray) -> float:
    """Analytic worst-case |C_q16 - C_fp64| for the q16 path on (a, b)."""
    fa, fb = q16_gemm_formats(a, b)
    da = 2.0 ** -(fa + 1)
    db = 2.0 ** -(fb + 1)
    max_a = float(np.max(np.abs(a))) if a.size else 0.0
    max_b = float(np.max(np.abs(b))) if b.size else 0.0
    k = a.shape[1]
    # per product: |a||b - b^| + |b^||a - a^|, summed over the K-loop
    return k * (max_a * db + (max_b + db) * da)


def _blocked_loop(a, b, out, params, acc_dtype):
    m, k = a.shape
    n = b.shape[1]
    bm, bn, bk, tm = params.bm, params.bn, params.bk, params.tm
    for i0 in range(0, m, bm):
        i1 = min(i0 + bm, m)
        for j0 in range(0, n, bn):
            j1 = min(j0 + bn, n)
            block = np.zeros((i1 - i0, j1 - j0), dtype=acc_dtype)
            for k0 in range(0, k, bk):
                k1 = min(k0 + bk, k)
                bs = b[k0:k1, j0:j1]
                for t0 in range(i0, i1, tm):
                    t1 = min(t0 + tm, i1)
                    block[t0 - i0:t1 - i0] += a[t0:t1, k0:k1] @ bs
            out[i0:i1, j0:j1] = block
    return out


def gemm_blocked(a: np.ndarray, b: np.ndarray,
                 params: GemmBlockParams | None = None,
                 fmt: str = "fp32") -> np.ndarray:
    """Block-decomposed C = A @ B in the requested numeric format.

    fp32 accumulates float32; fp16 rounds the operands to binary16 storage
    and accumulates float32; q16 quantizes both operands to 16-bit fixed
    point, accumulates int32 and applies one final rescale. Edge blocks are
    clamped, never padded. The accumulation order per output element is a
    pure function of (shape, params), so results are bit-reproducible.
    """
    a = np.asarray(a)
    b = np.asarray(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ValueError(f"cannot multiply {a.shape} by {b.shape}")
    shape = GemmShape(a.shape[0], b.shape[1], a.shape[1])
    if params is None:
        params = select_block_params(shape)

    if fmt == "fp32":
        out = np.empty((shape.m, shape.n), dtype=np.float32)
        return _blocked_loop(a.astype(np.float32), b.astype(np.float32), out,
                             params, np.float32)
    if fmt == "fp16":
        out = np.empty((shape.m, shape.n), dtype=np.float32)
        return _blocked_loop(a.astype(np.float16).astype(np.float32),
                             b.astype(np.float16).astype(np.float32),
                             out, params, np.float32)
    if fmt == "q16":
        fa, fb = q16_gemm_formats(a, b)
        from .formats import FixedPointFormat
        aq = quantize_array(a, FixedPointFormat(fa)).astype(np.int32)
        bq = quantize_array(b, FixedPointFormat(fb)).astype(np.int32)
        acc = np.empty((shape.m, shape.n), dtype=np.int32)
        _blocked_loop(aq, bq, acc, params, np.int32)
        return (acc.astype(np.float64) * 2.0 ** -(fa + fb)).astype(np.float32)
    raise ValueError(f"unknown gemm format {fmt!r}")


# --- layer kernels -----------------------------------------------------------

def leaky_relu(x: np.ndarray, slope: float = LEAKY_SLOPE) -> np.ndarray:
    return np.where(x > 0, x, np.asarray(slope, dtype=x.dtype) * x).astype(x.dtype)


def _activate(x: np.ndarray, activation: str) -> np.ndarray:
    if activation == "linear":
        return x
    if activation == "leaky":
        return leaky_relu(x)
    raise ValueError(f"unsupported activation {activation!r}")


def _fold_bn(y: np.ndarray, params: dict) -> np.ndarray:
    scale = params["bn_scale"] / np.sqrt(params["bn_var"] + BN_EPSILON)
    return y * scale + (params["bias"] - params["bn_mean"] * scale)


def conv2d(x: np.ndarray, weights: np.ndarray, bias: np.ndarray | None = None,
           stride: int = 1, padding: int = 0, activation: str = "linear",
           bn: dict | None = None, fmt: str = "fp32",
           params: GemmBlockParams | None = None) -> np.ndarray:
    """Standard convolution via im2col + blocked GEMM.

    weights is (filters, Cin, k, k); x is (H, W, Cin); returns (Hout, Wout,
    filters) float32.
    """
    filters, cin, k, k2 = weights.shape
    if k != k2:
        raise ValueError("only square kernels are supported")
    if cin != x.shape[2]:
        raise ValueError(f"weights expect {cin} input channels, got {x.shape[2]}")
    cols = im2col(np.asarray(x, dtype=np.float32), k, stride, padding)
    lhs = weights.reshape(filters, cin * k * k)
    y = gemm_blocked(lhs, cols, params=params, fmt=fmt)
    out_h = (x.shape[0] + 2 * padding - k) // stride + 1
    out_w = (x.shape[1] + 2 * padding - k) // stride + 1
    y = y.reshape(filters, out_h, out_w).transpose(1, 2, 0)
    if bn is not None:
        y = _fold_bn(y, bn)
    elif bias is not None:
        y = y + bias
    return _activate(y.astype(np.float32), activation)


def dsc_conv2d(x: np.ndarray, dw_weights: np.ndarray, pw_weights: np.ndarray,
               bias: np.ndarray | None = None, stride: int = 1, padding: int = 0,
               activation: str = "linear", bn: dict | None = None,
               fmt: str = "fp32",
               params: GemmBlockParams | None = None) -> np.ndarray:
    """Depthwise k x k convolution followed by a pointwise 1x1 convolution.

    dw_weights is (Cin, k, k); pw_weights is (filters, Cin). Bias, batch norm
    and the activation apply after the pointwise stage.
    """
    cin, k, k2 = dw_weights.shape
    if k != k2:
        raise ValueError("only square kernels are supported")
    if cin != x.shape[2]:
        raise ValueError(f"depthwise stage expects {cin} channels, got {x.shape[2]}")
    cols = im2col(np.asarray(x, dtype=np.float32), k, stride, padding)
    out_h = (x.shape[0] + 2 * padding - k) // stride + 1
    out_w = (x.shape[1] + 2 * padding - k) // stride + 1
    # rows of `cols` are channel-major, so each channel owns a k*k row band
    per_channel = cols.reshape(cin, k * k, out_h * out_w)
    dw = np.einsum("ckn,ck->cn", per_channel,
                   dw_weights.reshape(cin, k * k).astype(np.float32))
    y = gemm_blocked(pw_weights, dw.astype(np.float32), params=params, fmt=fmt)
    y = y.reshape(pw_weights.shape[0], out_h, out_w).transpose(1, 2, 0)
    if bn is not None:
        y = _fold_bn(y, bn)
    elif bias is not None:
        y = y + bias
    return _activate(y.astype(np.float32), activation)


def maxpool2d(x: np.ndarray, size: int, stride: int, padding: int = 0) -> np.ndarray:
    h, w, c = x.shape
    num_h = h + 2 * padding - size
    num_w = w + 2 * padding - size
    if num_h < 0 or num_w < 0 or num_h % stride or num_w % stride:
        raise ValueError(
            f"pool {size}/{stride} pad {padding} does not tile a {h}x{w} input")
    if padding:
        lowest = np.finfo(x.dtype).min if np.issubdtype(x.dtype, np.floating) \
            else np.iinfo(x.dtype).min
        padded = np.full((h + 2 * padding, w + 2 * padding, c), lowest, dtype=x.dtype)
        padded[padding:padding + h, padding:padding + w] = x
    else:
        padded = x
    windows = np.lib.stride_tricks.sliding_window_view(padded, (size, size), axis=(0, 1))
    return windows[::stride, ::stride].max(axis=(3, 4))


def upsample2d(x: np.ndarray, stride: int) -> np.ndarray:
    """Nearest-neighbour upsampling by an integer factor."""
    return np.repeat(np.repeat(x, stride, axis=0), stride, axis=1)


# --- YOLO head decode --------------------------------------------------------

def _sigmoid(x):
    x = np.asarray(x, dtype=np.float64)
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def yolo_decode(feature: np.ndarray, anchors, classes: int,
                conf_threshold: float, input_size: tuple,
                tile: int | None = None) -> list:
    """Feature map -> detections in tile pixel coordinates.

    feature is (H, W, n_anchors * (5 + classes)) with per-anchor channel
    blocks (tx, ty, tw, th, objectness, class scores...). Box centres are
    cell offsets squashed by a sigmoid, sizes are anchor-scaled exponentials.
    Confidence is the objectness sigmoid; boxes below conf_threshold are
    dropped. input_size is the (width, height) the anchors are expressed in.
    """
    fh, fw, fc = feature.shape
    n_anchors = len(anchors)
    if fc != n_anchors * (5 + classes):
        raise ValueError(
            f"feature has {fc} channels, expected {n_anchors}*(5+{classes})")
    in_w, in_h = input_size
    stride_x = in_w / fw
    stride_y = in_h / fh

    per_anchor = feature.reshape(fh, fw, n_anchors, 5 + classes)
    conf = _sigmoid(per_anchor[..., 4])
    keep = np.argwhere(conf >= conf_threshold)

    detections = []
    for gy, gx, ai in keep:
        t = per_anchor[gy, gx, ai]
        cx = (gx + _sigmoid(t[0])) * stride_x
        cy = (gy + _sigmoid(t[1])) * stride_y
        bw = anchors[ai][0] * math.exp(float(t[2]))
        bh = anchors[ai][1] * math.exp(float(t[3]))
        cls = int(np.argmax(t[5:5 + classes])) if classes else 0
        detections.append(Detection(
            class_id=cls, confidence=float(conf[gy, gx, ai]),
            x=float(cx - bw / 2), y=float(cy - bh / 2),
            w=float(bw), h=float(bh), tile=tile))
    return detections


# --- operation / memory footprint model --------------------------------------

def dsc_mac_ratio(size: int, filters: int) -> Fraction:
    """Exact DSC / standard multiply-accumulate ratio: 1/filters + 1/size^2."""
    return Fraction(1, filters) + Fraction(1, size * size)


def layer_footprint(spec, in_shape, out_shape, element_bytes: int = 4) -> dict:
    h, w, cout = out_shape
    cin = in_shape[2]
    if spec.kind == _model.CONVOLUTIONAL:
        macs = h * w * spec.size ** 2 * cin * cout
    elif spec.kind == _model.DEPTHWISE_SEPARABLE:
        macs = h * w * (spec.size ** 2 * cin + cin * cout)
    else:
        macs = 0
    param_count = _model.layer_param_count(spec, cin)
    return {
        "kind": spec.kind,
        "output_shape": list(out_shape),
        "macs": int(macs),
        "param_count": int(param_count),
        "param_bytes": int(param_count * element_bytes),
        "activation_bytes": int(h * w * cout * element_bytes),
    }


def footprint(graph, element_bytes: int = 4) -> dict:
    """Per-layer MACs plus parameter and activation memory for a graph."""
    layers = []
    for i, spec in enumerate(graph.layers):
        in_shape = graph.layer_input_shape(i)
        layers.append(layer_footprint(spec, in_shape, graph.shapes[i], element_bytes))
    return {
        "layers": layers,
        "total_macs": sum(l["macs"] for l in layers),
        "total_param_bytes": sum(l["param_bytes"] for l in layers),
        "total_activation_bytes": sum(l["activation_bytes"] for l in layers),
    }
