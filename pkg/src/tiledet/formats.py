"""Dense tensors and the three element formats used by the inference engine.

Values travel through the pipeline in one of three formats:

* ``fp32`` -- IEEE754 binary32, the baseline.
* ``fp16`` -- IEEE754 binary16 storage; arithmetic accumulates in fp32.
* ``q16``  -- signed 16-bit fixed point, ``f`` fractional bits, per-tensor
  scale chosen from a max-abs calibration.

All conversions round half to even and saturate instead of wrapping.
"""

import struct
from dataclasses import dataclass

import numpy as np

FP32 = "fp32"
FP16 = "fp16"
Q16 = "q16"
FORMATS = (FP32, FP16, Q16)

INT16_MIN = -32768
INT16_MAX = 32767

_DTYPES = {FP32: np.float32, FP16: np.float16, Q16: np.int16}


@dataclass(frozen=True)
class FixedPointFormat:
    """Signed 16-bit Q-format with ``frac_bits`` bits after the binary point."""

    frac_bits: int
    total_bits: int = 16

    def __post_init__(self):
        if self.total_bits != 16:
            raise ValueError("only 16-bit fixed point is supported")
        if not 0 <= self.frac_bits <= 15:
            raise ValueError(f"frac_bits must be in [0, 15], got {self.frac_bits}")

    @property
    def step(self) -> float:
        return 2.0 ** -self.frac_bits

    @property
    def min_value(self) -> float:
        return INT16_MIN * self.step

    @property
    def max_value(self) -> float:
        return INT16_MAX * self.step


def fit_frac_bits(max_abs: float) -> int:
    """Largest f in [0, 15] whose representable range still covers ``max_abs``."""
    if max_abs < 0 or not np.isfinite(max_abs):
        raise ValueError(f"calibration max-abs must be finite and >= 0, got {max_abs}")
    for f in range(15, -1, -1):
        if max_abs <= INT16_MAX * 2.0 ** -f:
            return f
    return 0


@dataclass(frozen=True)
class QuantizationSpec:
    """A fixed-point format together with the calibration that selected it."""

    fmt: FixedPointFormat
    calibration: float | None = None

    @classmethod
    def from_calibration(cls, max_abs: float) -> "QuantizationSpec":
        return cls(FixedPointFormat(fit_frac_bits(max_abs)), float(max_abs))


def quantize_fixed(x: float, fmt: FixedPointFormat) -> int:
    """Scalar value -> saturating int16 code, round half to even."""
    scaled = float(x) * 2.0 ** fmt.frac_bits
    code = int(np.rint(scaled))
    return max(INT16_MIN, min(INT16_MAX, code))


def dequantize_fixed(code: int, fmt: FixedPointFormat) -> float:
    return float(code) * fmt.step


def quantize_array(x: np.ndarray, fmt: FixedPointFormat) -> np.ndarray:
    # float64 so the scaled value and the tie-breaking match the scalar path
    scaled = np.asarray(x, dtype=np.float64) * 2.0 ** fmt.frac_bits
    return np.clip(np.rint(scaled), INT16_MIN, INT16_MAX).astype(np.int16)


def dequantize_array(codes: np.ndarray, fmt: FixedPointFormat) -> np.ndarray:
    return codes.astype(np.float64) * fmt.step


# --- IEEE754 binary16 <-> binary32, software bit-level conversion ----------
#
# Round-to-nearest-even on narrowing, exact on widening. Overflow saturates
# to the signed infinity; NaN payloads are truncated but kept non-zero.

def float_to_half_bits(fbits: int) -> int:
    """binary32 bit pattern -> binary16 bit pattern."""
    fbits &= 0xFFFFFFFF
    h_sgn = (fbits >> 16) & 0x8000
    f_exp = fbits & 0x7F800000
    f_sig = fbits & 0x007FFFFF

    if f_exp >= 0x47800000:
        if f_exp == 0x7F800000:
            if f_sig != 0:
                ret = 0x7C00 + (f_sig >> 13)
                if ret == 0x7C00:  # payload vanished, keep it a NaN
                    ret += 1
                return h_sgn + ret
            return h_sgn + 0x7C00  # infinity
        return h_sgn + 0x7C00  # overflow -> infinity

    if f_exp <= 0x38000000:
        if f_exp < 0x33000000:
            return h_sgn  # underflow -> signed zero
        # subnormal half: restore the hidden bit, shift into place
        f_exp >>= 23
        sig = 0x00800000 + f_sig
        sig >>= 113 - f_exp
        # the shift may have dropped sticky bits; fold them into the tie check
        if (sig & 0x3FFF) != 0x1000 or (fbits & 0x7FF) != 0:
            sig += 0x1000
        return h_sgn + (sig >> 13)

    h_exp = (f_exp - 0x38000000) >> 13
    if (f_sig & 0x3FFF) != 0x1000:
        f_sig += 0x1000
    # a carry out of the significand bumps the exponent, possibly to infinity
    return h_sgn + h_exp + (f_sig >> 13)


def half_to_float_bits(hbits: int) -> int:
    """binary16 bit pattern -> binary32 bit pattern (exact)."""
    hbits &= 0xFFFF
    f_sgn = (hbits & 0x8000) << 16
    h_exp = hbits & 0x7C00
    h_sig = hbits & 0x03FF

    if h_exp == 0:
        if h_sig == 0:
            return f_sgn
        # normalise the subnormal significand
        h_sig <<= 1
        while (h_sig & 0x0400) == 0:
            h_sig <<= 1
            h_exp += 1
        f_exp = (127 - 15 - h_exp) << 23
        return f_sgn + f_exp + ((h_sig & 0x03FF) << 13)
    if h_exp == 0x7C00:
        return f_sgn + 0x7F800000 + (h_sig << 13)
    return f_sgn + (((hbits & 0x7FFF) + 0x1C000) << 13)


def to_half(x: float) -> int:
    """float -> binary16 bit pattern."""
    (fbits,) = struct.unpack("<I", struct.pack("<f", x))
    return float_to_half_bits(fbits)


def from_half(code: int) -> float:
    """binary16 bit pattern -> float."""
    (x,) = struct.unpack("<f", struct.pack("<I", half_to_float_bits(code)))
    return x


# --- Tensor -----------------------------------------------------------------

_TAG_FP32 = 0
_TAG_FP16 = 1
_TAG_Q16 = 2  # q16 stores frac_bits in bits 8..15 of the tag


@dataclass(frozen=True)
class Tensor:
    """Immutable dense H x W x C array plus its element format.

    ``data`` is row-major with channels fastest; dtype float32 for fp32,
    float16 for fp16, int16 codes for q16 (``qspec`` then carries the scale).
    """

    data: np.ndarray
    fmt: str = FP32
    qspec: QuantizationSpec | None = None

    def __post_init__(self):
        if self.fmt not in FORMATS:
            raise ValueError(f"unknown format {self.fmt!r}")
        if self.data.ndim != 3:
            raise ValueError(f"tensor data must be (H, W, C), got shape {self.data.shape}")
        if min(self.data.shape) < 1:
            raise ValueError(f"tensor dims must be >= 1, got {self.data.shape}")
        if self.data.dtype != _DTYPES[self.fmt]:
            raise ValueError(
                f"format {self.fmt} expects dtype {_DTYPES[self.fmt].__name__},"
                f" got {self.data.dtype}"
            )
        if self.fmt == Q16 and self.qspec is None:
            raise ValueError("q16 tensors need a QuantizationSpec")
        self.data.setflags(write=False)

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def channels(self) -> int:
        return self.data.shape[2]

    def to_float32(self) -> np.ndarray:
        """Decode to a float32 array regardless of storage format."""
        if self.fmt == Q16:
            return dequantize_array(self.data, self.qspec.fmt).astype(np.float32)
        return self.data.astype(np.float32)


def tensor_from_array(a: np.ndarray) -> Tensor:
    return Tensor(np.ascontiguousarray(a, dtype=np.float32))


def convert_tensor(t: Tensor, fmt: str, qspec: QuantizationSpec | None = None) -> Tensor:
    """Element-wise format conversion; shape is always preserved."""
    if fmt not in FORMATS:
        raise ValueError(f"unknown format {fmt!r}")
    values = t.to_float32()
    if fmt == FP32:
        return Tensor(values, FP32)
    if fmt == FP16:
        return Tensor(values.astype(np.float16), FP16)
    if qspec is None:
        max_abs = float(np.max(np.abs(values))) if values.size else 0.0
        qspec = QuantizationSpec.from_calibration(max_abs)
    return Tensor(quantize_array(values, qspec.fmt), Q16, qspec)


# --- Raw dump format for test fixtures --------------------------------------
#
# Little-endian header of four uint32 (H, W, C, tag) followed by the flat
# element buffer. The tag is 0 for fp32, 1 for fp16; for q16 the low byte is
# 2 and bits 8..15 hold frac_bits.

def dump_tensor(t: Tensor, path) -> None:
    if t.fmt == FP32:
        tag = _TAG_FP32
    elif t.fmt == FP16:
        tag = _TAG_FP16
    else:
        tag = _TAG_Q16 | (t.qspec.fmt.frac_bits << 8)
    header = struct.pack("<4I", t.height, t.width, t.channels, tag)
    buf = np.ascontiguousarray(t.data)
    if buf.dtype.byteorder == ">":  # pragma: no cover - LE platforms only
        buf = buf.byteswap().view(buf.dtype.newbyteorder("<"))
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(buf.tobytes())


def load_tensor(path) -> Tensor:
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < 16:
        raise ValueError("tensor dump too short for header")
    h, w, c, tag = struct.unpack("<4I", raw[:16])
    body = raw[16:]
    if tag == _TAG_FP32:
        fmt, dtype, qspec = FP32, "<f4", None
    elif tag == _TAG_FP16:
        fmt, dtype, qspec = FP16, "<f2", None
    elif (tag & 0xFF) == _TAG_Q16:
        f = tag >> 8
        fmt, dtype, qspec = Q16, "<i2", QuantizationSpec(FixedPointFormat(f))
    else:
        raise ValueError(f"unknown tensor format tag {tag:#x}")
    expected = h * w * c * np.dtype(dtype).itemsize
    if len(body) != expected:
        raise ValueError(f"tensor dump body is {len(body)} bytes, expected {expected}")
    data = np.frombuffer(body, dtype=dtype).reshape(h, w, c)
    return Tensor(data.astype(data.dtype.newbyteorder("=")), fmt, qspec)
