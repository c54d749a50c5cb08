import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from tiledet import formats
from tiledet.formats import (FP16, FP32, Q16, FixedPointFormat,
                             QuantizationSpec, Tensor, convert_tensor,
                             dequantize_fixed, dump_tensor, fit_frac_bits,
                             from_half, load_tensor, quantize_fixed, to_half)


class TestFixedPoint:
    def test_zero_maps_to_zero(self):
        assert quantize_fixed(0.0, FixedPointFormat(8)) == 0

    def test_one_at_f8(self):
        assert quantize_fixed(1.0, FixedPointFormat(8)) == 256

    def test_dequantize_examples(self):
        assert dequantize_fixed(256, FixedPointFormat(8)) == 1.0
        assert dequantize_fixed(-32768, FixedPointFormat(15)) == -1.0

    def test_saturation_never_wraps(self):
        fmt = FixedPointFormat(8)
        assert quantize_fixed(1e9, fmt) == 32767
        assert quantize_fixed(-1e9, fmt) == -32768

    def test_round_half_to_even(self):
        fmt = FixedPointFormat(0)
        assert quantize_fixed(0.5, fmt) == 0
        assert quantize_fixed(1.5, fmt) == 2
        assert quantize_fixed(2.5, fmt) == 2
        assert quantize_fixed(-0.5, fmt) == 0

    def test_roundtrip_error_bound_randomized(self):
        # 10k uniform values per format: |x - deq(quant(x))| <= half a step
        rng = np.random.default_rng(7)
        for f in (0, 4, 8, 12, 15):
            fmt = FixedPointFormat(f)
            xs = rng.uniform(fmt.min_value, fmt.max_value, size=10_000)
            for x in xs:
                err = abs(x - dequantize_fixed(quantize_fixed(x, fmt), fmt))
                assert err <= 2.0 ** -(f + 1) + 1e-15

    def test_array_path_matches_scalar(self):
        rng = np.random.default_rng(8)
        fmt = FixedPointFormat(9)
        xs = rng.uniform(-80, 80, size=2000).astype(np.float32)
        codes = formats.quantize_array(xs, fmt)
        for x, c in zip(xs, codes):
            assert quantize_fixed(float(x), fmt) == c

    def test_invalid_frac_bits(self):
        with pytest.raises(ValueError):
            FixedPointFormat(16)
        with pytest.raises(ValueError):
            FixedPointFormat(-1)

    @given(st.floats(min_value=-120.0, max_value=120.0,
                     allow_nan=False, allow_infinity=False),
           st.integers(min_value=0, max_value=15))
    @settings(max_examples=300, deadline=None)
    def test_roundtrip_property(self, x, f):
        fmt = FixedPointFormat(f)
        if not fmt.min_value <= x <= fmt.max_value:
            return
        err = abs(x - dequantize_fixed(quantize_fixed(x, fmt), fmt))
        assert err <= 2.0 ** -(f + 1) + 1e-12


class TestCalibration:
    def test_picks_largest_fitting_f(self):
        # max-abs 1.0: f=15 would need 1.0*32768 <= 32767, so f=14 wins
        assert fit_frac_bits(1.0) == 14
        assert fit_frac_bits(0.0) == 15
        assert fit_frac_bits(100.0) == 8
        assert fit_frac_bits(1e9) == 0

    def test_spec_from_calibration(self):
        spec = QuantizationSpec.from_calibration(3.5)
        assert spec.calibration == 3.5
        fmt = spec.fmt
        assert 3.5 <= fmt.max_value
        if fmt.frac_bits < 15:
            tighter = FixedPointFormat(fmt.frac_bits + 1)
            assert 3.5 > tighter.max_value


class TestHalf:
    def test_known_encodings(self):
        assert to_half(1.0) == 0x3C00
        assert to_half(0.5) == 0x3800
        assert to_half(0.0) == 0x0000
        assert to_half(-2.0) == 0xC000
        assert from_half(0x3C00) == 1.0
        assert from_half(0x3800) == 0.5

    def test_rounds_to_even(self):
        assert to_half(1.0 + 2.0 ** -11) == 0x3C00
        assert to_half(1.0 + 3 * 2.0 ** -11) == 0x3C02

    def test_overflow_to_inf(self):
        assert to_half(1e6) == 0x7C00
        assert to_half(-1e6) == 0xFC00
        assert from_half(0x7C00) == np.inf

    def test_nan_stays_nan(self):
        code = to_half(float("nan"))
        assert (code & 0x7C00) == 0x7C00 and (code & 0x03FF) != 0
        assert np.isnan(from_half(code))

    def test_narrowing_bit_exact_vs_numpy_oracle(self):
        # one million random bit patterns, incl. NaN/inf/subnormal encodings
        rng = np.random.default_rng(12345)
        bits = rng.integers(0, 2 ** 32, size=1_000_000, dtype=np.uint64)
        bits = bits.astype(np.uint32)
        with np.errstate(over="ignore"):
            expected = bits.view(np.float32).astype(np.float16).view(np.uint16)
        mine = np.fromiter(
            (formats.float_to_half_bits(int(b)) for b in bits),
            dtype=np.uint16, count=bits.size)
        assert np.array_equal(mine, expected)

    def test_widening_bit_exact_exhaustive(self):
        codes = np.arange(65536, dtype=np.uint16)
        expected = codes.view(np.float16).astype(np.float32).view(np.uint32)
        mine = np.fromiter(
            (formats.half_to_float_bits(int(c)) for c in codes),
            dtype=np.uint32, count=codes.size)
        assert np.array_equal(mine, expected)


def _tensor(rng, h=4, w=5, c=3, scale=1.0):
    return Tensor((rng.standard_normal((h, w, c)) * scale).astype(np.float32))


class TestTensor:
    def test_invariants(self):
        with pytest.raises(ValueError):
            Tensor(np.zeros((0, 2, 3), dtype=np.float32))
        with pytest.raises(ValueError):
            Tensor(np.zeros((2, 2), dtype=np.float32))
        with pytest.raises(ValueError):
            Tensor(np.zeros((2, 2, 2), dtype=np.float64))
        with pytest.raises(ValueError):
            Tensor(np.zeros((2, 2, 2), dtype=np.int16), Q16)  # missing qspec

    def test_convert_preserves_shape_and_zeroes(self):
        t = Tensor(np.zeros((3, 4, 2), dtype=np.float32))
        for fmt in (FP32, FP16, Q16):
            out = convert_tensor(t, fmt)
            assert out.data.shape == (3, 4, 2)
            assert np.all(out.to_float32() == 0.0)

    def test_fp16_roundtrip_identity_on_representable(self):
        vals = np.array([[[0.5, 1.0, -2.0, 0.25]]], dtype=np.float32)
        t = Tensor(vals)
        back = convert_tensor(convert_tensor(t, FP16), FP32)
        assert np.array_equal(back.data, vals)

    def test_q16_roundtrip_error_bound(self):
        rng = np.random.default_rng(3)
        t = _tensor(rng, 8, 8, 4, scale=5.0)
        q = convert_tensor(t, Q16)
        f = q.qspec.fmt.frac_bits
        err = np.abs(convert_tensor(q, FP32).data - t.data)
        assert float(err.max()) <= 2.0 ** -(f + 1)

    def test_bulk_fp16_matches_scalar_ops(self):
        rng = np.random.default_rng(4)
        t = _tensor(rng, 6, 6, 3, scale=100.0)
        bulk = convert_tensor(t, FP16).data.view(np.uint16)
        scalar = np.array(
            [to_half(float(v)) for v in t.data.ravel()],
            dtype=np.uint16).reshape(t.data.shape)
        assert np.array_equal(bulk, scalar)


class TestDump:
    @pytest.mark.parametrize("fmt", [FP32, FP16, Q16])
    def test_roundtrip(self, fmt, tmp_path):
        rng = np.random.default_rng(5)
        t = convert_tensor(_tensor(rng, 5, 7, 2, scale=3.0), fmt)
        path = tmp_path / "t.bin"
        dump_tensor(t, path)
        back = load_tensor(path)
        assert back.fmt == fmt
        assert np.array_equal(back.data, t.data)
        if fmt == Q16:
            assert back.qspec.fmt == t.qspec.fmt

    def test_rejects_truncated(self, tmp_path):
        t = Tensor(np.ones((2, 2, 2), dtype=np.float32))
        path = tmp_path / "t.bin"
        dump_tensor(t, path)
        path.write_bytes(path.read_bytes()[:-1])
        with pytest.raises(ValueError):
            load_tensor(path)
