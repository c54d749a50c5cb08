import math
from fractions import Fraction

import numpy as np
import pytest

from tiledet import kernels, model
from tiledet.kernels import (C1_PARAMS, C2_PARAMS, GemmBlockParams, GemmShape,
                             conv2d, dsc_conv2d, dsc_mac_ratio,
                             fixed_gemm_error_bound, footprint, gemm_blocked,
                             gemm_reference, im2col, leaky_relu, maxpool2d,
                             select_block_params, upsample2d, yolo_decode)


# --- independent oracles (kept deliberately scalar / nested-loop) -------------

def im2col_oracle(x, k, stride, pad):
    h, w, c = x.shape
    out_h = (h + 2 * pad - k) // stride + 1
    out_w = (w + 2 * pad - k) // stride + 1
    cols = np.zeros((k * k * c, out_h * out_w), dtype=np.float64)
    for oy in range(out_h):
        for ox in range(out_w):
            col = oy * out_w + ox
            for ch in range(c):
                for ky in range(k):
                    for kx in range(k):
                        iy = oy * stride + ky - pad
                        ix = ox * stride + kx - pad
                        if 0 <= iy < h and 0 <= ix < w:
                            cols[ch * k * k + ky * k + kx, col] = x[iy, ix, ch]
    return cols


def conv_oracle(x, weights, bias, stride, pad):
    h, w, cin = x.shape
    cout, _, k, _ = weights.shape
    out_h = (h + 2 * pad - k) // stride + 1
    out_w = (w + 2 * pad - k) // stride + 1
    out = np.zeros((out_h, out_w, cout), dtype=np.float64)
    for oy in range(out_h):
        for ox in range(out_w):
            for f in range(cout):
                acc = 0.0
                for ch in range(cin):
                    for ky in range(k):
                        for kx in range(k):
                            iy = oy * stride + ky - pad
                            ix = ox * stride + kx - pad
                            if 0 <= iy < h and 0 <= ix < w:
                                acc += float(x[iy, ix, ch]) * float(weights[f, ch, ky, kx])
                out[oy, ox, f] = acc + (float(bias[f]) if bias is not None else 0.0)
    return out


def dsc_oracle(x, dw, pw, bias, stride, pad):
    h, w, cin = x.shape
    k = dw.shape[1]
    out_h = (h + 2 * pad - k) // stride + 1
    out_w = (w + 2 * pad - k) // stride + 1
    mid = np.zeros((out_h, out_w, cin), dtype=np.float64)
    for oy in range(out_h):
        for ox in range(out_w):
            for ch in range(cin):
                acc = 0.0
                for ky in range(k):
                    for kx in range(k):
                        iy = oy * stride + ky - pad
                        ix = ox * stride + kx - pad
                        if 0 <= iy < h and 0 <= ix < w:
                            acc += float(x[iy, ix, ch]) * float(dw[ch, ky, kx])
                mid[oy, ox, ch] = acc
    cout = pw.shape[0]
    out = np.zeros((out_h, out_w, cout), dtype=np.float64)
    for oy in range(out_h):
        for ox in range(out_w):
            for f in range(cout):
                acc = 0.0
                for ch in range(cin):
                    acc += mid[oy, ox, ch] * float(pw[f, ch])
                out[oy, ox, f] = acc + (float(bias[f]) if bias is not None else 0.0)
    return out


def sigmoid(v):
    return 1.0 / (1.0 + math.exp(-v))


def yolo_oracle(feature, anchors, classes, thr, input_size):
    fh, fw, _ = feature.shape
    in_w, in_h = input_size
    dets = []
    per = feature.reshape(fh, fw, len(anchors), 5 + classes)
    for gy in range(fh):
        for gx in range(fw):
            for ai, (aw, ah) in enumerate(anchors):
                t = per[gy, gx, ai]
                conf = sigmoid(float(t[4]))
                if conf < thr:
                    continue
                cx = (gx + sigmoid(float(t[0]))) * in_w / fw
                cy = (gy + sigmoid(float(t[1]))) * in_h / fh
                bw = aw * math.exp(float(t[2]))
                bh = ah * math.exp(float(t[3]))
                cls = int(np.argmax(t[5:5 + classes]))
                dets.append((cls, conf, cx - bw / 2, cy - bh / 2, bw, bh))
    return dets


# --- im2col -------------------------------------------------------------------

class TestIm2col:
    def test_k1_is_reshape(self):
        rng = np.random.default_rng(0)
        x = rng.standard_normal((4, 5, 3)).astype(np.float32)
        cols = im2col(x, 1, 1, 0)
        assert cols.shape == (3, 20)
        assert np.array_equal(cols, x.reshape(20, 3).T)

    def test_first_layer_shape(self):
        x = np.zeros((640, 640, 3), dtype=np.float32)
        cols = im2col(x, 3, 1, 1)
        assert cols.shape == (27, 409600)

    def test_matches_index_oracle(self):
        rng = np.random.default_rng(1)
        x = rng.standard_normal((4, 4, 2)).astype(np.float32)
        cols = im2col(x, 3, 1, 0)
        assert cols.shape == (18, 4)
        assert np.array_equal(cols.astype(np.float64), im2col_oracle(x, 3, 1, 0))

    @pytest.mark.parametrize("shape,k,s,p", [
        ((6, 6, 3), 3, 1, 1), ((8, 6, 2), 2, 2, 0), ((5, 5, 1), 5, 1, 0),
        ((7, 9, 4), 3, 2, 1), ((4, 4, 3), 1, 1, 0),
    ])
    def test_oracle_equivalence_sweep(self, shape, k, s, p):
        rng = np.random.default_rng(hash((shape, k, s, p)) % 2 ** 32)
        x = rng.standard_normal(shape).astype(np.float32)
        assert np.array_equal(im2col(x, k, s, p).astype(np.float64),
                              im2col_oracle(x, k, s, p))

    def test_non_integral_output_rejected(self):
        with pytest.raises(ValueError):
            im2col(np.zeros((9, 9, 1), dtype=np.float32), 2, 2, 0)


# --- GEMM ----------------------------------------------------------------------

class TestGemmReference:
    def test_identity(self):
        rng = np.random.default_rng(2)
        a = rng.standard_normal((5, 5))
        assert np.allclose(gemm_reference(a, np.eye(5)), a)

    def test_one_by_one(self):
        assert gemm_reference(np.array([[3.0]]), np.array([[4.0]]))[0, 0] == 12.0

    def test_hand_checked_dot_products(self):
        rng = np.random.default_rng(3)
        a = rng.standard_normal((7, 5))
        b = rng.standard_normal((5, 3))
        c = gemm_reference(a, b)
        for i in range(7):
            for j in range(3):
                assert math.isclose(
                    c[i, j], math.fsum(float(a[i, p]) * float(b[p, j]) for p in range(5)),
                    rel_tol=1e-12, abs_tol=1e-12)

    def test_dimension_mismatch(self):
        with pytest.raises(ValueError):
            gemm_reference(np.zeros((2, 3)), np.zeros((4, 2)))


def rel_err(approx, exact):
    scale = np.maximum(np.abs(exact), 1.0)
    return float(np.max(np.abs(approx - exact) / scale))


class TestGemmBlocked:
    def test_degenerate_blocks_equal_naive(self):
        rng = np.random.default_rng(4)
        a = rng.standard_normal((5, 6)).astype(np.float32)
        b = rng.standard_normal((6, 4)).astype(np.float32)
        ones = GemmBlockParams(1, 1, 1, 1)
        assert rel_err(gemm_blocked(a, b, ones), gemm_reference(a, b)) < 1e-6

    def test_c1_table_params_small(self):
        rng = np.random.default_rng(5)
        a = rng.standard_normal((16, 27)).astype(np.float32)
        b = rng.standard_normal((27, 1000)).astype(np.float32)
        c = gemm_blocked(a, b, C1_PARAMS)
        assert rel_err(c, gemm_reference(a, b)) < 1e-4

    def test_param_independence(self):
        rng = np.random.default_rng(6)
        a = rng.standard_normal((50, 70)).astype(np.float32)
        b = rng.standard_normal((70, 33)).astype(np.float32)
        c1 = gemm_blocked(a, b, C1_PARAMS)
        c2 = gemm_blocked(a, b, C2_PARAMS)
        scale = np.maximum(np.abs(c1), 1.0)
        assert float(np.max(np.abs(c1 - c2) / scale)) < 1e-4

    def test_determinism(self):
        rng = np.random.default_rng(7)
        a = rng.standard_normal((33, 65)).astype(np.float32)
        b = rng.standard_normal((65, 17)).astype(np.float32)
        first = gemm_blocked(a, b, C2_PARAMS)
        for _ in range(3):
            assert np.array_equal(gemm_blocked(a, b, C2_PARAMS), first)

    def test_invalid_params(self):
        with pytest.raises(ValueError):
            GemmBlockParams(16, 16, 2, 5)   # tm must divide bm
        with pytest.raises(ValueError):
            GemmBlockParams(0, 16, 2, 1)

    def test_fp16_storage_error_bound(self):
        # positive, well-conditioned inputs: per-output relative error <= 2^-10
        rng = np.random.default_rng(8)
        a = rng.uniform(0.5, 1.0, size=(40, 64)).astype(np.float32)
        b = rng.uniform(0.5, 1.0, size=(64, 30)).astype(np.float32)
        c = gemm_blocked(a, b, fmt="fp16")
        exact = gemm_reference(a, b)
        assert float(np.max(np.abs(c - exact) / np.abs(exact))) <= 2.0 ** -10

    def test_q16_error_within_analytic_bound(self):
        rng = np.random.default_rng(9)
        for m, n, k in [(8, 9, 16), (20, 20, 64), (5, 31, 200)]:
            a = rng.uniform(-2, 2, size=(m, k)).astype(np.float32)
            b = rng.uniform(-2, 2, size=(k, n)).astype(np.float32)
            c = gemm_blocked(a, b, fmt="q16")
            exact = gemm_reference(a, b)
            bound = fixed_gemm_error_bound(a, b)
            slack = np.abs(exact).max() * 2.0 ** -22  # final float32 cast
            assert float(np.max(np.abs(c - exact))) <= bound + slack

    def test_unknown_format(self):
        with pytest.raises(ValueError):
            gemm_blocked(np.ones((2, 2)), np.ones((2, 2)), fmt="int8")


class TestSelectParams:
    def test_first_layer_is_c1(self):
        assert select_block_params(GemmShape(16, 409600, 27)) == C1_PARAMS

    def test_last_layer_is_c2(self):
        assert select_block_params(GemmShape(1024, 400, 4608)) == C2_PARAMS

    def test_square_64_is_c2(self):
        assert select_block_params(GemmShape(64, 64, 64)) == C2_PARAMS

    def test_threshold_is_configurable(self):
        shape = GemmShape(64, 64, 64)
        assert select_block_params(shape, threshold=1) == C1_PARAMS


# --- convolution ----------------------------------------------------------------

class TestConv2d:
    def test_identity_1x1(self):
        rng = np.random.default_rng(10)
        x = rng.standard_normal((5, 5, 3)).astype(np.float32)
        w = np.eye(3, dtype=np.float32).reshape(3, 3, 1, 1)
        y = conv2d(x, w)
        assert np.allclose(y, x, atol=1e-6)

    def test_delta_kernel_preserves_input(self):
        rng = np.random.default_rng(11)
        x = rng.standard_normal((6, 6, 2)).astype(np.float32)
        w = np.zeros((2, 2, 3, 3), dtype=np.float32)
        w[0, 0, 1, 1] = 1.0
        w[1, 1, 1, 1] = 1.0
        y = conv2d(x, w, stride=1, padding=1)
        assert np.allclose(y, x, atol=1e-6)

    def test_matches_direct_oracle(self):
        rng = np.random.default_rng(12)
        x = rng.standard_normal((8, 8, 3)).astype(np.float32)
        w = rng.standard_normal((4, 3, 3, 3)).astype(np.float32)
        bias = rng.standard_normal(4).astype(np.float32)
        y = conv2d(x, w, bias=bias, stride=1, padding=1)
        assert float(np.max(np.abs(y - conv_oracle(x, w, bias, 1, 1)))) <= 1e-5

    def test_leaky_activation(self):
        x = np.full((2, 2, 1), -1.0, dtype=np.float32)
        w = np.ones((1, 1, 1, 1), dtype=np.float32)
        y = conv2d(x, w, activation="leaky")
        assert np.allclose(y, -0.1)

    def test_batchnorm_folding(self):
        rng = np.random.default_rng(13)
        x = rng.standard_normal((4, 4, 2)).astype(np.float32)
        w = rng.standard_normal((3, 2, 1, 1)).astype(np.float32)
        bn = {
            "bias": rng.standard_normal(3).astype(np.float32),
            "bn_scale": rng.uniform(0.5, 1.5, 3).astype(np.float32),
            "bn_mean": rng.standard_normal(3).astype(np.float32),
            "bn_var": rng.uniform(0.5, 2.0, 3).astype(np.float32),
        }
        y = conv2d(x, w, bn=bn)
        raw = conv_oracle(x, w, None, 1, 0)
        expected = (raw - bn["bn_mean"]) / np.sqrt(bn["bn_var"] + 1e-5) \
            * bn["bn_scale"] + bn["bias"]
        assert float(np.max(np.abs(y - expected))) < 1e-5


class TestDsc:
    def test_identity_stages(self):
        rng = np.random.default_rng(14)
        x = rng.standard_normal((5, 5, 3)).astype(np.float32)
        dw = np.zeros((3, 3, 3), dtype=np.float32)
        dw[:, 1, 1] = 1.0                       # depthwise delta
        pw = np.eye(3, dtype=np.float32)        # pointwise identity
        y = dsc_conv2d(x, dw, pw, padding=1)
        assert np.allclose(y, x, atol=1e-6)

    def test_matches_two_stage_oracle(self):
        rng = np.random.default_rng(15)
        x = rng.standard_normal((7, 6, 4)).astype(np.float32)
        dw = rng.standard_normal((4, 3, 3)).astype(np.float32)
        pw = rng.standard_normal((6, 4)).astype(np.float32)
        bias = rng.standard_normal(6).astype(np.float32)
        y = dsc_conv2d(x, dw, pw, bias=bias, stride=1, padding=1)
        assert float(np.max(np.abs(y - dsc_oracle(x, dw, pw, bias, 1, 1)))) <= 1e-5

    def test_mac_ratio_closed_form(self):
        ratio = dsc_mac_ratio(3, 512)
        assert ratio == Fraction(1, 512) + Fraction(1, 9)
        assert abs(float(ratio) - 0.11306423611111112) < 1e-12


# --- pooling / resize / activation ------------------------------------------------

class TestPointwiseOps:
    def test_maxpool_constant(self):
        x = np.full((8, 8, 3), 2.5, dtype=np.float32)
        y = maxpool2d(x, 2, 2)
        assert y.shape == (4, 4, 3)
        assert np.all(y == 2.5)

    def test_upsample_then_pool_is_identity(self):
        rng = np.random.default_rng(16)
        x = rng.standard_normal((5, 7, 3)).astype(np.float32)
        assert np.array_equal(maxpool2d(upsample2d(x, 2), 2, 2), x)

    def test_leaky_slope(self):
        assert leaky_relu(np.array([-1.0], dtype=np.float32))[0] == pytest.approx(-0.1)
        assert leaky_relu(np.array([2.0], dtype=np.float32))[0] == 2.0

    def test_maxpool_oracle(self):
        rng = np.random.default_rng(17)
        x = rng.standard_normal((6, 6, 2)).astype(np.float32)
        y = maxpool2d(x, 2, 2)
        for oy in range(3):
            for ox in range(3):
                for c in range(2):
                    window = x[2 * oy:2 * oy + 2, 2 * ox:2 * ox + 2, c]
                    assert y[oy, ox, c] == window.max()


# --- YOLO decode -------------------------------------------------------------------

class TestYoloDecode:
    def test_all_minus_inf_logits_empty(self):
        feature = np.full((4, 4, 18), -1e6, dtype=np.float32)
        anchors = [(10, 14), (23, 27), (37, 58)]
        assert yolo_decode(feature, anchors, 1, 0.25, (64, 64)) == []

    def test_zero_logits_centered_anchor_box(self):
        anchors = [(16, 24)]
        feature = np.full((4, 4, 6), -1e6, dtype=np.float32)
        feature[2, 1, :] = 0.0
        dets = yolo_decode(feature, anchors, 1, 0.25, (64, 64))
        assert len(dets) == 1
        d = dets[0]
        assert d.confidence == pytest.approx(0.5)
        # cell (row 2, col 1) of a 4x4 grid over 64 px: centre (24, 40)
        assert d.x + d.w / 2 == pytest.approx(24.0)
        assert d.y + d.h / 2 == pytest.approx(40.0)
        assert (d.w, d.h) == (16.0, 24.0)

    def test_matches_scalar_oracle(self):
        rng = np.random.default_rng(18)
        anchors = [(10, 14), (23, 27), (37, 58)]
        feature = rng.standard_normal((5, 5, 3 * 7)).astype(np.float32)
        got = yolo_decode(feature, anchors, 2, 0.4, (80, 80))
        want = yolo_oracle(feature, anchors, 2, 0.4, (80, 80))
        assert len(got) == len(want)
        got_sorted = sorted((d.class_id, d.confidence, d.x, d.y, d.w, d.h)
                            for d in got)
        for g, w in zip(got_sorted, sorted(want)):
            assert g[0] == w[0]
            for gv, wv in zip(g[1:], w[1:]):
                assert gv == pytest.approx(wv, rel=1e-9, abs=1e-9)

    def test_channel_mismatch(self):
        with pytest.raises(ValueError):
            yolo_decode(np.zeros((2, 2, 7), dtype=np.float32), [(1, 1)], 1,
                        0.5, (32, 32))


# --- footprint ----------------------------------------------------------------------

class TestFootprint:
    def test_hand_arithmetic(self):
        conv = model.LayerSpec(model.CONVOLUTIONAL, filters=512, size=3)
        dsc = model.LayerSpec(model.DEPTHWISE_SEPARABLE, filters=512, size=3)
        in_shape = (20, 20, 256)
        out_shape = (20, 20, 512)
        std = kernels.layer_footprint(conv, in_shape, out_shape)
        sep = kernels.layer_footprint(dsc, in_shape, out_shape)
        assert std["macs"] == 471_859_200
        assert sep["macs"] == 53_350_400

    def test_ratio_matches_closed_form_exactly(self):
        for k in (1, 3, 5, 7):
            for cout in (8, 64, 512):
                conv = model.LayerSpec(model.CONVOLUTIONAL, filters=cout, size=k)
                dsc = model.LayerSpec(model.DEPTHWISE_SEPARABLE, filters=cout, size=k)
                in_shape = (10, 10, 32)
                out_shape = (10, 10, cout)
                std = kernels.layer_footprint(conv, in_shape, out_shape)["macs"]
                sep = kernels.layer_footprint(dsc, in_shape, out_shape)["macs"]
                assert Fraction(sep, std) == dsc_mac_ratio(k, cout)

    def test_upsample_is_free_and_totals_add_up(self):
        text = """
[net]
height=16
width=16
channels=3

[convolutional]
filters=8
size=3
stride=1
pad=1

[upsample]
stride=2
"""
        g = model.parse_cfg(text)
        fp = footprint(g)
        assert fp["layers"][1]["macs"] == 0
        assert fp["total_macs"] == sum(l["macs"] for l in fp["layers"])
        assert fp["layers"][0]["macs"] == 16 * 16 * 9 * 3 * 8
