import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from tiledet import tiling
from tiledet.tiling import (PROFILES, axis_tiles, bilinear_resize, make_plan,
                            optimal_areas, plan_overlaps, plan_report,
                            slice_frame, verify_object_coverage)


# --- independent oracles ------------------------------------------------------

def coverage_bruteforce(plan, margin, size):
    """Paint valid window origins for every optimal area; covered iff all
    (frame_w-size+1) x (frame_h-size+1) origins are painted."""
    if size > plan.tile - 2 * margin or size > min(plan.frame_w, plan.frame_h):
        return False, (0, 0)
    ok = np.zeros((plan.frame_h - size + 1, plan.frame_w - size + 1), dtype=bool)
    for x0, y0, x1, y1 in optimal_areas(plan, margin):
        if x1 - x0 >= size and y1 - y0 >= size:
            ok[y0:y1 - size + 1, x0:x1 - size + 1] = True
    if ok.all():
        return True, None
    wy, wx = np.argwhere(~ok)[0]
    return False, (int(wx), int(wy))


def bilinear_oracle(img, out_h, out_w):
    h, w = img.shape[:2]
    out = np.zeros((out_h, out_w) + img.shape[2:], dtype=np.float64)
    for oy in range(out_h):
        for ox in range(out_w):
            sy = (oy + 0.5) * h / out_h - 0.5
            sx = (ox + 0.5) * w / out_w - 0.5
            y0 = min(max(int(np.floor(sy)), 0), h - 1)
            x0 = min(max(int(np.floor(sx)), 0), w - 1)
            y1 = min(y0 + 1, h - 1)
            x1 = min(x0 + 1, w - 1)
            fy = min(max(sy - y0, 0.0), 1.0)
            fx = min(max(sx - x0, 0.0), 1.0)
            out[oy, ox] = ((1 - fy) * (1 - fx) * img[y0, x0]
                           + (1 - fy) * fx * img[y0, x1]
                           + fy * (1 - fx) * img[y1, x0]
                           + fy * fx * img[y1, x1])
    if np.issubdtype(img.dtype, np.integer):
        return np.rint(out).astype(img.dtype)
    return out.astype(img.dtype)


class TestAxisTiles:
    def test_a1a2_horizontal(self):
        assert axis_tiles(1920, 1080, 0.5) == [0, 420, 840]

    def test_a3_horizontal(self):
        assert axis_tiles(1920, 640, 0.3) == [0, 427, 853, 1280]

    def test_single_tile_when_equal(self):
        assert axis_tiles(640, 640, 0.3) == [0]

    def test_strict_rejects_oversize_tile(self):
        with pytest.raises(ValueError):
            axis_tiles(500, 640, 0.3)
        assert axis_tiles(500, 640, 0.3, strict=False) == [0]

    def test_bad_overlap_rejected(self):
        with pytest.raises(ValueError):
            axis_tiles(100, 50, 1.0)
        with pytest.raises(ValueError):
            axis_tiles(100, 50, -0.1)

    @given(st.integers(16, 512), st.integers(8, 512),
           st.floats(0.0, 0.8, allow_nan=False))
    @settings(max_examples=300, deadline=None)
    def test_overlap_and_flush_properties(self, length, tile, omega):
        if tile > length:
            return
        origins = axis_tiles(length, tile, omega)
        assert origins[0] == 0
        assert origins[-1] == length - tile
        assert origins == sorted(origins)
        for a, b in zip(origins, origins[1:]):
            assert tile - (b - a) >= omega * tile  # min overlap holds
            assert b > a


class TestMakePlan:
    def test_a1a2_three_tiles(self):
        plan = make_plan(PROFILES["a1a2"], 1920, 1080)
        assert len(plan.origins) == 3
        assert plan.grid == (3, 1)
        assert plan.tile == 1080
        assert min(plan_overlaps(plan)["x"]) >= 0.5 * 1080
        assert plan.resize_to == 640

    def test_a3_eight_tiles(self):
        plan = make_plan(PROFILES["a3"], 1920, 1080)
        assert len(plan.origins) == 8
        assert plan.grid == (4, 2)
        over = plan_overlaps(plan)
        assert min(over["x"]) >= 0.3 * 640
        assert min(over["y"]) >= 0.3 * 640
        assert plan.resize_factor == 1.0

    def test_a3_single_tile_frame(self):
        plan = make_plan(PROFILES["a3"], 640, 640)
        assert plan.origins == ((0, 0),)

    def test_row_major_order(self):
        plan = make_plan(PROFILES["a3"], 1920, 1080)
        xs = [x for x, _ in plan.origins[:4]]
        assert xs == sorted(xs)
        assert plan.origins[0][1] == plan.origins[3][1]


class TestOptimalAreas:
    def test_zero_margin_equals_tiles(self):
        plan = make_plan(PROFILES["a3"], 1920, 1080, margin=0)
        areas = optimal_areas(plan)
        for (x, y), (x0, y0, x1, y1) in zip(plan.origins, areas):
            assert (x0, y0, x1, y1) == (x, y, x + 640, y + 640)

    def test_interior_tile_shrinks_both_sides(self):
        plan = make_plan(PROFILES["a3"], 1920, 1080, margin=32)
        # tile 1 of row 0 is interior horizontally, flush at the top
        x0, y0, x1, y1 = optimal_areas(plan)[1]
        assert x1 - x0 == 640 - 64
        assert y0 == 0 and y1 - y0 == 640 - 32

    def test_corner_tile_keeps_two_full_sides(self):
        plan = make_plan(PROFILES["a3"], 1920, 1080, margin=32)
        x0, y0, x1, y1 = optimal_areas(plan)[0]
        assert (x0, y0) == (0, 0)
        assert x1 == 640 - 32 and y1 == 640 - 32

    def test_margin_too_large(self):
        plan = make_plan(PROFILES["a3"], 1920, 1080)
        with pytest.raises(ValueError):
            optimal_areas(plan, margin=320)


class TestCoverage:
    def test_a3_margin0_small_objects_covered(self):
        plan = make_plan(PROFILES["a3"], 1920, 1080, margin=0)
        result = verify_object_coverage(plan, margin=0, object_size=100)
        assert result.covered
        ok, _ = coverage_bruteforce(plan, 0, 100)
        assert ok

    def test_a3_margin150_gap_with_witness(self):
        # optimal-interval overlap on x: 640 - 2*150 - 427 = -87 < 100
        plan = make_plan(PROFILES["a3"], 1920, 1080, margin=150)
        result = verify_object_coverage(plan, margin=150, object_size=100)
        assert not result.covered
        assert result.witness is not None
        ok, _ = coverage_bruteforce(plan, 150, 100)
        assert not ok
        # the witness window really is uncovered
        wx, wy = result.witness
        for x0, y0, x1, y1 in optimal_areas(plan, 150):
            assert not (x0 <= wx and wx + 100 <= x1
                        and y0 <= wy and wy + 100 <= y1)

    def test_single_tile_any_object(self):
        plan = make_plan(PROFILES["a3"], 640, 640, margin=0)
        for s in (1, 100, 640):
            assert verify_object_coverage(plan, margin=0, object_size=s).covered

    def test_object_larger_than_shrunk_tile(self):
        plan = make_plan(PROFILES["a3"], 1920, 1080, margin=32)
        result = verify_object_coverage(plan, object_size=600)
        assert not result.covered
        assert "cannot fit" in result.reason

    def test_random_instances_match_bruteforce(self):
        rng = np.random.default_rng(42)
        agree = 0
        for _ in range(60):
            frame_w = int(rng.integers(64, 400))
            frame_h = int(rng.integers(64, 400))
            tile = int(rng.integers(32, min(frame_w, frame_h) + 1))
            omega = float(rng.uniform(0.05, 0.7))
            margin = int(rng.integers(0, tile // 3))
            size = int(rng.integers(1, max(2, tile - 2 * margin)))
            profile = tiling.AreaProfile("T", tile, omega, tile, size)
            plan = make_plan(profile, frame_w, frame_h, margin=margin)
            got = verify_object_coverage(plan, object_size=size)
            want_ok, _ = coverage_bruteforce(plan, margin, size)
            assert got.covered == want_ok, (frame_w, frame_h, tile, omega,
                                            margin, size)
            agree += 1
        assert agree == 60


class TestSliceFrame:
    def test_crops_reassemble_exactly(self):
        rng = np.random.default_rng(1)
        frame = rng.integers(0, 256, size=(1080, 1920, 3), dtype=np.uint8)
        plan = make_plan(PROFILES["a3"], 1920, 1080)
        tiles = slice_frame(frame, plan)
        rebuilt = np.zeros_like(frame)
        for (x, y), tile in zip(plan.origins, tiles):
            rebuilt[y:y + 640, x:x + 640] = tile
        assert np.array_equal(rebuilt, frame)

    def test_constant_frame_resizes_constant(self):
        frame = np.full((1080, 1920, 3), 77, dtype=np.uint8)
        plan = make_plan(PROFILES["a1a2"], 1920, 1080)
        for tile in slice_frame(frame, plan):
            assert tile.shape == (640, 640, 3)
            assert np.all(tile == 77)

    def test_checkerboard_resize_matches_scalar_oracle(self):
        yy, xx = np.mgrid[0:54, 0:54]
        board = ((yy // 9 + xx // 9) % 2 * 255).astype(np.uint8)
        img = np.stack([board, 255 - board, board], axis=2)
        got = bilinear_resize(img, 32, 32)
        want = bilinear_oracle(img, 32, 32)
        assert np.array_equal(got, want)

    def test_a1a2_tile_resize_matches_oracle(self):
        rng = np.random.default_rng(2)
        frame = rng.integers(0, 256, size=(1080, 1920, 3), dtype=np.uint8)
        plan = make_plan(PROFILES["a1a2"], 1920, 1080)
        tiles = slice_frame(frame, plan)
        x, y = plan.origins[1]
        crop = frame[y:y + 1080, x:x + 1080]
        assert np.array_equal(tiles[1], bilinear_oracle(crop, 640, 640))

    def test_frame_mismatch_rejected(self):
        plan = make_plan(PROFILES["a3"], 1920, 1080)
        with pytest.raises(ValueError):
            slice_frame(np.zeros((720, 1280, 3), dtype=np.uint8), plan)


class TestPlanReport:
    def test_a1a2_flags_resize_discrepancy(self):
        profile = PROFILES["a1a2"]
        plan = make_plan(profile, 1920, 1080)
        report = plan_report(plan, profile)
        resize = report["resize"]
        assert resize["computed_pct"] == pytest.approx(59.3)
        assert resize["nominal_pct"] == 56
        assert "note" in resize

    def test_a3_report_counts(self):
        profile = PROFILES["a3"]
        plan = make_plan(profile, 1920, 1080)
        report = plan_report(plan, profile)
        assert len(report["tiles"]) == 8
        assert report["coverage"]["covered"] is True
        assert "note" not in report["resize"]
