"""Tile decomposition of a camera frame with minimum-overlap guarantees.

A frame is covered by a grid of square tiles. Consecutive tiles overlap by
at least a configured fraction of the tile size so that objects sitting on a
tile boundary are fully visible in at least one neighbouring tile. Detection
quality degrades near tile borders, so each tile also gets an inner "optimal
area" (the tile shrunk by a margin except along frame edges); the coverage
check proves that every possible object position lands inside at least one
optimal area.

Two stock profiles cover the surveillance geometry on 1920x1080 frames:

* ``a1a2`` -- three 1080x1080 tiles, >= 50% overlap, resized to 640 before
  inference (near/mid range, objects large enough to survive resizing);
* ``a3``   -- eight 640x640 tiles, >= 30% overlap, no resizing (far range,
  small objects).
"""

import math
from dataclasses import dataclass

import numpy as np

DEFAULT_MARGIN = 32


@dataclass(frozen=True)
class AreaProfile:
    """Tiling parameters for one distance band of the surveillance area."""

    tag: str
    tile: int             # square tile side, px
    min_overlap: float    # fraction of the tile side
    resize_to: int        # model input side; == tile means no resizing
    max_object: int       # largest expected object side, px
    nominal_resize_pct: int | None = None  # declared resize %, for reporting

    @property
    def resize_factor(self) -> float:
        return self.resize_to / self.tile


PROFILES = {
    "a1a2": AreaProfile(tag="A1A2", tile=1080, min_overlap=0.50, resize_to=640,
                        max_object=400, nominal_resize_pct=56),
    "a3": AreaProfile(tag="A3", tile=640, min_overlap=0.30, resize_to=640,
                      max_object=100),
}


@dataclass(frozen=True)
class TilePlan:
    frame_w: int
    frame_h: int
    tile: int
    min_overlap: float
    resize_to: int
    margin: int
    origins: tuple        # (x, y) per tile, row-major over the grid
    grid: tuple           # (columns, rows)

    @property
    def resize_factor(self) -> float:
        return self.resize_to / self.tile


@dataclass(frozen=True)
class CoverageResult:
    covered: bool
    witness: tuple | None = None   # (x, y) of an uncovered object position
    reason: str = ""


def axis_tiles(length: int, tile: int, min_overlap: float,
               strict: bool = True) -> list:
    """Tile origins along one axis: first at 0, last flush with the edge,
    evenly spread so the minimum overlap is maximised."""
    if not 0.0 <= min_overlap < 1.0:
        raise ValueError(f"overlap fraction must be in [0, 1), got {min_overlap}")
    if tile < 1 or length < 1:
        raise ValueError(f"tile and length must be >= 1, got {tile}, {length}")
    if tile > length:
        if strict:
            raise ValueError(f"tile {tile} exceeds the frame extent {length}")
        return [0]
    if tile == length:
        return [0]
    max_step = math.floor(tile * (1.0 - min_overlap))
    if max_step < 1:
        raise ValueError(
            f"overlap {min_overlap} leaves no room to advance a {tile} px tile")
    n = 1 + math.ceil((length - tile) / max_step)
    span = length - tile
    # round-half-up keeps the origin sequence monotone with bounded steps
    return [int(math.floor(i * span / (n - 1) + 0.5)) for i in range(n)]


def make_plan(profile: AreaProfile, frame_w: int, frame_h: int,
              margin: int = DEFAULT_MARGIN) -> TilePlan:
    xs = axis_tiles(frame_w, profile.tile, profile.min_overlap)
    ys = axis_tiles(frame_h, profile.tile, profile.min_overlap)
    origins = tuple((x, y) for y in ys for x in xs)
    return TilePlan(frame_w=frame_w, frame_h=frame_h, tile=profile.tile,
                    min_overlap=profile.min_overlap, resize_to=profile.resize_to,
                    margin=margin, origins=origins, grid=(len(xs), len(ys)))


def _axis_overlaps(origins, tile):
    return [tile - (origins[i + 1] - origins[i]) for i in range(len(origins) - 1)]


def plan_overlaps(plan: TilePlan) -> dict:
    xs = sorted({x for x, _ in plan.origins})
    ys = sorted({y for _, y in plan.origins})
    return {"x": _axis_overlaps(xs, plan.tile), "y": _axis_overlaps(ys, plan.tile)}


def optimal_areas(plan: TilePlan, margin: int | None = None) -> list:
    """Per-tile trusted rectangles (x0, y0, x1, y1), half-open.

    Each tile is shrunk by the margin on every side except sides flush with
    the frame boundary, which keep their full extent.
    """
    m = plan.margin if margin is None else margin
    if m < 0:
        raise ValueError(f"margin must be >= 0, got {m}")
    if 2 * m >= plan.tile:
        raise ValueError(f"margin {m} swallows the whole {plan.tile} px tile")
    areas = []
    for x, y in plan.origins:
        x0 = x if x == 0 else x + m
        y0 = y if y == 0 else y + m
        x1 = x + plan.tile if x + plan.tile == plan.frame_w else x + plan.tile - m
        y1 = y + plan.tile if y + plan.tile == plan.frame_h else y + plan.tile - m
        areas.append((x0, y0, x1, y1))
    return areas


def _axis_cover(intervals, length, size):
    """Check every integer window [p, p+size) in [0, length) fits some
    interval; returns (ok, first uncovered p)."""
    starts = []
    for a, b in intervals:
        if b - a >= size:
            starts.append((a, b - size))  # inclusive range of valid origins
    if not starts:
        return False, 0
    starts.sort()
    reach = -1  # highest covered origin so far
    for a, b in starts:
        if a > reach + 1:
            return False, reach + 1
        reach = max(reach, b)
        if reach >= length - size:
            return True, None
    return False, reach + 1


def verify_object_coverage(plan: TilePlan, margin: int | None = None,
                           object_size: int | None = None) -> CoverageResult:
    """True iff every object_size x object_size box inside the frame lies
    fully within at least one optimal area.

    Optimal areas form the cartesian product of per-axis intervals, so the
    2-D question factors into two 1-D ones: on each axis, consecutive valid
    intervals must leave no integer window position uncovered.
    """
    m = plan.margin if margin is None else margin
    s = object_size if object_size is not None else plan.tile - 2 * m
    if s < 1:
        raise ValueError(f"object size must be >= 1, got {s}")
    if s > plan.tile - 2 * m:
        return CoverageResult(
            False, witness=(0, 0),
            reason=f"objects of {s} px cannot fit a tile shrunk to "
                   f"{plan.tile - 2 * m} px")
    if s > min(plan.frame_w, plan.frame_h):
        return CoverageResult(False, witness=(0, 0),
                              reason=f"object {s} px exceeds the frame")
    areas = optimal_areas(plan, m)
    x_intervals = sorted({(x0, x1) for x0, _, x1, _ in areas})
    y_intervals = sorted({(y0, y1) for _, y0, _, y1 in areas})
    ok_x, px = _axis_cover(x_intervals, plan.frame_w, s)
    ok_y, py = _axis_cover(y_intervals, plan.frame_h, s)
    if ok_x and ok_y:
        return CoverageResult(True)
    wx = px if not ok_x else 0
    wy = py if not ok_y else 0
    axis = "x" if not ok_x else "y"
    return CoverageResult(False, witness=(wx, wy),
                          reason=f"no optimal area contains the window at "
                                 f"({wx}, {wy}) on the {axis} axis")


# --- frame slicing -----------------------------------------------------------

def bilinear_resize(img: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Bilinear resampling with half-pixel centre alignment."""
    h, w = img.shape[:2]
    if (h, w) == (out_h, out_w):
        return img.copy()
    src_y = (np.arange(out_h) + 0.5) * (h / out_h) - 0.5
    src_x = (np.arange(out_w) + 0.5) * (w / out_w) - 0.5
    y0 = np.clip(np.floor(src_y).astype(np.int64), 0, h - 1)
    x0 = np.clip(np.floor(src_x).astype(np.int64), 0, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    fy = np.clip(src_y - y0, 0.0, 1.0)[:, None, None]
    fx = np.clip(src_x - x0, 0.0, 1.0)[None, :, None]

    img_f = img.astype(np.float64)
    top = img_f[y0][:, x0] * (1 - fx) + img_f[y0][:, x1] * fx
    bottom = img_f[y1][:, x0] * (1 - fx) + img_f[y1][:, x1] * fx
    out = top * (1 - fy) + bottom * fy
    if np.issubdtype(img.dtype, np.integer):
        info = np.iinfo(img.dtype)
        return np.clip(np.rint(out), info.min, info.max).astype(img.dtype)
    return out.astype(img.dtype)


def slice_frame(frame: np.ndarray, plan: TilePlan) -> list:
    """Crop every tile of the plan; resize when the plan says so.

    Tiles come back in origin order (row-major over the grid). Crops are
    pixel-exact when no resizing applies.
    """
    if frame.shape[0] != plan.frame_h or frame.shape[1] != plan.frame_w:
        raise ValueError(
            f"frame is {frame.shape[1]}x{frame.shape[0]} but the plan covers"
            f" {plan.frame_w}x{plan.frame_h}")
    tiles = []
    for x, y in plan.origins:
        crop = frame[y:y + plan.tile, x:x + plan.tile]
        if plan.resize_to != plan.tile:
            crop = bilinear_resize(crop, plan.resize_to, plan.resize_to)
        else:
            crop = crop.copy()
        tiles.append(crop)
    return tiles


def plan_report(plan: TilePlan, profile: AreaProfile,
                object_size: int | None = None) -> dict:
    """JSON-friendly plan summary with overlaps, areas and coverage verdict."""
    overlaps = plan_overlaps(plan)
    coverage = verify_object_coverage(
        plan, object_size=object_size if object_size else profile.max_object)
    report = {
        "profile": profile.tag,
        "frame": {"width": plan.frame_w, "height": plan.frame_h},
        "tile_size": plan.tile,
        "grid": {"columns": plan.grid[0], "rows": plan.grid[1]},
        "tiles": [{"index": i, "x": x, "y": y, "w": plan.tile, "h": plan.tile}
                  for i, (x, y) in enumerate(plan.origins)],
        "min_overlap_required_px": math.ceil(plan.min_overlap * plan.tile),
        "overlaps_px": overlaps,
        "resize": {
            "target": plan.resize_to,
            "factor": plan.resize_factor,
        },
        "margin": plan.margin,
        "optimal_areas": [
            {"x0": a, "y0": b, "x1": c, "y1": d}
            for a, b, c, d in optimal_areas(plan)],
        "coverage": {
            "object_size": object_size if object_size else profile.max_object,
            "covered": coverage.covered,
            "witness": list(coverage.witness) if coverage.witness else None,
            "reason": coverage.reason,
        },
    }
    if profile.nominal_resize_pct is not None:
        computed = round(plan.resize_factor * 100, 1)
        report["resize"]["nominal_pct"] = profile.nominal_resize_pct
        report["resize"]["computed_pct"] = computed
        if computed != profile.nominal_resize_pct:
            report["resize"]["note"] = (
                f"computed resize factor {computed}% differs from the nominal"
                f" {profile.nominal_resize_pct}%; the computed value is applied")
    return report
