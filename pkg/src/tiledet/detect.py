"""Detections: tile-to-frame remapping and cross-tile duplicate merging.

Tiles overlap, so one object is often detected in two or more tiles. After
remapping every detection into frame coordinates, a greedy
confidence-descending suppression keeps the best box of each duplicate
cluster. Only same-class boxes are ever merged.
"""

import json
from dataclasses import dataclass

DEFAULT_IOU_THRESHOLD = 0.5


@dataclass(frozen=True)
class Detection:
    """One detected object: class, confidence and an axis-aligned box.

    The box is (x, y, w, h) in pixels, top-left origin. ``tile`` is the
    index of the source tile while coordinates are tile-local, and is kept
    for provenance after remapping.
    """

    class_id: int
    confidence: float
    x: float
    y: float
    w: float
    h: float
    tile: int | None = None

    def __post_init__(self):
        if self.w <= 0 or self.h <= 0:
            raise ValueError(f"detection box must have positive size, got {self}")
        if not 0.0 <= self.confidence <= 1.0:
            raise ValueError(f"confidence must be in [0, 1], got {self.confidence}")

    def box(self) -> tuple:
        return (self.x, self.y, self.w, self.h)


def iou(a, b) -> float:
    """Intersection over union of two (x, y, w, h) boxes."""
    ax, ay, aw, ah = a
    bx, by, bw, bh = b
    ix = max(0.0, min(ax + aw, bx + bw) - max(ax, bx))
    iy = max(0.0, min(ay + ah, by + bh) - max(ay, by))
    inter = ix * iy
    union = aw * ah + bw * bh - inter
    return inter / union if union > 0 else 0.0


def to_global(det: Detection, plan) -> Detection:
    """Tile-local detection -> frame coordinates, clipped to the frame."""
    if det.tile is None or not 0 <= det.tile < len(plan.origins):
        raise ValueError(f"detection references unknown tile {det.tile}")
    ox, oy = plan.origins[det.tile]
    r = plan.resize_factor
    x = det.x / r + ox
    y = det.y / r + oy
    w = det.w / r
    h = det.h / r
    # clip to the frame without letting the box degenerate
    x0 = min(max(x, 0.0), plan.frame_w - 1e-6)
    y0 = min(max(y, 0.0), plan.frame_h - 1e-6)
    x1 = max(min(x + w, float(plan.frame_w)), x0 + 1e-6)
    y1 = max(min(y + h, float(plan.frame_h)), y0 + 1e-6)
    return Detection(det.class_id, det.confidence, x0, y0, x1 - x0, y1 - y0,
                     tile=det.tile)


def _order_key(d: Detection):
    # descending confidence, then a total order so merge ignores input order
    return (-d.confidence, d.x, d.y, d.w, d.h, d.class_id,
            -1 if d.tile is None else d.tile)


def merge(detections, iou_threshold: float = DEFAULT_IOU_THRESHOLD) -> list:
    """Greedy suppression: drop boxes overlapping a kept same-class box."""
    kept = []
    for det in sorted(detections, key=_order_key):
        duplicate = any(
            k.class_id == det.class_id and iou(k.box(), det.box()) >= iou_threshold
            for k in kept)
        if not duplicate:
            kept.append(det)
    return kept


def to_json_obj(det: Detection) -> dict:
    return {"class": det.class_id, "conf": det.confidence,
            "x": det.x, "y": det.y, "w": det.w, "h": det.h}


def write_jsonl(detections, stream) -> None:
    for det in detections:
        stream.write(json.dumps(to_json_obj(det), sort_keys=True) + "\n")
