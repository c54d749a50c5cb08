"""Dataset augmentation: spatial coverage, mosaics, brightness, multi-object.

The spatial-coverage transform fixes position bias. The source image is
collated into a 3x3 canvas (its eight neighbours drawn from a background
pool, or copies of itself in replicate mode), object coordinates are
recomputed in the canvas frame, and a square window that fully contains one
chosen object is sampled uniformly among all valid positions. Because every
window position containing the object is equally likely, the object lands
uniformly over the output; objects are cropped around, never resized.

Mosaics aggregate four jittered cell crops into one image for background and
attitude variety; brightness jitter shifts the HSV value channel; the
multi-object transform composes scenes holding zero to four objects.
"""

import math
from dataclasses import dataclass, field, replace

import numpy as np

from .dataset import Box, LabeledImage

SOURCE_SIZE = (1080, 1920)  # (H, W) the strict pipeline expects


@dataclass(frozen=True)
class AugmentConfig:
    target_size: int = 640
    seed: int = 0
    brightness_range: float = 0.25     # |delta| bound for the V channel shift
    mosaic_cell: int = 320
    multiplier: int = 3                # output count >= multiplier * input count
    collate_mode: str = "pool"         # "pool" or "replicate"
    min_visibility: float = 0.5        # keep clipped boxes seen at least this much
    relaxed: bool = False              # accept any source >= target_size

    def __post_init__(self):
        if self.target_size < 1:
            raise ValueError("target_size must be >= 1")
        if self.collate_mode not in ("pool", "replicate"):
            raise ValueError(f"unknown collate mode {self.collate_mode!r}")
        if not 0.0 <= self.brightness_range <= 1.0:
            raise ValueError("brightness_range must be in [0, 1]")


def _check_source(img: LabeledImage, cfg: AugmentConfig) -> None:
    h, w = img.height, img.width
    if cfg.relaxed:
        if h < cfg.target_size or w < cfg.target_size:
            raise ValueError(
                f"{img.name}: source {w}x{h} is smaller than the"
                f" {cfg.target_size} px target")
    elif (h, w) != SOURCE_SIZE:
        raise ValueError(
            f"{img.name}: source must be {SOURCE_SIZE[1]}x{SOURCE_SIZE[0]}"
            f" (relaxed mode accepts any size >= target)")
    if cfg.target_size > 3 * min(h, w):
        raise ValueError(
            f"{img.name}: target {cfg.target_size} exceeds the collated"
            f" canvas of a {w}x{h} source")


def _fit_background(bg: np.ndarray, h: int, w: int, rng) -> np.ndarray:
    """Crop (or tile, then crop) a background to exactly h x w."""
    if bg.shape[0] < h or bg.shape[1] < w:
        reps = (math.ceil(h / bg.shape[0]), math.ceil(w / bg.shape[1]), 1)
        bg = np.tile(bg, reps)
    y = int(rng.integers(0, bg.shape[0] - h + 1))
    x = int(rng.integers(0, bg.shape[1] - w + 1))
    return bg[y:y + h, x:x + w]


def collate(img: LabeledImage, backgrounds, mode: str, rng) -> LabeledImage:
    """3x3 canvas with the source at the centre and remapped labels."""
    h, w = img.height, img.width
    canvas = np.empty((3 * h, 3 * w, 3), dtype=np.uint8)
    for gy in range(3):
        for gx in range(3):
            if (gy, gx) == (1, 1):
                cell = img.image
            elif mode == "replicate":
                cell = img.image
            else:
                if not backgrounds:
                    raise ValueError("pool collation needs a background pool")
                pick = backgrounds[int(rng.integers(0, len(backgrounds)))]
                cell = _fit_background(pick, h, w, rng)
            canvas[gy * h:(gy + 1) * h, gx * w:(gx + 1) * w] = cell
    boxes = [replace(b, x=b.x + w, y=b.y + h) for b in img.boxes]
    return LabeledImage(img.name + "_collated", canvas, boxes)


def crop_window(img: LabeledImage, x0: int, y0: int, size: int,
                min_visibility: float = 0.5) -> LabeledImage:
    """Crop a size x size window and remap labels.

    Boxes fully inside keep their exact width and height; partially visible
    boxes are clipped, and dropped entirely below the visibility threshold.
    """
    if x0 < 0 or y0 < 0 or x0 + size > img.width or y0 + size > img.height:
        raise ValueError(f"window ({x0}, {y0}) + {size} leaves the raster")
    crop = img.image[y0:y0 + size, x0:x0 + size].copy()
    boxes = []
    for b in img.boxes:
        ix0 = max(b.x, x0)
        iy0 = max(b.y, y0)
        ix1 = min(b.x + b.w, x0 + size)
        iy1 = min(b.y + b.h, y0 + size)
        if ix1 <= ix0 or iy1 <= iy0:
            continue
        visible = (ix1 - ix0) * (iy1 - iy0) / (b.w * b.h)
        if visible < min_visibility:
            continue
        boxes.append(Box(b.class_id, ix0 - x0, iy0 - y0, ix1 - ix0, iy1 - iy0))
    return LabeledImage(img.name + "_crop", crop, boxes)


def sample_window(collated: LabeledImage, size: int, rng,
                  target: Box | None = None) -> tuple:
    """Uniform (x0, y0) for a window; must fully contain ``target`` if given."""
    if size > collated.width or size > collated.height:
        raise ValueError(f"window {size} exceeds the {collated.width}x"
                         f"{collated.height} canvas")
    if target is None:
        x_lo, x_hi = 0, collated.width - size
        y_lo, y_hi = 0, collated.height - size
    else:
        if target.w > size or target.h > size:
            raise ValueError(
                f"object {target.w}x{target.h} does not fit a {size} px window")
        x_lo = max(0, target.x + target.w - size)
        x_hi = min(target.x, collated.width - size)
        y_lo = max(0, target.y + target.h - size)
        y_hi = min(target.y, collated.height - size)
    return (int(rng.integers(x_lo, x_hi + 1)), int(rng.integers(y_lo, y_hi + 1)))


def spatial_coverage(img: LabeledImage, cfg: AugmentConfig, backgrounds,
                     rng) -> LabeledImage:
    """One unbiased crop: collate, pick an object, crop a uniform window."""
    _check_source(img, cfg)
    collated = collate(img, backgrounds, cfg.collate_mode, rng)
    target = None
    if collated.boxes:
        target = collated.boxes[int(rng.integers(0, len(collated.boxes)))]
    x0, y0 = sample_window(collated, cfg.target_size, rng, target)
    out = crop_window(collated, x0, y0, cfg.target_size, cfg.min_visibility)
    return LabeledImage(img.name, out.image, out.boxes)


# --- brightness --------------------------------------------------------------

def brightness_jitter(image: np.ndarray, delta: float) -> np.ndarray:
    """Shift the HSV value channel by ``delta`` (of full scale), clamped.

    With hue and saturation fixed, every RGB component is proportional to V,
    so the shift is an exact per-pixel rescale towards the new V; black
    pixels become gray of value delta.
    """
    if image.dtype != np.uint8:
        raise ValueError("brightness_jitter expects a uint8 image")
    if delta == 0.0:
        return image.copy()
    img = image.astype(np.float64)
    v = img.max(axis=2)
    v_new = np.clip(v + delta * 255.0, 0.0, 255.0)
    out = np.empty_like(img)
    dark = v == 0
    scale = np.divide(v_new, v, out=np.ones_like(v), where=~dark)
    out = img * scale[..., None]
    out[dark] = v_new[dark][..., None]
    return np.clip(np.rint(out), 0, 255).astype(np.uint8)


# --- mosaic ------------------------------------------------------------------

# (flip horizontal?, quarter turns) spans the brightness-preserving dihedral set
_GEOMETRY = [(False, 0), (False, 1), (False, 2), (False, 3),
             (True, 0), (True, 1), (True, 2), (True, 3)]


def _apply_geometry(image: np.ndarray, boxes, flip: bool, turns: int):
    s = image.shape[0]
    if flip:
        image = image[:, ::-1]
        boxes = [replace(b, x=s - b.x - b.w) for b in boxes]
    for _ in range(turns % 4):
        image = np.rot90(image)
        boxes = [Box(b.class_id, b.y, s - b.x - b.w, b.h, b.w) for b in boxes]
    return np.ascontiguousarray(image), boxes


def mosaic(samples, cfg: AugmentConfig, rng) -> LabeledImage:
    """2x2 aggregation of four jittered cell crops into one image."""
    if len(samples) != 4:
        raise ValueError(f"mosaic needs exactly 4 samples, got {len(samples)}")
    cell = cfg.mosaic_cell
    size = 2 * cell
    canvas = np.empty((size, size, 3), dtype=np.uint8)
    boxes = []
    for i, sample in enumerate(samples):
        if sample.height < cell or sample.width < cell:
            raise ValueError(
                f"{sample.name}: {sample.width}x{sample.height} cannot supply"
                f" a {cell} px mosaic cell")
        x0 = int(rng.integers(0, sample.width - cell + 1))
        y0 = int(rng.integers(0, sample.height - cell + 1))
        piece = crop_window(sample, x0, y0, cell, cfg.min_visibility)
        flip, turns = _GEOMETRY[int(rng.integers(0, len(_GEOMETRY)))]
        img, cell_boxes = _apply_geometry(piece.image, piece.boxes, flip, turns)
        delta = float(rng.uniform(-cfg.brightness_range, cfg.brightness_range))
        img = brightness_jitter(img, delta)
        row, col = divmod(i, 2)
        oy, ox = row * cell, col * cell
        canvas[oy:oy + cell, ox:ox + cell] = img
        boxes.extend(replace(b, x=b.x + ox, y=b.y + oy) for b in cell_boxes)
    return LabeledImage("mosaic", canvas, boxes)


# --- multi-object composition --------------------------------------------------

def compose_objects(background: np.ndarray, patches, count: int, rng,
                    max_tries: int = 64) -> LabeledImage:
    """Paste ``count`` object patches onto a background without overlap."""
    h, w = background.shape[:2]
    canvas = background.copy()
    boxes = []
    for _ in range(count):
        for attempt in range(max_tries):
            cls, patch = patches[int(rng.integers(0, len(patches)))]
            ph, pw = patch.shape[:2]
            if ph > h or pw > w:
                continue
            x = int(rng.integers(0, w - pw + 1))
            y = int(rng.integers(0, h - ph + 1))
            candidate = Box(cls, x, y, pw, ph)
            clear = all(
                x + pw <= b.x or b.x + b.w <= x or y + ph <= b.y or b.y + b.h <= y
                for b in boxes)
            if clear:
                canvas[y:y + ph, x:x + pw] = patch
                boxes.append(candidate)
                break
        else:
            raise ValueError(f"could not place object {len(boxes) + 1}/{count}")
    return LabeledImage("composed", canvas, boxes)


# --- corpus-level driver -------------------------------------------------------

@dataclass
class CorpusResult:
    outputs: list = field(default_factory=list)   # LabeledImage
    manifest: dict = field(default_factory=dict)
    skipped: list = field(default_factory=list)   # (source, reason)


def _rng_for(seed: int, index: int):
    return np.random.default_rng([seed, index])


def augment_corpus(corpus, cfg: AugmentConfig, modes=("all",)) -> CorpusResult:
    """Expand a corpus with the configured transforms.

    Outputs and manifest entries come in a deterministic order keyed only by
    (seed, output index), so re-runs and parallel runs agree bit for bit.
    For 'all', each source yields coverage crops, one brightness variant and
    one composed multi-object scene (object counts cycling 0..4), plus one
    mosaic per four sources; the result is at least ``multiplier`` times the
    input count.
    """
    sources = list(corpus)
    result = CorpusResult(manifest={"seed": cfg.seed, "entries": []})
    if not sources:
        return result
    want = set(modes)
    if "all" in want:
        want = {"coverage", "brightness", "multi", "mosaic"}

    backgrounds = [s.image for s in sources]
    patches = [(b.class_id,
                s.image[b.y:b.y + b.h, b.x:b.x + b.w].copy())
               for s in sources for b in s.boxes]

    counter = 0

    def emit(item: LabeledImage, name: str, transform: str, srcs, extra=None):
        nonlocal counter
        entry = {"output": name, "transform": transform, "sources": srcs,
                 "seed": [cfg.seed, counter]}
        if extra:
            entry.update(extra)
        result.outputs.append(LabeledImage(name, item.image, item.boxes))
        result.manifest["entries"].append(entry)
        counter += 1

    coverage_per_source = max(1, cfg.multiplier - 2) if "coverage" in want else 0

    for si, src in enumerate(sources):
        if "coverage" in want:
            try:
                _check_source(src, cfg)
            except ValueError as exc:
                result.skipped.append((src.name, str(exc)))
            else:
                rng = _rng_for(cfg.seed, counter)
                collated = collate(src, backgrounds, cfg.collate_mode, rng)
                for ci in range(coverage_per_source):
                    rng = _rng_for(cfg.seed, counter)
                    target = None
                    if collated.boxes:
                        target = collated.boxes[
                            int(rng.integers(0, len(collated.boxes)))]
                    x0, y0 = sample_window(collated, cfg.target_size, rng, target)
                    out = crop_window(collated, x0, y0, cfg.target_size,
                                      cfg.min_visibility)
                    emit(out, f"{src.name}_cov{ci}", "spatial_coverage",
                         [src.name], {"window": [x0, y0]})
        if "brightness" in want:
            rng = _rng_for(cfg.seed, counter)
            delta = float(rng.uniform(-cfg.brightness_range, cfg.brightness_range))
            emit(LabeledImage(src.name, brightness_jitter(src.image, delta),
                              list(src.boxes)),
                 f"{src.name}_bright", "brightness", [src.name],
                 {"delta": delta})
        if "multi" in want:
            n_objects = si % 5
            if n_objects and not patches:
                result.skipped.append(
                    (src.name, "multi-object variant needs labeled sources"))
            else:
                rng = _rng_for(cfg.seed, counter)
                size = min(cfg.target_size, src.height, src.width)
                bx = int(rng.integers(0, src.width - size + 1))
                by = int(rng.integers(0, src.height - size + 1))
                bg = src.image[by:by + size, bx:bx + size]
                try:
                    composed = compose_objects(bg, patches, n_objects, rng)
                except ValueError as exc:
                    result.skipped.append((src.name, str(exc)))
                else:
                    emit(composed, f"{src.name}_multi{n_objects}", "multi_object",
                         [src.name], {"objects": n_objects})

    if "mosaic" in want:
        eligible = [s for s in sources
                    if s.height >= cfg.mosaic_cell and s.width >= cfg.mosaic_cell]
        for mi in range(len(eligible) // 4):
            quad = eligible[4 * mi:4 * mi + 4]
            rng = _rng_for(cfg.seed, counter)
            out = mosaic(quad, cfg, rng)
            emit(out, f"mosaic{mi}", "mosaic", [s.name for s in quad])

    result.manifest["skipped"] = [
        {"source": name, "reason": reason} for name, reason in result.skipped]
    return result
