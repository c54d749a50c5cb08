"""Labeled image corpus I/O.

An on-disk corpus is a directory of raster images, each with a text sidecar
of the same stem holding one box per line as ``class x y w h`` in absolute
pixels (top-left origin). Images without a sidecar count as unlabeled
backgrounds.
"""

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

IMAGE_SUFFIXES = (".png", ".bmp", ".jpg", ".jpeg")


@dataclass(frozen=True)
class Box:
    class_id: int
    x: int
    y: int
    w: int
    h: int

    def __post_init__(self):
        if self.w < 1 or self.h < 1:
            raise ValueError(f"box must be at least 1x1 px, got {self}")

    @property
    def center(self) -> tuple:
        return (self.x + self.w / 2, self.y + self.h / 2)


@dataclass
class LabeledImage:
    name: str
    image: np.ndarray              # (H, W, 3) uint8
    boxes: list = field(default_factory=list)

    def __post_init__(self):
        if self.image.ndim != 3 or self.image.shape[2] != 3:
            raise ValueError(f"image must be (H, W, 3), got {self.image.shape}")
        if self.image.dtype != np.uint8:
            raise ValueError(f"image must be uint8, got {self.image.dtype}")
        h, w = self.image.shape[:2]
        for b in self.boxes:
            if b.x < 0 or b.y < 0 or b.x + b.w > w or b.y + b.h > h:
                raise ValueError(f"box {b} sticks out of the {w}x{h} raster")

    @property
    def height(self) -> int:
        return self.image.shape[0]

    @property
    def width(self) -> int:
        return self.image.shape[1]


def load_image(path) -> np.ndarray:
    with Image.open(path) as img:
        return np.asarray(img.convert("RGB"), dtype=np.uint8)


def save_image(path, image: np.ndarray) -> None:
    Image.fromarray(image, mode="RGB").save(path)


def parse_labels(text: str) -> list:
    boxes = []
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.split()
        if len(parts) != 5:
            raise ValueError(f"label line {lineno}: expected 'class x y w h'")
        cls, x, y, w, h = (int(p) for p in parts)
        boxes.append(Box(cls, x, y, w, h))
    return boxes


def format_labels(boxes) -> str:
    return "".join(f"{b.class_id} {b.x} {b.y} {b.w} {b.h}\n" for b in boxes)


def label_path(image_path: Path) -> Path:
    return image_path.with_suffix(".txt")


def load_labeled(path) -> LabeledImage:
    path = Path(path)
    image = load_image(path)
    sidecar = label_path(path)
    boxes = parse_labels(sidecar.read_text()) if sidecar.exists() else []
    return LabeledImage(path.stem, image, boxes)


def iter_corpus(directory):
    """Yield LabeledImage for every raster in a directory, sorted by name."""
    directory = Path(directory)
    if not directory.is_dir():
        raise FileNotFoundError(f"corpus directory {directory} does not exist")
    for path in sorted(directory.iterdir()):
        if path.suffix.lower() in IMAGE_SUFFIXES:
            yield load_labeled(path)


def save_labeled(directory, item: LabeledImage, suffix: str = ".png") -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    img_path = directory / f"{item.name}{suffix}"
    save_image(img_path, item.image)
    label_path(img_path).write_text(format_labels(item.boxes))
    return img_path


def write_manifest(directory, manifest: dict) -> Path:
    path = Path(directory) / "manifest.json"
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return path
