"""Shared image, annotation and geometry types.

Boxes are stored normalized (center/size in ``[0, 1]``) so the same annotation
applies unchanged to every resolution of a scene.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from PIL import Image

from . import kernels

ADI_CATEGORIES = ("micro_bridge", "gap", "bridge", "line_collapse", "probable_gap")
AEI_CATEGORIES = ("break", "bridge", "dark_spot", "pattern_collapse")
CATEGORY_SETS = {"adi": ADI_CATEGORIES, "aei": AEI_CATEGORIES}

MIN_SIDE = 8
_EPS = 1e-9


class DataError(ValueError):
    """Invalid image, annotation or manifest content."""


@dataclass(frozen=True)
class DefectCategory:
    id: int
    name: str


def make_categories(names: Sequence[str]) -> tuple[DefectCategory, ...]:
    if len(set(names)) != len(names):
        raise DataError(f"duplicate category names in {list(names)}")
    return tuple(DefectCategory(i, n) for i, n in enumerate(names))


@dataclass(frozen=True, eq=False)
class GrayImage:
    """Single-channel float32 raster with intensities in ``[0, 1]``."""

    pixels: np.ndarray

    def __post_init__(self):
        px = np.array(self.pixels, dtype=np.float32)
        if px.ndim != 2:
            raise DataError(f"expected a 2-D image, got shape {px.shape}")
        if px.shape[0] < MIN_SIDE or px.shape[1] < MIN_SIDE:
            raise DataError(f"image sides must be >= {MIN_SIDE}, got {px.shape}")
        if not np.all(np.isfinite(px)) or px.min() < 0.0 or px.max() > 1.0:
            raise DataError("intensities must lie in [0, 1]")
        px.flags.writeable = False
        object.__setattr__(self, "pixels", px)

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    @property
    def width(self) -> int:
        return self.pixels.shape[1]

    @property
    def shape(self) -> tuple[int, int]:
        return self.pixels.shape

    @classmethod
    def from_array(cls, arr: np.ndarray) -> "GrayImage":
        """Build from any array, clipping to ``[0, 1]``."""
        return cls(np.clip(np.asarray(arr, dtype=np.float32), 0.0, 1.0))

    def to_uint8(self) -> np.ndarray:
        return np.round(self.pixels * 255.0).astype(np.uint8)

    @classmethod
    def from_uint8(cls, arr: np.ndarray) -> "GrayImage":
        return cls(np.asarray(arr, dtype=np.float32) / 255.0)

    def save_png(self, path: str | Path) -> None:
        Image.fromarray(self.to_uint8(), mode="L").save(path, format="PNG")

    @classmethod
    def load_png(cls, path: str | Path) -> "GrayImage":
        try:
            with Image.open(path) as im:
                arr = np.asarray(im.convert("L"))
        except OSError as exc:
            raise DataError(f"cannot read image {path}: {exc}") from exc
        return cls.from_uint8(arr)


@dataclass(frozen=True)
class BBox:
    """Normalized center/size box. ``category`` is the integer category id."""

    category: int
    cx: float
    cy: float
    w: float
    h: float

    def __post_init__(self):
        if not (self.w > 0 and self.h > 0):
            raise DataError(f"box width and height must be positive: {self}")
        x0, y0, x1, y1 = self.xyxy()
        if x0 < -_EPS or y0 < -_EPS or x1 > 1 + _EPS or y1 > 1 + _EPS:
            raise DataError(f"box extends outside the unit square: {self}")
        if self.category < 0:
            raise DataError(f"negative category id: {self}")

    def xyxy(self) -> tuple[float, float, float, float]:
        return (
            self.cx - self.w / 2,
            self.cy - self.h / 2,
            self.cx + self.w / 2,
            self.cy + self.h / 2,
        )

    @classmethod
    def from_xyxy(cls, category: int, x0, y0, x1, y1) -> "BBox":
        """Normalized corners, clipped to the unit square."""
        x0, x1 = max(0.0, float(x0)), min(1.0, float(x1))
        y0, y1 = max(0.0, float(y0)), min(1.0, float(y1))
        return cls(int(category), (x0 + x1) / 2, (y0 + y1) / 2, x1 - x0, y1 - y0)

    @classmethod
    def from_pixels(cls, category: int, x0, y0, x1, y1, height: int, width: int) -> "BBox":
        return cls.from_xyxy(category, x0 / width, y0 / height, x1 / width, y1 / height)

    def to_pixels(self, height: int, width: int) -> tuple[float, float, float, float]:
        x0, y0, x1, y1 = self.xyxy()
        return x0 * width, y0 * height, x1 * width, y1 * height

    def pixel_slices(self, height: int, width: int) -> tuple[slice, slice]:
        """Row/column slices of the pixels the box touches."""
        x0, y0, x1, y1 = self.to_pixels(height, width)
        r0, c0 = max(0, int(np.floor(y0 + 1e-6))), max(0, int(np.floor(x0 + 1e-6)))
        r1 = min(height, int(np.ceil(y1 - 1e-6)))
        c1 = min(width, int(np.ceil(x1 - 1e-6)))
        return slice(r0, max(r1, r0 + 1)), slice(c0, max(c1, c0 + 1))

    @property
    def area(self) -> float:
        return self.w * self.h


@dataclass(frozen=True)
class Detection:
    box: BBox
    confidence: float

    def __post_init__(self):
        if not 0.0 <= self.confidence <= 1.0:
            raise DataError(f"confidence outside [0, 1]: {self.confidence}")


@dataclass
class Sample:
    image: GrayImage
    boxes: list[BBox]
    source_meta: dict = field(default_factory=dict)

    def replace(self, image: GrayImage | None = None, boxes: list[BBox] | None = None,
                **meta) -> "Sample":
        new_meta = dict(self.source_meta)
        new_meta.update(meta)
        return Sample(
            image if image is not None else self.image,
            list(boxes) if boxes is not None else list(self.boxes),
            new_meta,
        )


def boxes_to_array(boxes: Iterable[BBox]) -> np.ndarray:
    arr = np.array([b.xyxy() for b in boxes], dtype=np.float64)
    return arr.reshape(-1, 4)


def iou(a: BBox, b: BBox) -> float:
    return float(kernels.iou_matrix([a.xyxy()], [b.xyxy()])[0, 0])


def iou_xyxy(a: Sequence[float], b: Sequence[float]) -> float:
    """IoU of two corner-format rectangles in any common unit."""
    return float(kernels.iou_matrix([a], [b])[0, 0])


def rescale_boxes(boxes: Sequence[BBox], from_res: tuple[int, int],
                  to_res: tuple[int, int]) -> list[BBox]:
    # Normalized boxes are resolution-free; only pixel renderings change.
    return list(boxes)


def greedy_match(detections: Sequence[Detection], gts: Sequence[BBox],
                 iou_thr: float = 0.5) -> list[tuple[int, int | None]]:
    """Match detections to GTs in descending confidence (stable on ties).

    Returns ``(det_index, gt_index or None)`` pairs in processing order.
    """
    order = sorted(range(len(detections)), key=lambda i: -detections[i].confidence)
    dets = [detections[i] for i in order]
    matched = kernels.greedy_match(
        boxes_to_array(d.box for d in dets),
        [d.box.category for d in dets],
        boxes_to_array(gts),
        [g.category for g in gts],
        iou_thr,
    )
    return [(order[k], int(j) if j >= 0 else None) for k, j in enumerate(matched)]


def write_annotations(path: str | Path, boxes: Iterable[BBox]) -> None:
    lines = [f"{b.category} {b.cx:.6f} {b.cy:.6f} {b.w:.6f} {b.h:.6f}\n" for b in boxes]
    Path(path).write_text("".join(lines))


def read_annotations(path: str | Path) -> list[BBox]:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise DataError(f"cannot read annotations {path}: {exc}") from exc
    boxes = []
    for lineno, line in enumerate(text.splitlines(), 1):
        if not line.strip():
            continue
        parts = line.split()
        if len(parts) != 5:
            raise DataError(f"{path}:{lineno}: expected 5 fields, got {len(parts)}")
        try:
            cat = int(parts[0])
            cx, cy, w, h = map(float, parts[1:])
        except ValueError as exc:
            raise DataError(f"{path}:{lineno}: {exc}") from exc
        x0, y0, x1, y1 = cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2
        if min(x0, y0) < 0 or max(x1, y1) > 1:
            # 6-digit rounding can push an edge box a hair past the border
            if min(x0, y0) < -1e-5 or max(x1, y1) > 1 + 1e-5:
                raise DataError(f"{path}:{lineno}: box outside the unit square")
            boxes.append(BBox.from_xyxy(cat, x0, y0, x1, y1))
        else:
            boxes.append(BBox(cat, cx, cy, w, h))
    return boxes
