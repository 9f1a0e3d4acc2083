"""Axis-aligned bounding box geometry shared by dataset, augmentation and evaluation."""

from __future__ import annotations

from dataclasses import dataclass


@dataclass(frozen=True)
class BBox:
    """Axis-aligned box in pixel coordinates, xywh with the origin at the top-left."""

    x: float
    y: float
    w: float
    h: float

    def __post_init__(self):
        if self.w <= 0 or self.h <= 0:
            raise ValueError(f"box width/height must be positive, got w={self.w}, h={self.h}")
        if self.x < 0 or self.y < 0:
            raise ValueError(f"box origin must be non-negative, got x={self.x}, y={self.y}")

    @property
    def x2(self) -> float:
        return self.x + self.w

    @property
    def y2(self) -> float:
        return self.y + self.h

    @property
    def area(self) -> float:
        return self.w * self.h

    def as_xywh(self) -> list[float]:
        return [float(self.x), float(self.y), float(self.w), float(self.h)]

    def fits_in(self, width: float, height: float, slack: float = 0.5) -> bool:
        """Containment check against an image, with half-pixel slack for float annotations."""
        return self.x2 <= width + slack and self.y2 <= height + slack


def intersection_area(a: BBox, b: BBox) -> float:
    iw = min(a.x2, b.x2) - max(a.x, b.x)
    ih = min(a.y2, b.y2) - max(a.y, b.y)
    if iw <= 0 or ih <= 0:
        return 0.0
    return iw * ih


def iou(a: BBox, b: BBox) -> float:
    """Intersection over union of two boxes; 1.0 iff identical, 0.0 iff disjoint."""
    inter = intersection_area(a, b)
    if inter == 0.0:
        return 0.0
    return inter / (a.area + b.area - inter)


def crowd_iou(det: BBox, crowd: BBox) -> float:
    """IoU variant for crowd regions: intersection over the detection's own area."""
    inter = intersection_area(det, crowd)
    if inter == 0.0:
        return 0.0
    return inter / det.area


def clip_box(box: BBox, width: float, height: float) -> BBox | None:
    """Clip a box to an image window; returns None when nothing remains."""
    x1 = max(box.x, 0.0)
    y1 = max(box.y, 0.0)
    x2 = min(box.x2, float(width))
    y2 = min(box.y2, float(height))
    if x2 - x1 <= 0 or y2 - y1 <= 0:
        return None
    return BBox(x1, y1, x2 - x1, y2 - y1)
