"""Axis-aligned box arithmetic: IoU, class-agnostic NMS, format conversions.

Boxes are pixel xyxy floats with the origin at the top-left corner of the
image, so x1 <= x2 and y1 <= y2 always.
"""
from __future__ import annotations

import math
import warnings
from dataclasses import dataclass
from typing import Iterable, Sequence


class GeometryError(ValueError):
    pass


@dataclass(frozen=True)
class Box:
    x1: float
    y1: float
    x2: float
    y2: float

    def __post_init__(self) -> None:
        for name in ("x1", "y1", "x2", "y2"):
            value = float(getattr(self, name))
            if not math.isfinite(value):
                raise GeometryError(f"non-finite box coordinate: {self!r}")
            object.__setattr__(self, name, value)
        if self.x1 > self.x2 or self.y1 > self.y2:
            raise GeometryError(f"inverted box: {self!r}")

    @property
    def width(self) -> float:
        return self.x2 - self.x1

    @property
    def height(self) -> float:
        return self.y2 - self.y1

    @property
    def area(self) -> float:
        return self.width * self.height

    def is_degenerate(self) -> bool:
        return self.area <= 0.0

    def clamped(self, width: float, height: float) -> "Box":
        """Clip the box to the [0, width] x [0, height] image rectangle."""
        x1 = min(max(self.x1, 0.0), width)
        y1 = min(max(self.y1, 0.0), height)
        x2 = min(max(self.x2, 0.0), width)
        y2 = min(max(self.y2, 0.0), height)
        return Box(x1, y1, x2, y2)

    def as_xyxy(self) -> tuple[float, float, float, float]:
        return (self.x1, self.y1, self.x2, self.y2)

    def as_cxcywh(self) -> tuple[float, float, float, float]:
        return (
            (self.x1 + self.x2) / 2.0,
            (self.y1 + self.y2) / 2.0,
            self.width,
            self.height,
        )

    @classmethod
    def from_cxcywh(cls, cx: float, cy: float, w: float, h: float) -> "Box":
        return cls(cx - w / 2.0, cy - h / 2.0, cx + w / 2.0, cy + h / 2.0)

    @classmethod
    def from_xywh(cls, x: float, y: float, w: float, h: float) -> "Box":
        return cls(x, y, x + w, y + h)

    def sort_key(self) -> tuple[float, float, float, float]:
        return (self.x1, self.y1, self.x2, self.y2)


@dataclass(frozen=True)
class ScoredBox:
    box: Box
    score: float

    def __post_init__(self) -> None:
        if not (0.0 <= self.score <= 1.0):
            raise GeometryError(f"score outside [0, 1]: {self.score}")


def iou(a: Box, b: Box) -> float:
    """Intersection over union of two boxes.

    Returns 0 for disjoint boxes and whenever the union has zero area
    (both boxes degenerate), so the result is always a well-defined value
    in [0, 1] and symmetric in its arguments.
    """
    ix1 = max(a.x1, b.x1)
    iy1 = max(a.y1, b.y1)
    ix2 = min(a.x2, b.x2)
    iy2 = min(a.y2, b.y2)
    iw = ix2 - ix1
    ih = iy2 - iy1
    if iw <= 0.0 or ih <= 0.0:
        return 0.0
    inter = iw * ih
    union = a.area + b.area - inter
    if union <= 0.0:
        return 0.0
    return inter / union


def nms_class_agnostic(items: Sequence[ScoredBox], iou_thresh: float) -> list[int]:
    """Greedy non-maximum suppression ignoring class labels entirely.

    Boxes are visited in descending score order (ties broken by lower
    original index); a box is suppressed iff its IoU with an already kept
    box strictly exceeds ``iou_thresh``. Degenerate (zero-area) boxes are
    dropped up front with a warning since their IoU against everything
    is 0 and keeping them would pollute downstream stages.

    Returns kept indices in original-list order.
    """
    if not (0.0 < iou_thresh < 1.0):
        raise GeometryError(f"iou_thresh must lie in (0, 1), got {iou_thresh}")
    candidates = []
    for idx, item in enumerate(items):
        if item.box.is_degenerate():
            warnings.warn(
                f"dropping degenerate box at index {idx} before NMS", stacklevel=2
            )
            continue
        candidates.append(idx)
    order = sorted(candidates, key=lambda i: (-items[i].score, i))
    kept: list[int] = []
    for i in order:
        suppressed = False
        for k in kept:
            if iou(items[i].box, items[k].box) > iou_thresh:
                suppressed = True
                break
        if not suppressed:
            kept.append(i)
    return sorted(kept)


def boxes_overlapping(kept: Iterable[ScoredBox], iou_thresh: float) -> bool:
    """True if any pair in ``kept`` has IoU above the threshold (antichain check)."""
    items = list(kept)
    for i in range(len(items)):
        for j in range(i + 1, len(items)):
            if iou(items[i].box, items[j].box) > iou_thresh:
                return True
    return False
