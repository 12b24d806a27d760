"""Axis-aligned boxes in pixel coordinates (half-open intervals)."""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np


class InvalidInputError(ValueError):
    """Raised when an operation receives malformed or out-of-contract input."""


@dataclass(frozen=True, order=True)
class Box:
    """A box covering pixels x_min <= x < x_max, y_min <= y < y_max."""

    x_min: float
    y_min: float
    x_max: float
    y_max: float

    def __post_init__(self):
        vals = (self.x_min, self.y_min, self.x_max, self.y_max)
        if not all(math.isfinite(v) for v in vals):
            raise InvalidInputError(f"non-finite box coordinates {vals}")
        if self.x_max <= self.x_min or self.y_max <= self.y_min:
            raise InvalidInputError(f"degenerate box {vals}")

    @property
    def width(self) -> float:
        return self.x_max - self.x_min

    @property
    def height(self) -> float:
        return self.y_max - self.y_min

    @property
    def area(self) -> float:
        return self.width * self.height

    def as_list(self) -> list:
        return [self.x_min, self.y_min, self.x_max, self.y_max]

    def to_xywh(self) -> list:
        return [self.x_min, self.y_min, self.width, self.height]

    @classmethod
    def from_xywh(cls, x, y, w, h) -> "Box":
        return cls(x, y, x + w, y + h)

    @classmethod
    def from_list(cls, coords: Sequence[float]) -> "Box":
        if len(coords) != 4:
            raise InvalidInputError(f"expected 4 box coordinates, got {len(coords)}")
        return cls(*(_num(c) for c in coords))

    def translate(self, dx, dy) -> "Box":
        return Box(self.x_min + dx, self.y_min + dy, self.x_max + dx, self.y_max + dy)

    def clip(self, width, height) -> "Box":
        return Box(max(self.x_min, 0), max(self.y_min, 0),
                   min(self.x_max, width), min(self.y_max, height))

    def within(self, width, height) -> bool:
        return self.x_min >= 0 and self.y_min >= 0 and self.x_max <= width and self.y_max <= height


def _num(v):
    # keep integers as ints so JSON round trips stay byte-identical
    if isinstance(v, bool):
        raise InvalidInputError("boolean is not a coordinate")
    if isinstance(v, (int, np.integer)):
        return int(v)
    return float(v)


def iou(a: Box, b: Box) -> float:
    """Intersection over union of two boxes."""
    iw = min(a.x_max, b.x_max) - max(a.x_min, b.x_min)
    ih = min(a.y_max, b.y_max) - max(a.y_min, b.y_min)
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    return inter / (a.area + b.area - inter)


def iou_matrix(boxes_a: Iterable[Box], boxes_b: Iterable[Box]) -> np.ndarray:
    a = np.array([bx.as_list() for bx in boxes_a], dtype=float).reshape(-1, 4)
    b = np.array([bx.as_list() for bx in boxes_b], dtype=float).reshape(-1, 4)
    iw = np.minimum(a[:, None, 2], b[None, :, 2]) - np.maximum(a[:, None, 0], b[None, :, 0])
    ih = np.minimum(a[:, None, 3], b[None, :, 3]) - np.maximum(a[:, None, 1], b[None, :, 1])
    inter = np.clip(iw, 0, None) * np.clip(ih, 0, None)
    area_a = (a[:, 2] - a[:, 0]) * (a[:, 3] - a[:, 1])
    area_b = (b[:, 2] - b[:, 0]) * (b[:, 3] - b[:, 1])
    union = area_a[:, None] + area_b[None, :] - inter
    return inter / union


def nms(boxes: Sequence[Box], scores: Sequence[float], threshold: float = 0.5) -> list[int]:
    """Greedy non-maximum suppression; returns kept indices by descending score.

    Equal scores keep input order.
    """
    if len(boxes) == 0:
        return []
    order = sorted(range(len(boxes)), key=lambda i: -scores[i])
    ious = iou_matrix(boxes, boxes)
    keep: list[int] = []
    suppressed = np.zeros(len(boxes), dtype=bool)
    for i in order:
        if suppressed[i]:
            continue
        keep.append(i)
        suppressed |= ious[i] > threshold
    return keep
