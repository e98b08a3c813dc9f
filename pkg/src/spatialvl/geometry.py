"""Bounding-box arithmetic: position encoding, pairwise metrics, relation labels.

Boxes are ``(x1, y1, x2, y2)`` in pixels with the origin at the top-left of the
image, so a smaller ``y`` is higher up. Everything is computed in float64.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from spatialvl import kernels
from spatialvl.errors import ValidationError

DIRECTION_NAMES = ("left above", "left below", "right above", "right below")


@dataclass(frozen=True)
class BoundingBox:
    x1: float
    y1: float
    x2: float
    y2: float

    def __post_init__(self):
        coords = (self.x1, self.y1, self.x2, self.y2)
        if not all(math.isfinite(c) for c in coords):
            raise ValidationError(f"box coordinates must be finite, got {coords}")
        if not (self.x1 < self.x2 and self.y1 < self.y2):
            raise ValidationError(f"degenerate box {coords}: need x1 < x2 and y1 < y2")

    @property
    def area(self) -> float:
        return (self.x2 - self.x1) * (self.y2 - self.y1)

    @property
    def center(self) -> tuple[float, float]:
        return (0.5 * (self.x1 + self.x2), 0.5 * (self.y1 + self.y2))

    def as_tuple(self) -> tuple[float, float, float, float]:
        return (self.x1, self.y1, self.x2, self.y2)

    def scaled(self, s: float) -> "BoundingBox":
        return BoundingBox(self.x1 * s, self.y1 * s, self.x2 * s, self.y2 * s)


@dataclass(frozen=True)
class PositionVector:
    """Normalised corners plus normalised area of a box."""

    nx1: float
    ny1: float
    nx2: float
    ny2: float
    narea: float

    def as_array(self) -> np.ndarray:
        return np.array([self.nx1, self.ny1, self.nx2, self.ny2, self.narea])


class RelationMetric(str, enum.Enum):
    DIRECTION4 = "direction"
    OVERLAP_BINARY = "overlap"
    IOU_VALUE = "iou_regression"
    IOU_CLASS10 = "iou_class"
    GIOU_CLASS10 = "giou_class"

    @property
    def num_outputs(self) -> int:
        """Width of the SRC head output layer for this metric."""
        return {
            RelationMetric.DIRECTION4: 4,
            RelationMetric.OVERLAP_BINARY: 2,
            RelationMetric.IOU_VALUE: 1,
            RelationMetric.IOU_CLASS10: 10,
            RelationMetric.GIOU_CLASS10: 10,
        }[self]

    @property
    def is_regression(self) -> bool:
        return self is RelationMetric.IOU_VALUE

    @property
    def is_symmetric(self) -> bool:
        return self is not RelationMetric.DIRECTION4

    @classmethod
    def parse(cls, value) -> "RelationMetric":
        if isinstance(value, cls):
            return value
        try:
            return cls(value)
        except ValueError:
            valid = ", ".join(m.value for m in cls)
            raise ValidationError(f"unknown relation metric {value!r}; valid: {valid}") from None


@dataclass(frozen=True)
class RelationLabel:
    metric: RelationMetric
    value: int | float

    def __post_init__(self):
        if self.metric.is_regression:
            if not 0.0 <= self.value <= 1.0:
                raise ValidationError(f"IoU value {self.value} outside [0, 1]")
        elif not (isinstance(self.value, (int, np.integer)) and 0 <= self.value < self.metric.num_outputs):
            raise ValidationError(f"{self.metric.value} label {self.value!r} out of range")


def _check_box(box) -> BoundingBox:
    if not isinstance(box, BoundingBox):
        raise ValidationError(f"expected BoundingBox, got {type(box).__name__}")
    return box


def position_vector(box: BoundingBox, image_width: float, image_height: float) -> PositionVector:
    _check_box(box)
    if not (image_width > 0 and image_height > 0):
        raise ValidationError(
            f"image dimensions must be positive, got width={image_width}, height={image_height}"
        )
    W, H = float(image_width), float(image_height)
    return PositionVector(
        box.x1 / W,
        box.y1 / H,
        box.x2 / W,
        box.y2 / H,
        (box.y2 - box.y1) * (box.x2 - box.x1) / (W * H),
    )


def _inter_union_hull(a: BoundingBox, b: BoundingBox) -> tuple[float, float, float]:
    iw = max(0.0, min(a.x2, b.x2) - max(a.x1, b.x1))
    ih = max(0.0, min(a.y2, b.y2) - max(a.y1, b.y1))
    inter = iw * ih
    union = (a.x2 - a.x1) * (a.y2 - a.y1) + (b.x2 - b.x1) * (b.y2 - b.y1) - inter
    hull = (max(a.x2, b.x2) - min(a.x1, b.x1)) * (max(a.y2, b.y2) - min(a.y1, b.y1))
    return inter, union, hull


def iou(a: BoundingBox, b: BoundingBox) -> float:
    inter, union, _ = _inter_union_hull(_check_box(a), _check_box(b))
    return inter / union


def giou(a: BoundingBox, b: BoundingBox) -> float:
    """IoU minus the fraction of the enclosing hull not covered by the union."""
    inter, union, hull = _inter_union_hull(_check_box(a), _check_box(b))
    return inter / union - (hull - union) / hull


def discretize_iou(value: float) -> int:
    """Ten half-open bins of width 0.1; 1.0 lands in the last bin."""
    if not (0.0 <= value <= 1.0):
        raise ValidationError(f"IoU value {value!r} outside [0, 1]")
    return min(int(math.floor(value * 10.0)), 9)


def direction_label(a: BoundingBox, b: BoundingBox) -> int:
    """Joint four-way direction of ``a`` relative to ``b``, see DIRECTION_NAMES.

    Ties on a center coordinate count as left / above.
    """
    (ax, ay), (bx, by) = _check_box(a).center, _check_box(b).center
    left = ax <= bx
    above = ay <= by
    return (0 if left else 2) + (0 if above else 1)


def overlap_flag(a: BoundingBox, b: BoundingBox) -> int:
    inter, _, _ = _inter_union_hull(_check_box(a), _check_box(b))
    return int(inter > 0.0)


def giou_to_unit(value: float) -> float:
    return min(1.0, max(0.0, 0.5 * (value + 1.0)))


def relation_edge(metric, a: BoundingBox, b: BoundingBox) -> RelationLabel:
    metric = RelationMetric.parse(metric)
    if metric is RelationMetric.DIRECTION4:
        return RelationLabel(metric, direction_label(a, b))
    if metric is RelationMetric.OVERLAP_BINARY:
        return RelationLabel(metric, overlap_flag(a, b))
    if metric is RelationMetric.IOU_VALUE:
        return RelationLabel(metric, iou(a, b))
    if metric is RelationMetric.IOU_CLASS10:
        return RelationLabel(metric, discretize_iou(iou(a, b)))
    return RelationLabel(metric, discretize_iou(giou_to_unit(giou(a, b))))


# --------------------------------------------------------------------------
# array forms used on hot paths
# --------------------------------------------------------------------------


def boxes_to_array(boxes: Sequence[BoundingBox]) -> np.ndarray:
    arr = np.empty((len(boxes), 4))
    for i, b in enumerate(boxes):
        arr[i] = b.as_tuple()
    return arr


def position_vectors(boxes: np.ndarray, image_width: float, image_height: float) -> np.ndarray:
    """Row-wise ``position_vector`` on an ``(n, 4)`` array."""
    if not (image_width > 0 and image_height > 0):
        raise ValidationError("image dimensions must be positive")
    W, H = float(image_width), float(image_height)
    out = np.empty((boxes.shape[0], 5))
    out[:, 0] = boxes[:, 0] / W
    out[:, 1] = boxes[:, 1] / H
    out[:, 2] = boxes[:, 2] / W
    out[:, 3] = boxes[:, 3] / H
    out[:, 4] = (boxes[:, 3] - boxes[:, 1]) * (boxes[:, 2] - boxes[:, 0]) / (W * H)
    return out


def pairwise_iou(boxes: np.ndarray) -> np.ndarray:
    b = np.ascontiguousarray(boxes, dtype=np.float64)
    return kernels.pairwise_iou(b, b)


def pairwise_giou(boxes: np.ndarray) -> np.ndarray:
    b = np.ascontiguousarray(boxes, dtype=np.float64)
    return kernels.pairwise_giou(b, b)
