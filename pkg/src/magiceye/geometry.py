"""Box geometry: IoU and the letterbox mapping between image and network input."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import ValidationError

Box = tuple[float, float, float, float]


def iou(a: Sequence[float], b: Sequence[float]) -> float:
    """Intersection over union of two ``(x_min, y_min, x_max, y_max)`` boxes.

    Zero-area boxes and disjoint pairs give 0.0.
    """
    iw = min(a[2], b[2]) - max(a[0], b[0])
    ih = min(a[3], b[3]) - max(a[1], b[1])
    if iw <= 0.0 or ih <= 0.0:
        return 0.0
    inter = iw * ih
    union = (a[2] - a[0]) * (a[3] - a[1]) + (b[2] - b[0]) * (b[3] - b[1]) - inter
    if union <= 0.0:
        return 0.0
    return min(1.0, inter / union)


def iou_one_to_many(box: np.ndarray, boxes: np.ndarray) -> np.ndarray:
    """Vectorized :func:`iou` of one box against an ``(n, 4)`` array, same arithmetic order."""
    iw = np.minimum(box[2], boxes[:, 2]) - np.maximum(box[0], boxes[:, 0])
    ih = np.minimum(box[3], boxes[:, 3]) - np.maximum(box[1], boxes[:, 1])
    valid = (iw > 0.0) & (ih > 0.0)
    inter = np.where(valid, iw * ih, 0.0)
    union = (box[2] - box[0]) * (box[3] - box[1]) + (boxes[:, 2] - boxes[:, 0]) * (boxes[:, 3] - boxes[:, 1]) - inter
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.where(valid & (union > 0.0), inter / np.where(union > 0.0, union, 1.0), 0.0)
    return np.minimum(out, 1.0)


@dataclass(frozen=True)
class LetterboxTransform:
    """Aspect-preserving resize into a square network input, padded symmetrically.

    ``network = image * scale + pad``. Pads are kept fractional so the
    inverse is exact.
    """

    scale: float
    pad_x: float
    pad_y: float
    input_size: int
    image_w: float
    image_h: float

    def __post_init__(self) -> None:
        if self.scale <= 0:
            raise ValidationError("letterbox scale must be positive")
        if not (0 <= self.pad_x < self.input_size and 0 <= self.pad_y < self.input_size):
            raise ValidationError("letterbox padding out of range")

    def to_network(self, x: float, y: float) -> tuple[float, float]:
        return (x * self.scale + self.pad_x, y * self.scale + self.pad_y)

    def to_image(self, x, y):
        return ((x - self.pad_x) / self.scale, (y - self.pad_y) / self.scale)

    def box_to_network(self, box: Sequence[float]) -> Box:
        x0, y0 = self.to_network(box[0], box[1])
        x1, y1 = self.to_network(box[2], box[3])
        return (x0, y0, x1, y1)

    def box_to_image(self, box: Sequence[float]) -> Box:
        x0, y0 = self.to_image(box[0], box[1])
        x1, y1 = self.to_image(box[2], box[3])
        return (x0, y0, x1, y1)


def compute_letterbox(image_w: float, image_h: float, input_size: int) -> LetterboxTransform:
    if image_w <= 0 or image_h <= 0 or input_size <= 0:
        raise ValidationError("letterbox dimensions must be positive")
    scale = input_size / max(image_w, image_h)
    pad_x = (input_size - image_w * scale) / 2.0
    pad_y = (input_size - image_h * scale) / 2.0
    return LetterboxTransform(scale, max(pad_x, 0.0), max(pad_y, 0.0), input_size, image_w, image_h)


def clip_box(box: Sequence[float], width: float, height: float) -> Box:
    return (
        min(max(box[0], 0.0), width),
        min(max(box[1], 0.0), height),
        min(max(box[2], 0.0), width),
        min(max(box[3], 0.0), height),
    )
