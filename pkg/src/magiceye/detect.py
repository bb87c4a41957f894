"""Raw grid outputs to final detections, plus training-target assignment.

The decode is the YOLO-family one::

    cx = (sigmoid(tx) + col) * stride       w = anchor_w * exp(clip(tw, -10, 10))
    cy = (sigmoid(ty) + row) * stride       h = anchor_h * exp(clip(th, -10, 10))
    confidence = sigmoid(t_obj) * max_k sigmoid(t_class[k])

with boxes mapped back through the inverse letterbox and clipped to the image.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .errors import ShapeError, ValidationError
from .geometry import Box, LetterboxTransform, iou_one_to_many

LOGIT_SIZE_CLAMP = 10.0
DEFAULT_CONF_THRESHOLD = 0.25
DEFAULT_NMS_IOU = 0.45
DEFAULT_INPUT_SIZE = 640
STRIDES = (32, 16, 8)


def sigmoid(x):
    """Logistic function, accurate in both tails."""
    return np.exp(-np.logaddexp(0.0, -np.asarray(x, dtype=np.float64)))


def logit(p):
    p = np.asarray(p, dtype=np.float64)
    return np.log(p) - np.log1p(-p)


def default_grid_sizes(input_size: int = DEFAULT_INPUT_SIZE) -> tuple[int, ...]:
    """Grid sizes for strides 32/16/8: 20/40/80 at 640, 13/26/52 at 416."""
    if input_size % STRIDES[0]:
        raise ValidationError(f"input size {input_size} is not a multiple of {STRIDES[0]}")
    return tuple(input_size // s for s in STRIDES)


def default_anchors(input_size: int = DEFAULT_INPUT_SIZE) -> tuple[tuple[tuple[float, float], ...], ...]:
    # Synthetic priors (one square, one wide, one tall per stride); not trained values.
    out = []
    for stride in STRIDES:
        s = float(stride)
        out.append(((2.0 * s, 2.0 * s), (4.0 * s, 2.5 * s), (2.5 * s, 4.0 * s)))
    return tuple(out)


@dataclass(frozen=True)
class Detection:
    class_index: int
    confidence: float
    box: Box

    def __post_init__(self) -> None:
        if not 0.0 <= self.confidence <= 1.0:
            raise ValidationError(f"confidence {self.confidence} outside [0, 1]")
        x0, y0, x1, y1 = self.box
        if not (x0 < x1 and y0 < y1):
            raise ValidationError(f"degenerate detection box {self.box}")


@dataclass(frozen=True, eq=False)
class RawGridOutput:
    """One detection head's output: ``values[row, col, anchor] = (tx, ty, tw, th, t_obj, t_class...)``."""

    grid_w: int
    grid_h: int
    anchors: tuple[tuple[float, float], ...]
    values: np.ndarray

    @property
    def num_classes(self) -> int:
        return int(self.values.shape[-1]) - 5

    def validate(self) -> None:
        expected = (self.grid_h, self.grid_w, len(self.anchors))
        if self.values.ndim != 4 or tuple(self.values.shape[:3]) != expected or self.values.shape[3] < 6:
            raise ShapeError(
                f"value tensor shape {tuple(self.values.shape)} does not match grid "
                f"{self.grid_h}x{self.grid_w} with {len(self.anchors)} anchors and 5+N channels"
            )


def check_scale_ratios(raw: Sequence[RawGridOutput]) -> None:
    """Three-head outputs must have grid sizes in ratio 1:2:4."""
    if len(raw) != 3:
        return
    for attr in ("grid_w", "grid_h"):
        g = sorted(getattr(r, attr) for r in raw)
        if g[1] != 2 * g[0] or g[2] != 4 * g[0]:
            raise ShapeError(f"three-scale {attr} sizes {g} are not in ratio 1:2:4")


def decode_predictions(
    raw: Sequence[RawGridOutput],
    transform: LetterboxTransform,
    conf_threshold: float = DEFAULT_CONF_THRESHOLD,
) -> list[Detection]:
    """Decode every anchor slot whose confidence reaches ``conf_threshold``.

    Returns detections in original-image pixels, ordered by (scale, row,
    col, anchor). Boxes that vanish after clipping to the image are dropped.
    """
    if not 0.0 <= conf_threshold <= 1.0:
        raise ValidationError("confidence threshold out of range")
    for r in raw:
        r.validate()
    if len({r.num_classes for r in raw}) > 1:
        raise ShapeError("scales disagree on the number of classes")
    check_scale_ratios(raw)

    out: list[Detection] = []
    for r in raw:
        stride_x = transform.input_size / r.grid_w
        stride_y = transform.input_size / r.grid_h
        v = r.values
        obj = sigmoid(v[..., 4])
        # confidence <= objectness, so this prefilter is exact
        rows, cols, anchor_idx = np.nonzero(obj >= conf_threshold)
        if rows.size == 0:
            continue
        sel = v[rows, cols, anchor_idx]
        cls = sigmoid(sel[:, 5:])
        best = np.argmax(cls, axis=1)
        conf = obj[rows, cols, anchor_idx] * cls[np.arange(len(best)), best]
        keep = conf >= conf_threshold
        if not keep.any():
            continue
        rows, cols, anchor_idx, sel, best, conf = rows[keep], cols[keep], anchor_idx[keep], sel[keep], best[keep], conf[keep]

        anchors = np.asarray(r.anchors, dtype=np.float64)[anchor_idx]
        cx = (sigmoid(sel[:, 0]) + cols) * stride_x
        cy = (sigmoid(sel[:, 1]) + rows) * stride_y
        w = anchors[:, 0] * np.exp(np.clip(sel[:, 2], -LOGIT_SIZE_CLAMP, LOGIT_SIZE_CLAMP))
        h = anchors[:, 1] * np.exp(np.clip(sel[:, 3], -LOGIT_SIZE_CLAMP, LOGIT_SIZE_CLAMP))

        x0, y0 = transform.to_image(cx - w / 2.0, cy - h / 2.0)
        x1, y1 = transform.to_image(cx + w / 2.0, cy + h / 2.0)
        x0 = np.clip(x0, 0.0, transform.image_w)
        x1 = np.clip(x1, 0.0, transform.image_w)
        y0 = np.clip(y0, 0.0, transform.image_h)
        y1 = np.clip(y1, 0.0, transform.image_h)

        for i in range(len(conf)):
            if x0[i] < x1[i] and y0[i] < y1[i]:
                box = (float(x0[i]), float(y0[i]), float(x1[i]), float(y1[i]))
                out.append(Detection(int(best[i]), min(1.0, float(conf[i])), box))
    return out


def nms_sort_key(d: Detection) -> tuple[float, int, float]:
    return (-d.confidence, d.class_index, d.box[0])


def nms(detections: Sequence[Detection], iou_threshold: float = DEFAULT_NMS_IOU) -> list[Detection]:
    """Class-wise greedy suppression.

    A detection is kept iff its IoU with every already-kept detection of
    the same class is below ``iou_threshold``. Candidates are visited in
    (confidence desc, class asc, x_min asc) order, remaining ties in input
    order; the result is in that same order.
    """
    if not 0.0 <= iou_threshold <= 1.0:
        raise ValidationError("NMS IoU threshold out of range")
    kept: list[Detection] = []
    kept_boxes: dict[int, list[Box]] = {}
    for det in sorted(detections, key=nms_sort_key):
        same = kept_boxes.setdefault(det.class_index, [])
        if same and iou_one_to_many(np.asarray(det.box), np.asarray(same)).max() >= iou_threshold:
            continue
        same.append(det.box)
        kept.append(det)
    return kept


# ---------------------------------------------------------------------------
# Target assignment
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class TargetAssignment:
    """Target for one anchor slot. Offsets are the center's position inside its cell in [0, 1);
    width/height are fractions of the network input."""

    class_index: int
    offset_x: float
    offset_y: float
    width: float
    height: float


@dataclass
class TargetGrid:
    grid_sizes: tuple[int, ...]
    anchors: tuple[tuple[tuple[float, float], ...], ...]
    input_size: int
    # one dict per scale, keyed by (row, col, anchor)
    cells: list[dict[tuple[int, int, int], TargetAssignment]] = field(default_factory=list)

    def __post_init__(self) -> None:
        if not self.cells:
            self.cells = [{} for _ in self.grid_sizes]
        if len(self.anchors) != len(self.grid_sizes) or len(self.cells) != len(self.grid_sizes):
            raise ValidationError("target grid needs one anchor set and one cell map per scale")

    @property
    def num_assigned(self) -> int:
        return sum(len(c) for c in self.cells)

    def is_empty(self) -> bool:
        return self.num_assigned == 0


def shape_iou(w: float, h: float, aw: float, ah: float) -> float:
    """IoU of two boxes sharing a center."""
    inter = min(w, aw) * min(h, ah)
    return inter / (w * h + aw * ah - inter)


def cell_index(coord: float, grid: int) -> int:
    # floor puts a center on a boundary into the higher cell; 1.0 folds into the last cell
    return min(int(math.floor(coord * grid)), grid - 1)


def assign_targets(
    boxes,
    scales: Sequence[int] | None = None,
    anchors: Sequence[Sequence[tuple[float, float]]] | None = None,
    input_size: int = DEFAULT_INPUT_SIZE,
) -> TargetGrid:
    """Assign each box to the cell holding its center at every scale.

    ``boxes`` are :class:`~magiceye.dataset.GroundTruthBox`-like objects
    normalized to the square network input. Within the cell the anchor
    with the best shape IoU is used (lowest index on ties). A later box
    landing on the same (cell, anchor) overwrites the earlier one.
    """
    scales = tuple(scales) if scales is not None else default_grid_sizes(input_size)
    anchors = tuple(tuple(a) for a in anchors) if anchors is not None else default_anchors(input_size)
    grid = TargetGrid(scales, anchors, input_size)
    for box in boxes:
        cx, cy = (box.x_min + box.x_max) / 2.0, (box.y_min + box.y_max) / 2.0
        w, h = box.x_max - box.x_min, box.y_max - box.y_min
        for s, g in enumerate(scales):
            scores = [shape_iou(w * input_size, h * input_size, aw, ah) for aw, ah in anchors[s]]
            a = int(np.argmax(scores))
            col, row = cell_index(cx, g), cell_index(cy, g)
            grid.cells[s][(row, col, a)] = TargetAssignment(box.class_index, cx * g - col, cy * g - row, w, h)
    return grid


# ---------------------------------------------------------------------------
# Detection JSON
# ---------------------------------------------------------------------------


def format_detections_json(records: Sequence[tuple[str, Detection]], class_names: Sequence[str] | None = None) -> str:
    """Serialize ``(image_id, detection)`` pairs with fixed 4-decimal numbers, one object per line."""
    lines = []
    for image_id, d in records:
        label = class_names[d.class_index] if class_names is not None else str(d.class_index)
        box = ", ".join(f"{c:.4f}" for c in d.box)
        lines.append(
            f'  {{"image_id": {json.dumps(image_id)}, "class_index": {d.class_index}, '
            f'"label": {json.dumps(label)}, "confidence": {d.confidence:.4f}, "box": [{box}]}}'
        )
    if not lines:
        return "[]\n"
    return "[\n" + ",\n".join(lines) + "\n]\n"


def parse_detections_json(text: str) -> list[tuple[str, Detection]]:
    try:
        data = json.loads(text)
        return [
            (str(r["image_id"]), Detection(int(r["class_index"]), float(r["confidence"]), tuple(float(c) for c in r["box"])))
            for r in data
        ]
    except (json.JSONDecodeError, KeyError, TypeError) as exc:
        raise ValidationError(f"malformed detection JSON: {exc}") from None
