"""Deterministic stand-ins for the detection network.

``encode_detections`` inverts the decode equations so that a known set of
boxes comes back out of :func:`magiceye.detect.decode_predictions`.
Raw fixtures are sparse JSON files listing the non-background slots::

    {"input_size": 640, "num_classes": 35, "background_logit": -20.0,
     "scales": [{"grid_w": 20, "grid_h": 20, "anchors": [[64, 64], ...],
                 "cells": [{"row": 3, "col": 4, "anchor": 0,
                            "values": [tx, ty, tw, th, t_obj, c0, ..., cN-1]}]}]}

Floats survive the JSON round trip exactly, so fixture-driven decode tests
are bit-reproducible.
"""

from __future__ import annotations

import json
import math
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from .dataset import DatasetManifest
from .detect import (
    DEFAULT_INPUT_SIZE,
    LOGIT_SIZE_CLAMP,
    RawGridOutput,
    cell_index,
    default_anchors,
    default_grid_sizes,
    shape_iou,
)
from .errors import ShapeError, ValidationError
from .geometry import LetterboxTransform, compute_letterbox

BACKGROUND_LOGIT = -20.0
# sigmoid(40) rounds to exactly 1.0, so decoded confidence == sigmoid(t_obj)
CLASS_ON_LOGIT = 40.0
CLASS_OFF_LOGIT = -40.0
_FRACTION_EPS = 1e-9


def _logit(p: float) -> float:
    return math.log(p) - math.log1p(-p)


def empty_grids(
    num_classes: int,
    grid_sizes: Sequence[int],
    anchors: Sequence[Sequence[tuple[float, float]]],
    background_logit: float = BACKGROUND_LOGIT,
) -> list[RawGridOutput]:
    out = []
    for g, anc in zip(grid_sizes, anchors):
        values = np.full((g, g, len(anc), 5 + num_classes), background_logit, dtype=np.float64)
        values[..., :4] = 0.0
        out.append(RawGridOutput(g, g, tuple(tuple(a) for a in anc), values))
    return out


def encode_detections(
    items: Iterable[tuple[int, Sequence[float], float]],
    transform: LetterboxTransform,
    num_classes: int,
    grid_sizes: Sequence[int] | None = None,
    anchors: Sequence[Sequence[tuple[float, float]]] | None = None,
) -> list[RawGridOutput]:
    """Build raw grid outputs that decode to ``items``.

    Each item is ``(class_index, (x_min, y_min, x_max, y_max) in image
    pixels, confidence)`` with confidence in (0, 1). A box is placed once,
    at the free (scale, anchor) slot with the best shape fit.
    """
    grid_sizes = tuple(grid_sizes) if grid_sizes is not None else default_grid_sizes(transform.input_size)
    anchors = anchors if anchors is not None else default_anchors(transform.input_size)
    grids = empty_grids(num_classes, grid_sizes, anchors)
    used: set[tuple[int, int, int, int]] = set()

    for class_index, box, confidence in items:
        if not 0 <= class_index < num_classes:
            raise ValidationError(f"class index {class_index} out of range")
        if not 0.0 < confidence < 1.0:
            raise ValidationError("mock confidence must lie strictly inside (0, 1)")
        x0, y0, x1, y1 = transform.box_to_network(box)
        cx, cy, w, h = (x0 + x1) / 2.0, (y0 + y1) / 2.0, x1 - x0, y1 - y0
        if w <= 0 or h <= 0:
            raise ValidationError(f"degenerate box {tuple(box)}")
        candidates = sorted(
            ((s, a) for s in range(len(grid_sizes)) for a in range(len(anchors[s]))),
            key=lambda sa: (-shape_iou(w, h, *anchors[sa[0]][sa[1]]), sa),
        )
        for s, a in candidates:
            g = grid_sizes[s]
            stride = transform.input_size / g
            col, row = cell_index(cx / transform.input_size, g), cell_index(cy / transform.input_size, g)
            aw, ah = anchors[s][a]
            tw, th = math.log(w / aw), math.log(h / ah)
            if (s, row, col, a) in used or abs(tw) > LOGIT_SIZE_CLAMP or abs(th) > LOGIT_SIZE_CLAMP:
                continue
            fx = min(max(cx / stride - col, _FRACTION_EPS), 1.0 - _FRACTION_EPS)
            fy = min(max(cy / stride - row, _FRACTION_EPS), 1.0 - _FRACTION_EPS)
            slot = grids[s].values[row, col, a]
            slot[:5] = (_logit(fx), _logit(fy), tw, th, _logit(confidence))
            slot[5:] = CLASS_OFF_LOGIT
            slot[5 + class_index] = CLASS_ON_LOGIT
            used.add((s, row, col, a))
            break
        else:
            raise ValidationError(f"no free anchor slot for box {tuple(box)}")
    return grids


class EchoBackend:
    """Mock network that re-emits a manifest's ground truth as raw grid outputs."""

    def __init__(
        self,
        manifest: DatasetManifest,
        num_classes: int,
        input_size: int = DEFAULT_INPUT_SIZE,
        confidence: float = 0.9,
    ) -> None:
        self.samples = manifest.by_id()
        self.num_classes = num_classes
        self.input_size = input_size
        self.confidence = confidence

    def transform_for(self, image_id: str) -> LetterboxTransform:
        s = self.samples[image_id]
        if s.width is None or s.height is None:
            raise ValidationError(f"image {image_id!r} has no recorded size")
        return compute_letterbox(s.width, s.height, self.input_size)

    def infer(self, image_id: str) -> list[RawGridOutput]:
        s = self.samples[image_id]
        transform = self.transform_for(image_id)
        items = [(b.class_index, b.to_pixels(s.width, s.height), self.confidence) for b in s.boxes]
        return encode_detections(items, transform, self.num_classes)


# ---------------------------------------------------------------------------
# Fixture files
# ---------------------------------------------------------------------------


def raw_to_fixture(raw: Sequence[RawGridOutput], input_size: int, background_logit: float = BACKGROUND_LOGIT) -> dict:
    num_classes = raw[0].num_classes if raw else 0
    scales = []
    for r in raw:
        background = np.zeros(5 + num_classes)
        background[4:] = background_logit
        cells = []
        for row, col, a in np.ndindex(r.grid_h, r.grid_w, len(r.anchors)):
            vals = r.values[row, col, a]
            if not np.array_equal(vals, background):
                cells.append({"row": row, "col": col, "anchor": a, "values": [float(x) for x in vals]})
        scales.append({"grid_w": r.grid_w, "grid_h": r.grid_h, "anchors": [list(a) for a in r.anchors], "cells": cells})
    return {"input_size": input_size, "num_classes": num_classes, "background_logit": background_logit, "scales": scales}


def fixture_to_raw(data: Mapping) -> tuple[list[RawGridOutput], int]:
    try:
        num_classes = int(data["num_classes"])
        background = float(data.get("background_logit", BACKGROUND_LOGIT))
        out = []
        for scale in data["scales"]:
            gw, gh = int(scale["grid_w"]), int(scale["grid_h"])
            anchors = tuple((float(a[0]), float(a[1])) for a in scale["anchors"])
            values = np.full((gh, gw, len(anchors), 5 + num_classes), background)
            values[..., :4] = 0.0
            for cell in scale["cells"]:
                vec = cell["values"]
                if len(vec) != 5 + num_classes:
                    raise ShapeError(f"cell value tuple has {len(vec)} entries, expected {5 + num_classes}")
                values[int(cell["row"]), int(cell["col"]), int(cell["anchor"])] = vec
            out.append(RawGridOutput(gw, gh, anchors, values))
        return out, int(data["input_size"])
    except (KeyError, TypeError, IndexError) as exc:
        raise ValidationError(f"malformed raw fixture: {exc!r}") from None


def load_raw_fixture(path: str | Path) -> tuple[list[RawGridOutput], int]:
    with Path(path).open(encoding="utf-8") as fh:
        return fixture_to_raw(json.load(fh))


def write_raw_fixture(raw: Sequence[RawGridOutput], input_size: int, path: str | Path) -> None:
    with Path(path).open("w", encoding="utf-8") as fh:
        json.dump(raw_to_fixture(raw, input_size), fh, indent=1)
        fh.write("\n")
