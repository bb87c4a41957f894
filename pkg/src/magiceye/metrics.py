"""Precision, recall, detection matching, average precision and confusion matrices.

Conventions:

* precision = TP / (TP + FP) and recall = TP / (TP + FN); both are 1.0 when
  their denominator is zero.
* AP integrates the all-points interpolated precision envelope over recall.
* Matching is greedy in descending confidence; each ground truth can be
  consumed once.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Protocol, Sequence

import numpy as np

from .errors import ValidationError
from .geometry import iou

DEFAULT_EVAL_IOU = 0.5

# Reported for the full network on 1,661 held-out samples; documentation only.
REFERENCE_MAP = 0.682


class LabeledBox(Protocol):
    class_index: int

    @property
    def box(self) -> tuple[float, float, float, float]: ...


@dataclass(frozen=True)
class PixelTruth:
    """Ground truth in the same (pixel) frame as detections."""

    class_index: int
    box: tuple[float, float, float, float]


def truths_in_pixels(boxes, width: float, height: float) -> list[PixelTruth]:
    return [PixelTruth(b.class_index, b.to_pixels(width, height)) for b in boxes]


@dataclass(frozen=True)
class MatchCounts:
    tp: int = 0
    fp: int = 0
    fn: int = 0
    tn: int | None = None  # undefined for box detection

    def __post_init__(self) -> None:
        if min(self.tp, self.fp, self.fn) < 0 or (self.tn is not None and self.tn < 0):
            raise ValidationError("match counts must be non-negative")

    def __add__(self, other: MatchCounts) -> MatchCounts:
        tn = None if self.tn is None or other.tn is None else self.tn + other.tn
        return MatchCounts(self.tp + other.tp, self.fp + other.fp, self.fn + other.fn, tn)


def precision(counts: MatchCounts) -> float:
    denom = counts.tp + counts.fp
    return 1.0 if denom == 0 else counts.tp / denom


def recall(counts: MatchCounts) -> float:
    denom = counts.tp + counts.fn
    return 1.0 if denom == 0 else counts.tp / denom


@dataclass
class MatchResult:
    """Outcome of matching one image's detections against its ground truth.

    ``order`` lists detection indices in the order they were matched
    (confidence desc, then input order); ``is_tp[k]`` refers to ``order[k]``.
    ``pairs`` maps detection index to matched truth index.
    """

    order: list[int]
    is_tp: list[bool]
    pairs: dict[int, int]
    unmatched_truths: list[int]

    @property
    def tp(self) -> int:
        return sum(self.is_tp)

    @property
    def fp(self) -> int:
        return len(self.is_tp) - self.tp

    @property
    def fn(self) -> int:
        return len(self.unmatched_truths)

    @property
    def counts(self) -> MatchCounts:
        return MatchCounts(self.tp, self.fp, self.fn)


def _confidence_order(detections: Sequence) -> list[int]:
    return sorted(range(len(detections)), key=lambda i: -detections[i].confidence)


def _greedy_match(detections, truth, iou_threshold: float, same_class: bool) -> MatchResult:
    if not 0.0 <= iou_threshold <= 1.0:
        raise ValidationError("IoU threshold out of range")
    order = _confidence_order(detections)
    taken = [False] * len(truth)
    pairs: dict[int, int] = {}
    flags: list[bool] = []
    for di in order:
        det = detections[di]
        best_iou, best_ti = -1.0, -1
        for ti, gt in enumerate(truth):
            if taken[ti] or (same_class and gt.class_index != det.class_index):
                continue
            overlap = iou(det.box, gt.box)
            if overlap > best_iou:
                best_iou, best_ti = overlap, ti
        hit = best_ti >= 0 and best_iou >= iou_threshold
        if hit:
            taken[best_ti] = True
            pairs[di] = best_ti
        flags.append(hit)
    return MatchResult(order, flags, pairs, [ti for ti, t in enumerate(taken) if not t])


def match_detections(detections: Sequence, truth: Sequence[LabeledBox], iou_threshold: float = DEFAULT_EVAL_IOU) -> MatchResult:
    """Same-class greedy matching. A detection is a TP iff its best-IoU
    unmatched same-class truth reaches ``iou_threshold`` (ties: lowest truth index)."""
    return _greedy_match(detections, truth, iou_threshold, same_class=True)


def average_precision(flags: Sequence[bool], total_truths: int) -> float | None:
    """All-points interpolated AP for flags already sorted by descending confidence.

    Returns ``None`` (undefined, class excluded) when there are no truths.
    """
    if total_truths < 0:
        raise ValidationError("negative truth count")
    if total_truths == 0:
        return None
    if len(flags) == 0:
        return 0.0
    tp = np.cumsum(np.asarray(flags, dtype=np.float64))
    fp = np.cumsum(1.0 - np.asarray(flags, dtype=np.float64))
    rec = tp / total_truths
    prec = tp / (tp + fp)
    mrec = np.concatenate([[0.0], rec, [1.0]])
    mpre = np.concatenate([[0.0], prec, [0.0]])
    mpre = np.maximum.accumulate(mpre[::-1])[::-1]
    steps = np.nonzero(mrec[1:] != mrec[:-1])[0]
    return float(np.sum((mrec[steps + 1] - mrec[steps]) * mpre[steps + 1]))


def mean_average_precision(per_class_ap: Mapping[object, float | None]) -> float:
    defined = [v for v in per_class_ap.values() if v is not None]
    if not defined:
        raise ValidationError("no class has a defined AP")
    return float(sum(defined) / len(defined))


def confusion_matrix(detections: Sequence, truth: Sequence[LabeledBox], num_classes: int, iou_threshold: float = DEFAULT_EVAL_IOU) -> np.ndarray:
    """``(num_classes + 1)`` square matrix, rows = truth class, columns = predicted class.

    Index ``num_classes`` is background. Matching here ignores class so that
    misclassifications land off the diagonal.
    """
    m = np.zeros((num_classes + 1, num_classes + 1), dtype=np.int64)
    result = _greedy_match(detections, truth, iou_threshold, same_class=False)
    bg = num_classes
    for di, det in enumerate(detections):
        if di in result.pairs:
            m[truth[result.pairs[di]].class_index, det.class_index] += 1
        else:
            m[bg, det.class_index] += 1
    for ti in result.unmatched_truths:
        m[truth[ti].class_index, bg] += 1
    return m


# ---------------------------------------------------------------------------
# Dataset-level report
# ---------------------------------------------------------------------------


@dataclass
class EvalReport:
    per_class_ap: dict[int, float | None]
    map_score: float
    precision: float
    recall: float
    confusion: np.ndarray
    counts: MatchCounts
    per_class_counts: dict[int, MatchCounts] = field(default_factory=dict)
    iou_threshold: float = DEFAULT_EVAL_IOU
    class_names: list[str] | None = None

    def to_dict(self) -> dict:
        def name(c: int) -> str:
            return self.class_names[c] if self.class_names else str(c)

        return {
            "iou_threshold": self.iou_threshold,
            "map": self.map_score,
            "precision": self.precision,
            "recall": self.recall,
            "counts": {"tp": self.counts.tp, "fp": self.counts.fp, "fn": self.counts.fn},
            "per_class": [
                {
                    "class_index": c,
                    "label": name(c),
                    "ap": ap,
                    "tp": self.per_class_counts[c].tp,
                    "fp": self.per_class_counts[c].fp,
                    "fn": self.per_class_counts[c].fn,
                }
                for c, ap in sorted(self.per_class_ap.items())
            ],
            "confusion": self.confusion.tolist(),
        }

    def write_json(self, path: str | Path) -> None:
        with Path(path).open("w", encoding="utf-8") as fh:
            json.dump(self.to_dict(), fh, indent=2, sort_keys=True)
            fh.write("\n")

    def write_confusion_csv(self, path: str | Path) -> None:
        n = self.confusion.shape[0] - 1
        labels = [self.class_names[c] if self.class_names else str(c) for c in range(n)] + ["background"]
        with Path(path).open("w", encoding="utf-8", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(["truth\\predicted", *labels])
            for label, row in zip(labels, self.confusion.tolist()):
                writer.writerow([label, *row])


def evaluate(
    images: Iterable[tuple[Sequence, Sequence[LabeledBox]]],
    num_classes: int,
    iou_threshold: float = DEFAULT_EVAL_IOU,
    class_names: list[str] | None = None,
) -> EvalReport:
    """Evaluate ``(detections, truths)`` pairs, one per image.

    Per-image matching, then each class's TP/FP flags are pooled across
    images and re-sorted by confidence (stable) before computing AP.
    """
    scored: dict[int, list[tuple[float, bool]]] = {c: [] for c in range(num_classes)}
    n_truth = [0] * num_classes
    per_class = {c: MatchCounts() for c in range(num_classes)}
    confusion = np.zeros((num_classes + 1, num_classes + 1), dtype=np.int64)
    for detections, truth in images:
        for gt in truth:
            n_truth[gt.class_index] += 1
        result = match_detections(detections, truth, iou_threshold)
        for di, hit in zip(result.order, result.is_tp):
            c = detections[di].class_index
            scored[c].append((detections[di].confidence, hit))
            per_class[c] = per_class[c] + MatchCounts(tp=int(hit), fp=int(not hit))
        for ti in result.unmatched_truths:
            c = truth[ti].class_index
            per_class[c] = per_class[c] + MatchCounts(fn=1)
        confusion += confusion_matrix(detections, truth, num_classes, iou_threshold)

    per_class_ap: dict[int, float | None] = {}
    for c in range(num_classes):
        flags = [hit for _, hit in sorted(scored[c], key=lambda t: -t[0])]
        per_class_ap[c] = average_precision(flags, n_truth[c])
    total = sum(per_class.values(), MatchCounts())
    return EvalReport(
        per_class_ap=per_class_ap,
        map_score=mean_average_precision(per_class_ap),
        precision=precision(total),
        recall=recall(total),
        confusion=confusion,
        counts=total,
        per_class_counts=per_class,
        iou_threshold=iou_threshold,
        class_names=class_names,
    )
