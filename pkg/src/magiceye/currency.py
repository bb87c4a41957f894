"""Banknote denomination classification behind a pluggable backend, and its evaluation."""

from __future__ import annotations

import csv
import json
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Protocol, Sequence

import numpy as np

from .errors import BackendError, BackendUnavailable, ValidationError

DEFAULT_DENOMINATIONS = ("10", "20", "50", "100", "200", "500", "2000")
OUTCOME_HEADER = ("image_id", "truth", "predicted", "confidence")

# Currency column of the published results table. Documentation only.
REFERENCE_CURRENCY_METRICS = {"accuracy": 0.9975, "f1": 0.9986, "recall": 1.0, "precision": 0.9972}


@dataclass(frozen=True)
class DenominationSet:
    labels: tuple[str, ...] = DEFAULT_DENOMINATIONS

    def __post_init__(self) -> None:
        if not self.labels:
            raise ValidationError("denomination set is empty")
        if len(set(self.labels)) != len(self.labels):
            raise ValidationError("denomination labels must be unique")

    def __contains__(self, label: object) -> bool:
        return label in self.labels


@dataclass(frozen=True)
class ClassificationOutcome:
    predicted: str
    confidence: float
    truth: str | None = None
    image_id: str | None = None

    def __post_init__(self) -> None:
        if not 0.0 <= self.confidence <= 1.0:
            raise ValidationError(f"confidence range: {self.confidence} outside [0, 1]")


class CurrencyBackend(Protocol):
    def predict(self, image_ref: str) -> tuple[str, float]: ...


@dataclass
class ScriptedCurrencyBackend:
    script: dict[str, tuple[str, float]] = field(default_factory=dict)

    def predict(self, image_ref: str) -> tuple[str, float]:
        try:
            return self.script[image_ref]
        except KeyError:
            raise BackendError(f"no scripted currency output for {image_ref!r}") from None


def classify(image_ref: str, backend: CurrencyBackend | None, denominations: DenominationSet = DenominationSet()) -> ClassificationOutcome:
    if backend is None:
        raise BackendUnavailable("no currency backend configured")
    label, confidence = backend.predict(image_ref)
    if label not in denominations:
        raise BackendError(f"unknown denomination {label!r}")
    if not 0.0 <= confidence <= 1.0:
        raise BackendError(f"confidence range: {confidence} outside [0, 1]")
    return ClassificationOutcome(label, float(confidence), None, image_ref)


def f1_score(p: float, r: float) -> float:
    return 0.0 if p + r == 0 else 2 * p * r / (p + r)


@dataclass(frozen=True)
class ClassMetrics:
    precision: float
    recall: float
    f1: float
    tp: int
    fp: int
    fn: int


@dataclass
class ClassifierReport:
    accuracy: float
    per_class: dict[str, ClassMetrics]
    macro_f1: float
    labels: list[str]
    confusion: np.ndarray  # rows truth, columns predicted, in ``labels`` order

    def to_dict(self) -> dict:
        return {
            "accuracy": self.accuracy,
            "macro_f1": self.macro_f1,
            "labels": self.labels,
            "per_class": {
                k: {"precision": m.precision, "recall": m.recall, "f1": m.f1, "tp": m.tp, "fp": m.fp, "fn": m.fn}
                for k, m in self.per_class.items()
            },
            "confusion": self.confusion.tolist(),
        }

    def write_json(self, path: str | Path) -> None:
        with Path(path).open("w", encoding="utf-8") as fh:
            json.dump(self.to_dict(), fh, indent=2, sort_keys=True)
            fh.write("\n")


def evaluate_classifier(outcomes: Sequence[ClassificationOutcome], labels: Sequence[str] | None = None) -> ClassifierReport:
    """Accuracy plus one-vs-rest precision/recall/F1 per class.

    Per-class precision and recall use the same vacuous convention as
    detection metrics (1.0 on a zero denominator). ``labels`` fixes the
    class order; otherwise the sorted union of truths and predictions is used.
    """
    if not outcomes:
        raise ValidationError("no outcomes to evaluate")
    if any(o.truth is None for o in outcomes):
        raise ValidationError("every outcome needs a truth label")
    seen = sorted({o.truth for o in outcomes} | {o.predicted for o in outcomes})  # type: ignore[type-var]
    if labels is None:
        labels = seen
    else:
        labels = list(labels)
        unknown = set(seen) - set(labels)
        if unknown:
            raise ValidationError(f"labels outside the denomination set: {sorted(unknown)}")
    index = {k: i for i, k in enumerate(labels)}
    confusion = np.zeros((len(labels), len(labels)), dtype=np.int64)
    for o in outcomes:
        confusion[index[o.truth], index[o.predicted]] += 1  # type: ignore[index]

    pairs = Counter((o.truth, o.predicted) for o in outcomes)
    per_class = {}
    for k in labels:
        tp = pairs[(k, k)]
        fp = sum(n for (t, p), n in pairs.items() if p == k and t != k)
        fn = sum(n for (t, p), n in pairs.items() if t == k and p != k)
        p = 1.0 if tp + fp == 0 else tp / (tp + fp)
        r = 1.0 if tp + fn == 0 else tp / (tp + fn)
        per_class[k] = ClassMetrics(p, r, f1_score(p, r), tp, fp, fn)
    accuracy = sum(pairs[(k, k)] for k in labels) / len(outcomes)
    macro = sum(m.f1 for m in per_class.values()) / len(per_class)
    return ClassifierReport(accuracy, per_class, macro, list(labels), confusion)


def load_outcomes(path: str | Path) -> list[ClassificationOutcome]:
    path = Path(path)
    out = []
    with path.open(encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or tuple(h.strip() for h in header) != OUTCOME_HEADER:
            raise ValidationError(f"{path}:1: expected header {','.join(OUTCOME_HEADER)}")
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != 4:
                raise ValidationError(f"{path}:{lineno}: expected 4 columns")
            try:
                conf = float(row[3])
            except ValueError:
                raise ValidationError(f"{path}:{lineno}: bad confidence {row[3]!r}") from None
            try:
                out.append(ClassificationOutcome(row[2], conf, row[1], row[0]))
            except ValidationError as exc:
                raise ValidationError(f"{path}:{lineno}: {exc}") from None
    return out


def write_outcomes(outcomes: Sequence[ClassificationOutcome], path: str | Path) -> None:
    with Path(path).open("w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(OUTCOME_HEADER)
        for o in outcomes:
            writer.writerow([o.image_id or "", o.truth or "", o.predicted, repr(o.confidence)])
