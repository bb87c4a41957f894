"""Detection manifests: class maps, Open-Images-style box CSVs, size sidecars, splits."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import ManifestError, ValidationError

MANIFEST_HEADER = ("ImageID", "LabelName", "XMin", "XMax", "YMin", "YMax")
SIZES_HEADER = ("ImageID", "Width", "Height")
MAGICEYE_NUM_CLASSES = 35


@dataclass(frozen=True)
class ClassMap:
    entries: tuple[tuple[int, str], ...]

    def __post_init__(self) -> None:
        names = [name for _, name in self.entries]
        if [idx for idx, _ in self.entries] != list(range(len(self.entries))):
            raise ValidationError("class indices must be contiguous from 0")
        if len(set(names)) != len(names):
            raise ValidationError("class label names must be unique")
        if any(not name for name in names):
            raise ValidationError("class label names must be non-empty")
        object.__setattr__(self, "_by_name", {name: idx for idx, name in self.entries})

    @classmethod
    def from_names(cls, names: Iterable[str]) -> ClassMap:
        return cls(tuple(enumerate(names)))

    @property
    def size(self) -> int:
        return len(self.entries)

    @property
    def names(self) -> list[str]:
        return [name for _, name in self.entries]

    def index_of(self, name: str) -> int:
        try:
            return self._by_name[name]  # type: ignore[attr-defined]
        except KeyError:
            raise ValidationError(f"unknown label {name!r}") from None

    def name_of(self, index: int) -> str:
        if not 0 <= index < len(self.entries):
            raise ValidationError(f"class index {index} out of range")
        return self.entries[index][1]

    def __contains__(self, name: object) -> bool:
        return name in self._by_name  # type: ignore[attr-defined]

    def __len__(self) -> int:
        return len(self.entries)


@dataclass(frozen=True)
class GroundTruthBox:
    """One annotated object, coordinates normalized to the image size."""

    class_index: int
    x_min: float
    y_min: float
    x_max: float
    y_max: float

    def __post_init__(self) -> None:
        coords = (self.x_min, self.y_min, self.x_max, self.y_max)
        if not all(math.isfinite(c) for c in coords):
            raise ValidationError("box coordinates must be finite")
        if self.x_min >= self.x_max or self.y_min >= self.y_max:
            raise ValidationError("inverted coordinates")
        if not all(0.0 <= c <= 1.0 for c in coords):
            raise ValidationError("coordinates out of range [0, 1]")
        if self.class_index < 0:
            raise ValidationError("negative class index")

    @property
    def box(self) -> tuple[float, float, float, float]:
        return (self.x_min, self.y_min, self.x_max, self.y_max)

    @property
    def center(self) -> tuple[float, float]:
        return ((self.x_min + self.x_max) / 2.0, (self.y_min + self.y_max) / 2.0)

    def to_pixels(self, width: float, height: float) -> tuple[float, float, float, float]:
        return (self.x_min * width, self.y_min * height, self.x_max * width, self.y_max * height)


@dataclass(frozen=True)
class Sample:
    image_id: str
    width: int | None = None
    height: int | None = None
    boxes: tuple[GroundTruthBox, ...] = ()

    def __post_init__(self) -> None:
        if not self.image_id:
            raise ValidationError("empty image id")
        for dim in (self.width, self.height):
            if dim is not None and dim <= 0:
                raise ValidationError(f"image {self.image_id!r}: dimensions must be positive")


@dataclass(frozen=True)
class DatasetManifest:
    samples: tuple[Sample, ...] = field(default_factory=tuple)

    def __post_init__(self) -> None:
        ids = [s.image_id for s in self.samples]
        if len(set(ids)) != len(ids):
            raise ValidationError("duplicate image ids in manifest")

    def __len__(self) -> int:
        return len(self.samples)

    def __iter__(self):
        return iter(self.samples)

    @property
    def image_ids(self) -> list[str]:
        return [s.image_id for s in self.samples]

    def by_id(self) -> dict[str, Sample]:
        return {s.image_id: s for s in self.samples}

    def class_counts(self, num_classes: int) -> list[int]:
        counts = [0] * num_classes
        for sample in self.samples:
            for box in sample.boxes:
                counts[box.class_index] += 1
        return counts


@dataclass(frozen=True)
class SplitSpec:
    train_fraction: float
    val_fraction: float
    test_fraction: float
    seed: int = 0

    def __post_init__(self) -> None:
        fractions = self.fractions
        if any(not 0.0 <= f <= 1.0 for f in fractions):
            raise ValidationError("split fractions must lie in [0, 1]")
        if abs(sum(fractions) - 1.0) > 1e-9:
            raise ValidationError("split fractions must sum to 1")

    @property
    def fractions(self) -> tuple[float, float, float]:
        return (self.train_fraction, self.val_fraction, self.test_fraction)


# ---------------------------------------------------------------------------
# Class map
# ---------------------------------------------------------------------------


def load_class_map(path: str | Path) -> ClassMap:
    """Read ``index,label_name`` lines; blank lines and ``#`` comments are skipped."""
    path = Path(path)
    entries: list[tuple[int, str]] = []
    with path.open(encoding="utf-8", newline="") as fh:
        for lineno, row in enumerate(csv.reader(fh), start=1):
            if not row or not "".join(row).strip() or row[0].lstrip().startswith("#"):
                continue
            if len(row) != 2:
                raise ManifestError("expected 'index,label_name'", str(path), lineno)
            try:
                idx = int(row[0])
            except ValueError:
                raise ManifestError(f"bad class index {row[0]!r}", str(path), lineno) from None
            if idx != len(entries):
                raise ManifestError(f"class index {idx} out of order, expected {len(entries)}", str(path), lineno)
            entries.append((idx, row[1].strip()))
    try:
        return ClassMap(tuple(entries))
    except ValidationError as exc:
        raise ManifestError(str(exc), str(path)) from None


def write_class_map(class_map: ClassMap, path: str | Path) -> None:
    with Path(path).open("w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        for idx, name in class_map.entries:
            writer.writerow([idx, name])


# ---------------------------------------------------------------------------
# Manifest CSV + size sidecar
# ---------------------------------------------------------------------------


def default_sizes_path(manifest_path: str | Path) -> Path:
    p = Path(manifest_path)
    return p.with_name(f"{p.stem}_sizes.csv")


def load_sizes(path: str | Path) -> dict[str, tuple[int, int]]:
    path = Path(path)
    sizes: dict[str, tuple[int, int]] = {}
    with path.open(encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or tuple(h.strip() for h in header) != SIZES_HEADER:
            raise ManifestError(f"expected header {','.join(SIZES_HEADER)}", str(path), 1)
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != 3:
                raise ManifestError("expected 3 columns", str(path), lineno)
            image_id = row[0]
            try:
                w, h = int(row[1]), int(row[2])
            except ValueError:
                raise ManifestError("width/height must be integers", str(path), lineno) from None
            if w <= 0 or h <= 0:
                raise ManifestError("width/height must be positive", str(path), lineno)
            if image_id in sizes:
                raise ManifestError(f"duplicate image id {image_id!r}", str(path), lineno)
            sizes[image_id] = (w, h)
    return sizes


def load_manifest(
    path: str | Path,
    class_map: ClassMap,
    sizes: str | Path | dict[str, tuple[int, int]] | None = None,
) -> DatasetManifest:
    """Load a box-per-row manifest and attach image sizes.

    ``sizes`` may be a sidecar path, a preloaded mapping, or ``None``, in
    which case ``<stem>_sizes.csv`` next to the manifest is used if present.
    When sizes are known, sample order follows the sidecar, and images
    listed there without any box rows become empty samples.
    """
    path = Path(path)
    if sizes is None:
        candidate = default_sizes_path(path)
        size_map = load_sizes(candidate) if candidate.exists() else None
    elif isinstance(sizes, dict):
        size_map = sizes
    else:
        size_map = load_sizes(sizes)

    boxes: dict[str, list[GroundTruthBox]] = {}
    with path.open(encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or tuple(h.strip() for h in header) != MANIFEST_HEADER:
            raise ManifestError(f"expected header {','.join(MANIFEST_HEADER)}", str(path), 1)
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != 6:
                raise ManifestError(f"expected 6 columns, got {len(row)}", str(path), lineno)
            image_id, label = row[0], row[1]
            if not image_id:
                raise ManifestError("empty ImageID", str(path), lineno)
            if label not in class_map:
                raise ManifestError(f"unknown label {label!r}", str(path), lineno)
            try:
                x_min, x_max, y_min, y_max = (float(v) for v in row[2:])
            except ValueError:
                raise ManifestError("coordinates must be decimal numbers", str(path), lineno) from None
            try:
                box = GroundTruthBox(class_map.index_of(label), x_min, y_min, x_max, y_max)
            except ValidationError as exc:
                raise ManifestError(str(exc), str(path), lineno) from None
            boxes.setdefault(image_id, []).append(box)

    if size_map is None:
        samples = [Sample(i, None, None, tuple(b)) for i, b in boxes.items()]
    else:
        missing = [i for i in boxes if i not in size_map]
        if missing:
            raise ManifestError(f"no size recorded for image {missing[0]!r}", str(path))
        samples = [Sample(i, w, h, tuple(boxes.get(i, ()))) for i, (w, h) in size_map.items()]
    return DatasetManifest(tuple(samples))


def write_manifest(
    manifest: DatasetManifest,
    path: str | Path,
    class_map: ClassMap,
    sizes_path: str | Path | None = None,
) -> None:
    """Write boxes as CSV; sizes go to ``sizes_path`` (default sidecar name) when known."""
    path = Path(path)
    with path.open("w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(MANIFEST_HEADER)
        for sample in manifest:
            for b in sample.boxes:
                writer.writerow(
                    [sample.image_id, class_map.name_of(b.class_index), *(repr(float(c)) for c in (b.x_min, b.x_max, b.y_min, b.y_max))]
                )
    if all(s.width is not None for s in manifest):
        sizes_path = default_sizes_path(path) if sizes_path is None else Path(sizes_path)
        with sizes_path.open("w", encoding="utf-8", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(SIZES_HEADER)
            for sample in manifest:
                writer.writerow([sample.image_id, sample.width, sample.height])


# ---------------------------------------------------------------------------
# Splitting
# ---------------------------------------------------------------------------


def largest_remainder(total: int, fractions: Sequence[float]) -> list[int]:
    """Integer counts summing to ``total``, proportional to ``fractions``.

    Leftover units go to the largest fractional parts; ties favour the
    earlier bucket.
    """
    quotas = [total * f for f in fractions]
    counts = [math.floor(q) for q in quotas]
    leftover = total - sum(counts)
    order = sorted(range(len(fractions)), key=lambda i: (-(quotas[i] - counts[i]), i))
    for i in order[:leftover]:
        counts[i] += 1
    return counts


def split_dataset(
    manifest: DatasetManifest, spec: SplitSpec
) -> tuple[DatasetManifest, DatasetManifest, DatasetManifest]:
    if len(manifest) == 0:
        raise ValidationError("cannot split an empty manifest")
    n = len(manifest)
    n_train, n_val, _ = largest_remainder(n, spec.fractions)
    perm = np.random.default_rng(spec.seed).permutation(n)
    parts = (perm[:n_train], perm[n_train : n_train + n_val], perm[n_train + n_val :])
    # keep each part in original manifest order
    return tuple(  # type: ignore[return-value]
        DatasetManifest(tuple(manifest.samples[i] for i in sorted(part.tolist()))) for part in parts
    )
