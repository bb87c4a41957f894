"""Synthetic fixtures: a 35-class vocabulary and a desk-scale detection manifest.

Run ``python -m magiceye.synthetic OUT_DIR`` to regenerate the files the
tests and README use.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

import numpy as np

from .dataset import ClassMap, DatasetManifest, GroundTruthBox, Sample, write_class_map, write_manifest

# Open Images boxable labels chosen for an indoor/outdoor assistive vocabulary.
# Placeholder list; the original selection was never published.
CLASS_NAMES = (
    "Person", "Human face", "Chair", "Table", "Couch", "Bed", "Door", "Window",
    "Stairs", "Car", "Bus", "Truck", "Bicycle", "Motorcycle", "Traffic light",
    "Traffic sign", "Bench", "Tree", "Street light", "Fire hydrant", "Dog", "Cat",
    "Bottle", "Mug", "Laptop", "Mobile phone", "Television", "Book", "Backpack",
    "Handbag", "Umbrella", "Toilet", "Sink", "Refrigerator", "Banknote",
)  # fmt: skip

IMAGE_SIZES = ((640, 480), (1280, 720), (416, 416), (800, 600), (480, 640), (1024, 768))


def magiceye_class_map() -> ClassMap:
    return ClassMap.from_names(CLASS_NAMES)


def make_manifest(n_samples: int = 132, num_classes: int = len(CLASS_NAMES), seed: int = 0) -> DatasetManifest:
    """Images with 1-3 boxes each; every class appears at least once when
    ``n_samples >= num_classes``. Boxes in one image sit in disjoint vertical
    bands, so no two boxes overlap."""
    rng = np.random.default_rng(seed)
    samples = []
    next_class = 0
    for i in range(n_samples):
        w, h = IMAGE_SIZES[i % len(IMAGE_SIZES)]
        n_boxes = int(rng.integers(1, 4))
        bands = [k / n_boxes for k in range(n_boxes + 1)]
        boxes = []
        for k in range(n_boxes):
            cls = next_class % num_classes if k == 0 else int(rng.integers(num_classes))
            if k == 0:
                next_class += 1
            lo, hi = bands[k], bands[k + 1]
            span = hi - lo
            bw = span * float(rng.uniform(0.4, 0.9))
            x0 = lo + float(rng.uniform(0.0, span - bw))
            bh = float(rng.uniform(0.1, 0.8))
            y0 = float(rng.uniform(0.0, 1.0 - bh))
            boxes.append(GroundTruthBox(cls, round(x0, 4), round(y0, 4), round(x0 + bw, 4), round(y0 + bh, 4)))
        samples.append(Sample(f"img{i:04d}", w, h, tuple(boxes)))
    return DatasetManifest(tuple(samples))


def main(argv: list[str] | None = None) -> int:
    ap = argparse.ArgumentParser(description="Write the synthetic class map and manifest.")
    ap.add_argument("out_dir", type=Path)
    ap.add_argument("--samples", type=int, default=132)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args(argv)
    args.out_dir.mkdir(parents=True, exist_ok=True)
    cmap = magiceye_class_map()
    manifest = make_manifest(args.samples, cmap.size, args.seed)
    write_class_map(cmap, args.out_dir / "class_map.txt")
    write_manifest(manifest, args.out_dir / "manifest.csv", cmap)
    counts = manifest.class_counts(cmap.size)
    print(f"{len(manifest)} samples, {sum(counts)} boxes, {sum(c > 0 for c in counts)} classes represented")
    return 0


if __name__ == "__main__":
    sys.exit(main())
