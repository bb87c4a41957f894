"""Build orchestrator perception handles from a scripted JSON scenario.

Example::

    {
      "branches": {"Human face": "face", "Banknote": "currency"},
      "detections": {"img_001": [{"label": "Chair", "confidence": 0.91, "box": [40, 200, 260, 470]}]},
      "faces": {
        "backends": {"facenet": 4, "vggface": 3},
        "threshold": 0.5,
        "enrolled": {"alice": {"facenet": [[1, 0, 0, 0]], "vggface": [[0, 1, 0]]}},
        "crops": {"img_002": [[100, 80, 180, 170]]},
        "probes": {"facenet": {"img_002": [0.9, 0.1, 0, 0]}, "vggface": {"img_002": [0, 1, 0.1]}}
      },
      "currency": {"denominations": ["10", "100"], "outputs": {"img_002": ["100", 0.97]}}
    }
"""

from __future__ import annotations

import json
from pathlib import Path
from typing import Mapping, Sequence

from .currency import DEFAULT_DENOMINATIONS, DenominationSet, ScriptedCurrencyBackend
from .dataset import ClassMap
from .detect import Detection
from .errors import ValidationError
from .face import FaceCrop, FaceRegistry, ScriptedEmbedder, ScriptedFaceDetector
from .orchestrator import CurrencyBranch, FaceBranch, Perception

BRANCH_KINDS = ("face", "currency")


class ScriptedDetector:
    def __init__(self, script: Mapping[str, Sequence[Detection]]) -> None:
        self.script = {k: list(v) for k, v in script.items()}

    def __call__(self, image_ref: str) -> list[Detection]:
        return list(self.script.get(image_ref, []))


def perception_from_dict(data: Mapping, class_map: ClassMap) -> Perception:
    try:
        branches = dict(data.get("branches", {}))
        for label, kind in branches.items():
            if label not in class_map:
                raise ValidationError(f"branch label {label!r} not in class map")
            if kind not in BRANCH_KINDS:
                raise ValidationError(f"branch kind {kind!r} must be one of {BRANCH_KINDS}")

        script = {
            ref: [Detection(class_map.index_of(d["label"]), float(d["confidence"]), tuple(float(c) for c in d["box"])) for d in dets]
            for ref, dets in data.get("detections", {}).items()
        }

        face = None
        if "faces" in data:
            f = data["faces"]
            dims = {str(b): int(d) for b, d in f["backends"].items()}
            registry = FaceRegistry(dims, clock=lambda: 0.0)
            for person, embs in f.get("enrolled", {}).items():
                registry.enroll(person, embs)
            crops = {ref: [FaceCrop(tuple(float(c) for c in box)) for box in boxes] for ref, boxes in f.get("crops", {}).items()}
            probes = f.get("probes", {})
            embedders = [ScriptedEmbedder(b, d, dict(probes.get(b, {}))) for b, d in dims.items()]
            face = FaceBranch(ScriptedFaceDetector(crops), embedders, registry, float(f.get("threshold", 0.5)))

        currency = None
        if "currency" in data:
            c = data["currency"]
            outputs = {ref: (str(v[0]), float(v[1])) for ref, v in c.get("outputs", {}).items()}
            denoms = DenominationSet(tuple(c.get("denominations", DEFAULT_DENOMINATIONS)))
            currency = CurrencyBranch(ScriptedCurrencyBackend(outputs), denoms)
    except (KeyError, TypeError, IndexError) as exc:
        raise ValidationError(f"malformed scenario: {exc!r}") from None

    return Perception(ScriptedDetector(script), class_map.names, branches, face, currency)


def load_perception(path: str | Path, class_map: ClassMap) -> Perception:
    with Path(path).open(encoding="utf-8") as fh:
        try:
            data = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ValidationError(f"{path}: {exc}") from None
    return perception_from_dict(data, class_map)
