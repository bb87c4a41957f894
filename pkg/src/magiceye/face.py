"""Face enrollment and identification with two embedding backends fused by cosine similarity.

Registry file format (UTF-8, append-only)::

    FACEREG v1|<dim of backend 1>|<dim of backend 2>
    <person_id>|<backend_id>|<base64 of little-endian float32 vector>
"""

from __future__ import annotations

import base64
import math
import threading
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Mapping, Protocol, Sequence

import numpy as np

from .errors import BackendError, BackendUnavailable, ValidationError
from .geometry import Box

DEFAULT_BACKENDS = ("facenet", "vggface")
DEFAULT_MATCH_THRESHOLD = 0.5
REGISTRY_MAGIC = "FACEREG v1"
MIN_NORM = 1e-9

# Facial recognition column of the published results table (LFW). Documentation only.
REFERENCE_FACE_METRICS = {"accuracy": 0.945, "f1": 0.9421, "recall": 0.8960, "precision": 0.9934}


def cosine_similarity(a, b) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 1:
        raise ValidationError(f"dimension mismatch: {a.shape} vs {b.shape}")
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na <= MIN_NORM or nb <= MIN_NORM:
        raise ValidationError("zero-norm vector")
    return float(np.clip(np.dot(a, b) / (na * nb), -1.0, 1.0))


@dataclass(frozen=True)
class Attributes:
    gender: str | None = None
    race: str | None = None
    age_bracket: str | None = None
    expression: str | None = None


@dataclass
class FaceRecord:
    person_id: str
    embeddings: dict[str, list[np.ndarray]]
    enrolled_at: float | None = None  # not persisted; None for records read from disk


@dataclass(frozen=True)
class MatchResult:
    person_id: str | None
    fused_score: float
    per_backend_scores: dict[str, float]
    attributes: Attributes | None = None

    @property
    def matched(self) -> bool:
        return self.person_id is not None


class FaceRegistry:
    """In-memory registry, optionally mirrored to an append-only file.

    One writer at a time (enrollment holds a lock); ``identify`` only reads.
    """

    def __init__(
        self,
        dims: Mapping[str, int],
        path: str | Path | None = None,
        clock: Callable[[], float] = time.time,
    ) -> None:
        if len(dims) != 2:
            raise ValidationError("a face registry fuses exactly two embedding backends")
        if any(d <= 0 for d in dims.values()):
            raise ValidationError("embedding dimensions must be positive")
        self.dims = dict(dims)
        self.backends = tuple(dims)
        self.path = Path(path) if path is not None else None
        self.records: dict[str, FaceRecord] = {}
        self._clock = clock
        self._lock = threading.Lock()

    def __len__(self) -> int:
        return len(self.records)

    def __contains__(self, person_id: object) -> bool:
        return person_id in self.records

    def _check_vector(self, backend: str, vec) -> np.ndarray:
        if backend not in self.dims:
            raise ValidationError(f"unknown backend {backend!r}")
        v = np.asarray(vec, dtype=np.float64)
        if v.shape != (self.dims[backend],):
            raise ValidationError(f"{backend} embedding must have dimension {self.dims[backend]}, got {v.shape}")
        if not np.all(np.isfinite(v)):
            raise ValidationError("embedding must be finite")
        if np.linalg.norm(v) <= MIN_NORM:
            raise ValidationError("zero-norm embedding")
        return v

    def enroll(self, person_id: str, embeddings: Mapping[str, Sequence]) -> FaceRecord:
        """Add embeddings for ``person_id``; re-enrolling appends to the existing record."""
        if not person_id or "|" in person_id or "\n" in person_id:
            raise ValidationError("person id must be non-empty and contain no '|' or newline")
        missing = [b for b in self.backends if not embeddings.get(b)]
        if missing:
            raise ValidationError(f"backend coverage: no embeddings for {', '.join(missing)}")
        extra = set(embeddings) - set(self.backends)
        if extra:
            raise ValidationError(f"unknown backend(s): {', '.join(sorted(extra))}")
        checked = {b: [self._check_vector(b, v) for v in embeddings[b]] for b in self.backends}
        with self._lock:
            if self.path is not None:
                self._append_lines(person_id, checked)
            record = self.records.get(person_id)
            if record is None:
                record = FaceRecord(person_id, {b: [] for b in self.backends}, self._clock())
                self.records[person_id] = record
            for b in self.backends:
                record.embeddings[b].extend(checked[b])
        return record

    def identify(
        self,
        probe: Mapping[str, Sequence[float]],
        threshold: float = DEFAULT_MATCH_THRESHOLD,
        attributes: Attributes | None = None,
    ) -> MatchResult:
        """Best enrolled person by the mean of per-backend best cosine scores.

        Ties go to the lexicographically smallest person id. Returns a
        no-match (``person_id=None``) when the registry is empty or the best
        fused score is below ``threshold``.
        """
        vectors = {}
        for b in self.backends:
            if b not in probe:
                raise ValidationError(f"probe lacks a {b} embedding")
            vectors[b] = self._check_vector(b, probe[b])
        if not self.records:
            return MatchResult(None, -1.0, {}, attributes)

        best: tuple[float, str, dict[str, float]] | None = None
        for pid in sorted(self.records):
            scores = {}
            for b in self.backends:
                stored = np.asarray(self.records[pid].embeddings[b])
                sims = stored @ vectors[b] / (np.linalg.norm(stored, axis=1) * np.linalg.norm(vectors[b]))
                scores[b] = float(np.clip(sims.max(), -1.0, 1.0))
            fused = sum(scores.values()) / len(scores)
            if best is None or fused > best[0]:
                best = (fused, pid, scores)
        fused, pid, scores = best  # type: ignore[misc]
        return MatchResult(pid if fused >= threshold else None, fused, scores, attributes)

    # -- persistence -------------------------------------------------------

    def header(self) -> str:
        return "|".join([REGISTRY_MAGIC, *(str(self.dims[b]) for b in self.backends)])

    def _append_lines(self, person_id: str, embeddings: Mapping[str, list[np.ndarray]]) -> None:
        assert self.path is not None
        new_file = not self.path.exists() or self.path.stat().st_size == 0
        with self.path.open("a", encoding="utf-8", newline="\n") as fh:
            if new_file:
                fh.write(self.header() + "\n")
            for b in self.backends:
                for v in embeddings[b]:
                    fh.write(f"{person_id}|{b}|{encode_vector(v)}\n")

    @classmethod
    def load(
        cls,
        path: str | Path,
        backends: Sequence[str] = DEFAULT_BACKENDS,
        clock: Callable[[], float] = time.time,
    ) -> FaceRegistry:
        """Open a registry file; later enrollments append to it."""
        path = Path(path)
        with path.open(encoding="utf-8") as fh:
            lines = fh.read().splitlines()
        if not lines:
            raise ValidationError(f"{path}: empty registry file")
        head = lines[0].split("|")
        if head[0] != REGISTRY_MAGIC or len(head) != 1 + len(backends):
            raise ValidationError(f"{path}:1: bad registry header {lines[0]!r}")
        try:
            dims = {b: int(d) for b, d in zip(backends, head[1:])}
        except ValueError:
            raise ValidationError(f"{path}:1: bad dimension in header") from None
        registry = cls(dims, None, clock)
        for lineno, line in enumerate(lines[1:], start=2):
            if not line:
                continue
            parts = line.split("|")
            if len(parts) != 3:
                raise ValidationError(f"{path}:{lineno}: expected person|backend|vector")
            pid, backend, payload = parts
            if backend not in dims:
                raise ValidationError(f"{path}:{lineno}: unknown backend {backend!r}")
            try:
                vec = registry._check_vector(backend, decode_vector(payload))
            except ValidationError as exc:
                raise ValidationError(f"{path}:{lineno}: {exc}") from None
            record = registry.records.setdefault(pid, FaceRecord(pid, {b: [] for b in backends}, None))
            record.embeddings[backend].append(vec)
        for pid, record in registry.records.items():
            if any(not record.embeddings[b] for b in backends):
                raise ValidationError(f"{path}: person {pid!r} lacks embeddings for some backend")
        registry.path = path
        return registry


def encode_vector(vec) -> str:
    return base64.b64encode(np.asarray(vec, dtype="<f4").tobytes()).decode("ascii")


def decode_vector(payload: str) -> np.ndarray:
    try:
        raw = base64.b64decode(payload, validate=True)
    except ValueError:
        raise ValidationError("embedding is not valid base64") from None
    if len(raw) % 4:
        raise ValidationError("embedding byte length is not a multiple of 4")
    return np.frombuffer(raw, dtype="<f4").astype(np.float64)


# ---------------------------------------------------------------------------
# Face detector stage
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class FaceCrop:
    box: Box
    confidence: float = 1.0
    landmarks: tuple[tuple[float, float], ...] = ()
    clipped: bool = False


class FaceDetectorBackend(Protocol):
    def detect(self, image_ref: str) -> list[FaceCrop]: ...


class EmbeddingBackend(Protocol):
    backend_id: str
    dim: int

    def embed(self, image_ref: str, box: Box) -> np.ndarray: ...


@dataclass
class ScriptedFaceDetector:
    """Returns pre-recorded crops per image, in recorded order."""

    script: dict[str, list[FaceCrop]] = field(default_factory=dict)

    def detect(self, image_ref: str) -> list[FaceCrop]:
        return list(self.script.get(image_ref, []))


@dataclass
class ScriptedEmbedder:
    """Embedding backend that returns recorded vectors, falling back to a
    deterministic pseudo-random vector derived from the image reference and box."""

    backend_id: str
    dim: int
    script: dict[str, list[float]] = field(default_factory=dict)

    def embed(self, image_ref: str, box: Box) -> np.ndarray:
        if image_ref in self.script:
            return np.asarray(self.script[image_ref], dtype=np.float64)
        seed = int.from_bytes(f"{self.backend_id}|{image_ref}|{tuple(round(c, 3) for c in box)}".encode(), "little") % (2**63)
        return np.random.default_rng(seed).standard_normal(self.dim)


def detect_faces(
    image_ref: str,
    backend: FaceDetectorBackend | None,
    image_size: tuple[float, float] | None = None,
) -> list[FaceCrop]:
    """Run the face detector; crops reaching outside the frame are clipped and flagged.

    Crops with no area left inside the frame are dropped.
    """
    if backend is None:
        raise BackendUnavailable("no face detector backend configured")
    crops = backend.detect(image_ref)
    if image_size is None:
        return list(crops)
    width, height = image_size
    out = []
    for crop in crops:
        x0, y0, x1, y1 = crop.box
        cx0, cy0 = min(max(x0, 0.0), width), min(max(y0, 0.0), height)
        cx1, cy1 = min(max(x1, 0.0), width), min(max(y1, 0.0), height)
        if not (cx0 < cx1 and cy0 < cy1):
            continue
        clipped = (cx0, cy0, cx1, cy1) != (x0, y0, x1, y1)
        out.append(FaceCrop((cx0, cy0, cx1, cy1), crop.confidence, crop.landmarks, crop.clipped or clipped))
    return out


def embed_probe(image_ref: str, box: Box, embedders: Sequence[EmbeddingBackend]) -> dict[str, np.ndarray]:
    probe = {}
    for e in embedders:
        v = np.asarray(e.embed(image_ref, box), dtype=np.float64)
        if v.shape != (e.dim,) or not np.all(np.isfinite(v)) or math.isclose(float(np.linalg.norm(v)), 0.0, abs_tol=MIN_NORM):
            raise BackendError(f"{e.backend_id} returned an invalid embedding")
        probe[e.backend_id] = v
    return probe
