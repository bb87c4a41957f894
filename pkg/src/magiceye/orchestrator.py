"""Wearable runtime: device events in, prioritized feedback text out.

Transition table (any pair not listed is a logged no-op):

=============  ==================  =========================================
mode           event               effect
=============  ==================  =========================================
Idle/Nav       ButtonPress         -> Capturing
Capturing      FrameCaptured       run perception, emit Descriptions,
                                   -> Navigating if a route is active else Idle
any            ProximityAlert < t  emit Alert now, -> Capturing
any (route)    GpsFix              navigation update, may emit Navigation
=============  ==================  =========================================
"""

from __future__ import annotations

import enum
import logging
import queue
import threading
from dataclasses import dataclass, field, replace
from typing import Callable, Iterable, Sequence

from .currency import CurrencyBackend, DenominationSet, classify
from .detect import Detection
from .errors import BackendError, BackendUnavailable, ValidationError
from .face import EmbeddingBackend, FaceDetectorBackend, FaceRegistry, detect_faces, embed_probe
from .navigation import NavigationState, Route, haversine_m, initial_bearing, navigate_step

log = logging.getLogger(__name__)

DEFAULT_PROXIMITY_M = 1.5
DEFAULT_QUEUE_CAPACITY = 32


class Priority(enum.IntEnum):
    Description = 0
    Navigation = 1
    Alert = 2


class Mode(enum.Enum):
    Idle = "Idle"
    Capturing = "Capturing"
    Describing = "Describing"
    Navigating = "Navigating"


@dataclass(frozen=True)
class FeedbackMessage:
    priority: Priority
    text: str
    created_at: int

    def __post_init__(self) -> None:
        if not self.text:
            raise ValidationError("feedback text must be non-empty")

    def log_line(self) -> str:
        return f'{self.created_at} {self.priority.name} "{self.text}"'


def alert_text(distance_m: float) -> str:
    return f"Obstacle within {distance_m:.1f} meters"


def description_text(label: str, confidence: float) -> str:
    return f"{label} ahead, confidence {confidence:.0%}"


class FeedbackQueue:
    """Bounded priority queue of feedback messages.

    On overflow the lowest-priority, oldest message is dropped. Alerts are
    never dropped: a queue holding only Alerts may exceed its capacity.
    """

    def __init__(self, capacity: int = DEFAULT_QUEUE_CAPACITY) -> None:
        if capacity < 1:
            raise ValidationError("queue capacity must be at least 1")
        self.capacity = capacity
        self._items: list[tuple[FeedbackMessage, int]] = []
        self._seq = 0
        self.dropped: list[FeedbackMessage] = []

    def __len__(self) -> int:
        return len(self._items)

    def push(self, msg: FeedbackMessage) -> FeedbackMessage | None:
        self._items.append((msg, self._seq))
        self._seq += 1
        if len(self._items) <= self.capacity:
            return None
        victim = min(self._items, key=lambda it: (it[0].priority, it[0].created_at, it[1]))
        if victim[0].priority == Priority.Alert:
            return None
        self._items.remove(victim)
        self.dropped.append(victim[0])
        return victim[0]

    def peek(self) -> list[FeedbackMessage]:
        return [m for m, _ in sorted(self._items, key=lambda it: (-it[0].priority, it[0].created_at, it[1]))]

    def drain(self) -> list[FeedbackMessage]:
        out = self.peek()
        self._items.clear()
        return out


# ---------------------------------------------------------------------------
# Events
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class DeviceEvent:
    timestamp: int


@dataclass(frozen=True)
class ButtonPress(DeviceEvent):
    pass


@dataclass(frozen=True)
class ProximityAlert(DeviceEvent):
    distance: float = 0.0

    def __post_init__(self) -> None:
        if self.distance < 0:
            raise ValidationError("proximity distance must be non-negative")


@dataclass(frozen=True)
class GpsFix(DeviceEvent):
    lat: float = 0.0
    lon: float = 0.0


@dataclass(frozen=True)
class FrameCaptured(DeviceEvent):
    image_ref: str = ""


def parse_trace(text: str) -> list[DeviceEvent]:
    """Parse ``timestamp_ms KIND args...`` lines (BUTTON, FRAME ref, PROX m, GPS lat lon)."""
    events: list[DeviceEvent] = []
    last = None
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        parts = line.split()
        try:
            ts = int(parts[0])
            kind = parts[1].upper()
            args = parts[2:]
            if kind == "BUTTON" and not args:
                ev: DeviceEvent = ButtonPress(ts)
            elif kind == "FRAME" and len(args) == 1:
                ev = FrameCaptured(ts, args[0])
            elif kind == "PROX" and len(args) == 1:
                ev = ProximityAlert(ts, float(args[0]))
            elif kind == "GPS" and len(args) == 2:
                ev = GpsFix(ts, float(args[0]), float(args[1]))
            else:
                raise ValidationError(f"unknown event {kind!r} with {len(args)} argument(s)")
        except (IndexError, ValueError) as exc:
            raise ValidationError(f"trace line {lineno}: {exc}") from None
        if last is not None and ts < last:
            raise ValidationError(f"trace line {lineno}: timestamp {ts} goes backwards")
        last = ts
        events.append(ev)
    return events


# ---------------------------------------------------------------------------
# Perception handles
# ---------------------------------------------------------------------------


@dataclass
class FaceBranch:
    detector: FaceDetectorBackend
    embedders: Sequence[EmbeddingBackend]
    registry: FaceRegistry
    threshold: float = 0.5

    def describe(self, image_ref: str, det: Detection) -> str:
        crops = detect_faces(image_ref, self.detector)
        x0, y0, x1, y1 = det.box
        box = det.box
        for crop in crops:
            cx, cy = (crop.box[0] + crop.box[2]) / 2, (crop.box[1] + crop.box[3]) / 2
            if x0 <= cx <= x1 and y0 <= cy <= y1:
                box = crop.box
                break
        result = self.registry.identify(embed_probe(image_ref, box, self.embedders), self.threshold)
        if result.matched:
            return description_text(result.person_id, max(result.fused_score, 0.0))  # type: ignore[arg-type]
        return description_text("Unknown person", det.confidence)


@dataclass
class CurrencyBranch:
    backend: CurrencyBackend
    denominations: DenominationSet = field(default_factory=DenominationSet)

    def describe(self, image_ref: str, det: Detection) -> str:
        outcome = classify(image_ref, self.backend, self.denominations)
        return description_text(f"{outcome.predicted} note", outcome.confidence)


@dataclass
class Perception:
    """Synchronous pipeline handles; ``branches`` maps a class label to "face" or "currency"."""

    detector: Callable[[str], list[Detection]]
    class_names: Sequence[str]
    branches: dict[str, str] = field(default_factory=dict)
    face: FaceBranch | None = None
    currency: CurrencyBranch | None = None


@dataclass(frozen=True)
class OrchestratorConfig:
    proximity_threshold: float = DEFAULT_PROXIMITY_M
    queue_capacity: int = DEFAULT_QUEUE_CAPACITY

    def __post_init__(self) -> None:
        if self.proximity_threshold < 0:
            raise ValidationError("proximity threshold must be non-negative")


@dataclass
class PipelineState:
    mode: Mode = Mode.Idle
    nav: NavigationState | None = None
    queue: FeedbackQueue = field(default_factory=FeedbackQueue)
    last_timestamp: int | None = None
    last_fix: tuple[float, float] | None = None

    @property
    def active_route(self) -> Route | None:
        return self.nav.route if self.nav is not None else None


def start_route(state: PipelineState, route: Route) -> PipelineState:
    mode = Mode.Navigating if state.mode in (Mode.Idle, Mode.Navigating) else state.mode
    return replace(state, nav=NavigationState(route), mode=mode)


def _resting_mode(state: PipelineState) -> Mode:
    return Mode.Navigating if state.nav is not None else Mode.Idle


def describe_frame(image_ref: str, perception: Perception) -> list[str]:
    detections = sorted(perception.detector(image_ref), key=lambda d: (-d.confidence, d.class_index))
    texts = []
    for det in detections:
        label = perception.class_names[det.class_index]
        branch = perception.branches.get(label)
        try:
            if branch == "face" and perception.face is not None:
                texts.append(perception.face.describe(image_ref, det))
                continue
            if branch == "currency" and perception.currency is not None:
                texts.append(perception.currency.describe(image_ref, det))
                continue
        except (BackendError, BackendUnavailable, ValidationError) as exc:
            log.warning("%s branch failed on %s: %s", branch, image_ref, exc)
        texts.append(description_text(label, det.confidence))
    return texts


def handle_event(
    state: PipelineState,
    event: DeviceEvent,
    perception: Perception,
    config: OrchestratorConfig = OrchestratorConfig(),
) -> tuple[PipelineState, list[FeedbackMessage]]:
    """Apply one event. Emitted messages are also pushed onto ``state.queue``."""
    if state.last_timestamp is not None and event.timestamp < state.last_timestamp:
        raise ValidationError(f"event at {event.timestamp} ms precedes {state.last_timestamp} ms")
    state = replace(state, last_timestamp=event.timestamp)
    ts = event.timestamp
    emitted: list[FeedbackMessage] = []

    if isinstance(event, ProximityAlert):
        if event.distance < config.proximity_threshold:
            emitted.append(FeedbackMessage(Priority.Alert, alert_text(event.distance), ts))
            state = replace(state, mode=Mode.Capturing)
        else:
            log.debug("proximity %.2f m beyond threshold, ignored", event.distance)

    elif isinstance(event, ButtonPress):
        if state.mode in (Mode.Idle, Mode.Navigating):
            state = replace(state, mode=Mode.Capturing)
        else:
            log.info("button press while %s, ignored", state.mode.value)

    elif isinstance(event, FrameCaptured):
        if state.mode is Mode.Capturing:
            state = replace(state, mode=Mode.Describing)
            for text in describe_frame(event.image_ref, perception):
                emitted.append(FeedbackMessage(Priority.Description, text, ts))
            state = replace(state, mode=_resting_mode(state))
        else:
            log.info("spurious frame %s while %s, ignored", event.image_ref, state.mode.value)

    elif isinstance(event, GpsFix):
        fix = (event.lat, event.lon)
        if state.nav is not None:
            heading = None
            if state.last_fix is not None and haversine_m(*state.last_fix, *fix) > 0.5:
                heading = initial_bearing(*state.last_fix, *fix)
            nav, instruction = navigate_step(state.nav, fix, heading)
            if instruction is not None:
                emitted.append(FeedbackMessage(Priority.Navigation, instruction.text, ts))
            if nav.finished:
                mode = Mode.Idle if state.mode is Mode.Navigating else state.mode
                state = replace(state, nav=None, mode=mode)
            else:
                state = replace(state, nav=nav)
        else:
            log.debug("GPS fix without an active route, ignored")
        state = replace(state, last_fix=fix)

    else:
        log.info("unhandled event type %s, ignored", type(event).__name__)

    for msg in emitted:
        state.queue.push(msg)
    return state, emitted


class Orchestrator:
    """Single-threaded event loop owning the pipeline state."""

    def __init__(
        self,
        perception: Perception,
        config: OrchestratorConfig = OrchestratorConfig(),
        route: Route | None = None,
    ) -> None:
        self.perception = perception
        self.config = config
        self.state = PipelineState(queue=FeedbackQueue(config.queue_capacity))
        if route is not None:
            self.state = start_route(self.state, route)

    def process(self, event: DeviceEvent) -> list[FeedbackMessage]:
        self.state, emitted = handle_event(self.state, event, self.perception, self.config)
        return emitted

    def drain(self) -> list[FeedbackMessage]:
        return drain_feedback(self.state)

    def replay(self, events: Iterable[DeviceEvent], drain_after: Callable[[DeviceEvent], bool] | None = None) -> list[FeedbackMessage]:
        """Process ``events`` in order, draining after each one (or when ``drain_after`` says so)."""
        out: list[FeedbackMessage] = []
        for ev in events:
            self.process(ev)
            if drain_after is None or drain_after(ev):
                out.extend(self.drain())
        out.extend(self.drain())
        return out

    def replay_threaded(self, events: Iterable[DeviceEvent], channel_size: int = 16) -> list[FeedbackMessage]:
        """Same as :meth:`replay`, with a producer thread feeding a bounded channel."""
        channel: queue.Queue = queue.Queue(maxsize=channel_size)
        done = object()

        def produce() -> None:
            for ev in events:
                channel.put(ev)
            channel.put(done)

        producer = threading.Thread(target=produce, daemon=True)
        producer.start()
        out: list[FeedbackMessage] = []
        while (ev := channel.get()) is not done:
            self.process(ev)
            out.extend(self.drain())
        producer.join()
        return out


def drain_feedback(state: PipelineState) -> list[FeedbackMessage]:
    return state.queue.drain()


def format_feedback_log(messages: Iterable[FeedbackMessage]) -> str:
    return "".join(m.log_line() + "\n" for m in messages)
