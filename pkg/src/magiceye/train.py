"""Optimizer updates, empirical risk, the three-part detection loss, and toy training.

Momentum follows the velocity form of ``w <- w - lr * grad + momentum * dw``::

    dw' = -lr * grad + momentum * dw
    w'  = w + dw'
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Protocol, Sequence

import numpy as np

from .detect import LOGIT_SIZE_CLAMP, RawGridOutput, TargetGrid, sigmoid
from .errors import ShapeError, ValidationError
from .geometry import iou

BCE_LOGIT_CLAMP = 15.0

# Losses reported for the full-size network (train / test). Reference only;
# nothing here can reproduce them without the trained weights.
REFERENCE_LOSSES = {
    "train": {"object_loss": 0.0185, "box_loss": 0.0286, "class_loss": 0.0063},
    "test": {"object_loss": 0.0141, "box_loss": 0.0327, "class_loss": 0.0155},
}


@dataclass(frozen=True, eq=False)
class ParamVector:
    """Weights, their running update (velocity), and an optional freeze mask.

    Entries where ``frozen`` is True are never changed by an optimizer step,
    and neither is their velocity.
    """

    weights: np.ndarray
    velocity: np.ndarray | None = None
    frozen: np.ndarray | None = None

    def __post_init__(self) -> None:
        w = np.array(self.weights, dtype=np.float64)
        v = np.zeros_like(w) if self.velocity is None else np.array(self.velocity, dtype=np.float64)
        if w.shape != v.shape or w.ndim != 1:
            raise ValidationError("weights and velocity must be 1-D vectors of equal length")
        if not (np.all(np.isfinite(w)) and np.all(np.isfinite(v))):
            raise ValidationError("parameters must be finite")
        f = None
        if self.frozen is not None:
            f = np.array(self.frozen, dtype=bool)
            if f.shape != w.shape:
                raise ValidationError("freeze mask length must match weights")
        object.__setattr__(self, "weights", w)
        object.__setattr__(self, "velocity", v)
        object.__setattr__(self, "frozen", f)

    def __len__(self) -> int:
        return len(self.weights)


@dataclass(frozen=True)
class OptimizerConfig:
    learning_rate: float = 0.01
    momentum: float = 0.9
    batch_size: int = 32

    def __post_init__(self) -> None:
        if not self.learning_rate > 0:
            raise ValidationError("learning rate must be positive")
        if not 0.0 <= self.momentum <= 1.0:
            raise ValidationError("momentum must lie in [0, 1]")
        if self.batch_size < 1:
            raise ValidationError("batch size must be at least 1")


@dataclass(frozen=True)
class LossTriple:
    box_loss: float
    object_loss: float
    class_loss: float

    def __post_init__(self) -> None:
        for name in ("box_loss", "object_loss", "class_loss"):
            value = getattr(self, name)
            if not (math.isfinite(value) and value >= 0.0):
                raise ValidationError(f"{name} must be finite and non-negative, got {value}")

    @property
    def total(self) -> float:
        return self.box_loss + self.object_loss + self.class_loss


def _check_grad(params: ParamVector, grad) -> np.ndarray:
    g = np.asarray(grad, dtype=np.float64)
    if g.shape != params.weights.shape:
        raise ValidationError(f"gradient length {g.shape} does not match parameters {params.weights.shape}")
    if not np.all(np.isfinite(g)):
        raise ValidationError("non-finite gradient")
    return g


def sgd_step(params: ParamVector, grad, config: OptimizerConfig) -> ParamVector:
    g = _check_grad(params, grad)
    w = params.weights - config.learning_rate * g
    if params.frozen is not None:
        w = np.where(params.frozen, params.weights, w)
    return replace(params, weights=w)


def sgd_momentum_step(params: ParamVector, grad, config: OptimizerConfig) -> ParamVector:
    g = _check_grad(params, grad)
    v = -(config.learning_rate * g) + config.momentum * params.velocity
    w = params.weights + v
    if params.frozen is not None:
        v = np.where(params.frozen, params.velocity, v)
        w = np.where(params.frozen, params.weights, w)
    return replace(params, weights=w, velocity=v)


def empirical_risk(sample_losses: Sequence[float]) -> float:
    losses = np.asarray(sample_losses, dtype=np.float64)
    if losses.size == 0:
        raise ValidationError("empirical risk of an empty sample")
    if not np.all(np.isfinite(losses)):
        raise ValidationError("sample losses must be finite")
    return float(np.mean(losses))


# ---------------------------------------------------------------------------
# Detection loss
# ---------------------------------------------------------------------------


def bce_with_logits(logits, targets) -> np.ndarray:
    """Elementwise binary cross-entropy on clamped logits."""
    z = np.clip(np.asarray(logits, dtype=np.float64), -BCE_LOGIT_CLAMP, BCE_LOGIT_CLAMP)
    t = np.asarray(targets, dtype=np.float64)
    # max(z,0) - z*t + log(1 + exp(-|z|))
    return np.maximum(z, 0.0) - z * t + np.log1p(np.exp(-np.abs(z)))


def detection_loss(predictions: Sequence[RawGridOutput], targets: TargetGrid) -> LossTriple:
    """Box, objectness and class losses of raw head outputs against assigned targets.

    - box: mean of ``1 - IoU`` over assigned slots, boxes in normalized network coordinates
    - object: mean BCE of objectness against the assigned/unassigned indicator over every slot
    - class: mean BCE of every class sigmoid against the one-hot target, over assigned slots

    Slots from all scales are pooled. An empty denominator gives 0.
    """
    if len(predictions) != len(targets.grid_sizes):
        raise ShapeError("prediction and target grids have different numbers of scales")

    box_terms: list[float] = []
    obj_sum, obj_count = 0.0, 0
    cls_sum, cls_count = 0.0, 0
    for s, pred in enumerate(predictions):
        pred.validate()
        g = targets.grid_sizes[s]
        if pred.grid_w != g or pred.grid_h != g or len(pred.anchors) != len(targets.anchors[s]):
            raise ShapeError(f"scale {s}: prediction geometry does not match targets")
        v = pred.values
        indicator = np.zeros(v.shape[:3])
        for (row, col, a), tgt in targets.cells[s].items():
            indicator[row, col, a] = 1.0
            tx, ty, tw, th = v[row, col, a, :4]
            aw, ah = pred.anchors[a]
            pcx = (float(sigmoid(tx)) + col) / g
            pcy = (float(sigmoid(ty)) + row) / g
            pw = aw * math.exp(min(max(tw, -LOGIT_SIZE_CLAMP), LOGIT_SIZE_CLAMP)) / targets.input_size
            ph = ah * math.exp(min(max(th, -LOGIT_SIZE_CLAMP), LOGIT_SIZE_CLAMP)) / targets.input_size
            tcx, tcy = (tgt.offset_x + col) / g, (tgt.offset_y + row) / g
            pred_box = (pcx - pw / 2, pcy - ph / 2, pcx + pw / 2, pcy + ph / 2)
            true_box = (tcx - tgt.width / 2, tcy - tgt.height / 2, tcx + tgt.width / 2, tcy + tgt.height / 2)
            box_terms.append(1.0 - iou(pred_box, true_box))

            onehot = np.zeros(pred.num_classes)
            if not 0 <= tgt.class_index < pred.num_classes:
                raise ShapeError(f"target class {tgt.class_index} outside prediction's {pred.num_classes} classes")
            onehot[tgt.class_index] = 1.0
            cls_sum += float(bce_with_logits(v[row, col, a, 5:], onehot).sum())
            cls_count += pred.num_classes
        obj_sum += float(bce_with_logits(v[..., 4], indicator).sum())
        obj_count += indicator.size

    return LossTriple(
        box_loss=float(np.mean(box_terms)) if box_terms else 0.0,
        object_loss=obj_sum / obj_count if obj_count else 0.0,
        class_loss=cls_sum / cls_count if cls_count else 0.0,
    )


# ---------------------------------------------------------------------------
# Toy models and training loop
# ---------------------------------------------------------------------------


class DifferentiableModel(Protocol):
    num_params: int

    def loss(self, w: np.ndarray, x: np.ndarray, y: np.ndarray) -> float: ...

    def gradient(self, w: np.ndarray, x: np.ndarray, y: np.ndarray) -> np.ndarray: ...


class LeastSquaresModel:
    """Linear fit ``y ~ x @ w[:-1] + w[-1]`` with loss ``mean(0.5 * residual**2)``."""

    def __init__(self, num_features: int = 1) -> None:
        self.num_features = num_features
        self.num_params = num_features + 1

    def _design(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64).reshape(len(x), self.num_features)
        return np.hstack([x, np.ones((len(x), 1))])

    def predict(self, w, x) -> np.ndarray:
        return self._design(x) @ w

    def loss(self, w, x, y) -> float:
        r = self.predict(w, x) - np.asarray(y, dtype=np.float64)
        return float(np.mean(0.5 * r * r))

    def gradient(self, w, x, y) -> np.ndarray:
        a = self._design(x)
        r = a @ w - np.asarray(y, dtype=np.float64)
        return a.T @ r / len(r)

    def closed_form(self, x, y) -> np.ndarray:
        sol, *_ = np.linalg.lstsq(self._design(x), np.asarray(y, dtype=np.float64), rcond=None)
        return sol


class LogisticModel:
    """Binary classifier ``p = sigmoid(x @ w[:-1] + w[-1])`` with mean BCE loss."""

    def __init__(self, num_features: int = 1) -> None:
        self.num_features = num_features
        self.num_params = num_features + 1

    def _design(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64).reshape(len(x), self.num_features)
        return np.hstack([x, np.ones((len(x), 1))])

    def predict_proba(self, w, x) -> np.ndarray:
        return sigmoid(self._design(x) @ w)

    def loss(self, w, x, y) -> float:
        z = self._design(x) @ w
        y = np.asarray(y, dtype=np.float64)
        return float(np.mean(np.logaddexp(0.0, z) - y * z))

    def gradient(self, w, x, y) -> np.ndarray:
        a = self._design(x)
        return a.T @ (sigmoid(a @ w) - np.asarray(y, dtype=np.float64)) / len(a)


@dataclass
class TrainResult:
    history: list[float]
    params: ParamVector
    steps: int
    param_history: list[np.ndarray] = field(default_factory=list)


def train_toy(
    model: DifferentiableModel,
    x: np.ndarray,
    y: np.ndarray,
    config: OptimizerConfig,
    epochs: int,
    seed: int = 0,
    init: ParamVector | None = None,
) -> TrainResult:
    """Minibatch SGD with momentum; ``history[e]`` is the full-data loss after epoch ``e``."""
    if epochs < 1:
        raise ValidationError("epochs must be at least 1")
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if len(x) == 0 or len(x) != len(y):
        raise ValidationError("training data must be non-empty with matching x and y")
    rng = np.random.default_rng(seed)
    params = init if init is not None else ParamVector(np.zeros(model.num_params))
    history: list[float] = []
    snapshots: list[np.ndarray] = []
    steps = 0
    for _ in range(epochs):
        order = rng.permutation(len(x))
        for start in range(0, len(x), config.batch_size):
            batch = order[start : start + config.batch_size]
            grad = model.gradient(params.weights, x[batch], y[batch])
            if not np.all(np.isfinite(grad)):
                raise ValidationError("model produced a non-finite gradient")
            params = sgd_momentum_step(params, grad, config)
            steps += 1
        history.append(model.loss(params.weights, x, y))
        snapshots.append(params.weights.copy())
    return TrainResult(history, params, steps, snapshots)


def central_difference_gradient(fn, w: np.ndarray, h: float = 1e-6) -> np.ndarray:
    w = np.asarray(w, dtype=np.float64)
    out = np.empty_like(w)
    for i in range(len(w)):
        step = np.zeros_like(w)
        step[i] = h
        out[i] = (fn(w + step) - fn(w - step)) / (2 * h)
    return out


HISTORY_HEADER = ("epoch", "box_loss", "object_loss", "class_loss", "precision", "recall")


def format_loss_history(rows: Sequence[Sequence]) -> str:
    """CSV text for rows following ``HISTORY_HEADER``; floats use 6 significant digits, ``None`` cells are left empty."""
    lines = [",".join(HISTORY_HEADER)]
    for row in rows:
        lines.append(",".join("" if v is None else (f"{v:.6g}" if isinstance(v, float) else str(v)) for v in row))
    return "\n".join(lines) + "\n"


def write_loss_history(rows: Sequence[Sequence], path: str | Path) -> None:
    Path(path).write_text(format_loss_history(rows), encoding="utf-8")
