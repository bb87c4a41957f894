"""Command-line entry point.

Exit codes: 0 success, 1 validation error, 2 I/O error, 64 usage error.
Settings can also come from a ``key=value`` file passed with ``--config``;
explicit flags win over the file, which wins over built-in defaults.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from importlib import resources
from pathlib import Path
from typing import Sequence

import numpy as np

from . import currency as currency_mod
from .dataset import SplitSpec, load_class_map, load_manifest, split_dataset, write_manifest
from .detect import (
    DEFAULT_CONF_THRESHOLD,
    DEFAULT_INPUT_SIZE,
    DEFAULT_NMS_IOU,
    decode_predictions,
    format_detections_json,
    nms,
    parse_detections_json,
)
from .errors import ValidationError
from .face import DEFAULT_BACKENDS, DEFAULT_MATCH_THRESHOLD, FaceRegistry
from .geometry import compute_letterbox
from .metrics import DEFAULT_EVAL_IOU, evaluate, truths_in_pixels
from .mock_detector import EchoBackend, load_raw_fixture
from .navigation import DEFAULT_ARRIVAL_RADIUS_M, parse_route
from .orchestrator import (
    DEFAULT_PROXIMITY_M,
    DEFAULT_QUEUE_CAPACITY,
    Orchestrator,
    OrchestratorConfig,
    format_feedback_log,
    parse_trace,
)
from .scenario import load_perception
from .train import (
    LeastSquaresModel,
    LogisticModel,
    OptimizerConfig,
    ParamVector,
    format_loss_history,
    train_toy,
)

EXIT_OK, EXIT_VALIDATION, EXIT_IO, EXIT_USAGE = 0, 1, 2, 64

log = logging.getLogger("magiceye")


def bundled(name: str) -> Path:
    return Path(str(resources.files("magiceye") / "data" / name))


class UsageError(Exception):
    pass


class Parser(argparse.ArgumentParser):
    def error(self, message: str):  # type: ignore[override]
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise UsageError(message)


def _fraction(text: str) -> float:
    return float(text)


def _write_text(path: str | None, text: str) -> None:
    if path is None or path == "-":
        sys.stdout.write(text)
    else:
        Path(path).write_text(text, encoding="utf-8")


def _check_range(value: float, lo: float, hi: float, what: str) -> None:
    if not lo <= value <= hi:
        raise ValidationError(f"{what} out of range")


# ---------------------------------------------------------------------------
# Subcommands
# ---------------------------------------------------------------------------


def cmd_ingest(args) -> int:
    cmap = load_class_map(args.class_map)
    manifest = load_manifest(args.manifest, cmap, args.sizes)
    counts = manifest.class_counts(cmap.size)
    summary = {
        "samples": len(manifest),
        "boxes": sum(counts),
        "classes_represented": sum(c > 0 for c in counts),
        "class_counts": {cmap.name_of(i): c for i, c in enumerate(counts)},
    }
    if args.split:
        parts = [float(p) for p in args.split.split(",")]
        if len(parts) != 3:
            raise ValidationError("--split needs three comma-separated fractions")
        train, val, test = split_dataset(manifest, SplitSpec(*parts, seed=args.seed))
        summary["split"] = {"train": len(train), "val": len(val), "test": len(test)}
        if args.out_dir:
            out = Path(args.out_dir)
            out.mkdir(parents=True, exist_ok=True)
            for name, part in (("train", train), ("val", val), ("test", test)):
                write_manifest(part, out / f"{name}.csv", cmap)
    print(json.dumps(summary, indent=2, sort_keys=True))
    return EXIT_OK


def cmd_detect(args) -> int:
    _check_range(args.conf_threshold, 0.0, 1.0, "confidence threshold")
    _check_range(args.nms_iou, 0.0, 1.0, "NMS IoU threshold")
    cmap = load_class_map(args.class_map)
    records = []
    if args.raw:
        if not (args.image_id and args.width and args.height):
            raise ValidationError("--raw needs --image-id, --width and --height")
        raw, input_size = load_raw_fixture(args.raw)
        transform = compute_letterbox(args.width, args.height, input_size)
        for det in nms(decode_predictions(raw, transform, args.conf_threshold), args.nms_iou):
            records.append((args.image_id, det))
    else:
        if not args.manifest:
            raise ValidationError("detect needs --manifest (mock echo backend) or --raw")
        manifest = load_manifest(args.manifest, cmap, args.sizes)
        backend = EchoBackend(manifest, cmap.size, args.input_size, args.mock_confidence)
        for sample in manifest:
            raw = backend.infer(sample.image_id)
            dets = decode_predictions(raw, backend.transform_for(sample.image_id), args.conf_threshold)
            records.extend((sample.image_id, d) for d in nms(dets, args.nms_iou))
    _write_text(args.out, format_detections_json(records, cmap.names))
    return EXIT_OK


def cmd_eval(args) -> int:
    _check_range(args.iou_threshold, 0.0, 1.0, "IoU threshold")
    cmap = load_class_map(args.class_map)
    manifest = load_manifest(args.manifest, cmap, args.sizes)
    records = parse_detections_json(Path(args.detections).read_text(encoding="utf-8"))
    by_image: dict[str, list] = {}
    samples = manifest.by_id()
    for image_id, det in records:
        if image_id not in samples:
            raise ValidationError(f"detection for unknown image {image_id!r}")
        by_image.setdefault(image_id, []).append(det)
    pairs = []
    for s in manifest:
        if s.width is None or s.height is None:
            raise ValidationError(f"image {s.image_id!r} has no recorded size")
        pairs.append((by_image.get(s.image_id, []), truths_in_pixels(s.boxes, s.width, s.height)))
    report = evaluate(pairs, cmap.size, args.iou_threshold, cmap.names)
    _write_text(args.out, json.dumps(report.to_dict(), indent=2, sort_keys=True) + "\n")
    if args.confusion_csv:
        report.write_confusion_csv(args.confusion_csv)
    return EXIT_OK


def toy_data(model: str, n: int, seed: int) -> tuple[np.ndarray, np.ndarray]:
    rng = np.random.default_rng(seed)
    if model == "least-squares":
        x = rng.uniform(-1.0, 1.0, n)
        return x, 2.0 * x - 0.5
    x = rng.uniform(0.1, 1.0, n) * rng.choice([-1.0, 1.0], n)
    return x, (x > 0).astype(np.float64)


def cmd_train_toy(args) -> int:
    config = OptimizerConfig(args.lr, args.momentum, args.batch_size)
    x, y = toy_data(args.model, args.samples, args.seed)
    model = LeastSquaresModel() if args.model == "least-squares" else LogisticModel()
    result = train_toy(model, x, y, config, args.epochs, seed=args.seed, init=ParamVector(np.zeros(model.num_params)))
    rows = []
    for epoch, (loss, w) in enumerate(zip(result.history, result.param_history), start=1):
        if args.model == "least-squares":
            rows.append((epoch, loss, 0.0, 0.0, None, None))
        else:
            pred = model.predict_proba(w, x) >= 0.5
            tp = int(np.sum(pred & (y == 1)))
            fp = int(np.sum(pred & (y == 0)))
            fn = int(np.sum(~pred & (y == 1)))
            p = 1.0 if tp + fp == 0 else tp / (tp + fp)
            r = 1.0 if tp + fn == 0 else tp / (tp + fn)
            rows.append((epoch, 0.0, loss, 0.0, p, r))
    _write_text(args.out, format_loss_history(rows))
    return EXIT_OK


def _read_json(path: str):
    with Path(path).open(encoding="utf-8") as fh:
        try:
            return json.load(fh)
        except json.JSONDecodeError as exc:
            raise ValidationError(f"{path}: {exc}") from None


def _backends(args) -> tuple[str, ...]:
    names = tuple(b.strip() for b in args.backends.split(",") if b.strip())
    if len(names) != 2:
        raise ValidationError("--backends needs exactly two comma-separated ids")
    return names


def cmd_face_enroll(args) -> int:
    backends = _backends(args)
    embeddings = _read_json(args.embeddings)
    path = Path(args.registry)
    if path.exists() and path.stat().st_size > 0:
        registry = FaceRegistry.load(path, backends)
    else:
        try:
            dims = {b: len(embeddings[b][0]) for b in backends}
        except (KeyError, IndexError, TypeError):
            raise ValidationError("backend coverage: embeddings file must list vectors for every backend") from None
        registry = FaceRegistry(dims, path)
    record = registry.enroll(args.person, embeddings)
    print(json.dumps({"person_id": record.person_id, "embeddings": {b: len(v) for b, v in record.embeddings.items()}, "registry_size": len(registry)}, sort_keys=True))
    return EXIT_OK


def cmd_face_identify(args) -> int:
    _check_range(args.threshold, -1.0, 1.0, "face match threshold")
    registry = FaceRegistry.load(args.registry, _backends(args))
    result = registry.identify(_read_json(args.probe), args.threshold)
    print(json.dumps({"person_id": result.person_id, "fused_score": result.fused_score, "per_backend_scores": result.per_backend_scores}, sort_keys=True))
    return EXIT_OK


def cmd_currency_eval(args) -> int:
    outcomes = currency_mod.load_outcomes(args.outcomes)
    labels = [d.strip() for d in args.denominations.split(",")] if args.denominations else None
    if labels is not None:
        currency_mod.DenominationSet(tuple(labels))
    report = currency_mod.evaluate_classifier(outcomes, labels)
    _write_text(args.out, json.dumps(report.to_dict(), indent=2, sort_keys=True) + "\n")
    return EXIT_OK


def cmd_simulate(args) -> int:
    _check_range(args.proximity_threshold, 0.0, float("inf"), "proximity threshold")
    cmap = load_class_map(args.class_map)
    perception = load_perception(args.perception, cmap)
    events = parse_trace(Path(args.trace).read_text(encoding="utf-8"))
    route = parse_route(Path(args.route).read_text(encoding="utf-8"), args.arrival_radius) if args.route else None
    config = OrchestratorConfig(args.proximity_threshold, args.queue_capacity)
    messages = Orchestrator(perception, config, route).replay(events)
    _write_text(args.out, format_feedback_log(messages))
    return EXIT_OK


# ---------------------------------------------------------------------------
# Parser
# ---------------------------------------------------------------------------


def build_parser() -> Parser:
    fmt = argparse.ArgumentDefaultsHelpFormatter
    parser = Parser(prog="magiceye", description="Assistive perception pipeline tools.", formatter_class=fmt)
    parser.add_argument("--config", help="key=value settings file (flags override it)", default=None)
    parser.add_argument("-v", "--verbose", action="store_true", help="log debug messages to stderr")
    sub = parser.add_subparsers(dest="command", metavar="COMMAND", parser_class=Parser)
    sub.required = True

    def add(name: str, help: str) -> Parser:
        return sub.add_parser(name, help=help, description=help, formatter_class=fmt)

    class_map_default = str(bundled("class_map.txt"))

    p = add("ingest", "validate a manifest and optionally split it")
    p.add_argument("--manifest", required=True, help="box CSV (ImageID,LabelName,XMin,XMax,YMin,YMax)")
    p.add_argument("--class-map", default=class_map_default, help="index,label_name file")
    p.add_argument("--sizes", default=None, help="ImageID,Width,Height sidecar; None means <manifest>_sizes.csv when present")
    p.add_argument("--split", default=None, help="train,val,test fractions, e.g. 0.8,0.1,0.1")
    p.add_argument("--seed", type=int, default=0, help="shuffle seed for --split")
    p.add_argument("--out-dir", default=None, help="write train/val/test manifests here")
    p.set_defaults(func=cmd_ingest)

    p = add("detect", "mock inference + decode + NMS, writes detection JSON")
    p.add_argument("--manifest", default=None, help="echo this manifest's ground truth through the mock network")
    p.add_argument("--sizes", default=None, help="image size sidecar")
    p.add_argument("--raw", default=None, help="raw grid fixture JSON to decode instead")
    p.add_argument("--image-id", default=None, help="image id for --raw")
    p.add_argument("--width", type=float, default=None, help="image width for --raw")
    p.add_argument("--height", type=float, default=None, help="image height for --raw")
    p.add_argument("--class-map", default=class_map_default, help="index,label_name file")
    p.add_argument("--input-size", type=int, default=DEFAULT_INPUT_SIZE, help="square network input in pixels")
    p.add_argument("--conf-threshold", type=_fraction, default=DEFAULT_CONF_THRESHOLD, help="minimum detection confidence")
    p.add_argument("--nms-iou", type=_fraction, default=DEFAULT_NMS_IOU, help="NMS IoU threshold")
    p.add_argument("--mock-confidence", type=float, default=0.9, help="confidence the echo backend assigns")
    p.add_argument("--out", default=None, help="output path; None means stdout")
    p.set_defaults(func=cmd_detect)

    p = add("eval", "score detections against ground truth")
    p.add_argument("--detections", required=True, help="detection JSON from 'detect'")
    p.add_argument("--manifest", required=True, help="ground-truth manifest")
    p.add_argument("--sizes", default=None, help="image size sidecar")
    p.add_argument("--class-map", default=class_map_default, help="index,label_name file")
    p.add_argument("--iou-threshold", type=_fraction, default=DEFAULT_EVAL_IOU, help="IoU needed for a true positive")
    p.add_argument("--out", default=None, help="report JSON path; None means stdout")
    p.add_argument("--confusion-csv", default=None, help="also write the confusion matrix as CSV")
    p.set_defaults(func=cmd_eval)

    p = add("train-toy", "train a toy model with SGD+momentum, write loss history CSV")
    p.add_argument("--model", choices=("least-squares", "logistic"), default="least-squares", help="toy model")
    p.add_argument("--epochs", type=int, default=25, help="number of epochs")
    p.add_argument("--lr", type=float, default=0.1, help="learning rate")
    p.add_argument("--momentum", type=float, default=0.5, help="momentum factor in [0, 1]")
    p.add_argument("--batch-size", type=int, default=32, help="minibatch size")
    p.add_argument("--samples", type=int, default=256, help="synthetic dataset size")
    p.add_argument("--seed", type=int, default=0, help="data and shuffle seed")
    p.add_argument("--out", default=None, help="CSV path; None means stdout")
    p.set_defaults(func=cmd_train_toy)

    p = add("face", "face registry operations")
    face_sub = p.add_subparsers(dest="face_command", metavar="ACTION", parser_class=Parser)
    face_sub.required = True
    q = face_sub.add_parser("enroll", help="enroll embeddings for a person", formatter_class=fmt)
    q.add_argument("--registry", required=True, help="registry file (created if missing)")
    q.add_argument("--person", required=True, help="person id")
    q.add_argument("--embeddings", required=True, help='JSON {"<backend>": [[...], ...], ...}')
    q.add_argument("--backends", default=",".join(DEFAULT_BACKENDS), help="the two backend ids, in header order")
    q.set_defaults(func=cmd_face_enroll)
    q = face_sub.add_parser("identify", help="identify a probe", formatter_class=fmt)
    q.add_argument("--registry", required=True, help="registry file")
    q.add_argument("--probe", required=True, help='JSON {"<backend>": [...], ...}')
    q.add_argument("--threshold", type=float, default=DEFAULT_MATCH_THRESHOLD, help="minimum fused cosine score")
    q.add_argument("--backends", default=",".join(DEFAULT_BACKENDS), help="the two backend ids, in header order")
    q.set_defaults(func=cmd_face_identify)

    p = add("currency", "currency classifier evaluation")
    cur_sub = p.add_subparsers(dest="currency_command", metavar="ACTION", parser_class=Parser)
    cur_sub.required = True
    q = cur_sub.add_parser("eval", help="evaluate labeled outcomes", formatter_class=fmt)
    q.add_argument("--outcomes", required=True, help="CSV image_id,truth,predicted,confidence")
    q.add_argument("--denominations", default=None, help="comma-separated label order; None means the sorted labels seen")
    q.add_argument("--out", default=None, help="report JSON path; None means stdout")
    q.set_defaults(func=cmd_currency_eval)

    p = add("simulate", "replay a sensor trace, write the feedback log")
    p.add_argument("--trace", default=str(bundled("trace.txt")), help="sensor trace file")
    p.add_argument("--perception", default=str(bundled("scenario.json")), help="scripted perception scenario JSON")
    p.add_argument("--class-map", default=class_map_default, help="index,label_name file")
    p.add_argument("--route", default=None, help="waypoint file, one 'lat lon' per line")
    p.add_argument("--arrival-radius", type=float, default=DEFAULT_ARRIVAL_RADIUS_M, help="waypoint arrival radius (m)")
    p.add_argument("--proximity-threshold", type=float, default=DEFAULT_PROXIMITY_M, help="alert below this distance (m)")
    p.add_argument("--queue-capacity", type=int, default=DEFAULT_QUEUE_CAPACITY, help="feedback queue capacity")
    p.add_argument("--out", default=None, help="log path; None means stdout")
    p.set_defaults(func=cmd_simulate)
    return parser


def read_config(path: str) -> dict[str, str]:
    settings = {}
    for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), start=1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ValidationError(f"{path}:{lineno}: expected key=value")
        key, value = line.split("=", 1)
        settings[key.strip().replace("-", "_")] = value.strip()
    return settings


def _leaf_parser(parser: argparse.ArgumentParser, argv: Sequence[str]) -> argparse.ArgumentParser:
    """The subparser that handled ``argv``."""
    current = parser
    for token in argv:
        sub_actions = [a for a in current._actions if isinstance(a, argparse._SubParsersAction)]
        if sub_actions and token in sub_actions[0].choices:
            current = sub_actions[0].choices[token]
    return current


def apply_config(args: argparse.Namespace, parser: argparse.ArgumentParser, argv: Sequence[str], settings: dict[str, str]) -> None:
    leaf = _leaf_parser(parser, argv)
    for action in leaf._actions:
        if action.dest not in settings or not action.option_strings:
            continue
        explicit = any(tok == opt or tok.startswith(opt + "=") for tok in argv for opt in action.option_strings)
        if explicit:
            continue
        raw = settings[action.dest]
        try:
            value = action.type(raw) if action.type is not None else raw
        except ValueError:
            raise ValidationError(f"config value for {action.dest!r} is invalid: {raw!r}") from None
        if action.choices is not None and value not in action.choices:
            raise ValidationError(f"config value for {action.dest!r} must be one of {list(action.choices)}")
        setattr(args, action.dest, value)


def main(argv: Sequence[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError:
        return EXIT_USAGE
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.config:
            apply_config(args, parser, argv, read_config(args.config))
        return args.func(args)
    except ValidationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
