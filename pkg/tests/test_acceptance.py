"""Acceptance suite: one timed check per criterion, each printing a PASS/FAIL line.

Run alone with ``pytest tests/test_acceptance.py -v``; the lines are printed
even when pytest captures output.
"""

from __future__ import annotations

import json
import math
import subprocess
import sys
import time
from pathlib import Path

import numpy as np
import pytest

from gen import random_detection_instance, random_detections
from magiceye.currency import ClassificationOutcome, evaluate_classifier, f1_score
from magiceye.dataset import ClassMap
from magiceye.detect import decode_predictions, default_grid_sizes, nms
from magiceye.errors import ValidationError
from magiceye.face import FaceRegistry, cosine_similarity
from magiceye.geometry import compute_letterbox
from magiceye.metrics import MatchCounts, confusion_matrix, evaluate, match_detections, precision, recall
from magiceye.mock_detector import encode_detections
from magiceye.navigation import NavigationState, navigate_step, waypoints_from
from magiceye.orchestrator import (
    ButtonPress,
    FrameCaptured,
    GpsFix,
    Orchestrator,
    OrchestratorConfig,
    Priority,
    ProximityAlert,
)
from magiceye.scenario import perception_from_dict
from magiceye.train import (
    LeastSquaresModel,
    LogisticModel,
    OptimizerConfig,
    ParamVector,
    central_difference_gradient,
    sgd_momentum_step,
    sgd_step,
    train_toy,
)
from oracles import ref_ap, ref_confusion, ref_identify, ref_match, ref_nms

FIXTURES = Path(__file__).parent / "fixtures"


def verdict(capsys, number: int, title: str, limit_s: float | None, check):
    """Run ``check`` (returns a list of failure strings), print one line, assert."""
    start = time.perf_counter()
    failures = check()
    elapsed = time.perf_counter() - start
    if limit_s is not None and elapsed >= limit_s:
        failures.append(f"took {elapsed:.2f} s, limit {limit_s} s")
    status = "PASS" if not failures else "FAIL"
    limit = f", limit {limit_s:g} s" if limit_s is not None else ""
    line = f"ACCEPTANCE {number:2d} {status}  {title}  ({elapsed:.3f} s{limit})"
    if failures:
        line += "  :: " + "; ".join(failures[:3])
    with capsys.disabled():
        print("\n" + line)
    assert not failures, line


# -- 1 -----------------------------------------------------------------------


def test_criterion_01_precision_recall_examples(capsys):
    def check():
        out = []
        p = precision(MatchCounts(tp=90, fp=10))
        r = recall(MatchCounts(tp=75, fn=25))
        if p != 0.90:
            out.append(f"precision {p!r} != 0.90")
        if r != 0.75:
            out.append(f"recall {r!r} != 0.75")
        return out

    verdict(capsys, 1, "precision 90/100 = 0.90 and recall 75/100 = 0.75, exact", 1.0, check)


# -- 2 -----------------------------------------------------------------------


def test_criterion_02_metric_oracles(capsys):
    def check():
        out = []
        rng = np.random.default_rng(2024)
        instances = 300
        for k in range(instances):
            dets, truths, n = random_detection_instance(rng, max_boxes=10, max_classes=5)
            thr = float(rng.choice([0.3, 0.5, 0.75]))
            r = match_detections(dets, truths, thr)
            flags, pairs = ref_match(dets, truths, thr)
            if r.is_tp != flags or r.pairs != pairs:
                out.append(f"instance {k}: matching differs")
            if confusion_matrix(dets, truths, n, thr).tolist() != ref_confusion(dets, truths, n, thr):
                out.append(f"instance {k}: confusion differs")

            order = sorted(range(len(dets)), key=lambda i: (-dets[i].confidence, i))
            want = {}
            for c in range(n):
                cflags = [f for i, f in zip(order, flags) if dets[i].class_index == c]
                want[c] = ref_ap(cflags, sum(t.class_index == c for t in truths))
            defined = [v for v in want.values() if v is not None]
            try:
                report = evaluate([(dets, truths)], n, thr)
            except ValidationError:
                if defined:
                    out.append(f"instance {k}: evaluate raised with defined classes")
                continue
            for c in range(n):
                got = report.per_class_ap[c]
                if (got is None) != (want[c] is None) or (got is not None and abs(got - want[c]) > 1e-9):
                    out.append(f"instance {k}: AP class {c} {got} vs {want[c]}")
            if abs(report.map_score - sum(defined) / len(defined)) > 1e-9:
                out.append(f"instance {k}: mAP differs")
            c = report.counts
            if (c.tp, c.fp, c.fn) != (sum(flags), len(flags) - sum(flags), len(truths) - len(pairs)):
                out.append(f"instance {k}: counts differ")
        return out

    verdict(capsys, 2, "matching, AP, mAP, confusion equal brute-force oracles on 300 random instances", 30.0, check)


# -- 3 -----------------------------------------------------------------------


def test_criterion_03_nms_reference(capsys):
    def check():
        out = []
        rng = np.random.default_rng(3)
        for k in range(600):
            n = int(rng.integers(0, 51))
            dets = random_detections(rng, n, int(rng.integers(1, 4)), quantize=k % 3 == 0)
            thr = float(rng.choice([0.0, 0.25, 0.45, 0.5, 0.9, 1.0]))
            got, want = nms(dets, thr), ref_nms(dets, thr)
            if len(got) != len(want) or any(a is not b for a, b in zip(got, want)):
                out.append(f"instance {k} (n={n}, thr={thr}) differs")
        return out

    verdict(capsys, 3, "NMS equals O(n^2) reference on 600 random instances (n <= 50), bit-exact", 30.0, check)


# -- 4 -----------------------------------------------------------------------


def test_criterion_04_decode_round_trip(capsys):
    def check():
        out = []
        rng = np.random.default_rng(4)
        for size, grids in ((640, (20, 40, 80)), (416, (13, 26, 52))):
            if default_grid_sizes(size) != grids:
                out.append(f"input {size}: grids {default_grid_sizes(size)}")
            worst = 0.0
            for _ in range(60):
                w, h = int(rng.integers(100, 3000)), int(rng.integers(100, 3000))
                t = compute_letterbox(w, h, size)
                items = []
                for cls in range(int(rng.integers(1, 11))):
                    bw, bh = rng.uniform(0.01, 0.95) * w, rng.uniform(0.01, 0.95) * h
                    x0, y0 = rng.uniform(0, w - bw), rng.uniform(0, h - bh)
                    items.append((cls, (x0, y0, x0 + bw, y0 + bh), float(rng.uniform(0.3, 0.99))))
                dets = {d.class_index: d for d in decode_predictions(encode_detections(items, t, 12), t, 0.25)}
                if len(dets) != len(items):
                    out.append(f"input {size}: recovered {len(dets)} of {len(items)} boxes")
                    continue
                for cls, box, _ in items:
                    worst = max(worst, float(np.max(np.abs(np.subtract(dets[cls].box, box)))))
            if worst >= 1e-4:
                out.append(f"input {size}: max error {worst:.2e} px")
        return out

    verdict(capsys, 4, "encode -> decode recovers boxes within 1e-4 px at 640 (20/40/80) and 416 (13/26/52)", 10.0, check)


# -- 5 -----------------------------------------------------------------------


def test_criterion_05_optimizer(capsys):
    def check():
        out = []
        rng = np.random.default_rng(5)
        for _ in range(200):
            w, g = rng.normal(size=6), rng.normal(size=6)
            cfg = OptimizerConfig(float(rng.uniform(1e-4, 1)), 0.0)
            if not np.array_equal(sgd_momentum_step(ParamVector(w), g, cfg).weights, sgd_step(ParamVector(w), g, cfg).weights):
                out.append("alpha=0 momentum step differs from sgd_step")
                break

        for alpha in (0.5, 0.9, 0.99):
            cfg = OptimizerConfig(0.1, alpha)
            g = np.array([1.0, -3.0])
            p = ParamVector(np.zeros(2))
            for _ in range(5000):
                p = sgd_momentum_step(p, g, cfg)
            err = float(np.max(np.abs(p.velocity + cfg.learning_rate * g / (1 - alpha))))
            if err >= 1e-6:
                out.append(f"alpha={alpha}: velocity off by {err:.2e}")

        x = rng.uniform(-1, 1, 256)
        y = 2.0 * x - 0.5
        model = LeastSquaresModel()
        result = train_toy(model, x, y, OptimizerConfig(0.1, 0.5, 32), 25, seed=0)
        if any(b > a for a, b in zip(result.history, result.history[1:])):
            out.append("epoch loss increased")
        gap = float(np.max(np.abs(result.params.weights - model.closed_form(x, y))))
        if gap >= 1e-3:
            out.append(f"final params {gap:.2e} from closed form")
        return out

    verdict(capsys, 5, "alpha=0 bit-exact, velocity -> -lr*g/(1-alpha), 25-epoch toy fit monotone and at closed form", 10.0, check)


# -- 6 -----------------------------------------------------------------------


def test_criterion_06_gradient_check(capsys):
    def check():
        out = []
        rng = np.random.default_rng(6)
        x = rng.normal(size=(64, 3))
        worst = 0.0
        for model, y in (
            (LeastSquaresModel(3), x @ [1.0, -2.0, 0.5] + rng.normal(0, 0.3, 64)),
            (LogisticModel(3), (rng.random(64) < 0.5).astype(float)),
        ):
            for _ in range(100):
                w = rng.normal(0, 2, size=4)
                a = model.gradient(w, x, y)
                n = central_difference_gradient(lambda v: model.loss(v, x, y), w)
                worst = max(worst, float(np.linalg.norm(a - n) / max(np.linalg.norm(a) + np.linalg.norm(n), 1e-12)))
        if worst >= 1e-5:
            out.append(f"max relative error {worst:.2e}")
        return out

    verdict(capsys, 6, "analytic gradients match central differences within 1e-5 at 100 points per model", None, check)


# -- 7 -----------------------------------------------------------------------


def test_criterion_07_face_matching(capsys):
    def check():
        out = []
        rng = np.random.default_rng(7)
        for k in range(1000):
            d = int(rng.integers(1, 129))
            a, b = rng.normal(size=d), rng.normal(size=d)
            s = cosine_similarity(a, b)
            if s != cosine_similarity(b, a):
                out.append(f"pair {k}: asymmetric")
            if abs(s) > 1 + 1e-12:
                out.append(f"pair {k}: out of range")
            scale = float(np.exp(rng.uniform(-5, 5)))
            if abs(cosine_similarity(scale * a, b) - s) > 1e-9:
                out.append(f"pair {k}: not scale invariant")

        dims = {"facenet": 16, "vggface": 8}
        for k in range(100):
            people = {
                f"id{i:02d}": {b: [rng.normal(size=dd) for _ in range(int(rng.integers(1, 6)))] for b, dd in dims.items()}
                for i in range(int(rng.integers(1, 21)))
            }
            reg = FaceRegistry(dims, clock=lambda: 0.0)
            for pid, embs in people.items():
                reg.enroll(pid, embs)
            probe = {b: rng.normal(size=dd) for b, dd in dims.items()}
            thr = float(rng.uniform(-0.3, 0.3))
            got = reg.identify(probe, thr)
            pid, score = ref_identify(people, probe, thr)
            if got.person_id != pid or abs(got.fused_score - score) > 1e-12:
                out.append(f"registry {k}: {got.person_id} vs oracle {pid}")
            scaled = reg.identify({b: v * 3.7 for b, v in probe.items()}, thr)
            if scaled.person_id != got.person_id:
                out.append(f"registry {k}: argmax changed under probe rescaling")
        return out

    verdict(capsys, 7, "cosine properties on 1000 pairs; identify equals exhaustive oracle on 100 registries", None, check)


# -- 8 -----------------------------------------------------------------------


def test_criterion_08_currency_f1(capsys):
    def check():
        out = []
        f1 = f1_score(0.9972, 1.0)
        if abs(f1 - 0.9986) > 1e-4:
            out.append(f"F1 {f1:.6f} vs 0.9986")
        stream = (
            [ClassificationOutcome("100", 0.9, "100")] * 3560
            + [ClassificationOutcome("100", 0.6, "500")] * 10
            + [ClassificationOutcome("500", 0.9, "500")] * 430
        )
        report = evaluate_classifier(stream)
        m = report.per_class["100"]
        if abs(report.accuracy - 0.9975) > 1e-4 or m.recall != 1.0 or abs(m.precision - 0.9972) > 1e-4:
            out.append(f"stream gives acc {report.accuracy:.4f}, P {m.precision:.4f}, R {m.recall:.4f}")
        if abs(m.f1 - 0.9986) > 1e-4:
            out.append(f"stream F1 {m.f1:.6f}")
        return out

    verdict(capsys, 8, "F1(P=99.72%, R=100%) = 99.86% within 0.01 points", None, check)


# -- 9 -----------------------------------------------------------------------


def test_criterion_09_orchestrator_replay(capsys):
    def check():
        out = []
        golden = (FIXTURES / "golden_feedback.log").read_bytes()
        logs = []
        for _ in range(2):
            proc = subprocess.run([sys.executable, "-m", "magiceye", "simulate"], capture_output=True, check=False)
            logs.append(proc.stdout)
        if logs[0] != logs[1] or logs[0] != golden:
            out.append("bundled trace log differs from golden or between runs")

        cmap = ClassMap.from_names(["Person", "Chair", "Door"])
        route = waypoints_from([(0.0, 0.0), (0.001, 0.0), (0.001, -0.001)])
        rng = np.random.default_rng(9)
        for k in range(100):
            scene = {
                f"f{i}": [
                    {"label": cmap.names[int(rng.integers(3))], "confidence": float(rng.uniform(0.3, 1)), "box": [0, 0, 4, 4]}
                    for _ in range(int(rng.integers(0, 4)))
                ]
                for i in range(3)
            }
            orch = Orchestrator(perception_from_dict({"detections": scene}, cmap), OrchestratorConfig(queue_capacity=int(rng.integers(1, 6))), route)
            t, alerts, drained = 0, 0, []
            for _ in range(60):
                t += int(rng.integers(0, 40))
                kind = int(rng.integers(4))
                ev = [ButtonPress(t), FrameCaptured(t, f"f{int(rng.integers(3))}"), ProximityAlert(t, float(rng.uniform(0, 3))),
                      GpsFix(t, float(rng.uniform(0, 0.0011)), float(rng.uniform(-0.0011, 0)))][kind]  # fmt: skip
                alerts += sum(m.priority is Priority.Alert for m in orch.process(ev))
                if rng.random() < 0.25:
                    batch = orch.drain()
                    drained += batch
                    pri = [m.priority for m in batch]
                    if Priority.Alert in pri and Priority.Description in pri and max(i for i, p in enumerate(pri) if p is Priority.Alert) > pri.index(Priority.Description):
                        out.append(f"trace {k}: Description drained before an Alert")
            drained += orch.drain()
            if sum(m.priority is Priority.Alert for m in drained) != alerts:
                out.append(f"trace {k}: an Alert was lost")

        nav = NavigationState(route)
        said = []
        for fix in [(0.0, 0.0), (0.0004, 0.0), (0.001, 0.0), (0.001, -0.0004), (0.001, -0.001), (0.001, -0.001)]:
            nav, instruction = navigate_step(nav, fix)
            if instruction is not None:
                said.append(instruction.summary)
        if said != ["turn left", "destination reached"]:
            out.append(f"route emitted {said}")
        return out

    verdict(capsys, 9, "golden replay byte-identical, Alert preemption on 100 traces, 90-degree route -> turn left, destination reached", None, check)


# -- 10 ----------------------------------------------------------------------


def test_criterion_10_end_to_end_cli(capsys, tmp_path):
    synth = FIXTURES / "synthetic"
    common = ["--manifest", str(synth / "manifest.csv"), "--class-map", str(synth / "class_map.txt")]
    result = {}

    def cli(*argv):
        return subprocess.run([sys.executable, "-m", "magiceye", *argv], capture_output=True, text=True, check=False)

    def check():
        out = []
        steps = [
            ("ingest", cli("ingest", *common, "--split", "0.8,0.1,0.1", "--seed", "7")),
            ("detect", cli("detect", *common, "--out", str(tmp_path / "d.json"))),
            ("eval", cli("eval", "--detections", str(tmp_path / "d.json"), *common, "--out", str(tmp_path / "r.json"))),
        ]
        for name, proc in steps:
            if proc.returncode != 0:
                out.append(f"{name} exited {proc.returncode}: {proc.stderr.strip()}")
                return out
        if json.loads(steps[0][1].stdout)["samples"] != 132:
            out.append("manifest is not the 132-sample fixture")
        report = json.loads((tmp_path / "r.json").read_text())
        result["map"] = report["map"]
        if report["map"] != 1.0:
            out.append(f"mAP {report['map']}")
        return out

    verdict(capsys, 10, "ingest -> detect (mock) -> eval on 132 synthetic samples gives mAP 1.0", 5.0, check)
    assert math.isclose(result["map"], 1.0)
