from __future__ import annotations

import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from magiceye.errors import BackendError, BackendUnavailable, ValidationError
from magiceye.face import (
    FaceCrop,
    FaceRegistry,
    ScriptedEmbedder,
    ScriptedFaceDetector,
    cosine_similarity,
    decode_vector,
    detect_faces,
    embed_probe,
    encode_vector,
)
from oracles import ref_identify

DIMS = {"facenet": 4, "vggface": 3}


def registry(**kwargs) -> FaceRegistry:
    return FaceRegistry(DIMS, clock=lambda: 123.0, **kwargs)


# -- cosine ------------------------------------------------------------------


def test_cosine_examples():
    assert cosine_similarity([3.0, 4.0], [3.0, 4.0]) == pytest.approx(1.0, abs=1e-15)
    assert cosine_similarity([1, 0], [0, 1]) == 0.0
    assert cosine_similarity([1, 2, 3], [4, 5, 6]) == pytest.approx(32 / (math.sqrt(14) * math.sqrt(77)), abs=1e-15)


def test_cosine_errors():
    with pytest.raises(ValidationError, match="dimension"):
        cosine_similarity([1, 2], [1, 2, 3])
    with pytest.raises(ValidationError, match="zero-norm"):
        cosine_similarity([0, 0], [1, 2])


vector_pair = st.integers(1, 16).flatmap(
    lambda n: st.tuples(
        st.lists(st.floats(-1e3, 1e3), min_size=n, max_size=n),
        st.lists(st.floats(-1e3, 1e3), min_size=n, max_size=n),
    )
).filter(lambda ab: np.linalg.norm(ab[0]) > 1e-6 and np.linalg.norm(ab[1]) > 1e-6)


@given(ab=vector_pair, k=st.floats(1e-3, 1e3))
def test_cosine_properties(ab, k):
    a, b = ab
    v = cosine_similarity(a, b)
    assert v == cosine_similarity(b, a)
    assert abs(v) <= 1.0 + 1e-12
    assert cosine_similarity(np.multiply(k, a), b) == pytest.approx(v, abs=1e-9)


# -- enrollment --------------------------------------------------------------


def test_enroll_once_and_twice():
    reg = registry()
    reg.enroll("alice", {"facenet": [[1, 0, 0, 0]], "vggface": [[0, 1, 0]]})
    assert len(reg) == 1
    reg.enroll("alice", {"facenet": [[0, 1, 0, 0]], "vggface": [[1, 0, 0]]})
    assert len(reg) == 1
    assert [len(v) for v in reg.records["alice"].embeddings.values()] == [2, 2]
    assert reg.records["alice"].enrolled_at == 123.0


def test_enroll_requires_both_backends():
    with pytest.raises(ValidationError, match="backend coverage"):
        registry().enroll("alice", {"facenet": [[1, 0, 0, 0]]})


@pytest.mark.parametrize(
    "embeddings, message",
    [
        ({"facenet": [[1, 0, 0]], "vggface": [[0, 1, 0]]}, "dimension"),
        ({"facenet": [[0, 0, 0, 0]], "vggface": [[0, 1, 0]]}, "zero-norm"),
        ({"facenet": [[1, 0, 0, 0]], "vggface": [[0, 1, 0]], "arcface": [[1]]}, "unknown backend"),
    ],
)
def test_enroll_validation(embeddings, message):
    with pytest.raises(ValidationError, match=message):
        registry().enroll("alice", embeddings)


def test_person_id_cannot_break_file_format():
    with pytest.raises(ValidationError):
        registry().enroll("a|b", {"facenet": [[1, 0, 0, 0]], "vggface": [[0, 1, 0]]})


# -- identification ----------------------------------------------------------


def test_identify_exact_probe():
    reg = registry()
    reg.enroll("alice", {"facenet": [[1, 2, 3, 4]], "vggface": [[0, 1, 0]]})
    reg.enroll("bob", {"facenet": [[4, 3, 2, 1]], "vggface": [[1, 0, 0]]})
    r = reg.identify({"facenet": [1, 2, 3, 4], "vggface": [0, 1, 0]})
    assert r.person_id == "alice" and r.matched
    assert r.fused_score == pytest.approx(1.0, abs=1e-12)


def test_identify_empty_registry():
    r = registry().identify({"facenet": [1, 0, 0, 0], "vggface": [0, 1, 0]})
    assert not r.matched


def test_identify_below_threshold():
    reg = registry()
    reg.enroll("alice", {"facenet": [[1, 0, 0, 0]], "vggface": [[1, 0, 0]]})
    r = reg.identify({"facenet": [0, 1, 0, 0], "vggface": [0, 1, 0]})
    assert r.person_id is None and r.fused_score == 0.0


def test_identify_tie_goes_to_smallest_id():
    reg = registry()
    for pid in ("carol", "bob"):
        reg.enroll(pid, {"facenet": [[1, 0, 0, 0]], "vggface": [[1, 0, 0]]})
    assert reg.identify({"facenet": [1, 0, 0, 0], "vggface": [1, 0, 0]}).person_id == "bob"


def random_people(rng, n_people, max_emb=5):
    people = {}
    for i in range(n_people):
        people[f"p{i:02d}"] = {
            b: [rng.normal(size=d) for _ in range(int(rng.integers(1, max_emb + 1)))] for b, d in DIMS.items()
        }
    return people


@pytest.mark.parametrize("seed", range(30))
def test_identify_equals_exhaustive_oracle(seed):
    rng = np.random.default_rng(seed)
    people = random_people(rng, int(rng.integers(1, 21)))
    reg = registry()
    for pid, embs in people.items():
        reg.enroll(pid, embs)
    for _ in range(5):
        probe = {b: rng.normal(size=d) for b, d in DIMS.items()}
        threshold = float(rng.uniform(-0.5, 0.5))
        got = reg.identify(probe, threshold)
        pid, score = ref_identify(people, probe, threshold)
        assert got.person_id == pid
        assert got.fused_score == pytest.approx(score, abs=1e-12)


@given(seed=st.integers(0, 2**32 - 1), k=st.floats(0.01, 100))
def test_identify_invariant_to_probe_rescaling(seed, k):
    rng = np.random.default_rng(seed)
    reg = registry()
    for pid, embs in random_people(rng, 6).items():
        reg.enroll(pid, embs)
    probe = {b: rng.normal(size=d) for b, d in DIMS.items()}
    scaled = {b: v * k for b, v in probe.items()}
    a, b = reg.identify(probe, -1.0), reg.identify(scaled, -1.0)
    assert a.matched
    assert a.fused_score == pytest.approx(b.fused_score, abs=1e-9)
    if abs(a.fused_score - b.fused_score) == 0.0:
        assert a.person_id == b.person_id


def test_fusion_agrees_when_both_backends_agree():
    rng = np.random.default_rng(11)
    for _ in range(50):
        reg = registry()
        people = random_people(rng, 5, 2)
        for pid, embs in people.items():
            reg.enroll(pid, embs)
        probe = {b: rng.normal(size=d) for b, d in DIMS.items()}
        r = reg.identify(probe, -1.0)
        leaders = set()
        for b in DIMS:
            best = {pid: max(np.dot(v, probe[b]) / (np.linalg.norm(v) * np.linalg.norm(probe[b])) for v in e[b]) for pid, e in people.items()}
            top = sorted(best.values(), reverse=True)
            if top[0] > top[1]:
                leaders.add(max(best, key=best.get))
            else:
                leaders.add(None)
        if len(leaders) == 1 and None not in leaders:
            assert r.person_id == leaders.pop()


# -- persistence -------------------------------------------------------------


def test_registry_file_round_trip(tmp_path):
    path = tmp_path / "faces.reg"
    reg = registry(path=path)
    reg.enroll("alice", {"facenet": [[1, 2, 3, 4]], "vggface": [[0.5, 0.25, 1]]})
    reg.enroll("bob", {"facenet": [[4, 3, 2, 1], [1, 1, 1, 1]], "vggface": [[1, 0, 0]]})
    lines = path.read_text().splitlines()
    assert lines[0] == "FACEREG v1|4|3"
    assert lines[1].startswith("alice|facenet|")
    assert len(lines) == 6

    loaded = FaceRegistry.load(path)
    assert sorted(loaded.records) == ["alice", "bob"]
    assert loaded.records["alice"].enrolled_at is None
    probe = {"facenet": [1, 2, 3, 4.5], "vggface": [0.5, 0.2, 1]}
    assert loaded.identify(probe).person_id == reg.identify(probe).person_id
    assert loaded.identify(probe).fused_score == pytest.approx(reg.identify(probe).fused_score, abs=1e-6)

    loaded.enroll("carol", {"facenet": [[0, 0, 0, 1]], "vggface": [[0, 0, 1]]})
    assert sorted(FaceRegistry.load(path).records) == ["alice", "bob", "carol"]


@pytest.mark.parametrize(
    "content, message",
    [
        ("", "empty"),
        ("FACEREG v2|4|3\n", "header"),
        ("FACEREG v1|4|x\n", "dimension"),
        ("FACEREG v1|4|3\nalice|facenet\n", "expected"),
        ("FACEREG v1|4|3\nalice|arcface|AAAA\n", "unknown backend"),
        ("FACEREG v1|4|3\nalice|facenet|!!!!\n", "base64"),
    ],
)
def test_registry_file_errors(tmp_path, content, message):
    path = tmp_path / "bad.reg"
    path.write_text(content)
    with pytest.raises(ValidationError, match=message):
        FaceRegistry.load(path)


def test_registry_file_incomplete_person(tmp_path):
    path = tmp_path / "r.reg"
    path.write_text(f"FACEREG v1|4|3\nalice|facenet|{encode_vector([1, 0, 0, 0])}\n")
    with pytest.raises(ValidationError, match="lacks"):
        FaceRegistry.load(path)


def test_vector_codec_is_float32_little_endian():
    v = decode_vector(encode_vector([1.0, -2.5, 3.25]))
    assert v.tolist() == [1.0, -2.5, 3.25]
    assert encode_vector([1.0]) == "AACAPw=="


# -- face detector stage -----------------------------------------------------


def test_detect_faces_pass_through():
    det = ScriptedFaceDetector({"two": [FaceCrop((1, 1, 5, 5)), FaceCrop((10, 10, 20, 20))]})
    assert detect_faces("none", det) == []
    assert [c.box for c in detect_faces("two", det)] == [(1, 1, 5, 5), (10, 10, 20, 20)]


def test_detect_faces_clips_and_flags():
    det = ScriptedFaceDetector(
        {
            "img": [
                FaceCrop((-10.0, 20.0, 30.0, 50.0)),
                FaceCrop((90.0, 90.0, 120.0, 130.0)),
                FaceCrop((10.0, 10.0, 20.0, 20.0)),
                FaceCrop((150.0, 10.0, 160.0, 20.0)),
            ]
        }
    )
    crops = detect_faces("img", det, (100.0, 100.0))
    assert [(c.box, c.clipped) for c in crops] == [
        ((0.0, 20.0, 30.0, 50.0), True),
        ((90.0, 90.0, 100.0, 100.0), True),
        ((10.0, 10.0, 20.0, 20.0), False),
    ]


def test_detect_faces_needs_backend():
    with pytest.raises(BackendUnavailable):
        detect_faces("img", None)


def test_embed_probe_validates_backend_output():
    good = ScriptedEmbedder("facenet", 4, {"img": [1, 0, 0, 0]})
    assert embed_probe("img", (0, 0, 1, 1), [good])["facenet"].tolist() == [1, 0, 0, 0]
    with pytest.raises(BackendError):
        embed_probe("img", (0, 0, 1, 1), [ScriptedEmbedder("facenet", 4, {"img": [1, 0, 0]})])
    fallback = ScriptedEmbedder("vggface", 3)
    assert np.array_equal(fallback.embed("x", (0, 0, 1, 1)), fallback.embed("x", (0, 0, 1, 1)))
