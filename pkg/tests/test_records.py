import json
import random

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from smrkit.records import (
    ORIGINAL,
    BitrateRecord,
    DatasetManifest,
    Detection,
    QpLadder,
    RecordCollection,
    RecordError,
    ingest,
    ingest_many,
    load_manifest,
    persist,
    save_manifest,
    validate_completeness,
)


def write_lines(path, objs):
    path.write_text("".join(json.dumps(o) + "\n" for o in objs))
    return path


CLS_LINES = [
    {"machine": "m1", "image": "img1", "qp": 0, "topk": [3, 1, 2]},
    {"machine": "m1", "image": "img1", "qp": 32, "topk": [1, 3, 2]},
    {"machine": "m2", "image": "img1", "qp": 0, "topk": [5, 4]},
]


def test_ingest_classification(tmp_path):
    coll = ingest(write_lines(tmp_path / "c.jsonl", CLS_LINES), "classification")
    assert len(coll) == 3
    assert set(coll) == {("m1", "img1", 0), ("m1", "img1", 32), ("m2", "img1", 0)}
    assert coll[("m1", "img1", 32)].payload.top1 == 1


def test_duplicate_key_names_the_key(tmp_path):
    lines = CLS_LINES + [{"machine": "m1", "image": "img1", "qp": 32, "topk": [9]}]
    with pytest.raises(RecordError, match=r"duplicate key \(m1, img1, qp32\)") as exc:
        ingest(write_lines(tmp_path / "c.jsonl", lines), "classification")
    assert exc.value.line == 4


def test_feature_dimension_mismatch_reports_second_record(tmp_path):
    lines = [
        {"extractor": "e", "image": "a", "qp": 0, "vec": [1.0] * 8},
        {"extractor": "e", "image": "a", "qp": 32, "vec": [1.0] * 9},
    ]
    with pytest.raises(RecordError, match="dimension mismatch") as exc:
        ingest(write_lines(tmp_path / "f.jsonl", lines), "feature")
    assert exc.value.line == 2


def test_malformed_line_reports_line_number(tmp_path):
    path = tmp_path / "c.jsonl"
    path.write_text(json.dumps(CLS_LINES[0]) + "\n{not json\n")
    with pytest.raises(RecordError) as exc:
        ingest(path, "classification")
    assert exc.value.line == 2
    assert ":2:" in str(exc.value)


@pytest.mark.parametrize(
    "bad",
    [
        {"machine": "m1", "image": "i", "qp": 0, "topk": []},
        {"machine": "m1", "image": "i", "qp": 0, "topk": [1, 1]},
        {"machine": "m1", "image": "i", "qp": -3, "topk": [1]},
        {"machine": "m1", "image": "i", "topk": [1]},
        {"machine": "m1", "image": "i", "qp": "32", "topk": [1]},
    ],
)
def test_invalid_classification_lines(tmp_path, bad):
    with pytest.raises(RecordError):
        ingest(write_lines(tmp_path / "c.jsonl", [bad]), "classification")


def test_detection_invariants():
    with pytest.raises(RecordError):
        Detection((0, 0, 0, 5), 1, 0.5)
    with pytest.raises(RecordError):
        Detection((0, 0, 5, 5), 1, 1.5)
    assert Detection((0, 0, 5, 5), 1, 1.0).confidence == 1.0


def test_detection_ingest_and_roundtrip(tmp_path):
    lines = [
        {"machine": "d", "image": "a", "qp": 0, "dets": [{"bbox": [0, 0, 10, 10], "cat": 2, "conf": 0.9}]},
        {"machine": "d", "image": "a", "qp": 37, "dets": []},
    ]
    coll = ingest(write_lines(tmp_path / "d.jsonl", lines), "detection")
    persist(coll, tmp_path / "out.jsonl")
    assert ingest(tmp_path / "out.jsonl", "detection") == coll


def test_manifest_checks(tmp_path):
    manifest = DatasetManifest("classification", QpLadder((32, 37)), ("m1",), ("img1",))
    lines = [{"machine": "m9", "image": "img1", "qp": 0, "topk": [1]}]
    with pytest.raises(RecordError, match="unknown machine"):
        ingest(write_lines(tmp_path / "a.jsonl", lines), "classification", manifest)
    lines = [{"machine": "m1", "image": "img1", "qp": 40, "topk": [1]}]
    with pytest.raises(RecordError, match="not in the manifest ladder"):
        ingest(write_lines(tmp_path / "b.jsonl", lines), "classification", manifest)


def test_manifest_yaml_and_json(tmp_path):
    (tmp_path / "m.yaml").write_text("task: detection\nladder: [22, 27, 32]\nmachines: [a, b]\nimages: [x]\n")
    m = load_manifest(tmp_path / "m.yaml")
    assert m.ladder.all_levels == (ORIGINAL, 22, 27, 32)
    save_manifest(m, tmp_path / "m.json")
    assert load_manifest(tmp_path / "m.json") == m


@pytest.mark.parametrize("levels", [(), (32, 32), (37, 32), (0, 32)])
def test_ladder_invariants(levels):
    with pytest.raises(RecordError):
        QpLadder(levels)


def test_bitrate_csv(tmp_path):
    path = tmp_path / "r.csv"
    path.write_text("image,qp,bpp\na,32,0.25\na,37,0.125\n")
    coll = ingest(path, "bitrate")
    assert coll[("a", 37)].bpp == 0.125
    persist(coll, tmp_path / "r2.csv")
    assert ingest(tmp_path / "r2.csv", "bitrate") == coll
    path.write_text("image,qp,bpp\na,32,-1\n")
    with pytest.raises(RecordError) as exc:
        ingest(path, "bitrate")
    assert exc.value.line == 2


def test_bitrate_rejects_original():
    with pytest.raises(RecordError):
        BitrateRecord("a", ORIGINAL, 1.0)


# --- completeness ------------------------------------------------------------


@pytest.fixture
def manifest_2x1x3():
    return DatasetManifest("classification", QpLadder((32, 51)), ("m1", "m2"), ("img1",))


def _full_records():
    from conftest import cls_record

    return [cls_record(m, "img1", q, [1, 2, 3]) for m in ("m1", "m2") for q in (0, 32, 51)]


def test_completeness_full(manifest_2x1x3):
    assert validate_completeness(manifest_2x1x3, RecordCollection("classification", _full_records())).ok


def test_completeness_one_missing(manifest_2x1x3):
    recs = [r for r in _full_records() if r.key != ("m2", "img1", 32)]
    report = validate_completeness(manifest_2x1x3, RecordCollection("classification", recs))
    assert report.missing == (("m2", "img1", 32),)


def test_completeness_empty(manifest_2x1x3):
    report = validate_completeness(manifest_2x1x3, RecordCollection("classification"))
    assert len(report) == 6


# --- properties --------------------------------------------------------------

record_lines = st.lists(
    st.tuples(
        st.sampled_from(["m1", "m2", "m3"]),
        st.sampled_from(["a", "b"]),
        st.sampled_from([0, 22, 27, 32]),
        st.lists(st.integers(0, 50), min_size=1, max_size=5, unique=True),
    ),
    max_size=20,
    unique_by=lambda t: t[:3],
)


@settings(max_examples=50)
@given(record_lines, st.randoms(use_true_random=False))
def test_ingest_is_order_independent_and_roundtrips(tmp_path_factory, lines, rnd):
    tmp = tmp_path_factory.mktemp("ingest")
    objs = [{"machine": m, "image": i, "qp": q, "topk": t} for m, i, q, t in lines]
    a = ingest(write_lines(tmp / "a.jsonl", objs), "classification")
    shuffled = list(objs)
    rnd.shuffle(shuffled)
    b = ingest(write_lines(tmp / "b.jsonl", shuffled), "classification")
    assert a == b
    persist(a, tmp / "c.jsonl")
    assert ingest(tmp / "c.jsonl", "classification") == a


def test_shard_merge_is_order_independent(tmp_path):
    rnd = random.Random(3)
    objs = [{"machine": f"m{i % 3}", "image": f"i{i}", "qp": 0, "topk": [i]} for i in range(30)]
    rnd.shuffle(objs)
    p1 = write_lines(tmp_path / "s1.jsonl", objs[:12])
    p2 = write_lines(tmp_path / "s2.jsonl", objs[12:])
    assert ingest_many([p1, p2], "classification") == ingest_many([p2, p1], "classification")
    with pytest.raises(RecordError, match="duplicate"):
        ingest_many([p1, p1], "classification")
