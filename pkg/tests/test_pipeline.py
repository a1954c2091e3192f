import json
import re
import warnings

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from avground.grammar import BoundingBox, Label, TaskKind, TimeInterval
from avground.pipeline import (
    PUBLISHED_SPLIT_COUNTS,
    Bucket,
    Event,
    FilterConfig,
    InvalidScore,
    NoEligibleObjects,
    NonPositiveDuration,
    QaRecord,
    VideoRecord,
    duration_bucket,
    et_ratio,
    filter_manifest,
    generate_qas,
    load_box_sidecar,
    load_manifest,
    load_ratings,
    merge_overlapping_events,
    qc_aggregate,
    quadratic_weighted_kappa,
    split_report,
    union_length,
)

VA, VO = Label.VISIBLE_AUDIBLE, Label.VISIBLE_ONLY


def ev(start, end, category="music", caption="", objects=()):
    return Event(category, caption, TimeInterval(start, end), tuple(objects))


def video(duration, *events, video_id="v", split="unassigned"):
    return VideoRecord(video_id, duration, tuple(events), split)


def discretized_union(intervals, step=1e-3):
    # count grid cells whose midpoint lies inside some interval
    hi = max(iv.end for iv in intervals)
    mids = np.arange(0, hi, step) + step / 2
    inside = np.zeros_like(mids, dtype=bool)
    for iv in intervals:
        inside |= (mids >= iv.start) & (mids <= iv.end)
    return inside.sum() * step


# ---- filtering ---------------------------------------------------------------------


def test_duration_buckets():
    assert duration_bucket(42.17) is Bucket.LONG
    assert duration_bucket(20.0) is Bucket.SHORT
    assert duration_bucket(20.01) is Bucket.MEDIUM
    assert duration_bucket(60.0) is Bucket.LONG
    assert duration_bucket(60.5) is Bucket.REJECTED
    assert duration_bucket(1.0) is Bucket.REJECTED
    assert duration_bucket(1.0, FilterConfig(min_duration=0.5)) is Bucket.SHORT
    with pytest.raises(NonPositiveDuration):
        duration_bucket(0.0)
    with pytest.raises(NonPositiveDuration):
        video(-1.0)


def test_merge_examples():
    merged = merge_overlapping_events([ev(0, 5, caption="a"), ev(3, 8, caption="b")])
    assert len(merged) == 1 and merged[0].interval == TimeInterval(0, 8)
    assert merged[0].caption == "a; b"
    disjoint = [ev(0, 2), ev(4, 8)]
    assert merge_overlapping_events(disjoint) == disjoint
    touching = [ev(0, 5), ev(5, 8)]
    assert merge_overlapping_events(touching) == touching
    other_category = [ev(0, 5), ev(3, 8, category="speech")]
    assert merge_overlapping_events(other_category) == other_category


def test_merge_chains_and_keeps_first_label():
    events = [
        ev(6, 9, objects=[("guitar", VO)]),
        ev(0, 4, objects=[("guitar", VA)]),
        ev(3, 7, objects=[("drum", VA)]),
    ]
    [merged] = merge_overlapping_events(events)
    assert merged.interval == TimeInterval(0, 9)
    assert dict(merged.objects) == {"guitar": VA, "drum": VA}


def test_et_ratio_examples():
    assert et_ratio(video(10, ev(0, 10))) == 1.0
    assert et_ratio(video(20, ev(0, 5), ev(3, 8, category="speech"))) == pytest.approx(0.4)
    assert discretized_union([TimeInterval(0, 5), TimeInterval(3, 8)]) == pytest.approx(8.0, abs=1e-6)


def test_filter_examples():
    cfg = FilterConfig()
    four = video(30, ev(0, 2, "a"), ev(3, 5, "b"), ev(6, 8, "c"), ev(9, 11, "d"), video_id="four")
    kept, rejected = filter_manifest([four], cfg)
    assert not kept and rejected[0].reason == "event_count"

    two = video(30, ev(0, 10, "a"), ev(20, 25, "b"), video_id="two")
    kept, _ = filter_manifest([two], cfg)
    assert [r.video_id for r in kept] == ["two"] and duration_bucket(30) is Bucket.MEDIUM

    low = video(40, ev(0, 2), video_id="low")
    _, rejected = filter_manifest([low], cfg)
    assert rejected[0].reason == "et_ratio"


def test_et_ratio_boundary():
    at = video(50, ev(0, 4), video_id="at")  # exactly 0.08
    below = video(50, ev(0, 3.995), video_id="below")  # 0.0799
    assert et_ratio(at) == 0.08 and et_ratio(below) == 0.0799
    kept, rejected = filter_manifest([at, below])
    assert [r.video_id for r in kept] == ["at"]
    assert [(r.record.video_id, r.reason) for r in rejected] == [("below", "et_ratio")]


def test_merging_happens_before_event_count_gate():
    # four raw events that merge into two
    record = video(30, ev(0, 5), ev(4, 9), ev(20, 22, "x"), ev(21, 25, "x"))
    kept, _ = filter_manifest([record])
    assert len(kept) == 1 and len(kept[0].events) == 2


interval = st.tuples(st.integers(0, 80), st.integers(1, 20)).map(lambda p: (p[0] / 2, (p[0] + p[1]) / 2))
event_lists = st.lists(
    st.tuples(interval, st.sampled_from(["a", "b"])).map(lambda x: ev(*x[0], category=x[1])), max_size=6
)


@given(event_lists)
def test_merge_properties(events):
    merged = merge_overlapping_events(events)
    assert len(merged) <= len(events)
    before = union_length(e.interval for e in events)
    after = union_length(e.interval for e in merged)
    assert after >= before - 1e-12
    for cat in ("a", "b"):
        mine = [e for e in merged if e.category == cat]
        for i, x in enumerate(mine):
            for y in mine[i + 1:]:
                assert min(x.interval.end, y.interval.end) <= max(x.interval.start, y.interval.start)


@given(event_lists.filter(bool))
def test_et_ratio_properties(events):
    record = video(60, *events)
    r = et_ratio(record)
    assert 0.0 <= r <= 1.0
    assert r * 60 == pytest.approx(discretized_union([e.interval for e in events]), abs=0.01)
    inner = events[0].interval
    contained = ev(inner.start, (inner.start + inner.end) / 2, category="zzz")
    assert et_ratio(video(60, *events, contained)) == r


@given(st.lists(st.tuples(st.floats(0.5, 80), event_lists), max_size=6))
def test_filter_idempotent(rows):
    records = [video(d, *[e for e in es if e.interval.end <= d], video_id=f"v{i}") for i, (d, es) in enumerate(rows)]
    kept, _ = filter_manifest(records)
    again, rejected = filter_manifest(kept)
    assert again == kept and not rejected


# ---- QA generation -----------------------------------------------------------------

TEMPLATES = [
    r"When is the moment (.+) make sound and are visible\?",
    r"What objects make sound between \d+\.\d and \d+\.\d, and where are they\?",
    r"What silent objects can be seen between \d+\.\d and \d+\.\d, and where are they\?",
    r"When is the moment (.+) make sound and are visible, and where are they\?",
]


def test_temporal_template():
    record = video(30, ev(2, 9, objects=[("a group of people", VA)]))
    qas = generate_qas(record)
    assert qas[0].task_kind is TaskKind.TEMPORAL
    assert qas[0].question == "When is the moment a group of people make sound and are visible?"


def test_silent_only_event():
    qas = generate_qas(video(30, ev(2, 9, objects=[("tree", VO)])))
    assert [(q.task_kind, q.question) for q in qas] == [
        (TaskKind.SPATIAL, "What silent objects can be seen between 2.0 and 9.0, and where are they?")
    ]


def test_two_event_expansion_by_hand():
    record = video(
        40,
        ev(1.25, 10, objects=[("dog", VA), ("cat", VA), ("sofa", VO)]),
        ev(20, 30, category="car", objects=[("car", VA)]),
        video_id="vid",
        split="test",
    )
    boxes = {"dog": {1.0: BoundingBox(0, 0, 5, 5), 2.0: BoundingBox(1, 1, 6, 6), 25.0: BoundingBox(0, 0, 1, 1)}}
    qas = generate_qas(record, boxes)
    assert [(q.qa_id, q.question) for q in qas] == [
        ("vid:0:T:0", "When is the moment dog, cat make sound and are visible?"),
        ("vid:0:S:0", "What objects make sound between 1.2 and 10.0, and where are they?"),
        ("vid:0:S:1", "What silent objects can be seen between 1.2 and 10.0, and where are they?"),
        ("vid:0:ST:0", "When is the moment dog, cat make sound and are visible, and where are they?"),
        ("vid:1:T:0", "When is the moment car make sound and are visible?"),
        ("vid:1:S:0", "What objects make sound between 20.0 and 30.0, and where are they?"),
        ("vid:1:ST:0", "When is the moment car make sound and are visible, and where are they?"),
    ]
    assert all(q.split == "test" and q.video_id == "vid" for q in qas)
    st0 = qas[3].gold
    assert [n for n, _ in st0.objects] == ["dog", "cat"]
    # only the in-event frame survives, and the cat has no boxes at all
    assert list(st0.gold_tracks) == ["dog"] and list(st0.gold_tracks["dog"]) == [2.0]
    assert [n for n, _ in qas[2].gold.objects] == ["sofa"]
    assert QaRecord.from_dict(json.loads(json.dumps(qas[3].to_dict()))) == qas[3]


def test_no_objects_raises():
    with pytest.raises(NoEligibleObjects):
        generate_qas(video(30, ev(0, 10)))


names = st.sampled_from(["dog", "cat", "a group of people", "guitar", "car"])
labelled = st.lists(st.tuples(names, st.sampled_from([VA, VO])), min_size=1, max_size=3, unique_by=lambda x: x[0])


@given(st.lists(st.tuples(interval, labelled), min_size=1, max_size=3))
def test_generated_questions_are_templates_and_deterministic(rows):
    record = video(60, *[ev(*iv, category=f"c{i}", objects=objs) for i, (iv, objs) in enumerate(rows)])
    qas = generate_qas(record)
    assert [q.to_dict() for q in qas] == [q.to_dict() for q in generate_qas(record)]
    assert len({q.qa_id for q in qas}) == len(qas)
    for q in qas:
        assert sum(bool(re.fullmatch(t, q.question)) for t in TEMPLATES) == 1


# ---- split report ------------------------------------------------------------------


def qa(split, task):
    return QaRecord("x", task, "q", None, split)


def test_published_split_counts():
    report = split_report(None, PUBLISHED_SPLIT_COUNTS)
    assert report.consistent
    bad = {**PUBLISHED_SPLIT_COUNTS, "total": 8165}
    assert not split_report(None, bad).consistent


def test_split_mismatch_flagged():
    declared = {"test": {"temporal": 2, "spatial": 1}}
    qas = [qa("test", TaskKind.TEMPORAL), qa("test", TaskKind.SPATIAL)]
    report = split_report(qas, declared)
    assert report.mismatches == [{"split": "test", "task": "temporal", "declared": 2, "observed": 1}]
    assert split_report(qas + [qa("test", TaskKind.TEMPORAL)], declared).consistent


def test_empty_split_report():
    assert split_report([], {}).consistent


# ---- human QC ----------------------------------------------------------------------

# 29 paired ratings, rows = rater a, columns = rater b; found by a small
# search over 4x4 count matrices for a quadratic kappa of 0.71
KAPPA_MATRIX = [[2, 2, 0, 0], [0, 7, 3, 1], [0, 1, 6, 2], [0, 0, 2, 3]]


def matrix_ratings(matrix):
    a, b = [], []
    for i, row in enumerate(matrix):
        for j, n in enumerate(row):
            a += [i + 1] * n
            b += [j + 1] * n
    return a, b


def test_kappa_matches_reference_implementation():
    from sklearn.metrics import cohen_kappa_score

    a, b = matrix_ratings(KAPPA_MATRIX)
    assert len(a) == 29
    k = quadratic_weighted_kappa(a, b)
    assert k == pytest.approx(cohen_kappa_score(a, b, weights="quadratic"), abs=1e-12)
    assert round(k, 2) == 0.71
    rng = np.random.default_rng(3)
    for _ in range(50):
        a = rng.integers(1, 5, 40)
        b = np.clip(a + rng.integers(-1, 2, 40), 1, 4)
        if len(set(a)) > 1 or len(set(b)) > 1:
            assert quadratic_weighted_kappa(a, b) == pytest.approx(cohen_kappa_score(a, b, weights="quadratic"), abs=1e-12)


def test_kappa_edge_cases():
    assert quadratic_weighted_kappa([1, 2, 3, 4] * 3, [1, 2, 3, 4] * 3) == 1.0
    with pytest.warns(RuntimeWarning):
        assert quadratic_weighted_kappa([4, 4, 4, 4], [4, 4, 4, 4]) == 0.0
    # one constant rater against a varying one: kappa is 0 by the formula itself
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        assert quadratic_weighted_kappa([4, 4, 4, 4], [1, 2, 3, 4]) == 0.0


def test_qc_aggregate():
    result = qc_aggregate([("a", 1, 2), ("b", 3, 2), ("c", 4, 4), ("d", 2, 3)], cutoff=2.5)
    assert result.kept == ("b", "c", "d")
    assert result.scores["a"] == 1.5
    assert result.mean_before == pytest.approx((1.5 + 2.5 + 4 + 2.5) / 4)
    assert result.mean_after == pytest.approx(3.0)
    with pytest.raises(InvalidScore):
        qc_aggregate([("a", 0, 2)])
    with pytest.raises(InvalidScore):
        qc_aggregate([("a", 5, 2)])


def test_load_ratings(tmp_path):
    path = tmp_path / "r.csv"
    path.write_text("video_id,rater_a,rater_b\nv1,3,4\nv2,1,1\n", encoding="utf-8")
    assert load_ratings(path) == [("v1", 3, 4), ("v2", 1, 1)]
    path.write_text("video_id,rater_a,rater_b\nv1,3,x\n", encoding="utf-8")
    with pytest.raises(InvalidScore):
        load_ratings(path)


def test_manifest_and_sidecar_round_trip(tmp_path):
    record = video(30, ev(0, 10, objects=[("dog", VA)]), video_id="m", split="train")
    path = tmp_path / "m.json"
    path.write_text(json.dumps([record.to_dict()]), encoding="utf-8")
    assert load_manifest(path) == [record]
    side = tmp_path / "b.json"
    side.write_text(json.dumps([{"video_id": "m", "frames": {"1": {"Dog": [0, 0, 2, 2]}}}]), encoding="utf-8")
    assert load_box_sidecar(side) == {"m": {"dog": {1.0: BoundingBox(0, 0, 2, 2)}}}
