import pytest

from cdmil.bags import (
    bag_from_json,
    bag_stats,
    bag_to_json,
    build_bag,
    build_bags,
    format_bag_stats,
    format_missing,
    is_missing,
    missing_rate,
    normalize_salience,
)
from cdmil.exceptions import EmptyBag
from cdmil.prompts import InferenceRun
from cdmil.schema import DistortionInstance, Utterance, get_schema

KOACD = get_schema("koacd")


def inst(label, s, provider="p1", text="some text"):
    return DistortionInstance(label, text, s, provider)


def test_normalize_salience():
    assert normalize_salience([2.0, 1.0, 1.0]) == pytest.approx([0.5, 0.25, 0.25])
    assert normalize_salience([0.0, 0.0]) == [0.5, 0.5]
    assert normalize_salience([]) == []


def test_build_bag_concatenates_without_dedup():
    u = Utterance("u1", "I must do better.", ("Should Statements",), "koacd")
    runs = [
        InferenceRun("u1", "p1", True, [inst("Should Statements", 0.6), inst("Labeling", 0.4)], []),
        InferenceRun("u1", "p2", True, [inst("Should Statements", 0.6, "p2")], []),
    ]
    bag = build_bag(u, runs)
    assert len(bag) == 3
    assert bag.normalized_salience == pytest.approx((0.375, 0.25, 0.375))
    assert bag.text == "I must do better."
    assert not is_missing(bag)


def test_empty_bags_reported():
    utts = [Utterance(f"u{i}", "t", ("Labeling",), "koacd") for i in range(3)]
    runs = [
        InferenceRun("u0", "p2", True, [inst("Labeling", 1.0, "p2")], []),
        InferenceRun("u0", "p1", True, [inst("Overgeneralization", 1.0)], []),
        InferenceRun("u2", "p1", True, [], [({"type": "x"}, "UnknownLabel")]),
    ]
    bags, empty = build_bags(utts, runs, provider_order=["p1", "p2"])
    assert [b.utterance_ref for b in bags] == ["u0"]
    assert empty == ["u1", "u2"]
    assert [i.provider_id for i in bags[0].instances] == ["p1", "p2"]
    with pytest.raises(EmptyBag):
        build_bag(utts[1], [])


def test_bag_json_roundtrip():
    u = Utterance("u1", "txt", ("Labeling",), "koacd")
    bag = build_bag(u, [InferenceRun("u1", "p1", False, [inst("Labeling", 3.0), inst("Personalization", 1.0)], [])])
    row = bag_to_json(bag)
    assert row["instances"][0] == {"type": "Labeling", "salience": 3.0, "p_hat": 0.75, "relevant_text": "some text", "provider": "p1"}
    assert bag_from_json(row) == bag


def _bag(uid, gold, labels):
    u = Utterance(uid, "t", (gold,), "koacd")
    return build_bag(u, [InferenceRun(uid, "p1", True, [inst(lab, 1.0) for lab in labels], [])])


def test_missing_rate_by_gold_type():
    bags = [
        _bag("a", "Labeling", ["Labeling"]),
        _bag("b", "Labeling", ["Overgeneralization"]),
        _bag("c", "Personalization", ["Labeling", "Labeling"]),
        _bag("d", "Overgeneralization", ["Overgeneralization"]),
    ]
    rep = missing_rate(bags, KOACD)
    assert rep.per_type_missing_rate["Labeling"] == 50.0
    assert rep.per_type_missing_rate["Personalization"] == 100.0
    assert rep.per_type_missing_rate["Overgeneralization"] == 0.0
    assert rep.per_type_missing_rate["Mental Filter"] == 0.0
    assert rep.overall_missing_rate == 50.0
    assert rep.missing_bag_ids == ["b", "c"]
    text = format_missing(rep, None, KOACD.labels)
    assert "Overall" in text and "50.00%" in text


def test_bag_stats_and_table():
    bags = [_bag("a", "Labeling", ["Labeling", "Labeling", "Personalization"]), _bag("b", "Labeling", ["Labeling"])]
    st = bag_stats(bags, KOACD.labels)
    assert (st.total_instances, st.min_per_bag, st.max_per_bag, st.avg_per_bag) == (4, 1, 3, 2.0)
    assert st.per_type_counts["Labeling"] == (3, 75.0)
    assert st.per_type_counts["Mental Filter"] == (0, 0.0)
    text = format_bag_stats(st, "Instances")
    lines = text.splitlines()
    assert lines[0] == "Instances"
    assert any(line.startswith("Labeling") and line.endswith("3 (75.0%)") for line in lines)
    assert lines[-1].endswith("4 (100.0%)")
