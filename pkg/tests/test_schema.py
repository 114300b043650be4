import json
from collections import Counter

import pytest

from cdmil.exceptions import EmptyDataset, UnknownLabel
from cdmil.schema import (
    ELBComponents,
    DistortionInstance,
    Utterance,
    canonicalize_label,
    get_schema,
    load_schemas,
    read_utterances,
    split_counts,
    split_dataset,
    write_splits,
)


def test_both_schemas_have_ten_labels():
    schemas = load_schemas()
    assert set(schemas) == {"koacd", "therapist_qa"}
    for s in schemas.values():
        assert s.num_classes == 10
        assert len(set(s.labels)) == 10
    assert "Mind Reading" in get_schema("therapist_qa").labels
    assert "Discounting the Positive" in get_schema("koacd").labels


@pytest.mark.parametrize(
    "raw, expected",
    [
        ("Mental Filtering", "Mental Filter"),
        ("Negative Filtering", "Mental Filter"),
        ('"Should" Statements', "Should Statements"),
        ("“Should” statements", "Should Statements"),
        ("  all-or-nothing   thinking ", "All-or-Nothing Thinking"),
        ("Labeling (name calling)", "Labeling"),
        ("PERSONALIZATION", "Personalization"),
    ],
)
def test_koacd_aliases(raw, expected):
    assert canonicalize_label(raw, get_schema("koacd")) == expected


@pytest.mark.parametrize(
    "raw, expected",
    [
        ("Fortune Telling", "Fortune-telling"),
        ("mind-reading", "Mind Reading"),
        ("Should Statements", "Should statements"),
        ("Magnification", "Magnification"),
    ],
)
def test_therapist_aliases(raw, expected):
    assert canonicalize_label(raw, get_schema("therapist_qa")) == expected


@pytest.mark.parametrize("raw", ["Catastrophizing", "Mind Reading", "", "Labelling things"])
def test_unknown_koacd_labels(raw):
    with pytest.raises(UnknownLabel):
        canonicalize_label(raw, get_schema("koacd"))


def test_utterance_label_limits():
    Utterance("a", "text", ("Labeling", "Mind Reading"), "therapist_qa")
    with pytest.raises(ValueError):
        Utterance("a", "text", ("Labeling", "Overgeneralization"), "koacd")
    with pytest.raises(ValueError):
        Utterance("a", "text", ("Labeling", "Mind Reading", "Magnification"), "therapist_qa")
    with pytest.raises(ValueError):
        Utterance("a", "text", (), "koacd")
    u = Utterance("b", "text", ("mental filtering",), "koacd")
    assert u.gold_labels == ("Mental Filter",)
    assert u.target == "Mental Filter"


def test_elb_empty_fields_become_not_applicable():
    e = ELBComponents("", "  two   spaces ", None)
    assert e.emotion == "Not applicable"
    assert e.logic == "two spaces"
    assert e.behavior == "Not applicable"


def test_instance_validation():
    with pytest.raises(ValueError):
        DistortionInstance("Labeling", "", 0.5, "p")
    with pytest.raises(ValueError):
        DistortionInstance("Labeling", "x", float("nan"), "p")
    with pytest.raises(ValueError):
        DistortionInstance("Labeling", "x", -1.0, "p")


@pytest.mark.parametrize("n, expected", [(4510, (3608, 451, 451)), (1597, (1277, 159, 161)), (10, (8, 1, 1)), (1, (0, 0, 1))])
def test_split_counts(n, expected):
    assert split_counts(n) == expected
    assert sum(split_counts(n)) == n


def _corpus(n=200):
    labels = get_schema("koacd").labels
    return [Utterance(f"u{i:03d}", f"t{i}", (labels[i % 7 if i % 3 else 0],), "koacd") for i in range(n)]


def test_split_is_deterministic_and_stratified():
    utts = _corpus()
    a = split_dataset(utts, seed=3)
    b = split_dataset(list(reversed(utts)), seed=3)
    assert a == b
    assert split_dataset(utts, seed=4) != a
    counts = Counter(a.values())
    assert (counts["train"], counts["val"], counts["test"]) == split_counts(200)
    # every label with enough members appears in the training split
    by_label = Counter(u.target for u in utts if a[u.id] == "train")
    assert set(by_label) == {u.target for u in utts}
    for lab, n in Counter(u.target for u in utts).items():
        assert abs(by_label[lab] - 0.8 * n) <= 2


def test_split_errors():
    with pytest.raises(EmptyDataset):
        split_dataset([])
    with pytest.raises(ValueError):
        split_dataset(_corpus(5), ratios=(0.5, 0.5, 0.5))


def test_read_utterances_and_write_splits(tmp_path):
    data = tmp_path / "d.jsonl"
    data.write_text(
        json.dumps({"id": "x1", "text": "I always fail.", "gold_labels": ["Overgeneralization"]}) + "\n"
        + json.dumps({"id": "x2", "text": "Should.", "gold_labels": "Should Statements"}) + "\n"
    )
    utts = read_utterances(data, "koacd")
    assert [u.id for u in utts] == ["x1", "x2"]
    out = tmp_path / "s.jsonl"
    write_splits(out, {"x2": "test", "x1": "train"})
    assert [json.loads(line) for line in out.read_text().splitlines()] == [
        {"id": "x1", "split": "train"},
        {"id": "x2", "split": "test"},
    ]
