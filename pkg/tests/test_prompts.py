import json

import pytest

from cdmil.exceptions import AuthMissing, MalformedElbJson, MalformedInstanceJson
from cdmil.llm import ProviderConfig
from cdmil.prompts import (
    extract_elb,
    infer_instances,
    inference_template,
    load_template,
    parse_elb,
    parse_instance_objects,
    run_elb_extraction,
    run_inference,
    runs_from_rows,
)
from cdmil.schema import ELBComponents, Utterance, get_schema

KOACD = get_schema("koacd")
TQA = get_schema("therapist_qa")
MOCK = ProviderConfig("scripted", "scripted", "mock")


class ScriptedGateway:
    """Returns queued responses and records (prompt, attempt) pairs."""

    def __init__(self, responses):
        self.responses = list(responses)
        self.calls = []

    def complete(self, provider, prompt, attempt=0):
        self.calls.append((provider.provider_id, prompt, attempt))
        item = self.responses.pop(0)
        if isinstance(item, Exception):
            raise item
        return item


def test_inference_prompt_with_elb():
    elb = ELBComponents("Sadness.", "Overgeneralizes.", "")
    text = inference_template(KOACD).render("I must do better.", elb)
    head = text.split("\n\nRefer to", 1)[0]
    assert head == (
        'The user said the following sentence:\n"I must do better."\n\n'
        "Emotion: Sadness.\nLogic: Overgeneralizes.\nBehavior: Not applicable"
    )
    assert "{" + "sentence}" not in text and "_info}" not in text
    assert "You must select only from the following 10 types: All-or-Nothing Thinking, Overgeneralization" in text


def test_inference_prompt_without_elb_leaves_blank_lines():
    text = inference_template(KOACD).render("x")
    assert text.startswith('The user said the following sentence:\n"x"\n\n\n\n\n\nRefer to')


def test_therapist_prompt_lists_its_own_types():
    text = inference_template(TQA).render("x")
    for label in ("Fortune-telling", "Mind Reading", "Should statements"):
        assert label in text
    assert "Discounting the Positive" not in text


def test_elb_prompt():
    text = load_template("elb").render("I'm a failure.")
    assert text.startswith('The user said the following sentence:\n"I\'m a failure."\n\nPlease analyze')
    assert '"behavior": "One-sentence summary of the behavioral aspect"' in text
    with pytest.raises(ValueError):
        load_template("other")


def test_parse_elb_variants():
    e = parse_elb('Result:\n```json\n{"Emotion": "Sad.", "logic": "", "behavior": "Avoids class."}\n```')
    assert e == ELBComponents("Sad.", "Not applicable", "Avoids class.")


def test_extract_elb_reprompts_once():
    u = Utterance("u1", "text", ("Labeling",), "koacd")
    gw = ScriptedGateway(["not json", '{"emotion": "a", "logic": "b", "behavior": "c"}'])
    assert extract_elb(u, MOCK, gw).logic == "b"
    assert [c[2] for c in gw.calls] == [0, 1]
    with pytest.raises(MalformedElbJson):
        extract_elb(u, MOCK, ScriptedGateway(["nope", "still nope"]))


def test_infer_instances_reprompt_then_fail():
    u = Utterance("u1", "text", ("Labeling",), "koacd")
    good = json.dumps([{"type": "Labeling", "salience score": 0.4, "relevant_text": "text"}])
    run = infer_instances(u, None, MOCK, KOACD, ScriptedGateway(["[", good]))
    assert [i.type_label for i in run.instances] == ["Labeling"]
    assert run.with_elb is False
    with pytest.raises(MalformedInstanceJson):
        infer_instances(u, None, MOCK, KOACD, ScriptedGateway(["x", "y"]))
    with pytest.raises(ValueError):
        infer_instances(u, None, MOCK, TQA, ScriptedGateway([good]))


def test_drop_reasons_recorded():
    items = [{"type": "Labeling", "salience score": "NaN", "relevant_text": "t"}, {"type": "Labeling", "salience score": 0.1}]
    kept, dropped = parse_instance_objects(items, KOACD, "p")
    assert kept == []
    assert [r for _, r in dropped] == ["NonFiniteSalience", "EmptyRelevantText"]


def test_run_inference_order_failures_and_rows():
    utts = [Utterance(f"u{i}", "text", ("Labeling",), "koacd") for i in range(2)]
    providers = [ProviderConfig("a", "a", "mock"), ProviderConfig("b", "b", "mock")]
    good = json.dumps([{"type": "Labeling", "salience score": 0.5, "relevant_text": "t"}])

    class ByProvider:
        def complete(self, provider, prompt, attempt=0):
            return good if provider.provider_id == "a" else "garbage"

    runs = run_inference(utts, providers, KOACD, ByProvider(), workers=3)
    assert [(r.utterance_ref, r.provider_id) for r in runs] == [("u0", "a"), ("u0", "b"), ("u1", "a"), ("u1", "b")]
    assert runs[1].failed == "MalformedInstanceJson" and runs[1].drop_rows()[0]["reason"] == "MalformedInstanceJson"
    rows = [row for r in runs for row in r.instance_rows()]
    rebuilt = runs_from_rows(rows, with_elb=False)
    assert [(r.utterance_ref, r.provider_id, len(r.instances)) for r in rebuilt] == [("u0", "a", 1), ("u1", "a", 1)]


def test_run_elb_extraction_reports_failures_but_raises_auth():
    class Half:
        def complete(self, provider, prompt, attempt=0):
            return "bad" if "u1" in prompt or attempt else '{"emotion": "e", "logic": "l", "behavior": "b"}'

    class NoKey:
        def complete(self, provider, prompt, attempt=0):
            raise AuthMissing("no key")

    utts = [Utterance("x0", "first", ("Labeling",), "koacd"), Utterance("x1", "u1 second", ("Labeling",), "koacd")]
    elbs, failures = run_elb_extraction(utts, MOCK, Half(), workers=2)
    assert list(elbs) == ["x0"]
    assert failures[0]["utterance_id"] == "x1" and failures[0]["reason"] == "MalformedElbJson"
    with pytest.raises(AuthMissing):
        run_elb_extraction(utts, MOCK, NoKey())
