"""Prompt rendering and strict parsing of LLM responses."""

from __future__ import annotations

import json
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from importlib import resources
from typing import Iterable, Mapping, Sequence

from .exceptions import (
    CdmilError,
    MalformedElbJson,
    MalformedInstanceJson,
    NoJsonFound,
    UnknownLabel,
    UserError,
)
from .llm import LLMGateway, ProviderConfig, extract_json_payload
from .schema import (
    NOT_APPLICABLE,
    DistortionInstance,
    ELBComponents,
    LabelSchema,
    Utterance,
    canonicalize_label,
)

log = logging.getLogger(__name__)

TEMPLATE_IDS = ("elb", "infer_koacd", "infer_therapist_qa")
SALIENCE_KEYS = ("salience score", "salience_score", " salience score", "salience")


@dataclass(frozen=True)
class PromptTemplate:
    template_id: str
    body: str

    def render(self, sentence: str, elb: ELBComponents | None = None) -> str:
        # str.format would trip over the literal JSON braces in the bodies
        text = self.body.replace("{sentence}", sentence)
        if self.template_id == "elb":
            return text
        if elb is None:
            emotion = logic = behavior = ""
        else:
            emotion = f"Emotion: {elb.emotion}"
            logic = f"Logic: {elb.logic}"
            behavior = f"Behavior: {elb.behavior}"
        return (
            text.replace("{emotion_info}", emotion)
            .replace("{logic_info}", logic)
            .replace("{behavior_info}", behavior)
        )


def load_template(template_id: str) -> PromptTemplate:
    if template_id not in TEMPLATE_IDS:
        raise ValueError(f"unknown template {template_id!r}")
    body = resources.files("cdmil.templates").joinpath(f"{template_id}.txt").read_text("utf-8")
    return PromptTemplate(template_id, body)


def inference_template(schema: LabelSchema) -> PromptTemplate:
    return load_template(f"infer_{schema.dataset_id}")


@dataclass
class InferenceRun:
    utterance_ref: str
    provider_id: str
    with_elb: bool
    instances: list[DistortionInstance] = field(default_factory=list)
    dropped: list[tuple[object, str]] = field(default_factory=list)
    failed: str | None = None

    def instance_rows(self) -> list[dict]:
        return [
            {
                "utterance_id": self.utterance_ref,
                "provider": self.provider_id,
                "type": inst.type_label,
                "salience": inst.salience_raw,
                "relevant_text": inst.relevant_text,
            }
            for inst in self.instances
        ]

    def drop_rows(self) -> list[dict]:
        rows = [
            {"utterance_id": self.utterance_ref, "provider": self.provider_id, "raw": raw, "reason": reason}
            for raw, reason in self.dropped
        ]
        if self.failed:
            rows.append(
                {"utterance_id": self.utterance_ref, "provider": self.provider_id, "raw": None, "reason": self.failed}
            )
        return rows


def parse_elb(raw_text: str) -> ELBComponents:
    payload = json.loads(extract_json_payload(raw_text))
    if not isinstance(payload, dict):
        raise ValueError("ELB response is not a JSON object")
    lowered = {str(k).strip().lower(): v for k, v in payload.items()}
    values = {}
    for key in ("emotion", "logic", "behavior"):
        v = lowered.get(key)
        values[key] = v.strip() if isinstance(v, str) and v.strip() else NOT_APPLICABLE
    return ELBComponents(**values)


def extract_elb(utterance: Utterance, provider: ProviderConfig, gateway: LLMGateway) -> ELBComponents:
    """Ask ``provider`` for the Emotion/Logic/Behavior summary of one utterance."""
    prompt = load_template("elb").render(utterance.text)
    last = None
    for attempt in range(2):
        raw = gateway.complete(provider, prompt, attempt=attempt)
        try:
            return parse_elb(raw)
        except (NoJsonFound, ValueError) as exc:
            last = exc
            log.warning("malformed ELB response for %s from %s: %s", utterance.id, provider.provider_id, exc)
    raise MalformedElbJson(f"utterance {utterance.id!r}, provider {provider.provider_id!r}: {last}")


def _salience_value(obj: dict):
    for key in SALIENCE_KEYS:
        if key in obj:
            return obj[key], True
    for key in obj:
        if isinstance(key, str) and key.strip().lower().replace("_", " ") == "salience score":
            return obj[key], True
    return None, False


def parse_instance_objects(
    items: Sequence, schema: LabelSchema, provider_id: str
) -> tuple[list[DistortionInstance], list[tuple[object, str]]]:
    """Validate decoded response objects; invalid ones go to the drop list with a reason."""
    kept, dropped = [], []
    for obj in items:
        if not isinstance(obj, dict):
            dropped.append((obj, "NotAnObject"))
            continue
        raw_type = obj.get("type")
        if not isinstance(raw_type, str) or not raw_type.strip():
            dropped.append((obj, "MissingType"))
            continue
        try:
            label = canonicalize_label(raw_type, schema)
        except UnknownLabel:
            log.info("dropping unknown label %r from %s", raw_type, provider_id)
            dropped.append((obj, "UnknownLabel"))
            continue
        value, present = _salience_value(obj)
        if not present:
            dropped.append((obj, "MissingSalience"))
            continue
        if isinstance(value, bool):
            dropped.append((obj, "NonNumericSalience"))
            continue
        try:
            s = float(value)
        except (TypeError, ValueError):
            dropped.append((obj, "NonNumericSalience"))
            continue
        if not math.isfinite(s):
            dropped.append((obj, "NonFiniteSalience"))
            continue
        if s < 0:
            log.warning("clamping negative salience %r to 0 (%s, %s)", s, provider_id, label)
            s = 0.0
        text = obj.get("relevant_text")
        if not isinstance(text, str) or not text.strip():
            dropped.append((obj, "EmptyRelevantText"))
            continue
        kept.append(DistortionInstance(label, text.strip(), s, provider_id))
    return kept, dropped


def _as_instance_list(payload) -> list:
    if isinstance(payload, list):
        return payload
    if isinstance(payload, dict):
        if "type" in payload:
            return [payload]
        lists = [v for v in payload.values() if isinstance(v, list)]
        if len(lists) == 1:
            return lists[0]
    raise ValueError("response is not a JSON array of instances")


def parse_instance_response(raw_text: str, schema: LabelSchema, provider_id: str):
    """Raw completion text -> ``(instances, drops)``.

    Raises ``MalformedInstanceJson`` when no usable JSON array is present.
    """
    try:
        items = _as_instance_list(json.loads(extract_json_payload(raw_text)))
    except (NoJsonFound, ValueError) as exc:
        raise MalformedInstanceJson(str(exc)) from exc
    return parse_instance_objects(items, schema, provider_id)


def infer_instances(
    utterance: Utterance,
    elb: ELBComponents | None,
    provider: ProviderConfig,
    schema: LabelSchema,
    gateway: LLMGateway,
    with_elb: bool | None = None,
) -> InferenceRun:
    """Mine distortion instances for one utterance from one provider."""
    if with_elb is None:
        with_elb = elb is not None
    if with_elb and elb is None:
        raise ValueError("with_elb=True needs ELB components")
    if utterance.dataset_id != schema.dataset_id:
        raise ValueError("utterance and schema belong to different datasets")
    prompt = inference_template(schema).render(utterance.text, elb if with_elb else None)
    last = None
    for attempt in range(2):
        raw = gateway.complete(provider, prompt, attempt=attempt)
        try:
            kept, dropped = parse_instance_response(raw, schema, provider.provider_id)
        except MalformedInstanceJson as exc:
            last = exc
            log.warning("malformed instance response for %s from %s: %s", utterance.id, provider.provider_id, exc)
            continue
        return InferenceRun(utterance.id, provider.provider_id, with_elb, kept, dropped)
    raise MalformedInstanceJson(f"utterance {utterance.id!r}, provider {provider.provider_id!r}: {last}")


def run_elb_extraction(
    utterances: Sequence[Utterance],
    provider: ProviderConfig,
    gateway: LLMGateway,
    workers: int = 4,
) -> tuple[dict[str, ELBComponents], list[dict]]:
    """ELB for every utterance; failures are reported, not raised."""

    def one(u):
        try:
            return u.id, extract_elb(u, provider, gateway), None
        except UserError:
            raise
        except CdmilError as exc:
            return u.id, None, {"utterance_id": u.id, "provider": provider.provider_id, "reason": type(exc).__name__, "detail": str(exc)}

    results, failures = {}, []
    with ThreadPoolExecutor(max_workers=max(1, workers)) as pool:
        for uid, elb, fail in pool.map(one, utterances):
            if fail:
                failures.append(fail)
            else:
                results[uid] = elb
    return results, failures


def run_inference(
    utterances: Sequence[Utterance],
    providers: Sequence[ProviderConfig],
    schema: LabelSchema,
    gateway: LLMGateway,
    elb_map: Mapping[str, ELBComponents] | None = None,
    workers: int = 4,
) -> list[InferenceRun]:
    """Every (utterance, provider) pair, returned in (utterance, provider) order.

    With ``elb_map`` given, the ELB-conditioned prompt is used; utterances
    whose ELB extraction failed fall back to ``Not applicable`` components.
    A pair whose response stays unparseable is returned with ``failed`` set.
    """
    with_elb = elb_map is not None
    jobs = [(u, p) for u in utterances for p in providers]

    def one(job):
        u, p = job
        elb = (elb_map.get(u.id) or ELBComponents()) if with_elb else None
        try:
            return infer_instances(u, elb, p, schema, gateway, with_elb=with_elb)
        except UserError:
            raise
        except CdmilError as exc:
            log.error("inference failed for %s/%s: %s", u.id, p.provider_id, exc)
            return InferenceRun(u.id, p.provider_id, with_elb, failed=type(exc).__name__)

    with ThreadPoolExecutor(max_workers=max(1, workers)) as pool:
        return list(pool.map(one, jobs))


def runs_from_rows(rows: Iterable[dict], with_elb: bool = True) -> list[InferenceRun]:
    """Rebuild runs from instance JSONL rows, keeping file order."""
    runs: dict[tuple[str, str], InferenceRun] = {}
    for row in rows:
        key = (row["utterance_id"], row["provider"])
        run = runs.get(key)
        if run is None:
            run = runs[key] = InferenceRun(row["utterance_id"], row["provider"], with_elb)
        run.instances.append(
            DistortionInstance(row["type"], row["relevant_text"], float(row["salience"]), row["provider"])
        )
    return list(runs.values())
