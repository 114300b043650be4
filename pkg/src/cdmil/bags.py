"""Bag construction, salience normalization, missing rates and instance statistics."""

from __future__ import annotations

import logging
from collections import Counter, defaultdict
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

from .exceptions import EmptyBag
from .prompts import InferenceRun
from .schema import Bag, DistortionInstance, LabelSchema, Utterance

log = logging.getLogger(__name__)


def normalize_salience(saliences: Sequence[float]) -> list[float]:
    """Divide each score by the bag total; all-zero bags get uniform weights."""
    n = len(saliences)
    if n == 0:
        return []
    total = float(sum(saliences))
    if total <= 0.0:
        return [1.0 / n] * n
    return [float(s) / total for s in saliences]


def build_bag(utterance: Utterance, runs: Sequence[InferenceRun]) -> Bag:
    """Concatenate the instances of every run (in the given provider order)
    and normalize salience over the combined list.  No deduplication.
    """
    instances: list[DistortionInstance] = []
    for run in runs:
        if run.utterance_ref != utterance.id:
            raise ValueError(f"run for {run.utterance_ref!r} passed to bag {utterance.id!r}")
        instances.extend(run.instances)
    if not instances:
        raise EmptyBag(utterance.id)
    p_hat = normalize_salience([inst.salience_raw for inst in instances])
    return Bag(utterance.id, tuple(instances), tuple(p_hat), utterance.gold_labels, utterance.text)


def build_bags(
    utterances: Sequence[Utterance],
    runs: Iterable[InferenceRun],
    provider_order: Sequence[str] | None = None,
) -> tuple[list[Bag], list[str]]:
    """Bags for every utterance plus the ids that ended up empty."""
    by_utt: dict[str, list[InferenceRun]] = defaultdict(list)
    for run in runs:
        by_utt[run.utterance_ref].append(run)
    if provider_order is not None:
        rank = {pid: i for i, pid in enumerate(provider_order)}
        for lst in by_utt.values():
            lst.sort(key=lambda r: rank.get(r.provider_id, len(rank)))
    bags, empty = [], []
    for u in utterances:
        try:
            bags.append(build_bag(u, by_utt.get(u.id, [])))
        except EmptyBag:
            log.warning("utterance %s has no valid instances; excluded", u.id)
            empty.append(u.id)
    return bags, empty


def bag_to_json(bag: Bag) -> dict:
    return {
        "utterance_id": bag.utterance_ref,
        "gold_labels": list(bag.gold_labels),
        "text": bag.text,
        "instances": [
            {
                "type": inst.type_label,
                "salience": inst.salience_raw,
                "p_hat": p,
                "relevant_text": inst.relevant_text,
                "provider": inst.provider_id,
            }
            for inst, p in zip(bag.instances, bag.normalized_salience)
        ],
    }


def bag_from_json(row: Mapping) -> Bag:
    instances = tuple(
        DistortionInstance(i["type"], i["relevant_text"], float(i["salience"]), i["provider"])
        for i in row["instances"]
    )
    p_hat = tuple(float(i["p_hat"]) for i in row["instances"])
    return Bag(row["utterance_id"], instances, p_hat, tuple(row["gold_labels"]), row.get("text", ""))


@dataclass
class MissingReport:
    per_type_missing_rate: dict[str, float]
    overall_missing_rate: float
    missing_bag_ids: list[str] = field(default_factory=list)
    per_type_counts: dict[str, tuple[int, int]] = field(default_factory=dict)

    def to_json(self) -> dict:
        return {
            "per_type_missing_rate": self.per_type_missing_rate,
            "overall_missing_rate": self.overall_missing_rate,
            "missing_bag_ids": self.missing_bag_ids,
            "per_type_counts": {k: list(v) for k, v in self.per_type_counts.items()},
        }


def is_missing(bag: Bag) -> bool:
    gold = set(bag.gold_labels)
    return not any(inst.type_label in gold for inst in bag.instances)


def missing_rate(bags: Sequence[Bag], schema: LabelSchema) -> MissingReport:
    """Share of bags (in percent) where no instance carries a gold label.

    Per-type rates group bags by their first gold label; types with no bags
    report 0.0.
    """
    totals = Counter()
    misses = Counter()
    missing_ids = []
    for bag in bags:
        if bag.target not in schema.labels:
            raise ValueError(f"bag {bag.utterance_ref!r} label {bag.target!r} not in schema")
        totals[bag.target] += 1
        if is_missing(bag):
            misses[bag.target] += 1
            missing_ids.append(bag.utterance_ref)
    per_type = {
        label: (100.0 * misses[label] / totals[label]) if totals[label] else 0.0
        for label in schema.labels
    }
    overall = 100.0 * len(missing_ids) / len(bags) if bags else 0.0
    counts = {label: (misses[label], totals[label]) for label in schema.labels}
    return MissingReport(per_type, overall, missing_ids, counts)


@dataclass
class BagStats:
    total_instances: int
    min_per_bag: int
    max_per_bag: int
    avg_per_bag: float
    per_type_counts: dict[str, tuple[int, float]]
    num_bags: int = 0

    def to_json(self) -> dict:
        return {
            "num_bags": self.num_bags,
            "total_instances": self.total_instances,
            "min_per_bag": self.min_per_bag,
            "max_per_bag": self.max_per_bag,
            "avg_per_bag": round(self.avg_per_bag, 2),
            "per_type_counts": {k: {"count": c, "percent": p} for k, (c, p) in self.per_type_counts.items()},
        }


def bag_stats(bags: Sequence[Bag], labels: Sequence[str] | None = None) -> BagStats:
    if not bags:
        raise ValueError("bag_stats needs at least one bag")
    sizes = [len(b) for b in bags]
    total = sum(sizes)
    counts = Counter(inst.type_label for b in bags for inst in b.instances)
    names = list(labels) if labels is not None else sorted(counts)
    for extra in sorted(set(counts) - set(names)):
        names.append(extra)
    per_type = {
        name: (counts.get(name, 0), round(100.0 * counts.get(name, 0) / total, 1)) for name in names
    }
    return BagStats(total, min(sizes), max(sizes), total / len(bags), per_type, len(bags))


def format_bag_stats(stats: BagStats, title: str = "Instance Distribution") -> str:
    rows = [
        ("Total Instances", f"{stats.total_instances:,}"),
        ("Min Instances per Bag", str(stats.min_per_bag)),
        ("Max Instances per Bag", str(stats.max_per_bag)),
        ("Avg. Instances per Bag", f"{stats.avg_per_bag:.2f}"),
    ]
    ordered = sorted(stats.per_type_counts.items(), key=lambda kv: (-kv[1][0], kv[0]))
    type_rows = [(name, f"{c:,} ({p:.1f}%)") for name, (c, p) in ordered]
    type_rows.append(("Total", f"{stats.total_instances:,} (100.0%)"))
    width = max(len(r[0]) for r in rows + type_rows + [("Cognitive Distortion Type", "")])
    vwidth = max(len(r[1]) for r in rows + type_rows + [("", "# Instances (%)")])
    lines = [title, "-" * (width + vwidth + 2)]
    lines.append(f"{'Instance Statistics':<{width}}  {'Value':>{vwidth}}")
    lines += [f"{a:<{width}}  {b:>{vwidth}}" for a, b in rows]
    lines.append("-" * (width + vwidth + 2))
    lines.append(f"{'Cognitive Distortion Type':<{width}}  {'# Instances (%)':>{vwidth}}")
    lines += [f"{a:<{width}}  {b:>{vwidth}}" for a, b in type_rows]
    return "\n".join(lines) + "\n"


def format_missing(with_elb: MissingReport | None, without_elb: MissingReport | None, labels: Sequence[str]) -> str:
    width = max(len(x) for x in list(labels) + ["Overall"])
    lines = [f"{'Type':<{width}}  {'w/o ELB':>8}  {'with ELB':>8}"]

    def cell(rep, label):
        if rep is None:
            return f"{'-':>8}"
        v = rep.overall_missing_rate if label == "Overall" else rep.per_type_missing_rate[label]
        return f"{v:>7.2f}%"

    for label in list(labels) + ["Overall"]:
        lines.append(f"{label:<{width}}  {cell(without_elb, label)}  {cell(with_elb, label)}")
    return "\n".join(lines) + "\n"
