"""Domain types, label taxonomies and label canonicalization."""

from __future__ import annotations

import json
import math
import random
import re
from collections import defaultdict
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Iterable, Mapping, Sequence

from .exceptions import EmptyDataset, UnknownLabel

__all__ = [
    "DATASETS",
    "SPLITS",
    "NOT_APPLICABLE",
    "LabelSchema",
    "Utterance",
    "ELBComponents",
    "DistortionInstance",
    "Bag",
    "get_schema",
    "load_schemas",
    "canonicalize_label",
    "split_dataset",
    "split_counts",
    "read_utterances",
    "write_splits",
    "read_jsonl",
    "write_jsonl",
]

DATASETS = ("koacd", "therapist_qa")
SPLITS = ("train", "val", "test")
NOT_APPLICABLE = "Not applicable"

_PAREN_SUFFIX = re.compile(r"\s*[\(\[].*?[\)\]]\s*$")
_WS = re.compile(r"\s+")


def _alias_key(raw: str) -> str:
    s = raw.strip().strip("\"'`“”‘’ ").strip()
    s = s.replace("‘", "'").replace("’", "'")
    s = s.replace("“", '"').replace("”", '"')
    return _WS.sub(" ", s).casefold()


@dataclass(frozen=True)
class LabelSchema:
    dataset_id: str
    labels: tuple[str, ...]
    aliases: Mapping[str, str] = field(default_factory=dict)

    def __post_init__(self):
        if self.dataset_id not in DATASETS:
            raise ValueError(f"unknown dataset id {self.dataset_id!r}")
        if len(self.labels) != 10 or len(set(self.labels)) != 10:
            raise ValueError("a label schema needs exactly 10 distinct labels")
        table = {}
        for label in self.labels:
            table[_alias_key(label)] = label
        for variant, target in self.aliases.items():
            if target not in self.labels:
                raise ValueError(f"alias {variant!r} points at unknown label {target!r}")
            table[_alias_key(variant)] = target
        object.__setattr__(self, "aliases", table)

    @property
    def num_classes(self) -> int:
        return len(self.labels)

    def index(self, label: str) -> int:
        return self.labels.index(label)

    def canonicalize(self, raw: str) -> str:
        return canonicalize_label(raw, self)


def load_schemas(path: str | Path | None = None) -> dict[str, LabelSchema]:
    """Load both taxonomies from the alias table (the packaged one by default)."""
    if path is None:
        text = resources.files("cdmil.data").joinpath("labels.json").read_text("utf-8")
    else:
        text = Path(path).read_text("utf-8")
    raw = json.loads(text)
    return {
        ds: LabelSchema(ds, tuple(entry["labels"]), dict(entry.get("aliases", {})))
        for ds, entry in raw.items()
    }


_SCHEMAS: dict[str, LabelSchema] | None = None


def get_schema(dataset_id: str) -> LabelSchema:
    global _SCHEMAS
    if _SCHEMAS is None:
        _SCHEMAS = load_schemas()
    try:
        return _SCHEMAS[dataset_id]
    except KeyError:
        raise ValueError(f"unknown dataset id {dataset_id!r}") from None


def canonicalize_label(raw: str, schema: LabelSchema) -> str:
    """Map an LLM-emitted type string onto the schema's canonical name.

    Lookup is case-insensitive and whitespace-trimmed; a trailing
    parenthetical such as ``"(black and white thinking)"`` is tried both
    with and without.  Raises :class:`UnknownLabel` when nothing matches.
    """
    if not isinstance(raw, str):
        raise UnknownLabel(raw)
    key = _alias_key(raw)
    if key in schema.aliases:
        return schema.aliases[key]
    stripped = _PAREN_SUFFIX.sub("", key).strip()
    if stripped and stripped in schema.aliases:
        return schema.aliases[stripped]
    raise UnknownLabel(raw)


@dataclass(frozen=True)
class Utterance:
    id: str
    text: str
    gold_labels: tuple[str, ...]
    dataset_id: str
    split: str | None = None

    def __post_init__(self):
        if not self.id:
            raise ValueError("utterance id must be non-empty")
        if not self.text or not self.text.strip():
            raise ValueError(f"utterance {self.id!r} has empty text")
        schema = get_schema(self.dataset_id)
        if not self.gold_labels:
            raise ValueError(f"utterance {self.id!r} has no gold label")
        limit = 1 if self.dataset_id == "koacd" else 2
        if len(self.gold_labels) > limit:
            raise ValueError(
                f"utterance {self.id!r}: {self.dataset_id} allows at most {limit} gold labels"
            )
        canon = tuple(canonicalize_label(g, schema) for g in self.gold_labels)
        object.__setattr__(self, "gold_labels", canon)
        if self.split is not None and self.split not in SPLITS:
            raise ValueError(f"bad split {self.split!r}")

    @property
    def target(self) -> str:
        """The label used for training and scoring (the first gold label)."""
        return self.gold_labels[0]

    def to_json(self) -> dict:
        return {
            "id": self.id,
            "text": self.text,
            "gold_labels": list(self.gold_labels),
            "dataset": self.dataset_id,
        }


@dataclass(frozen=True)
class ELBComponents:
    emotion: str = NOT_APPLICABLE
    logic: str = NOT_APPLICABLE
    behavior: str = NOT_APPLICABLE

    def __post_init__(self):
        for name in ("emotion", "logic", "behavior"):
            value = getattr(self, name)
            if not isinstance(value, str) or not value.strip():
                object.__setattr__(self, name, NOT_APPLICABLE)
            else:
                object.__setattr__(self, name, " ".join(value.split()))


@dataclass(frozen=True)
class DistortionInstance:
    type_label: str
    relevant_text: str
    salience_raw: float
    provider_id: str

    def __post_init__(self):
        if not self.relevant_text or not self.relevant_text.strip():
            raise ValueError("relevant_text must be non-empty")
        s = float(self.salience_raw)
        if not math.isfinite(s) or s < 0:
            raise ValueError(f"salience must be finite and >= 0, got {self.salience_raw!r}")
        object.__setattr__(self, "salience_raw", s)


@dataclass(frozen=True)
class Bag:
    utterance_ref: str
    instances: tuple[DistortionInstance, ...]
    normalized_salience: tuple[float, ...]
    gold_labels: tuple[str, ...]
    text: str = ""

    def __post_init__(self):
        if len(self.instances) == 0:
            raise ValueError("a bag needs at least one instance")
        if len(self.normalized_salience) != len(self.instances):
            raise ValueError("one normalized salience per instance")

    def __len__(self):
        return len(self.instances)

    @property
    def target(self) -> str:
        return self.gold_labels[0]


def split_counts(n: int, ratios: Sequence[float] = (0.8, 0.1, 0.1)) -> tuple[int, int, int]:
    """Sizes of train/val/test: floor for train and val, the remainder goes to test."""
    n_train = math.floor(ratios[0] * n + 1e-9)
    n_val = math.floor(ratios[1] * n + 1e-9)
    return n_train, n_val, n - n_train - n_val


def split_dataset(
    utterances: Iterable[Utterance],
    ratios: Sequence[float] = (0.8, 0.1, 0.1),
    seed: int = 0,
) -> dict[str, str]:
    """Seeded split stratified by first gold label.

    Global sizes come from :func:`split_counts`.  Within each label stratum the
    members are shuffled and spread evenly over a unit interval; the merged
    order is then cut into train/val/test, which keeps every stratum close to
    the requested ratios.  The result does not depend on input order.
    """
    items = sorted(utterances, key=lambda u: u.id)
    if not items:
        raise EmptyDataset("cannot split an empty dataset")
    if len(ratios) != 3 or abs(sum(ratios) - 1.0) > 1e-9 or min(ratios) < 0:
        raise ValueError(f"ratios must be three non-negative numbers summing to 1, got {ratios}")
    if len({u.id for u in items}) != len(items):
        raise ValueError("utterance ids must be unique")

    rng = random.Random(seed)
    strata: dict[str, list[Utterance]] = defaultdict(list)
    for u in items:
        strata[u.target].append(u)

    keyed = []
    for label in sorted(strata):
        members = strata[label]
        rng.shuffle(members)
        size = len(members)
        for rank, u in enumerate(members):
            keyed.append(((rank + rng.random()) / size, u.id))
    keyed.sort()

    n_train, n_val, _ = split_counts(len(items), ratios)
    out = {}
    for pos, (_, uid) in enumerate(keyed):
        if pos < n_train:
            out[uid] = "train"
        elif pos < n_train + n_val:
            out[uid] = "val"
        else:
            out[uid] = "test"
    return out


def read_jsonl(path: str | Path) -> list[dict]:
    rows = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.strip()
            if not line:
                continue
            try:
                rows.append(json.loads(line))
            except json.JSONDecodeError as exc:
                raise ValueError(f"{path}:{lineno}: invalid JSON ({exc})") from exc
    return rows


def write_jsonl(path: str | Path, rows: Iterable[Mapping]) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for row in rows:
            fh.write(json.dumps(row, ensure_ascii=False, sort_keys=False))
            fh.write("\n")


def read_utterances(path: str | Path, dataset_id: str | None = None) -> list[Utterance]:
    """Read ``{"id","text","gold_labels","dataset"}`` records."""
    out = []
    for row in read_jsonl(path):
        ds = row.get("dataset", dataset_id)
        if dataset_id is not None and ds != dataset_id:
            raise ValueError(f"utterance {row.get('id')!r} belongs to {ds!r}, expected {dataset_id!r}")
        labels = row["gold_labels"]
        if isinstance(labels, str):
            labels = [labels]
        out.append(
            Utterance(
                id=str(row["id"]),
                text=row["text"],
                gold_labels=tuple(labels),
                dataset_id=ds,
                split=row.get("split"),
            )
        )
    return out


def write_splits(path: str | Path, assignment: Mapping[str, str]) -> None:
    write_jsonl(path, ({"id": uid, "split": assignment[uid]} for uid in sorted(assignment)))
