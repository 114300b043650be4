"""Stage orchestration for the full experiment.

Stages run in this order and communicate only through files in the output
directory; each one records a manifest under ``manifests/`` with the digest
of every file it read and wrote, and refuses to run when an upstream file is
missing or no longer matches its manifest.
"""

from __future__ import annotations

import hashlib
import json
import logging
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import bags as bagmod
from .embedding import corpus_n_max, make_backend, assemble
from .exceptions import ConfigInvalid, MissingUpstream
from .llm import LLMGateway, ProviderConfig
from .metrics import (
    CONDITION_ORDER,
    evaluate,
    format_condition_table,
    format_per_type_table,
    summarize_runs,
)
from .mil import ModelParams, TrainConfig, load_checkpoint, predict, save_checkpoint, train, write_history
from .prompts import run_elb_extraction, run_inference, runs_from_rows
from .schema import (
    ELBComponents,
    get_schema,
    read_jsonl,
    read_utterances,
    split_counts,
    split_dataset,
    write_jsonl,
    write_splits,
)

log = logging.getLogger(__name__)

STAGES = ("extract-elb", "infer", "build-bags", "embed", "train", "evaluate", "report", "stats")

# condition name -> (with_elb, use_salience)
CONDITIONS = {
    "Baseline": (False, False),
    "ELB": (True, False),
    "Salience": (False, True),
    "ELB + Salience": (True, True),
}


def corpus_name(with_elb: bool) -> str:
    return "elb" if with_elb else "noelb"


def slug(name: str) -> str:
    return re.sub(r"[^a-z0-9]+", "_", name.lower()).strip("_")


def file_digest(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


@dataclass
class ExperimentConfig:
    dataset_path: Path
    schema_id: str
    providers: list[ProviderConfig]
    output_dir: Path
    cache_dir: Path
    conditions: list[str] = field(default_factory=lambda: list(CONDITION_ORDER))
    elb_provider: str | None = None
    embedding: dict = field(default_factory=lambda: {"backend": "test_hash", "dimension": 384})
    train: TrainConfig = field(default_factory=TrainConfig)
    hidden_dim: int = 128
    n_views: int = 4
    runs: int = 10
    seeds: list[int] = field(default_factory=lambda: list(range(10)))
    ratios: tuple[float, float, float] = (0.8, 0.1, 0.1)
    workers: int = 4
    lenient: bool = False
    salience_mode: str = "normalized"
    raw: dict = field(default_factory=dict, repr=False)

    @classmethod
    def from_dict(cls, d: dict, base_dir: Path | None = None) -> "ExperimentConfig":
        base = Path(base_dir or ".")

        def resolve(p):
            p = Path(p)
            return p if p.is_absolute() else base / p

        try:
            ds = d["dataset"]
            providers = [ProviderConfig.from_dict(p) for p in d.get("providers", [])]
            if not providers:
                raise ConfigInvalid("at least one provider is required")
            ids = [p.provider_id for p in providers]
            if len(set(ids)) != len(ids):
                raise ConfigInvalid("provider ids must be unique")

            if "conditions" in d:
                conditions = list(d["conditions"])
            elif "with_elb" in d or "use_salience" in d:
                key = (bool(d.get("with_elb", True)), bool(d.get("use_salience", True)))
                conditions = [n for n, v in CONDITIONS.items() if v == key]
            else:
                conditions = list(CONDITION_ORDER)
            bad = [c for c in conditions if c not in CONDITIONS]
            if bad or not conditions:
                raise ConfigInvalid(f"unknown conditions {bad}; choose from {list(CONDITIONS)}")

            runs = int(d.get("runs", 10))
            seeds = [int(s) for s in d.get("seeds", range(runs))]
            if len(seeds) != runs:
                raise ConfigInvalid(f"{runs} runs but {len(seeds)} seeds")
            if runs < 2:
                raise ConfigInvalid("at least 2 runs are needed for mean ± std")

            model = d.get("model", {})
            output_dir = resolve(d.get("output_dir", "output"))
            cfg = cls(
                dataset_path=resolve(ds["path"]),
                schema_id=ds["schema"],
                providers=providers,
                output_dir=output_dir,
                cache_dir=resolve(d["cache_dir"]) if "cache_dir" in d else output_dir / "cache",
                conditions=conditions,
                elb_provider=d.get("elb_provider"),
                embedding=dict(d.get("embedding", {"backend": "test_hash", "dimension": 384})),
                train=TrainConfig.from_dict(d.get("train", {})),
                hidden_dim=int(model.get("hidden_dim", 128)),
                n_views=int(model.get("n_views", 4)),
                runs=runs,
                seeds=seeds,
                ratios=tuple(d.get("ratios", (0.8, 0.1, 0.1))),
                workers=int(d.get("workers", 4)),
                lenient=bool(d.get("lenient", False)),
                salience_mode=d.get("salience_mode", "normalized"),
                raw=d,
            )
        except ConfigInvalid:
            raise
        except (KeyError, TypeError, ValueError) as exc:
            raise ConfigInvalid(f"invalid config: {exc}") from exc
        if cfg.schema_id not in ("koacd", "therapist_qa"):
            raise ConfigInvalid(f"unknown schema {cfg.schema_id!r}")
        if cfg.elb_provider is not None and cfg.elb_provider not in ids:
            raise ConfigInvalid(f"elb_provider {cfg.elb_provider!r} is not a configured provider")
        if cfg.salience_mode not in ("normalized", "raw"):
            raise ConfigInvalid("salience_mode must be 'normalized' or 'raw'")
        if "path" in cfg.embedding:
            cfg.embedding["path"] = str(resolve(cfg.embedding["path"]))
        return cfg

    @classmethod
    def load(cls, path: str | Path) -> "ExperimentConfig":
        path = Path(path)
        try:
            d = json.loads(path.read_text("utf-8"))
        except FileNotFoundError:
            raise ConfigInvalid(f"config file not found: {path}") from None
        except json.JSONDecodeError as exc:
            raise ConfigInvalid(f"{path}: {exc}") from exc
        return cls.from_dict(d, path.parent)

    def digest(self) -> str:
        # location-independent: output and cache paths are not part of the digest
        d = {k: v for k, v in self.raw.items() if k not in ("output_dir", "cache_dir")}
        return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()[:16]

    @property
    def corpora(self) -> list[str]:
        needed = {corpus_name(CONDITIONS[c][0]) for c in self.conditions}
        return [c for c in ("elb", "noelb") if c in needed]

    @property
    def schema(self):
        return get_schema(self.schema_id)

    def elb_provider_config(self) -> ProviderConfig:
        if self.elb_provider is None:
            return self.providers[0]
        return next(p for p in self.providers if p.provider_id == self.elb_provider)


class Experiment:
    def __init__(self, config: ExperimentConfig, gateway: LLMGateway | None = None):
        self.cfg = config
        self.out = Path(config.output_dir)
        self.gateway = gateway or LLMGateway(config.cache_dir)
        self._utterances = None

    # -- helpers -----------------------------------------------------------

    def path(self, name: str) -> Path:
        return self.out / name

    def utterances(self):
        if self._utterances is None:
            if not self.cfg.dataset_path.exists():
                raise MissingUpstream(f"dataset not found: {self.cfg.dataset_path}")
            self._utterances = read_utterances(self.cfg.dataset_path, self.cfg.schema_id)
        return self._utterances

    def _manifest_path(self, stage):
        return self.out / "manifests" / f"{stage}.json"

    def _require(self, stage: str, names: Sequence[str]) -> dict:
        """Check that ``stage`` ran and that ``names`` still match its manifest."""
        mpath = self._manifest_path(stage)
        if not mpath.exists():
            raise MissingUpstream(f"stage {stage!r} has not been run (no {mpath})")
        manifest = json.loads(mpath.read_text("utf-8"))
        for name in names:
            p = self.path(name)
            if not p.exists():
                raise MissingUpstream(f"{p} is missing; re-run stage {stage!r}")
            recorded = manifest["outputs"].get(name)
            if recorded is None or recorded != file_digest(p):
                raise MissingUpstream(f"{p} does not match the {stage!r} manifest; re-run that stage")
        return {name: manifest["outputs"][name] for name in names}

    def _write_manifest(self, stage: str, inputs: dict, outputs: Sequence[str], extra: dict | None = None):
        manifest = {
            "stage": stage,
            "config_digest": self.cfg.digest(),
            "seeds": self.cfg.seeds,
            "inputs": dict(sorted(inputs.items())),
            "outputs": {name: file_digest(self.path(name)) for name in sorted(outputs)},
        }
        if extra:
            manifest.update(extra)
        mpath = self._manifest_path(stage)
        mpath.parent.mkdir(parents=True, exist_ok=True)
        mpath.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n", "utf-8")

    def _dataset_input(self) -> dict:
        return {"dataset": file_digest(self.cfg.dataset_path)}

    def _write_json(self, name, obj):
        p = self.path(name)
        p.parent.mkdir(parents=True, exist_ok=True)
        p.write_text(json.dumps(obj, indent=2, ensure_ascii=False, sort_keys=False) + "\n", "utf-8")

    def _write_text(self, name, text):
        p = self.path(name)
        p.parent.mkdir(parents=True, exist_ok=True)
        p.write_text(text, "utf-8")

    # -- stages ------------------------------------------------------------

    def run_stage(self, stage: str):
        if stage not in STAGES:
            raise ConfigInvalid(f"unknown stage {stage!r}")
        self.out.mkdir(parents=True, exist_ok=True)
        log.info("stage %s", stage)
        getattr(self, "stage_" + stage.replace("-", "_"))()

    def run_all(self):
        for stage in STAGES:
            self.run_stage(stage)

    def stage_extract_elb(self):
        utts = self.utterances()
        self.gateway.used_keys.clear()
        outputs = []
        if "elb" in self.cfg.corpora:
            provider = self.cfg.elb_provider_config()
            elbs, failures = run_elb_extraction(utts, provider, self.gateway, self.cfg.workers)
            rows = [
                {"utterance_id": u.id, "provider": provider.provider_id, "emotion": e.emotion, "logic": e.logic, "behavior": e.behavior}
                for u in utts
                if (e := elbs.get(u.id)) is not None
            ]
            write_jsonl(self.path("elb.jsonl"), rows)
            write_jsonl(self.path("elb_failures.jsonl"), failures)
            outputs = ["elb.jsonl", "elb_failures.jsonl"]
        self._write_manifest("extract-elb", self._dataset_input(), outputs, {"cache_snapshot": self._snapshot()})

    def _snapshot(self):
        # only the entries this stage read or wrote, so reruns match
        keys = sorted(self.gateway.used_keys)
        self.gateway.used_keys.clear()
        if self.gateway.cache is None:
            return None
        return {"entries": len(keys), "digest": self.gateway.cache.snapshot_id(keys)}

    def stage_infer(self):
        utts = self.utterances()
        self.gateway.used_keys.clear()
        inputs = self._dataset_input()
        outputs = []
        for corpus in self.cfg.corpora:
            elb_map = None
            if corpus == "elb":
                inputs.update(self._require("extract-elb", ["elb.jsonl"]))
                elb_map = {
                    r["utterance_id"]: ELBComponents(r["emotion"], r["logic"], r["behavior"])
                    for r in read_jsonl(self.path("elb.jsonl"))
                }
            runs = run_inference(utts, self.cfg.providers, self.cfg.schema, self.gateway, elb_map, self.cfg.workers)
            write_jsonl(self.path(f"instances_{corpus}.jsonl"), (row for r in runs for row in r.instance_rows()))
            write_jsonl(self.path(f"drops_{corpus}.jsonl"), (row for r in runs for row in r.drop_rows()))
            outputs += [f"instances_{corpus}.jsonl", f"drops_{corpus}.jsonl"]
        self._write_manifest("infer", inputs, outputs, {"cache_snapshot": self._snapshot()})

    def stage_build_bags(self):
        utts = self.utterances()
        inputs = self._dataset_input()
        outputs = []
        order = [p.provider_id for p in self.cfg.providers]
        for corpus in self.cfg.corpora:
            name = f"instances_{corpus}.jsonl"
            inputs.update(self._require("infer", [name]))
            runs = runs_from_rows(read_jsonl(self.path(name)), corpus == "elb")
            bags, empty = bagmod.build_bags(utts, runs, order)
            write_jsonl(self.path(f"bags_{corpus}.jsonl"), (bagmod.bag_to_json(b) for b in bags))
            self._write_json(f"empty_bags_{corpus}.json", {"count": len(empty), "utterance_ids": empty})
            outputs += [f"bags_{corpus}.jsonl", f"empty_bags_{corpus}.json"]
        self._write_manifest("build-bags", inputs, outputs)

    def _bags(self, corpus):
        return [bagmod.bag_from_json(r) for r in read_jsonl(self.path(f"bags_{corpus}.jsonl"))]

    def stage_embed(self):
        backend = make_backend(self.cfg.embedding)
        schema = self.cfg.schema
        inputs, outputs = {}, []
        for corpus in self.cfg.corpora:
            inputs.update(self._require("build-bags", [f"bags_{corpus}.jsonl"]))
            bags = self._bags(corpus)
            if not bags:
                raise MissingUpstream(f"no bags in corpus {corpus!r}")
            n_max = corpus_n_max(bags)
            sal = [assemble(b, backend, n_max, True, schema, salience_mode=self.cfg.salience_mode) for b in bags]
            uniform = np.stack([eb.mask / eb.mask.sum() for eb in sal])
            name = f"embedded_{corpus}.npz"
            with open(self.path(name), "wb") as fh:
                np.savez(
                    fh,
                    ids=np.asarray([eb.utterance_id for eb in sal], dtype=str),
                    z=np.stack([eb.z for eb in sal]),
                    X=np.stack([eb.X for eb in sal]),
                    mask=np.stack([eb.mask for eb in sal]),
                    p_salience=np.stack([eb.p for eb in sal]),
                    p_uniform=uniform,
                    y=np.stack([eb.y for eb in sal]),
                )
            outputs.append(name)
        self._write_manifest(
            "embed", inputs, outputs, {"embedding": {k: v for k, v in self.cfg.embedding.items() if k != "path"}}
        )

    def _load_embedded(self, corpus):
        with np.load(self.path(f"embedded_{corpus}.npz"), allow_pickle=False) as d:
            return {k: d[k] for k in d.files}

    def _split(self, r: int) -> dict[str, str]:
        return split_dataset(self.utterances(), self.cfg.ratios, self.cfg.seeds[r])

    def stage_train(self):
        schema = self.cfg.schema
        inputs = self._dataset_input()
        outputs = []
        data = {}
        for corpus in self.cfg.corpora:
            inputs.update(self._require("embed", [f"embedded_{corpus}.npz"]))
            data[corpus] = self._load_embedded(corpus)
        for r, seed in enumerate(self.cfg.seeds):
            split = self._split(r)
            write_splits(self.path(f"splits/run{r}.jsonl"), split)
            outputs.append(f"splits/run{r}.jsonl")
            for cond in self.cfg.conditions:
                with_elb, use_sal = CONDITIONS[cond]
                d = data[corpus_name(with_elb)]
                ids = [str(i) for i in d["ids"]]
                which = np.array([split[i] for i in ids])
                p = d["p_salience"] if use_sal else d["p_uniform"]
                arrays = (d["z"], d["X"], d["mask"], p)
                labels = d["y"].argmax(axis=1)

                def part(name):
                    idx = np.flatnonzero(which == name)
                    return tuple(a[idx] for a in arrays), labels[idx], idx

                (tr, ytr, _), (va, yva, va_idx), (te, _, te_idx) = part("train"), part("val"), part("test")
                if len(ytr) == 0 or len(yva) == 0:
                    raise MissingUpstream(f"run {r}: empty train or validation split for {cond}")
                tcfg = TrainConfig(**{**self.cfg.train.__dict__, "seed": seed})
                params0 = ModelParams.init(d["z"].shape[1], self.cfg.hidden_dim, self.cfg.n_views, schema.num_classes, np.random.default_rng(seed))
                best, history = train(params0, tr, ytr, va, yva, tcfg)
                best_epoch = min(history, key=lambda h: h["val_loss"])["epoch"]
                base = f"runs/{slug(cond)}/run{r}"
                save_checkpoint(self.path(base + ".ckpt"), best, seed, best_epoch)
                write_history(self.path(base + "_history.csv"), history)
                rows = []
                for split_name, part_arrays, idx in (("val", va, va_idx), ("test", te, te_idx)):
                    if len(idx) == 0:
                        continue
                    pred, probs = predict(best, part_arrays)
                    for j, k in enumerate(idx):
                        rows.append({
                            "utterance_id": ids[k],
                            "split": split_name,
                            "pred": schema.labels[int(pred[j])],
                            "gold": schema.labels[int(labels[k])],
                        })
                write_jsonl(self.path(base + "_predictions.jsonl"), rows)
                outputs += [base + ".ckpt", base + "_history.csv", base + "_predictions.jsonl"]
                log.info("%s run %d: %d epochs, best epoch %d", cond, r, len(history), best_epoch)
        self._write_manifest("train", inputs, outputs)

    def stage_evaluate(self):
        schema = self.cfg.schema
        gold_sets = {u.id: set(u.gold_labels) for u in self.utterances()}
        names = [f"runs/{slug(c)}/run{r}_predictions.jsonl" for c in self.cfg.conditions for r in range(self.cfg.runs)]
        inputs = self._require("train", names)
        result = {"lenient": self.cfg.lenient, "conditions": {}}
        for cond in self.cfg.conditions:
            runs = []
            for r, seed in enumerate(self.cfg.seeds):
                rows = read_jsonl(self.path(f"runs/{slug(cond)}/run{r}_predictions.jsonl"))
                entry = {"run": r, "seed": seed}
                for split_name in ("val", "test"):
                    sel = [row for row in rows if row["split"] == split_name]
                    gold = []
                    for row in sel:
                        g = row["gold"]
                        if self.cfg.lenient and row["pred"] in gold_sets.get(row["utterance_id"], ()):
                            g = row["pred"]
                        gold.append(g)
                    entry[split_name] = evaluate([row["pred"] for row in sel], gold, schema.labels).to_json()
                runs.append(entry)
            result["conditions"][cond] = runs
        self._write_json("evaluation.json", result)
        self._write_manifest("evaluate", inputs, ["evaluation.json"])

    def stage_report(self):
        inputs = self._require("evaluate", ["evaluation.json"])
        evaluation = json.loads(self.path("evaluation.json").read_text("utf-8"))
        text, summary = build_report(evaluation, self.cfg.schema.labels, self.cfg.schema_id)
        self._write_text("report.txt", text)
        self._write_json("report.json", summary)
        self._write_manifest("report", inputs, ["report.txt", "report.json"])

    def stage_stats(self):
        schema = self.cfg.schema
        utts = self.utterances()
        inputs = self._dataset_input()
        outputs = []
        missing = {}
        for corpus in self.cfg.corpora:
            inputs.update(self._require("build-bags", [f"bags_{corpus}.jsonl"]))
            bags = self._bags(corpus)
            label = "with ELB" if corpus == "elb" else "without ELB"
            if bags:
                st = bagmod.bag_stats(bags, schema.labels)
                self._write_json(f"stats_{corpus}.json", st.to_json())
                self._write_text(f"stats_{corpus}.txt", bagmod.format_bag_stats(st, f"Instance Distribution ({label})"))
                outputs += [f"stats_{corpus}.json", f"stats_{corpus}.txt"]
            missing[corpus] = bagmod.missing_rate(bags, schema)
        self._write_json("missing.json", {c: m.to_json() for c, m in missing.items()})
        self._write_text("missing.txt", bagmod.format_missing(missing.get("elb"), missing.get("noelb"), schema.labels))
        self._write_text("dataset_stats.txt", format_dataset_stats(utts, schema.labels, self.cfg.ratios))
        outputs += ["missing.json", "missing.txt", "dataset_stats.txt"]
        self._write_manifest("stats", inputs, outputs)


def build_report(evaluation: dict, labels: Sequence[str], dataset: str = "") -> tuple[str, dict]:
    """Condition table (mean ± std weighted F1 over runs) plus per-type F1 for
    the richest condition present."""
    rows, summary = {}, {"conditions": {}, "per_type": {}}
    for cond, runs in evaluation["conditions"].items():
        rows[cond] = {}
        summary["conditions"][cond] = {}
        for split_name in ("val", "test"):
            s = summarize_runs([run[split_name]["weighted_f1"] for run in runs])
            rows[cond][split_name] = s
            summary["conditions"][cond][split_name] = s.to_json()
    title = "Weighted F1 over runs" + (f" ({dataset})" if dataset else "")
    text = format_condition_table(rows, title)

    present = [c for c in CONDITION_ORDER if c in evaluation["conditions"]]
    focus = present[-1] if present else next(iter(evaluation["conditions"]))
    runs = evaluation["conditions"][focus]
    per_type = {}
    for label in labels:
        if all(run["test"]["per_class"][label]["support"] == 0 for run in runs):
            continue
        per_type[label] = summarize_runs([run["test"]["per_class"][label]["f1"] for run in runs])
    summary["per_type"] = {"condition": focus, "scores": {k: v.to_json() for k, v in per_type.items()}}
    if per_type:
        text += "\n" + format_per_type_table(per_type, f"Per-type test F1 ({focus})")
    return text, summary


def format_dataset_stats(utterances, labels, ratios=(0.8, 0.1, 0.1)) -> str:
    n = len(utterances)
    n_tr, n_va, n_te = split_counts(n, ratios)
    counts = {lab: 0 for lab in labels}
    for u in utterances:
        counts[u.target] += 1
    width = max(len(x) for x in list(labels) + ["Cognitive Distortion Type"])

    def pct(k):
        return f"{k:,} ({100.0 * k / n:.1f}%)" if n else "0"

    lines = [f"{'Set':<{width}}  Utterances (%)"]
    for name, k in (("Train", n_tr), ("Validation", n_va), ("Test", n_te)):
        lines.append(f"{name:<{width}}  {k:,} ({100.0 * k / n:.0f}%)" if n else f"{name:<{width}}  0")
    lines.append("")
    lines.append(f"{'Cognitive Distortion Type':<{width}}  Count (%)")
    for lab, k in sorted(counts.items(), key=lambda kv: (-kv[1], kv[0])):
        lines.append(f"{lab:<{width}}  {pct(k)}")
    lines.append(f"{'Total':<{width}}  {pct(n)}")
    return "\n".join(lines) + "\n"
