"""Weighted/per-class F1, confusion matrices and multi-run summaries."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from .exceptions import LengthMismatch, TooFewRuns


@dataclass
class EvalReport:
    labels: tuple[str, ...]
    confusion: np.ndarray  # rows gold, columns predicted
    per_class: dict[str, tuple[float, float, float, int]]
    weighted_f1: float
    accuracy: float

    def to_json(self) -> dict:
        return {
            "labels": list(self.labels),
            "confusion": self.confusion.tolist(),
            "per_class": {
                k: {"precision": p, "recall": r, "f1": f, "support": s} for k, (p, r, f, s) in self.per_class.items()
            },
            "weighted_f1": self.weighted_f1,
            "accuracy": self.accuracy,
        }


def confusion_matrix(predictions: Sequence, gold: Sequence, labels: Sequence) -> np.ndarray:
    index = {lab: i for i, lab in enumerate(labels)}
    C = np.zeros((len(labels), len(labels)), dtype=np.int64)
    for g, p in zip(gold, predictions):
        try:
            C[index[g], index[p]] += 1
        except KeyError as exc:
            raise ValueError(f"label {exc.args[0]!r} not in label set") from None
    return C


def evaluate(predictions: Sequence, gold: Sequence, labels: Sequence) -> EvalReport:
    """Exact counting; F1 is 0 whenever precision + recall is 0, and
    zero-support classes carry no weight."""
    if len(predictions) != len(gold):
        raise LengthMismatch(f"{len(predictions)} predictions vs {len(gold)} gold labels")
    labels = tuple(labels)
    C = confusion_matrix(predictions, gold, labels)
    tp = np.diag(C).astype(float)
    pred_count = C.sum(axis=0).astype(float)
    support = C.sum(axis=1)
    per_class = {}
    f1s = np.zeros(len(labels))
    for k, lab in enumerate(labels):
        prec = tp[k] / pred_count[k] if pred_count[k] else 0.0
        rec = tp[k] / support[k] if support[k] else 0.0
        f1 = 2 * prec * rec / (prec + rec) if (prec + rec) else 0.0
        f1s[k] = f1
        per_class[lab] = (float(prec), float(rec), float(f1), int(support[k]))
    n = int(support.sum())
    weighted = float((f1s * support).sum() / n) if n else 0.0
    accuracy = float(tp.sum() / n) if n else 0.0
    return EvalReport(labels, C, per_class, weighted, accuracy)


@dataclass
class MultiRunSummary:
    run_scores: list[float]
    mean: float
    std: float

    @property
    def formatted(self) -> str:
        return format_mean_std(self.mean, self.std)

    def to_json(self) -> dict:
        return {"run_scores": self.run_scores, "mean": self.mean, "std": self.std, "formatted": self.formatted}


def format_mean_std(mean: float, std: float) -> str:
    return f"{mean:.3f} ± {std:.3f}"


def summarize_runs(scores: Sequence[float]) -> MultiRunSummary:
    """Mean and sample (n-1) standard deviation over runs."""
    scores = [float(s) for s in scores]
    if len(scores) < 2:
        raise TooFewRuns(f"need at least 2 runs, got {len(scores)}")
    arr = np.asarray(scores)
    return MultiRunSummary(scores, float(arr.mean()), float(arr.std(ddof=1)))


CONDITION_ORDER = ("Baseline", "ELB", "Salience", "ELB + Salience")


def format_condition_table(rows: Mapping[str, Mapping[str, MultiRunSummary]], title: str = "") -> str:
    """Aligned text in the condition x (Val F1, Test F1) layout."""
    names = [c for c in CONDITION_ORDER if c in rows] + [c for c in rows if c not in CONDITION_ORDER]
    width = max([len("Methods")] + [len(n) for n in names])
    cells = {n: (rows[n]["val"].formatted if "val" in rows[n] else "-", rows[n]["test"].formatted if "test" in rows[n] else "-") for n in names}
    cw = max([len("Test F1")] + [len(c) for pair in cells.values() for c in pair])
    lines = []
    if title:
        lines.append(title)
    lines.append(f"{'Methods':<{width}}  {'Val F1':^{cw}}  {'Test F1':^{cw}}")
    lines.append("-" * (width + 2 * cw + 4))
    for n in names:
        v, t = cells[n]
        lines.append(f"{n:<{width}}  {v:^{cw}}  {t:^{cw}}")
    return "\n".join(lines) + "\n"


def format_per_type_table(per_type: Mapping[str, MultiRunSummary], title: str = "") -> str:
    """Per-type F1 (mean ± std over runs), sorted by mean F1 descending."""
    ordered = sorted(per_type.items(), key=lambda kv: (-kv[1].mean, kv[0]))
    width = max([len("Cognitive Distortion Type")] + [len(k) for k in per_type])
    lines = []
    if title:
        lines.append(title)
    lines.append(f"{'Cognitive Distortion Type':<{width}}  F1")
    lines.append("-" * (width + 16))
    for name, summ in ordered:
        lines.append(f"{name:<{width}}  {summ.formatted}")
    return "\n".join(lines) + "\n"
