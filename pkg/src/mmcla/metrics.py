"""Per-task weighted F1, pooled micro F1 and evaluation reports."""

from __future__ import annotations

import json
import warnings
from typing import Dict, List, Sequence, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, Field

from .data import TASKS

DISPLAY_NAMES = {"mental_demand": "Mental Demand", "effort": "Effort", "temporal_demand": "Temporal Demand"}
# column order of the results table: pooled score first, then tasks
REPORT_COLUMNS = ("Global",) + tuple(DISPLAY_NAMES[t] for t in TASKS)


class UndefinedMetricWarning(UserWarning):
    pass


class ClassCounts(BaseModel):
    model_config = ConfigDict(extra="forbid")
    tp: int = Field(ge=0)
    fp: int = Field(ge=0)
    fn: int = Field(ge=0)
    tn: int = Field(ge=0)

    @property
    def support(self) -> int:
        return self.tp + self.fn

    @property
    def f1(self) -> float:
        denom = 2 * self.tp + self.fp + self.fn
        return 2 * self.tp / denom if denom else 0.0


class ConfusionCounts(BaseModel):
    """One-vs-rest counts for classes 0 and 1 of a single task."""

    model_config = ConfigDict(extra="forbid")
    negative: ClassCounts
    positive: ClassCounts

    @classmethod
    def from_labels(cls, pred, true) -> "ConfusionCounts":
        pred, true = _check_pair(pred, true)
        tp = int(np.sum((pred == 1) & (true == 1)))
        fp = int(np.sum((pred == 1) & (true == 0)))
        fn = int(np.sum((pred == 0) & (true == 1)))
        tn = int(np.sum((pred == 0) & (true == 0)))
        return cls(
            positive=ClassCounts(tp=tp, fp=fp, fn=fn, tn=tn),
            negative=ClassCounts(tp=tn, fp=fn, fn=fp, tn=tp),
        )

    @property
    def total(self) -> int:
        p = self.positive
        return p.tp + p.fp + p.fn + p.tn

    def weighted_f1(self) -> float:
        n = self.total
        if n == 0:
            raise ValueError("weighted F1 of an empty task")
        return (self.negative.support * self.negative.f1 + self.positive.support * self.positive.f1) / n


def _check_pair(pred, true) -> Tuple[np.ndarray, np.ndarray]:
    pred = np.asarray(pred).astype(np.int64).reshape(-1)
    true = np.asarray(true).astype(np.int64).reshape(-1)
    if pred.shape != true.shape:
        raise ValueError(f"prediction and truth lengths differ: {pred.size} vs {true.size}")
    bad = ~np.isin(pred, (0, 1)) | ~np.isin(true, (0, 1))
    if bad.any():
        raise ValueError("labels must be 0 or 1")
    return pred, true


def binarize(probs, threshold: float = 0.5) -> np.ndarray:
    """1 where the probability reaches ``threshold`` (ties go to 1)."""
    return (np.asarray(probs, dtype=np.float64) >= threshold).astype(np.int64)


def weighted_f1(pred, true) -> float:
    """Class-support-weighted mean of the per-class F1 over classes {0, 1}."""
    pred, true = _check_pair(pred, true)
    if pred.size == 0:
        raise ValueError("weighted F1 needs at least one sample")
    return ConfusionCounts.from_labels(pred, true).weighted_f1()


def micro_f1_from_counts(counts: Sequence[ConfusionCounts]) -> Tuple[float, bool]:
    """Pooled positive-class F1 and whether it was undefined (reported as 0)."""
    tp = sum(c.positive.tp for c in counts)
    fp = sum(c.positive.fp for c in counts)
    fn = sum(c.positive.fn for c in counts)
    denom = 2 * tp + fp + fn
    if denom == 0:
        return 0.0, True
    return 2 * tp / denom, False


def global_micro_f1(preds: Sequence, trues: Sequence) -> float:
    if len(preds) != len(trues):
        raise ValueError(f"{len(preds)} prediction vectors for {len(trues)} truth vectors")
    lengths = {np.asarray(p).size for p in preds} | {np.asarray(t).size for t in trues}
    if len(lengths) > 1:
        raise ValueError(f"label vectors differ in length: {sorted(lengths)}")
    counts = [ConfusionCounts.from_labels(p, t) for p, t in zip(preds, trues)]
    value, undefined = micro_f1_from_counts(counts)
    if undefined:
        warnings.warn("no positives in predictions or truth; global micro F1 set to 0", UndefinedMetricWarning)
    return value


class MetricsReport(BaseModel):
    model_config = ConfigDict(extra="forbid")

    global_f1: float = Field(ge=0.0, le=1.0)
    task_f1: Dict[str, float]
    counts: Dict[str, ConfusionCounts]
    threshold: float
    samples: int
    global_f1_undefined: bool = False

    @classmethod
    def from_labels(cls, preds: Sequence, trues: Sequence, threshold: float) -> "MetricsReport":
        counts = {t: ConfusionCounts.from_labels(p, y) for t, p, y in zip(TASKS, preds, trues)}
        g, undefined = micro_f1_from_counts(list(counts.values()))
        return cls(
            global_f1=g,
            task_f1={t: counts[t].weighted_f1() for t in TASKS},
            counts=counts,
            threshold=threshold,
            samples=counts[TASKS[0]].total,
            global_f1_undefined=undefined,
        )

    def columns(self) -> List[Tuple[str, float]]:
        return [("Global", self.global_f1)] + [(DISPLAY_NAMES[t], self.task_f1[t]) for t in TASKS]

    def to_text(self) -> str:
        lines = [f"{name}: {value!r}" for name, value in self.columns()]
        lines.append(f"threshold: {self.threshold!r}")
        lines.append(f"samples: {self.samples}")
        lines.append(f"global_f1_undefined: {str(self.global_f1_undefined).lower()}")
        for t in TASKS:
            p = self.counts[t].positive
            lines.append(f"{t}.counts: tp={p.tp} fp={p.fp} fn={p.fn} tn={p.tn}")
        return "\n".join(lines) + "\n"

    def to_json(self) -> str:
        doc = {"columns": list(REPORT_COLUMNS), **self.model_dump()}
        return json.dumps(doc, indent=2, sort_keys=True) + "\n"


def parse_text_report(text: str) -> Dict[str, str]:
    out = {}
    for line in text.splitlines():
        key, _, value = line.partition(": ")
        out[key] = value
    return out
