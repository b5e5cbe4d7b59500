"""Evaluation metrics: AP/mAP, per-class recall, confusion matrix, agreement rate."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .core import AnnotationRecord
from .exceptions import LengthMismatch, NoPositives, NoRecords


def average_precision(scores, positives) -> float:
    """Non-interpolated average precision.

    Samples are ranked by descending score, ties kept in input order, and
    the precision at every positive is averaged over the positives.
    """
    scores = np.asarray(scores, dtype=np.float64)
    positives = np.asarray(positives, dtype=bool)
    if scores.shape != positives.shape:
        raise LengthMismatch("scores and positives differ in length")
    n_pos = int(positives.sum())
    if n_pos == 0:
        raise NoPositives("average precision needs at least one positive")
    order = np.argsort(-scores, kind="stable")
    hits = positives[order]
    ranks = np.flatnonzero(hits) + 1
    return float(np.mean(np.arange(1, n_pos + 1) / ranks))


@dataclass
class EvalResult:
    per_class_ap: list[float]
    map: float
    per_class_recall: list[float]
    confusion: list[list[int]]
    num_samples: int
    class_names: list[str] | None = None

    def to_dict(self) -> dict:
        def clean(v):
            return None if v is None or (isinstance(v, float) and math.isnan(v)) else v
        return {
            "map": clean(self.map),
            "per_class_ap": [clean(v) for v in self.per_class_ap],
            "per_class_recall": [clean(v) for v in self.per_class_recall],
            "confusion": self.confusion,
            "num_samples": self.num_samples,
            "class_names": self.class_names,
        }

    @classmethod
    def from_dict(cls, d) -> "EvalResult":
        def nan(v):
            return float("nan") if v is None else float(v)
        return cls([nan(v) for v in d["per_class_ap"]], nan(d["map"]),
                   [nan(v) for v in d["per_class_recall"]],
                   [list(map(int, row)) for row in d["confusion"]], int(d["num_samples"]),
                   d.get("class_names"))

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)

    @property
    def accuracy(self) -> float:
        conf = np.asarray(self.confusion)
        return float(np.trace(conf) / max(conf.sum(), 1))

    def __eq__(self, other) -> bool:
        if not isinstance(other, EvalResult):
            return NotImplemented
        return self.to_dict() == other.to_dict()


def evaluate(predictions, truths: Sequence[int], num_classes: int | None = None,
             class_names: Sequence[str] | None = None) -> EvalResult:
    """Score probability predictions against hard labels.

    Classes absent from ``truths`` get NaN AP and recall and are left out
    of the mAP mean.
    """
    probs = np.asarray(predictions, dtype=np.float64)
    truths = np.asarray(truths, dtype=np.int64)
    if probs.ndim != 2 or probs.shape[0] != truths.shape[0]:
        raise LengthMismatch(f"{probs.shape[0] if probs.ndim else 0} predictions vs {truths.shape[0]} labels")
    r = num_classes or probs.shape[1]
    if probs.shape[1] != r:
        raise LengthMismatch(f"predictions have {probs.shape[1]} classes, expected {r}")
    pred = probs.argmax(axis=1) if len(probs) else np.zeros(0, dtype=np.int64)
    confusion = np.zeros((r, r), dtype=np.int64)
    np.add.at(confusion, (truths, pred), 1)

    ap = np.full(r, np.nan)
    recall = np.full(r, np.nan)
    for c in range(r):
        pos = truths == c
        if pos.any():
            ap[c] = average_precision(probs[:, c], pos)
            recall[c] = confusion[c, c] / pos.sum()
    present = ~np.isnan(ap)
    m = float(ap[present].mean()) if present.any() else float("nan")
    return EvalResult(ap.tolist(), m, recall.tolist(), confusion.tolist(), int(len(truths)),
                      list(class_names) if class_names is not None else None)


def agreement_rate(records: Sequence[AnnotationRecord], class_index: int) -> float:
    """Share of votes that match the majority class, over consistent records of that class."""
    agreed = total = 0
    for rec in records:
        if rec.is_consistent and rec.majority_label == class_index:
            agreed += int(rec.vote_vector()[class_index])
            total += rec.total_votes
    if total == 0:
        raise NoRecords(f"no consistent records with majority class {class_index}")
    return agreed / total
