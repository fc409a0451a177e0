"""Confusion matrices, per-class rates and AUROC with attack as the positive class."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .detectors import ATTACK, BENIGN


class UndefinedMetricError(ValueError):
    pass


@dataclass(frozen=True)
class ConfusionMatrix:
    tp: int
    fp: int
    tn: int
    fn: int

    def __post_init__(self):
        if min(self.tp, self.fp, self.tn, self.fn) < 0:
            raise ValueError("confusion counts must be non-negative")

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.tn + self.fn

    def to_dict(self) -> dict:
        return {"tp": self.tp, "fp": self.fp, "tn": self.tn, "fn": self.fn}


def _is_attack(values: Sequence) -> np.ndarray:
    arr = np.asarray(values)
    if arr.dtype == bool or np.issubdtype(arr.dtype, np.number):
        return arr.astype(bool)
    bad = set(arr.tolist()) - {ATTACK, BENIGN}
    if bad:
        raise ValueError(f"unknown labels {sorted(bad)}")
    return arr == ATTACK


def confusion(labels: Sequence, predictions: Sequence) -> ConfusionMatrix:
    if len(labels) != len(predictions):
        raise ValueError(f"{len(labels)} labels but {len(predictions)} predictions")
    if len(labels) == 0:
        raise ValueError("confusion of an empty sample")
    y, p = _is_attack(labels), _is_attack(predictions)
    return ConfusionMatrix(int(np.sum(y & p)), int(np.sum(~y & p)), int(np.sum(~y & ~p)), int(np.sum(y & ~p)))


@dataclass(frozen=True)
class ClassMetrics:
    precision: float
    recall: float
    f1: float
    support: int


@dataclass
class Metrics:
    per_class: dict[str, ClassMetrics]
    accuracy: float
    macro_f1: float
    weighted_f1: float
    zero_division: list[str] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "per_class": {k: v.__dict__ for k, v in self.per_class.items()},
            "accuracy": self.accuracy, "macro_f1": self.macro_f1,
            "weighted_f1": self.weighted_f1, "zero_division": self.zero_division,
        }


def _ratio(num: int, den: int, flag: str, flags: list[str]) -> float:
    if den == 0:
        flags.append(flag)
        return 0.0
    return num / den


def metrics(cm: ConfusionMatrix) -> Metrics:
    if cm.total == 0:
        raise ValueError("metrics of an empty confusion matrix")
    flags: list[str] = []
    cells = {
        ATTACK: (cm.tp, cm.fp, cm.fn, cm.tp + cm.fn),
        BENIGN: (cm.tn, cm.fn, cm.fp, cm.tn + cm.fp),
    }
    per = {}
    for name, (hit, false_pos, miss, support) in cells.items():
        precision = _ratio(hit, hit + false_pos, f"{name}.precision", flags)
        recall = _ratio(hit, hit + miss, f"{name}.recall", flags)
        denom = precision + recall
        f1 = 2 * precision * recall / denom if denom > 0 else 0.0
        if denom == 0:
            flags.append(f"{name}.f1")
        per[name] = ClassMetrics(precision, recall, f1, support)
    macro = (per[ATTACK].f1 + per[BENIGN].f1) / 2
    weighted = (per[ATTACK].f1 * per[ATTACK].support + per[BENIGN].f1 * per[BENIGN].support) / cm.total
    return Metrics(per, (cm.tp + cm.tn) / cm.total, macro, weighted, flags)


def auroc(scores: Sequence[float], labels: Sequence) -> float:
    """Mann-Whitney statistic with ties counted as one half."""
    s = np.asarray(scores, dtype=float)
    y = _is_attack(labels)
    if len(s) != len(y):
        raise ValueError("scores and labels differ in length")
    n_pos, n_neg = int(y.sum()), int((~y).sum())
    if n_pos == 0 or n_neg == 0:
        raise UndefinedMetricError("AUROC needs both classes present")
    order = np.argsort(s, kind="mergesort")
    sorted_s = s[order]
    ranks = np.empty(len(s))
    # average ranks over tie groups
    boundaries = np.flatnonzero(np.diff(sorted_s)) + 1
    starts = np.concatenate(([0], boundaries))
    ends = np.concatenate((boundaries, [len(s)]))
    for a, b in zip(starts, ends):
        ranks[order[a:b]] = (a + b + 1) / 2.0
    u = ranks[y].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))
