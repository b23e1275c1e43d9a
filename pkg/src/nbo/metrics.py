"""Ranking/classification metrics, latency percentiles and throughput models."""

from __future__ import annotations

import math
from dataclasses import dataclass
from fractions import Fraction
from typing import Sequence

import numpy as np

from .errors import AucUndefinedError, ContractError


@dataclass(frozen=True)
class ConfusionCounts:
    tp: int = 0
    fp: int = 0
    fn: int = 0
    tn: int = 0

    @classmethod
    def from_predictions(cls, preds, labels) -> "ConfusionCounts":
        if len(preds) != len(labels):
            raise ContractError("preds and labels differ in length")
        tp = fp = fn = tn = 0
        for p, y in zip(preds, labels):
            if p and y:
                tp += 1
            elif p:
                fp += 1
            elif y:
                fn += 1
            else:
                tn += 1
        return cls(tp, fp, fn, tn)

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.fn + self.tn


def midranks(values: np.ndarray) -> np.ndarray:
    """1-based ranks with ties sharing the average rank."""
    uniq, inverse, counts = np.unique(values, return_inverse=True, return_counts=True)
    first = np.cumsum(counts) - counts + 1
    return (first + (counts - 1) / 2.0)[inverse]


def auc(scores: Sequence[float], labels: Sequence[int]) -> float:
    """Area under the ROC curve as the Mann-Whitney statistic.

    Equal to (concordant pairs + 0.5 * tied pairs) / (P * N).
    """
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels).astype(bool)
    if s.shape != y.shape:
        raise ContractError("scores and labels differ in length")
    n_pos = int(y.sum())
    n_neg = y.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise AucUndefinedError("AUC undefined: labels need at least one positive and one negative")
    rank_sum = float(midranks(s)[y].sum())
    u = rank_sum - n_pos * (n_pos + 1) / 2.0
    return u / (n_pos * n_neg)


def f_score_from_counts(cm: ConfusionCounts) -> tuple[float, float, float]:
    precision = cm.tp / (cm.tp + cm.fp) if cm.tp + cm.fp else 0.0
    recall = cm.tp / (cm.tp + cm.fn) if cm.tp + cm.fn else 0.0
    f1 = 2 * precision * recall / (precision + recall) if precision + recall else 0.0
    return precision, recall, f1


def f_score(preds: Sequence, labels: Sequence) -> tuple[float, float, float]:
    """(precision, recall, F1); any ratio with a zero denominator is 0."""
    if len(preds) == 0:
        raise ContractError("f_score needs at least one prediction")
    return f_score_from_counts(ConfusionCounts.from_predictions(preds, labels))


def percentiles(latencies: Sequence, ps: Sequence[float] = (50, 90, 99)) -> dict:
    """Nearest-rank percentiles: the ceil(p/100 * N)-th smallest value (1-based)."""
    if len(latencies) == 0:
        raise ContractError("percentiles of an empty list")
    ordered = sorted(latencies)
    n = len(ordered)
    out = {}
    for p in ps:
        if not 0 <= p <= 100:
            raise ContractError(f"percentile {p} outside [0, 100]")
        rank = math.ceil(Fraction(str(p)) * n / 100)
        out[p] = ordered[min(max(rank, 1), n) - 1]
    return out


def recommend_throughput_model(cores_msg: int, cores_infr: int,
                               t7: float, t8: float, t10: float) -> float:
    """Messages/s bound by the slower of message processing and inference.

    Durations are in seconds.
    """
    if cores_msg <= 0 or cores_infr <= 0:
        raise ContractError("core counts must be positive")
    if t7 + t8 <= 0 or t10 <= 0:
        raise ContractError("stage durations must be positive")
    return min(cores_msg / (t7 + t8), cores_infr / t10)


def featureupdate_throughput_model(process_time: float, numcores: int) -> float:
    if process_time <= 0:
        raise ContractError("process_time must be positive")
    if numcores <= 0:
        raise ContractError("numcores must be positive")
    return numcores / process_time
