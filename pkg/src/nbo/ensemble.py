"""Blend GBDT and LSTM probabilities and calibrate the blend and threshold.

Both calibrations are exhaustive grid searches. Weight ties go to the
smallest w; threshold ties go to the largest tau, the most conservative
offer policy.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Optional, Sequence

import numpy as np

from .errors import AucUndefinedError, ContractError
from .metrics import ConfusionCounts, auc, f_score_from_counts


@dataclass(frozen=True)
class EnsembleModel:
    w: float = 0.5
    tau: float = 0.5
    grid_step_w: float = 0.01
    grid_step_tau: float = 0.001
    auc: Optional[float] = None
    fscore: Optional[float] = None

    def __post_init__(self):
        if not 0.0 <= self.w <= 1.0:
            raise ContractError(f"w={self.w} outside [0, 1]")
        if not 0.0 <= self.tau <= 1.0:
            raise ContractError(f"tau={self.tau} outside [0, 1]")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, doc: dict) -> "EnsembleModel":
        return cls(**{k: doc[k] for k in ("w", "tau", "grid_step_w", "grid_step_tau", "auc", "fscore")
                      if k in doc})


def grid(step: float) -> list[float]:
    """Points 0, step, 2*step, ..., 1 computed as k/K so the endpoints are exact."""
    if not 0 < step <= 1:
        raise ContractError(f"grid step {step} must be in (0, 1]")
    k_max = round(1.0 / step)
    if abs(k_max * step - 1.0) > 1e-9:
        raise ContractError(f"grid step {step} does not divide 1")
    return [k / k_max for k in range(k_max + 1)]


def _check_prob(p: float, name: str) -> None:
    if not 0.0 <= p <= 1.0:
        raise ContractError(f"{name}={p} outside [0, 1]")


def ensemble_score(p_gbdt: float, p_lstm: float, w: float) -> float:
    _check_prob(p_gbdt, "p_gbdt")
    _check_prob(p_lstm, "p_lstm")
    _check_prob(w, "w")
    blended = w * p_gbdt + (1.0 - w) * p_lstm
    lo, hi = min(p_gbdt, p_lstm), max(p_gbdt, p_lstm)
    return min(max(blended, lo), hi)


def blend(p_gbdt: np.ndarray, p_lstm: np.ndarray, w: float) -> np.ndarray:
    """Vectorised ensemble_score, elementwise identical to the scalar version."""
    blended = w * p_gbdt + (1.0 - w) * p_lstm
    return np.clip(blended, np.minimum(p_gbdt, p_lstm), np.maximum(p_gbdt, p_lstm))


def decide(score: float, tau: float) -> bool:
    return score >= tau


def calibrate_weight(p_gbdt: Sequence[float], p_lstm: Sequence[float], labels: Sequence[int],
                     grid_step: float = 0.01) -> tuple[float, float]:
    """Return ``(w*, auc*)`` maximising the AUC of the blended score."""
    g = np.asarray(p_gbdt, dtype=np.float64)
    l = np.asarray(p_lstm, dtype=np.float64)
    y = np.asarray(labels)
    if g.size == 0 or g.shape != l.shape or g.shape != y.shape:
        raise ContractError("calibrate_weight needs equal-length non-empty lists")
    if y.all() or not y.any():
        raise AucUndefinedError("AUC undefined: labels need at least one positive and one negative")
    best_w, best_auc = 0.0, -1.0
    for w in grid(grid_step):
        a = auc(blend(g, l, w), y)
        if a > best_auc:
            best_w, best_auc = w, a
    return best_w, best_auc


def calibrate_threshold(scores: Sequence[float], labels: Sequence[int],
                        grid_step: float = 0.001) -> tuple[float, float]:
    """Return ``(tau*, F1*)`` for the rule ``score >= tau``."""
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels).astype(bool)
    if s.size == 0 or s.shape != y.shape:
        raise ContractError("calibrate_threshold needs equal-length non-empty lists")
    pos_sorted = np.sort(s[y])
    neg_sorted = np.sort(s[~y])
    n_pos, n_neg = pos_sorted.size, neg_sorted.size
    best_tau, best_f = 1.0, -1.0
    for tau in grid(grid_step):
        tp = n_pos - int(np.searchsorted(pos_sorted, tau, side="left"))
        fp = n_neg - int(np.searchsorted(neg_sorted, tau, side="left"))
        f = f_score_from_counts(ConfusionCounts(tp, fp, n_pos - tp, n_neg - fp))[2]
        if f >= best_f:
            best_tau, best_f = tau, f
    return best_tau, best_f


def calibrate(p_gbdt, p_lstm, labels, grid_step_w: float = 0.01,
              grid_step_tau: float = 0.001) -> EnsembleModel:
    w, a = calibrate_weight(p_gbdt, p_lstm, labels, grid_step_w)
    scores = blend(np.asarray(p_gbdt, dtype=np.float64), np.asarray(p_lstm, dtype=np.float64), w)
    tau, f = calibrate_threshold(scores, labels, grid_step_tau)
    return EnsembleModel(w, tau, grid_step_w, grid_step_tau, a, f)
