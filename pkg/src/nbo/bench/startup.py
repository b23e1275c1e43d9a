"""Offline build: transactions -> feature store snapshot with models embedded.

The snapshot bytes depend only on the inputs; wall-clock timings go to a
separate report so reruns stay byte-identical.
"""

from __future__ import annotations

import json
import logging
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from ..ensemble import EnsembleModel, calibrate
from ..features import FeatureSpec, build_records, load_feature_spec
from ..gbdt import gbdt_score, load_gbdt
from ..lstm import lstm_predict, load_lstm_weights
from ..store import FeatureStore, snapshot
from .datagen import read_events_csv

log = logging.getLogger(__name__)

HOLDOUT_FRACTION = 0.2


class StartupError(RuntimeError):
    def __init__(self, stage: str, message: str):
        super().__init__(f"startup failed at {stage}: {message}")
        self.stage = stage


@dataclass
class StartupReport:
    events: int = 0
    users: int = 0
    features_s: float = 0.0       # pass 1 + pass 2
    lstm_warmup_s: float = 0.0    # replay per user
    model_load_s: float = 0.0
    calibration_s: float = 0.0
    calibration: dict = field(default_factory=dict)

    @property
    def t0_s(self) -> float:
        return self.features_s

    @property
    def t2_s(self) -> float:
        return self.lstm_warmup_s + self.model_load_s + self.calibration_s

    def to_dict(self) -> dict:
        doc = asdict(self)
        doc.update(T0_s=self.t0_s, T2_s=self.t2_s, execution_time_s=self.t0_s + self.t2_s)
        return doc


def holdout_labels(events: list, cutoff: int, users) -> dict:
    """1 if the user places an order at or after ``cutoff``."""
    buyers = {e.user_id for e in events if e.ts >= cutoff and e.type == "order"}
    return {u: int(u in buyers) for u in users}


def calibrate_on_holdout(events: list, spec: FeatureSpec, lstm, gbdt,
                         holdout: float = HOLDOUT_FRACTION) -> tuple[EnsembleModel, dict]:
    """Fit (w, tau) on a time split: features from the prefix, labels from the tail.

    Falls back to w = tau = 0.5 when the split yields no data or one class.
    """
    default = EnsembleModel(0.5, 0.5)
    if not events:
        log.warning("calibration skipped: no transactions")
        return default, {"skipped": "no transactions"}
    t_min, t_max = events[0].ts, events[-1].ts
    cutoff = t_min + int((t_max - t_min) * (1.0 - holdout))
    prefix = [e for e in events if e.ts < cutoff]
    records = build_records(prefix, spec, lstm, as_of=cutoff)
    labels = holdout_labels(events, cutoff, records)
    y = [labels[u] for u in records]
    info = {"cutoff_ms": cutoff, "users": len(y), "positives": int(sum(y))}
    if len(set(y)) < 2:
        log.warning("calibration skipped: holdout labels are single-class (%s)", info)
        info["skipped"] = "single-class labels"
        return default, info
    p_g = np.array([gbdt_score(gbdt, r.onehot) for r in records.values()])
    p_l = np.array([lstm_predict(lstm, r.lstm_state)[1] for r in records.values()])
    model = calibrate(p_g, p_l, y)
    info.update(w=model.w, tau=model.tau, auc=model.auc, fscore=model.fscore)
    return model, info


def run_startup(transactions, spec_path, lstm_path, gbdt_path, out,
                report_path: Optional[str] = None, partitions: int = 1) -> StartupReport:
    report = StartupReport()
    try:
        spec = load_feature_spec(spec_path)
    except (OSError, ValueError) as exc:
        raise StartupError("spec", str(exc)) from exc

    t = time.perf_counter()
    try:
        lstm = load_lstm_weights(lstm_path)
        gbdt = load_gbdt(gbdt_path)
    except (OSError, ValueError) as exc:
        raise StartupError("model load", str(exc)) from exc
    if lstm.input_dim != spec.input_dim:
        raise StartupError("model load", f"LSTM input_dim {lstm.input_dim} != spec LSTM input {spec.input_dim}")
    if gbdt.n_features != spec.n_features:
        raise StartupError("model load", f"GBDT n_features {gbdt.n_features} != spec width {spec.n_features}")
    report.model_load_s = time.perf_counter() - t

    try:
        lines = list(read_events_csv(transactions))
    except (OSError, ValueError) as exc:
        raise StartupError("transactions", str(exc)) from exc
    report.events = len(lines)

    timings: dict = {}
    try:
        records = build_records(lines, spec, lstm, timings=timings)
    except ValueError as exc:
        raise StartupError("feature build", str(exc)) from exc
    report.features_s = timings["features_s"]
    report.lstm_warmup_s = timings["lstm_s"]
    report.users = len(records)

    t = time.perf_counter()
    events = [e for _, e in lines]
    ensemble, report.calibration = calibrate_on_holdout(events, spec, lstm, gbdt)
    report.calibration_s = time.perf_counter() - t

    meta = {"lstm": lstm.to_dict(), "gbdt": gbdt.to_dict(), "ensemble": ensemble.to_dict()}
    store = FeatureStore(spec, lstm.hidden_dim, partitions, meta)
    for rec in records.values():
        store.put(rec)
    try:
        snapshot(store, out)
    except OSError as exc:
        raise StartupError("snapshot write", str(exc)) from exc
    if report_path:
        Path(report_path).write_text(json.dumps(report.to_dict(), indent=2) + "\n")
    return report
