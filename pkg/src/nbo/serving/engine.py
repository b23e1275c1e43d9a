"""Request handling independent of transport and threading.

``Engine`` exposes the compute stages (fetch, prepare, infer, apply) that the
server spreads across worker threads, plus ``handle_recommend`` and
``handle_feature_update`` which run every stage inline.
"""

from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Optional

from ..ensemble import EnsembleModel, decide, ensemble_score
from ..errors import ConfigError, ContractError, StaleEventError
from ..features import Event, FeatureSpec, UserRecord, cold_record, update_features
from ..gbdt import TreeEnsemble, gbdt_score
from ..lstm import LstmState, LstmWeights, lstm_predict
from ..store import FeatureStore
from . import protocol

now_ns = time.perf_counter_ns


class Timeline:
    """Consecutive stage boundaries on the monotonic clock.

    Stage durations are differences of microsecond-truncated marks, so they
    always sum exactly to the end-to-end total.
    """

    __slots__ = ("marks",)

    def __init__(self, start_ns: Optional[int] = None):
        self.marks = [("start", now_ns() if start_ns is None else start_ns)]

    def mark(self, stage: str) -> None:
        self.marks.append((stage, now_ns()))

    def breakdown(self) -> dict:
        out = {}
        prev = self.marks[0][1] // 1000
        for stage, t in self.marks[1:]:
            us = t // 1000
            out[stage] = out.get(stage, 0) + us - prev
            prev = us
        out["rl_total"] = prev - self.marks[0][1] // 1000
        return out


@dataclass(frozen=True)
class Prepared:
    user_id: str
    features: list
    state: LstmState
    cold_start: bool


@dataclass(frozen=True)
class Scores:
    p_gbdt: float
    p_lstm: float
    score: float
    decision: bool


class Engine:
    def __init__(self, store: FeatureStore, lstm: LstmWeights, gbdt: TreeEnsemble,
                 ensemble: EnsembleModel):
        spec = store.spec
        if spec.n_features != gbdt.n_features:
            raise ConfigError(f"feature spec width {spec.n_features} != GBDT n_features {gbdt.n_features}")
        if spec.input_dim != lstm.input_dim:
            raise ConfigError(f"feature spec LSTM input {spec.input_dim} != LSTM input_dim {lstm.input_dim}")
        if store.hidden_dim != lstm.hidden_dim:
            raise ConfigError(f"store hidden size {store.hidden_dim} != LSTM hidden_dim {lstm.hidden_dim}")
        self.store = store
        self.spec: FeatureSpec = spec
        self.lstm = lstm
        self.gbdt = gbdt
        self.ensemble = ensemble
        self._cold = cold_record("", spec, lstm.hidden_dim)

    @classmethod
    def from_store(cls, store: FeatureStore) -> "Engine":
        """Build from a restored snapshot whose meta carries the models."""
        meta = store.meta
        try:
            lstm = LstmWeights.from_dict(meta["lstm"])
            gbdt = TreeEnsemble.from_dict(meta["gbdt"])
            ens = EnsembleModel.from_dict(meta.get("ensemble", {}))
        except KeyError as exc:
            raise ConfigError(f"snapshot does not carry model {exc}") from exc
        return cls(store, lstm, gbdt, ens)

    # --- stages ---

    def prepare(self, user_id: str) -> Prepared:
        """Feature fetch plus input preparation; never mutates the store."""
        rec = self.store.get(user_id)
        if rec is None:
            return Prepared(user_id, list(self._cold.onehot.to_dense()), self._cold.lstm_state, True)
        return Prepared(user_id, rec.onehot.to_dense(), rec.lstm_state, False)

    def infer(self, prepared: Prepared) -> Scores:
        p_gbdt = gbdt_score(self.gbdt, prepared.features)
        p_lstm = lstm_predict(self.lstm, prepared.state)[1]
        score = ensemble_score(p_gbdt, p_lstm, self.ensemble.w)
        return Scores(p_gbdt, p_lstm, score, decide(score, self.ensemble.tau))

    def compute_update(self, event: Event) -> UserRecord:
        return update_features(self.store.get_user(event.user_id), event, self.spec, self.lstm)

    def write(self, record: UserRecord) -> None:
        self.store.put(record)

    # --- inline handlers ---

    def handle_recommend(self, msg: dict, timeline: Optional[Timeline] = None) -> dict:
        tl = timeline or Timeline()
        req_id = msg.get("req_id")
        try:
            protocol.validate_request(msg)
        except protocol.ProtocolError as exc:
            return protocol.error(req_id, str(exc))
        tl.mark("T1")
        tl.mark("T6")
        prepared = self.prepare(msg["user_id"])
        tl.mark("T7")
        tl.mark("T8")
        tl.mark("T9")
        scores = self.infer(prepared)
        tl.mark("T10")
        return self.finish_recommend(req_id, prepared, scores, tl)

    @staticmethod
    def finish_recommend(req_id, prepared: Prepared, scores: Scores, tl: Timeline) -> dict:
        resp = protocol.recommend_response(req_id, scores.score, scores.p_gbdt, scores.p_lstm,
                                           scores.decision, prepared.cold_start, {})
        protocol.dumps(resp)  # serialization cost belongs to T11
        tl.mark("T11")
        resp["timing"].update(tl.breakdown())
        return resp

    def handle_feature_update(self, msg: dict, timeline: Optional[Timeline] = None) -> dict:
        tl = timeline or Timeline()
        req_id = msg.get("req_id")
        try:
            protocol.validate_request(msg)
            event = Event.from_dict(msg["user_id"], msg["event"])
        except (protocol.ProtocolError, ContractError) as exc:
            return protocol.error(req_id, str(exc))
        tl.mark("T1")
        tl.mark("T3")
        return self.apply_update(req_id, event, tl)

    def apply_update(self, req_id, event: Event, tl: Timeline) -> dict:
        """T4 (compute) and T5 (store write) for one event; returns the ack."""
        try:
            record = self.compute_update(event)
        except StaleEventError as exc:
            tl.mark("T4")
            tl.mark("T5")
            return protocol.ack(req_id, False, tl.breakdown(), reason=str(exc))
        tl.mark("T4")
        self.write(record)
        tl.mark("T5")
        return protocol.ack(req_id, True, tl.breakdown(), steps_seen=record.lstm_state.steps_seen)
