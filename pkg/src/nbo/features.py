"""Per-user feature dictionaries, concatenated one-hot vectors and LSTM inputs.

Two ways to reach a user's record:

* batch: ``build_pass1`` (cumulative dictionaries) then ``build_pass2``
  (one-hot vectors), with LSTM states from ``lstm_replay``;
* streaming: ``update_features`` folds one event at a time.

For any clock-ordered stream both give the same record once the streaming
result is aged to the batch ``as_of`` time (``age_record``).
"""

from __future__ import annotations

import json
import math
from bisect import bisect_right
from collections import defaultdict
from dataclasses import dataclass, field
from functools import lru_cache
from pathlib import Path
from typing import Iterable, Iterator, Optional

import numpy as np

from .errors import ConfigError, ContractError, OutOfOrderError, StaleEventError
from .lstm import LstmState, LstmWeights, lstm_replay, lstm_step

EVENT_TYPES = ("view", "order", "impression")
CATEGORICAL_ATTRS = ("item", "category", "type", "user_id")
NUMERIC_ATTRS = ("price",)

FNV_OFFSET = 14695981039346656037
FNV_PRIME = 1099511628211
_MASK64 = (1 << 64) - 1


def fnv1a64(data: bytes) -> int:
    h = FNV_OFFSET
    for byte in data:
        h = ((h ^ byte) * FNV_PRIME) & _MASK64
    return h


@lru_cache(maxsize=1 << 16)
def encode_categorical(value: str, buckets: int) -> int:
    """Hash a categorical value into ``[0, buckets)`` with 64-bit FNV-1a."""
    if buckets < 2:
        raise ContractError("need at least 2 hash buckets")
    return fnv1a64(value.encode("utf-8")) % buckets


@dataclass(frozen=True)
class Event:
    ts: int
    user_id: str
    type: str
    item: str = ""
    category: str = ""
    price: Optional[float] = None

    def __post_init__(self):
        if self.type not in EVENT_TYPES:
            raise ContractError(f"unknown event type {self.type!r}")
        if self.price is not None and not math.isfinite(self.price):
            raise ContractError("price must be finite")

    def attr(self, name: str) -> str:
        return getattr(self, name)

    def to_dict(self) -> dict:
        return {"ts": self.ts, "type": self.type, "item": self.item,
                "category": self.category, "price": self.price}

    @classmethod
    def from_dict(cls, user_id: str, doc: dict) -> "Event":
        try:
            ts = doc["ts"]
            if isinstance(ts, bool) or not isinstance(ts, int):
                raise ContractError("event ts must be an integer (epoch ms)")
            price = doc.get("price")
            return cls(ts, str(user_id), doc["type"], str(doc.get("item", "")),
                       str(doc.get("category", "")), None if price in (None, "") else float(price))
        except KeyError as exc:
            raise ContractError(f"event missing field {exc}") from exc
        except (TypeError, ValueError) as exc:
            raise ContractError(f"malformed event: {exc}") from exc


# --- feature spec ---------------------------------------------------------


@dataclass(frozen=True)
class CounterBlock:
    name: str
    event_type: Optional[str]
    window_s: float
    boundaries: tuple

    @property
    def width(self) -> int:
        return len(self.boundaries) + 1

    @property
    def window_ms(self) -> float:
        return self.window_s * 1000.0

    def matches(self, ev: Event) -> bool:
        return self.event_type is None or ev.type == self.event_type


@dataclass(frozen=True)
class FavoriteBlock:
    name: str
    attribute: str
    buckets: int
    event_type: Optional[str] = None

    @property
    def width(self) -> int:
        return self.buckets

    def matches(self, ev: Event) -> bool:
        return self.event_type is None or ev.type == self.event_type


@dataclass(frozen=True)
class IdentityBlock(FavoriteBlock):
    pass


@dataclass(frozen=True)
class LstmInputPart:
    kind: str  # event_type | hashed | numeric
    attribute: str = ""
    buckets: int = 0
    values: tuple = ()
    transform: str = "identity"
    scale: float = 1.0

    @property
    def width(self) -> int:
        if self.kind == "event_type":
            return len(self.values)
        if self.kind == "hashed":
            return self.buckets
        return 1


_BLOCK_KINDS = {"counter": CounterBlock, "favorite": FavoriteBlock, "identity": IdentityBlock}


@dataclass(frozen=True)
class FeatureSpec:
    blocks: tuple
    lstm_input: tuple
    offsets: tuple = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        if not self.blocks:
            raise ConfigError("feature spec needs at least one block")
        if not self.lstm_input:
            raise ConfigError("feature spec needs a non-empty lstm_input layout")
        offsets, pos = [], 0
        for b in self.blocks:
            offsets.append(pos)
            pos += b.width
        object.__setattr__(self, "offsets", tuple(offsets))

    @property
    def n_features(self) -> int:
        return self.offsets[-1] + self.blocks[-1].width

    @property
    def input_dim(self) -> int:
        return sum(p.width for p in self.lstm_input)

    @classmethod
    def from_dict(cls, doc: dict) -> "FeatureSpec":
        if not isinstance(doc, dict):
            raise ConfigError("feature spec must be an object")
        blocks = [_parse_block(b, k) for k, b in enumerate(doc.get("blocks", []))]
        names = [b.name for b in blocks]
        if len(set(names)) != len(names):
            raise ConfigError("block names must be unique")
        parts = [_parse_lstm_part(p, k) for k, p in enumerate(doc.get("lstm_input", []))]
        return cls(tuple(blocks), tuple(parts))

    def to_dict(self) -> dict:
        blocks = []
        for b in self.blocks:
            if isinstance(b, CounterBlock):
                blocks.append({"name": b.name, "kind": "counter", "event_type": b.event_type,
                               "window_s": b.window_s, "boundaries": list(b.boundaries),
                               "width": b.width})
            else:
                blocks.append({"name": b.name,
                               "kind": "identity" if isinstance(b, IdentityBlock) else "favorite",
                               "attribute": b.attribute, "buckets": b.buckets,
                               "event_type": b.event_type, "width": b.width})
        parts = []
        for p in self.lstm_input:
            if p.kind == "event_type":
                parts.append({"kind": p.kind, "values": list(p.values)})
            elif p.kind == "hashed":
                parts.append({"kind": p.kind, "attribute": p.attribute, "buckets": p.buckets})
            else:
                parts.append({"kind": p.kind, "attribute": p.attribute,
                              "transform": p.transform, "scale": p.scale})
        return {"blocks": blocks, "lstm_input": parts}


def _parse_block(doc: dict, k: int):
    try:
        kind = doc["kind"]
        name = str(doc.get("name", f"block{k}"))
        event_type = doc.get("event_type")
        if event_type is not None and event_type not in EVENT_TYPES:
            raise ConfigError(f"block {name}: unknown event_type {event_type!r}")
        if kind == "counter":
            bounds = tuple(doc["boundaries"])
            if not bounds or any(b2 <= b1 for b1, b2 in zip(bounds, bounds[1:])):
                raise ConfigError(f"block {name}: boundaries must be non-empty and strictly increasing")
            window_s = float(doc["window_s"])
            if not window_s > 0:
                raise ConfigError(f"block {name}: window_s must be positive")
            block = CounterBlock(name, event_type, window_s, bounds)
        elif kind in ("favorite", "identity"):
            attribute = doc["attribute"]
            if attribute not in CATEGORICAL_ATTRS:
                raise ConfigError(f"block {name}: unsupported attribute {attribute!r}")
            buckets = int(doc["buckets"])
            if buckets < 2:
                raise ConfigError(f"block {name}: buckets must be >= 2")
            block = _BLOCK_KINDS[kind](name, attribute, buckets, event_type)
        else:
            raise ConfigError(f"block {name}: unknown kind {kind!r}")
    except KeyError as exc:
        raise ConfigError(f"block {k}: missing field {exc}") from exc
    except (TypeError, ValueError) as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError(f"block {k}: {exc}") from exc
    if "width" in doc and int(doc["width"]) != block.width:
        raise ConfigError(
            f"block {block.name}: declared width {doc['width']} but encoding needs {block.width}"
        )
    return block


def _parse_lstm_part(doc: dict, k: int) -> LstmInputPart:
    kind = doc.get("kind")
    try:
        if kind == "event_type":
            values = tuple(doc.get("values", EVENT_TYPES))
            if not values:
                raise ConfigError("lstm_input event_type needs values")
            return LstmInputPart(kind, values=values)
        if kind == "hashed":
            if doc["attribute"] not in CATEGORICAL_ATTRS or int(doc["buckets"]) < 2:
                raise ConfigError(f"lstm_input {k}: bad hashed part")
            return LstmInputPart(kind, attribute=doc["attribute"], buckets=int(doc["buckets"]))
        if kind == "numeric":
            if doc["attribute"] not in NUMERIC_ATTRS:
                raise ConfigError(f"lstm_input {k}: unsupported numeric attribute")
            transform = doc.get("transform", "identity")
            if transform not in ("identity", "log1p"):
                raise ConfigError(f"lstm_input {k}: unknown transform {transform!r}")
            return LstmInputPart(kind, attribute=doc["attribute"], transform=transform,
                                 scale=float(doc.get("scale", 1.0)))
    except KeyError as exc:
        raise ConfigError(f"lstm_input {k}: missing field {exc}") from exc
    raise ConfigError(f"lstm_input {k}: unknown kind {kind!r}")


def load_feature_spec(path) -> FeatureSpec:
    try:
        doc = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: not valid JSON: {exc}") from exc
    return FeatureSpec.from_dict(doc)


DEFAULT_SPEC = {
    "blocks": [
        {"name": "views_2h", "kind": "counter", "event_type": "view", "window_s": 7200,
         "boundaries": [1, 3, 10]},
        {"name": "orders_3d", "kind": "counter", "event_type": "order", "window_s": 259200,
         "boundaries": [1, 2, 5]},
        {"name": "impressions_1d", "kind": "counter", "event_type": "impression",
         "window_s": 86400, "boundaries": [1, 5, 20]},
        {"name": "fav_category", "kind": "favorite", "attribute": "category", "buckets": 16},
        {"name": "fav_ordered_item", "kind": "favorite", "attribute": "item", "buckets": 16,
         "event_type": "order"},
        {"name": "last_category", "kind": "identity", "attribute": "category", "buckets": 16},
    ],
    "lstm_input": [
        {"kind": "event_type", "values": list(EVENT_TYPES)},
        {"kind": "hashed", "attribute": "category", "buckets": 8},
        {"kind": "numeric", "attribute": "price", "transform": "log1p"},
    ],
}


def default_spec() -> FeatureSpec:
    return FeatureSpec.from_dict(DEFAULT_SPEC)


# --- records ----------------------------------------------------------------


@dataclass(frozen=True)
class OneHotVector:
    indices: tuple
    length: int

    def to_dense(self) -> list:
        dense = [0.0] * self.length
        for i in self.indices:
            dense[i] = 1.0
        return dense


@dataclass(frozen=True)
class FeatureDictionary:
    """Cumulative per-block state.

    Counter blocks hold a tuple of in-window timestamps, favorite blocks a
    ``{bucket: count}`` dict, identity blocks the current bucket (or None).
    Treated as immutable: updates build a new dictionary.
    """

    blocks: tuple

    @classmethod
    def empty(cls, spec: FeatureSpec) -> "FeatureDictionary":
        return cls(tuple(_empty_state(b) for b in spec.blocks))

    def counter_value(self, spec: FeatureSpec, name: str) -> int:
        for b, state in zip(spec.blocks, self.blocks):
            if b.name == name:
                return len(state)
        raise KeyError(name)


def _empty_state(block):
    if isinstance(block, CounterBlock):
        return ()
    if isinstance(block, IdentityBlock):
        return None
    return {}


@dataclass(frozen=True)
class UserRecord:
    user_id: str
    dictionary: FeatureDictionary
    onehot: OneHotVector
    lstm_state: LstmState
    last_update: Optional[int] = None


def cold_record(user_id: str, spec: FeatureSpec, hidden_dim: int) -> UserRecord:
    d = FeatureDictionary.empty(spec)
    return UserRecord(user_id, d, vectorize(d, spec), LstmState.zeros(hidden_dim), None)


def _argmax_bucket(counts: dict) -> int:
    best, best_count = 0, -1
    for bucket in sorted(counts):
        if counts[bucket] > best_count:
            best, best_count = bucket, counts[bucket]
    return best


def vectorize(dictionary: FeatureDictionary, spec: FeatureSpec) -> OneHotVector:
    indices = []
    for block, offset, state in zip(spec.blocks, spec.offsets, dictionary.blocks):
        if isinstance(block, CounterBlock):
            slot = bisect_right(block.boundaries, len(state))
        elif isinstance(block, IdentityBlock):
            slot = 0 if state is None else state
        else:
            slot = _argmax_bucket(state)
        indices.append(offset + slot)
    return OneHotVector(tuple(indices), spec.n_features)


def encode_event(event: Event, spec: FeatureSpec) -> np.ndarray:
    """LSTM input vector for one event."""
    x = np.zeros(spec.input_dim)
    pos = 0
    for part in spec.lstm_input:
        if part.kind == "event_type":
            if event.type in part.values:
                x[pos + part.values.index(event.type)] = 1.0
        elif part.kind == "hashed":
            x[pos + encode_categorical(event.attr(part.attribute), part.buckets)] = 1.0
        else:
            v = event.attr(part.attribute) or 0.0
            if part.transform == "log1p":
                v = math.log1p(max(v, 0.0))
            x[pos] = v * part.scale
        pos += part.width
    return x


def _evict(timestamps: tuple, now: int, window_ms: float) -> tuple:
    k = 0
    while k < len(timestamps) and now - timestamps[k] >= window_ms:
        k += 1
    return timestamps[k:] if k else timestamps


def age_dictionary(dictionary: FeatureDictionary, spec: FeatureSpec, as_of: int) -> FeatureDictionary:
    blocks = tuple(
        _evict(state, as_of, b.window_ms) if isinstance(b, CounterBlock) else state
        for b, state in zip(spec.blocks, dictionary.blocks)
    )
    return FeatureDictionary(blocks)


def age_record(record: UserRecord, spec: FeatureSpec, as_of: int) -> UserRecord:
    """Evict temporal windows up to ``as_of`` without folding in any event."""
    d = age_dictionary(record.dictionary, spec, as_of)
    return UserRecord(record.user_id, d, vectorize(d, spec), record.lstm_state, record.last_update)


def update_dictionary(dictionary: FeatureDictionary, event: Event, spec: FeatureSpec) -> FeatureDictionary:
    blocks = []
    for b, state in zip(spec.blocks, dictionary.blocks):
        if isinstance(b, CounterBlock):
            state = _evict(state, event.ts, b.window_ms)
            if b.matches(event):
                state = state + (event.ts,)
        elif b.matches(event):
            bucket = encode_categorical(event.attr(b.attribute), b.buckets)
            if isinstance(b, IdentityBlock):
                state = bucket
            else:
                state = dict(state)
                state[bucket] = state.get(bucket, 0) + 1
        blocks.append(state)
    return FeatureDictionary(tuple(blocks))


def update_features(record: UserRecord, event: Event, spec: FeatureSpec,
                    lstm_weights: LstmWeights) -> UserRecord:
    """Fold one event into a user's record, returning a new record."""
    if event.user_id != record.user_id:
        raise ContractError(f"event for {event.user_id!r} applied to record {record.user_id!r}")
    if record.last_update is not None and event.ts < record.last_update:
        raise StaleEventError(
            f"stale event: ts {event.ts} < last_update {record.last_update} for {record.user_id!r}"
        )
    d = update_dictionary(record.dictionary, event, spec)
    state = lstm_step(lstm_weights, record.lstm_state, encode_event(event, spec))
    return UserRecord(record.user_id, d, vectorize(d, spec), state, event.ts)


# --- batch build -------------------------------------------------------------


@dataclass
class UserHistory:
    dictionary: FeatureDictionary
    last_update: int
    events: list


def _checked(events: Iterable) -> Iterator[Event]:
    prev = None
    for k, item in enumerate(events, start=1):
        line, ev = item if isinstance(item, tuple) else (k, item)
        if prev is not None and ev.ts < prev:
            raise OutOfOrderError(f"line {line}: timestamp {ev.ts} earlier than previous {prev}")
        prev = ev.ts
        yield ev


def build_pass1(events: Iterable, spec: FeatureSpec, as_of: Optional[int] = None,
                keep_events: bool = False) -> dict:
    """First pass: cumulative feature dictionaries per user.

    ``events`` may yield ``Event`` or ``(line_number, Event)``. Temporal
    windows are evaluated at ``as_of`` (default: the last event time).
    With ``keep_events`` the result maps to ``UserHistory`` so callers can
    replay the per-user sequence without re-reading the stream.
    """
    per_user: dict = defaultdict(list)
    last_ts = None
    for ev in _checked(events):
        per_user[ev.user_id].append(ev)
        last_ts = ev.ts
    if not per_user:
        return {}
    if as_of is None:
        as_of = last_ts
    elif as_of < last_ts:
        raise ContractError(f"as_of {as_of} precedes the last event at {last_ts}")

    out = {}
    for user, evs in per_user.items():
        blocks = []
        for b in spec.blocks:
            matching = [e for e in evs if b.matches(e)]
            if isinstance(b, CounterBlock):
                blocks.append(tuple(e.ts for e in matching if as_of - e.ts < b.window_ms))
            elif isinstance(b, IdentityBlock):
                blocks.append(encode_categorical(matching[-1].attr(b.attribute), b.buckets)
                              if matching else None)
            else:
                counts: dict = {}
                for e in matching:
                    bucket = encode_categorical(e.attr(b.attribute), b.buckets)
                    counts[bucket] = counts.get(bucket, 0) + 1
                blocks.append(counts)
        d = FeatureDictionary(tuple(blocks))
        out[user] = UserHistory(d, evs[-1].ts, evs) if keep_events else d
    return out


def build_pass2(dicts: dict, spec: FeatureSpec) -> dict:
    """Second pass: concatenated one-hot vector per user."""
    return {user: vectorize(d.dictionary if isinstance(d, UserHistory) else d, spec)
            for user, d in dicts.items()}


def build_records(events: Iterable, spec: FeatureSpec, lstm_weights: LstmWeights,
                  as_of: Optional[int] = None, timings: Optional[dict] = None) -> dict:
    """Full batch build: both feature passes plus LSTM warm-up by replay.

    If ``timings`` is given, it receives ``features_s`` and ``lstm_s``.
    """
    import time

    t0 = time.perf_counter()
    hist = build_pass1(events, spec, as_of, keep_events=True)
    onehots = build_pass2(hist, spec)
    t1 = time.perf_counter()
    records = {}
    for user in sorted(hist):
        h = hist[user]
        state = lstm_replay(lstm_weights, [encode_event(e, spec) for e in h.events])
        records[user] = UserRecord(user, h.dictionary, onehots[user], state, h.last_update)
    t2 = time.perf_counter()
    if timings is not None:
        timings["features_s"] = t1 - t0
        timings["lstm_s"] = t2 - t1
    return records


def records_match(a: UserRecord, b: UserRecord, tol: float = 1e-12) -> bool:
    return (
        a.user_id == b.user_id
        and a.dictionary == b.dictionary
        and a.onehot == b.onehot
        and a.last_update == b.last_update
        and a.lstm_state.steps_seen == b.lstm_state.steps_seen
        and a.lstm_state.max_abs_diff(b.lstm_state) <= tol
    )
