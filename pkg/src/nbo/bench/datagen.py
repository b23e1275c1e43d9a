"""Synthetic transaction streams and toy models.

Transaction CSV columns: ``ts_ms,user_id,event_type,item_id,category,price``.
``price`` is empty except for orders. Rows are sorted by ``ts_ms``.
"""

from __future__ import annotations

import csv
import io
from pathlib import Path
from typing import Iterator, Optional

import numpy as np

from ..errors import ContractError
from ..features import Event, FeatureSpec, default_spec
from ..gbdt import TreeEnsemble, random_ensemble, save_gbdt
from ..lstm import LstmWeights, random_lstm_weights, save_lstm_weights

CSV_HEADER = ["ts_ms", "user_id", "event_type", "item_id", "category", "price"]
START_MS = 1_470_009_600_000  # 2016-08-01T00:00:00Z
SPAN_MS = 61 * 24 * 3600 * 1000
EVENT_MIX = {"view": 0.6, "impression": 0.3, "order": 0.1}


def _zipf_weights(n: int, s: float = 1.1) -> np.ndarray:
    w = 1.0 / np.arange(1, n + 1) ** s
    return w / w.sum()


def generate_events(seed: int, n_users: int, n_events: int, n_products: int,
                    span_ms: int = SPAN_MS, start_ms: int = START_MS) -> list[Event]:
    """Clock-sorted events with Zipf-skewed user and product popularity."""
    if n_users < 1 or n_products < 1 or n_events < 0:
        raise ContractError("sizes must be positive")
    rng = np.random.default_rng(seed)
    n_categories = max(2, n_products // 50)
    product_category = rng.integers(0, n_categories, size=n_products)
    product_price = np.round(rng.lognormal(2.5, 0.8, size=n_products), 2)
    users = rng.permutation(n_users)[rng.choice(n_users, size=n_events, p=_zipf_weights(n_users))]
    products = rng.permutation(n_products)[
        rng.choice(n_products, size=n_events, p=_zipf_weights(n_products))]
    kinds = list(EVENT_MIX)
    types = rng.choice(len(kinds), size=n_events, p=list(EVENT_MIX.values()))
    gaps = rng.exponential(span_ms / max(n_events, 1), size=n_events)
    ts = start_ms + np.floor(np.cumsum(gaps)).astype(np.int64)

    events = []
    for k in range(n_events):
        p = int(products[k])
        kind = kinds[types[k]]
        events.append(Event(
            int(ts[k]), f"u{int(users[k]):06d}", kind, f"p{p:06d}",
            f"c{int(product_category[p]):04d}",
            float(product_price[p]) if kind == "order" else None,
        ))
    return events


def format_price(price: Optional[float]) -> str:
    return "" if price is None else f"{price:.2f}"


def write_events_csv(events, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(CSV_HEADER)
        for e in events:
            w.writerow([e.ts, e.user_id, e.type, e.item, e.category, format_price(e.price)])


def read_events_csv(path) -> Iterator[tuple[int, Event]]:
    """Yield ``(line_number, Event)``; malformed rows raise with the line number."""
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != CSV_HEADER:
            raise ContractError(f"{path}: expected header {','.join(CSV_HEADER)}")
        for row in reader:
            line = reader.line_num
            if not row:
                continue
            try:
                ts, user, kind, item, category, price = row
                yield line, Event(int(ts), user, kind, item, category,
                                  float(price) if price else None)
            except (ValueError, ContractError) as exc:
                raise ContractError(f"{path}: line {line}: {exc}") from exc


def load_events(path) -> list[Event]:
    return [e for _, e in read_events_csv(path)]


def generate_models(seed: int, hidden: int, input_dim: int, trees: int, depth: int,
                    n_features: int) -> tuple[LstmWeights, TreeEnsemble]:
    if min(hidden, input_dim, n_features) < 1 or trees < 0 or depth < 0:
        raise ContractError("model dimensions must be positive")
    rng = np.random.default_rng(seed)
    lstm = random_lstm_weights(rng, hidden, input_dim)
    gbdt = random_ensemble(rng, trees, depth, n_features)
    return lstm, gbdt


def write_models(seed: int, hidden: int, input_dim: int, trees: int, depth: int,
                 n_features: int, out_lstm, out_gbdt, spec: Optional[FeatureSpec] = None):
    if spec is not None:
        if spec.n_features != n_features:
            raise ContractError(f"--features {n_features} conflicts with spec width {spec.n_features}")
        if spec.input_dim != input_dim:
            raise ContractError(f"--input-dim {input_dim} conflicts with spec LSTM input {spec.input_dim}")
    lstm, gbdt = generate_models(seed, hidden, input_dim, trees, depth, n_features)
    save_lstm_weights(lstm, out_lstm)
    save_gbdt(gbdt, out_gbdt)
    return lstm, gbdt


def toy_setup(seed: int = 0, hidden: int = 20, trees: int = 30, depth: int = 4,
              spec: Optional[FeatureSpec] = None):
    """Default spec plus seeded models sized to it."""
    spec = spec or default_spec()
    lstm, gbdt = generate_models(seed, hidden, spec.input_dim, trees, depth, spec.n_features)
    return spec, lstm, gbdt
