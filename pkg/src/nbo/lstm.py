"""LSTM forward pass with an explicit, persistable (h, c) state.

Serving keeps one ``LstmState`` per user and advances it with a single
``lstm_step`` per event, so inference cost does not depend on history length.
``lstm_replay`` recomputes a state from a full sequence and is used to warm the
store at startup and as the reference the incremental path is checked against.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import DimensionError, ModelFormatError, NonFiniteError

GATES = ("i", "f", "g", "o")


def _frozen(a: np.ndarray) -> np.ndarray:
    a.flags.writeable = False
    return a


def _sigmoid(x: np.ndarray) -> np.ndarray:
    with np.errstate(over="ignore"):
        return 1.0 / (1.0 + np.exp(-x))


@dataclass(frozen=True, eq=False)
class LstmWeights:
    """Single-layer LSTM followed by a 2-way softmax dense layer.

    ``W`` (4n x d), ``U`` (4n x n) and ``b`` (4n) stack the gate blocks in
    [i, f, g, o] order; ``D`` (2 x n) and ``e`` (2) form the output layer.
    """

    W: np.ndarray
    U: np.ndarray
    b: np.ndarray
    D: np.ndarray
    e: np.ndarray

    def __post_init__(self):
        d = self.W.shape[1] if self.W.ndim == 2 else -1
        n = self.U.shape[1] if self.U.ndim == 2 else -1
        if d < 1 or n < 1:
            raise DimensionError("W and U must be non-empty 2-d matrices")
        expected = {"W": (4 * n, d), "U": (4 * n, n), "b": (4 * n,), "D": (2, n), "e": (2,)}
        for name, shape in expected.items():
            arr = getattr(self, name)
            if arr.shape != shape:
                raise DimensionError(f"{name} has shape {arr.shape}, expected {shape}")
            if not np.isfinite(arr).all():
                raise NonFiniteError(f"{name} contains non-finite values")
            object.__setattr__(self, name, _frozen(np.array(arr, dtype=np.float64)))

    @property
    def input_dim(self) -> int:
        return self.W.shape[1]

    @property
    def hidden_dim(self) -> int:
        return self.U.shape[1]

    def gate(self, name: str) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        k = GATES.index(name)
        n = self.hidden_dim
        rows = slice(k * n, (k + 1) * n)
        return self.W[rows], self.U[rows], self.b[rows]

    def __eq__(self, other):
        if not isinstance(other, LstmWeights):
            return NotImplemented
        return all(np.array_equal(getattr(self, f), getattr(other, f)) for f in "WUbDe")

    def to_dict(self) -> dict:
        doc = {"input_dim": self.input_dim, "hidden_dim": self.hidden_dim}
        for g in GATES:
            W, U, b = self.gate(g)
            doc[f"W_{g}"] = W.tolist()
            doc[f"U_{g}"] = U.tolist()
            doc[f"b_{g}"] = b.tolist()
        doc["dense_W"] = self.D.tolist()
        doc["dense_b"] = self.e.tolist()
        return doc

    @classmethod
    def from_dict(cls, doc: dict) -> "LstmWeights":
        try:
            d = int(doc["input_dim"])
            n = int(doc["hidden_dim"])
        except (KeyError, TypeError, ValueError) as exc:
            raise ModelFormatError(f"missing or invalid dimension field: {exc}") from exc
        if d < 1 or n < 1:
            raise DimensionError("input_dim and hidden_dim must be positive")

        def field(name, shape):
            if name not in doc:
                raise ModelFormatError(f"missing field {name!r}")
            try:
                arr = np.array(doc[name], dtype=np.float64)
            except (TypeError, ValueError) as exc:
                raise ModelFormatError(f"field {name!r} is not numeric: {exc}") from exc
            if arr.shape != shape:
                raise DimensionError(f"field {name!r} has shape {arr.shape}, expected {shape}")
            if not np.isfinite(arr).all():
                raise NonFiniteError(f"field {name!r} contains non-finite values")
            return arr

        W = np.vstack([field(f"W_{g}", (n, d)) for g in GATES])
        U = np.vstack([field(f"U_{g}", (n, n)) for g in GATES])
        b = np.concatenate([field(f"b_{g}", (n,)) for g in GATES])
        return cls(W, U, b, field("dense_W", (2, n)), field("dense_b", (2,)))


@dataclass(frozen=True, eq=False)
class LstmState:
    h: np.ndarray
    c: np.ndarray
    steps_seen: int = 0

    def __post_init__(self):
        if self.h.shape != self.c.shape or self.h.ndim != 1:
            raise DimensionError(f"h {self.h.shape} and c {self.c.shape} must be equal-length vectors")
        if self.steps_seen < 0:
            raise ValueError("steps_seen must be non-negative")
        if not (np.isfinite(self.h).all() and np.isfinite(self.c).all()):
            raise NonFiniteError("state contains non-finite values")
        object.__setattr__(self, "h", _frozen(np.array(self.h, dtype=np.float64)))
        object.__setattr__(self, "c", _frozen(np.array(self.c, dtype=np.float64)))

    @classmethod
    def zeros(cls, hidden_dim: int) -> "LstmState":
        return cls(np.zeros(hidden_dim), np.zeros(hidden_dim), 0)

    def __eq__(self, other):
        if not isinstance(other, LstmState):
            return NotImplemented
        return (
            self.steps_seen == other.steps_seen
            and np.array_equal(self.h, other.h)
            and np.array_equal(self.c, other.c)
        )

    def max_abs_diff(self, other: "LstmState") -> float:
        return float(max(np.max(np.abs(self.h - other.h), initial=0.0),
                         np.max(np.abs(self.c - other.c), initial=0.0)))


def _check_input(weights: LstmWeights, x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.shape != (weights.input_dim,):
        raise DimensionError(f"input has shape {x.shape}, expected ({weights.input_dim},)")
    if not np.isfinite(x).all():
        raise NonFiniteError("input vector contains non-finite values")
    return x


def _check_state(weights: LstmWeights, state: LstmState) -> None:
    if state.h.shape[0] != weights.hidden_dim:
        raise DimensionError(
            f"state has hidden size {state.h.shape[0]}, weights expect {weights.hidden_dim}"
        )


def _cell(z: np.ndarray, c: np.ndarray, n: int) -> tuple[np.ndarray, np.ndarray]:
    i = _sigmoid(z[:n])
    f = _sigmoid(z[n:2 * n])
    g = np.tanh(z[2 * n:3 * n])
    o = _sigmoid(z[3 * n:])
    c_new = f * c + i * g
    return o * np.tanh(c_new), c_new


def lstm_step(weights: LstmWeights, state: LstmState, x) -> LstmState:
    """Fold one input vector into ``state``; the input state is left untouched."""
    x = _check_input(weights, x)
    _check_state(weights, state)
    z = weights.W @ x + weights.U @ state.h + weights.b
    h, c = _cell(z, state.c, weights.hidden_dim)
    return LstmState(h, c, state.steps_seen + 1)


def lstm_predict(weights: LstmWeights, state: LstmState) -> tuple[float, float]:
    """Softmax over the dense layer; returns ``(p_neg, p_pos)``."""
    _check_state(weights, state)
    logits = weights.D @ state.h + weights.e
    shifted = np.exp(logits - logits.max())
    p = shifted / shifted.sum()
    return float(p[0]), float(p[1])


def lstm_replay(weights: LstmWeights, sequence: Sequence) -> LstmState:
    """Run the network over a whole sequence starting from the zero state.

    Input projections for all timesteps are computed in one matrix product,
    as a framework would, so this is a separate numerical route from
    iterating ``lstm_step``; the two agree to rounding.
    """
    n, d = weights.hidden_dim, weights.input_dim
    if len(sequence) == 0:
        return LstmState.zeros(n)
    rows = []
    for idx, x in enumerate(sequence):
        x = np.asarray(x, dtype=np.float64)
        if x.shape != (d,):
            raise DimensionError(f"sequence element {idx} has shape {x.shape}, expected ({d},)")
        rows.append(x)
    X = np.vstack(rows)
    if not np.isfinite(X).all():
        bad = int(np.flatnonzero(~np.isfinite(X).all(axis=1))[0])
        raise NonFiniteError(f"sequence element {bad} contains non-finite values")
    projected = X @ weights.W.T + weights.b
    h = np.zeros(n)
    c = np.zeros(n)
    U = weights.U
    for t in range(X.shape[0]):
        h, c = _cell(projected[t] + U @ h, c, n)
    return LstmState(h, c, X.shape[0])


def load_lstm_weights(path) -> LstmWeights:
    try:
        doc = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ModelFormatError(f"{path}: not valid JSON: {exc}") from exc
    if not isinstance(doc, dict):
        raise ModelFormatError(f"{path}: top level must be an object")
    return LstmWeights.from_dict(doc)


def save_lstm_weights(weights: LstmWeights, path) -> None:
    Path(path).write_text(json.dumps(weights.to_dict(), sort_keys=True))


def random_lstm_weights(rng: np.random.Generator, hidden_dim: int, input_dim: int) -> LstmWeights:
    """Uniform weights in +-0.5/sqrt(n), small enough to keep gates unsaturated."""
    n, d = hidden_dim, input_dim
    scale = 0.5 / math.sqrt(n)

    def u(*shape):
        return rng.uniform(-scale, scale, size=shape)

    return LstmWeights(u(4 * n, d), u(4 * n, n), u(4 * n), u(2, n), u(2))
