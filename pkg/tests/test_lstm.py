import json
import math
import time

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from nbo.errors import DimensionError, ModelFormatError, NonFiniteError
from nbo.lstm import (
    LstmState,
    LstmWeights,
    load_lstm_weights,
    lstm_predict,
    lstm_replay,
    lstm_step,
    random_lstm_weights,
    save_lstm_weights,
)


def zero_weights(n, d):
    return LstmWeights(np.zeros((4 * n, d)), np.zeros((4 * n, n)), np.zeros(4 * n),
                       np.zeros((2, n)), np.zeros(2))


def saturated_weights():
    # gates [i, f, g, o]: i and o open, f closed, candidate = x
    W = np.zeros((4, 1))
    W[2, 0] = 1.0
    b = np.array([20.0, -20.0, 0.0, 20.0])
    return LstmWeights(W, np.zeros((4, 1)), b, np.zeros((2, 1)), np.zeros(2))


def test_zero_weights_fixed_point():
    w = zero_weights(3, 2)
    s = lstm_step(w, LstmState.zeros(3), [5.0, -2.0])
    assert np.all(s.h == 0) and np.all(s.c == 0)
    assert s.steps_seen == 1


def test_saturated_scalar_cell():
    s = lstm_step(saturated_weights(), LstmState.zeros(1), [1.0])
    sig = lambda v: 1 / (1 + math.exp(-v))
    c = sig(-20) * 0.0 + sig(20) * math.tanh(1.0)
    h = sig(20) * math.tanh(c)
    assert s.c[0] == pytest.approx(c, abs=1e-12)
    assert s.h[0] == pytest.approx(h, abs=1e-12)
    assert s.c[0] == pytest.approx(0.761594, abs=1e-6)
    assert s.h[0] == pytest.approx(0.642015, abs=1e-6)


def test_step_does_not_mutate_input_state():
    rng = np.random.default_rng(0)
    w = random_lstm_weights(rng, 5, 3)
    s0 = LstmState(rng.normal(size=5), rng.normal(size=5), 7)
    h_before, c_before = s0.h.copy(), s0.c.copy()
    s1 = lstm_step(w, s0, rng.normal(size=3))
    assert np.array_equal(s0.h, h_before) and np.array_equal(s0.c, c_before)
    assert s0.steps_seen == 7 and s1.steps_seen == 8
    with pytest.raises(ValueError):
        s1.h[0] = 1.0


def test_step_errors():
    w = random_lstm_weights(np.random.default_rng(1), 4, 2)
    with pytest.raises(DimensionError):
        lstm_step(w, LstmState.zeros(4), [1.0, 2.0, 3.0])
    with pytest.raises(DimensionError):
        lstm_step(w, LstmState.zeros(5), [1.0, 2.0])
    with pytest.raises(NonFiniteError):
        lstm_step(w, LstmState.zeros(4), [1.0, float("nan")])
    with pytest.raises(DimensionError):
        lstm_predict(w, LstmState.zeros(3))


def test_predict_examples():
    w = zero_weights(2, 2)
    assert lstm_predict(w, LstmState.zeros(2)) == (0.5, 0.5)
    # logits (0, 1) via the dense bias
    w = LstmWeights(np.zeros((8, 2)), np.zeros((8, 2)), np.zeros(8), np.zeros((2, 2)),
                    np.array([0.0, 1.0]))
    p_neg, p_pos = lstm_predict(w, LstmState.zeros(2))
    assert p_neg == pytest.approx(1 / (1 + math.e), abs=1e-6)
    assert p_pos == pytest.approx(0.731059, abs=1e-6)


def test_replay_base_cases():
    rng = np.random.default_rng(2)
    w = random_lstm_weights(rng, 6, 3)
    assert lstm_replay(w, []) == LstmState.zeros(6)
    x = rng.normal(size=3)
    one = lstm_replay(w, [x])
    step = lstm_step(w, LstmState.zeros(6), x)
    assert one.steps_seen == 1
    assert one.max_abs_diff(step) <= 1e-15


def test_replay_names_bad_index():
    w = random_lstm_weights(np.random.default_rng(3), 4, 2)
    with pytest.raises(DimensionError, match="element 2"):
        lstm_replay(w, [[0.0, 0.0], [1.0, 1.0], [1.0], [0.0, 0.0]])


def fold(w, seq):
    s = LstmState.zeros(w.hidden_dim)
    for x in seq:
        s = lstm_step(w, s, x)
    return s


@pytest.mark.parametrize("length", [50, 1000])
def test_fold_matches_replay(length):
    rng = np.random.default_rng(42)
    w = random_lstm_weights(rng, 8, 4)
    seq = rng.normal(size=(length, 4))
    a, b = fold(w, seq), lstm_replay(w, seq)
    assert a.steps_seen == b.steps_seen == length
    assert a.max_abs_diff(b) <= 1e-12


@settings(max_examples=40, deadline=None)
@given(n=st.integers(1, 32), d=st.integers(1, 8), length=st.integers(0, 200),
       seed=st.integers(0, 2**32 - 1))
def test_incremental_replay_equivalence_property(n, d, length, seed):
    rng = np.random.default_rng(seed)
    w = random_lstm_weights(rng, n, d)
    seq = rng.normal(size=(length, d))
    a, b = fold(w, seq), lstm_replay(w, seq)
    assert a.max_abs_diff(b) <= 1e-12
    if length:
        assert np.all(np.abs(a.h) < 1.0)
    p = lstm_predict(w, a)
    assert abs(sum(p) - 1.0) <= 1e-12
    assert all(0.0 < v < 1.0 for v in p)


def test_determinism_bitwise():
    rng = np.random.default_rng(9)
    w = random_lstm_weights(rng, 20, 6)
    seq = rng.normal(size=(100, 6))
    a, b = fold(w, seq), fold(w, seq)
    assert a == b
    assert lstm_predict(w, a) == lstm_predict(w, b)


def test_weights_file_round_trip(tmp_path):
    w = random_lstm_weights(np.random.default_rng(42), 8, 4)
    path = tmp_path / "lstm.json"
    save_lstm_weights(w, path)
    assert load_lstm_weights(path) == w


def test_weights_file_gate_order(tmp_path):
    w = random_lstm_weights(np.random.default_rng(5), 3, 2)
    doc = w.to_dict()
    for k, g in enumerate("ifgo"):
        assert np.array_equal(np.array(doc[f"W_{g}"]), w.W[3 * k:3 * (k + 1)])


def test_weights_file_validation(tmp_path):
    doc = random_lstm_weights(np.random.default_rng(42), 8, 4).to_dict()
    bad = dict(doc, W_f=doc["W_f"][:-1])
    p = tmp_path / "rows.json"
    p.write_text(json.dumps(bad))
    with pytest.raises(DimensionError, match="W_f"):
        load_lstm_weights(p)

    nan = json.loads(json.dumps(doc))
    nan["U_o"][0][0] = float("nan")
    p = tmp_path / "nan.json"
    p.write_text(json.dumps(nan))
    with pytest.raises(NonFiniteError):
        load_lstm_weights(p)

    p = tmp_path / "garbage.json"
    p.write_text("{not json")
    with pytest.raises(ModelFormatError):
        load_lstm_weights(p)


def _per_event_cost(w, state, x, reps=2000):
    best = float("inf")
    for _ in range(5):
        t0 = time.perf_counter()
        for _ in range(reps):
            lstm_predict(w, lstm_step(w, state, x))
        best = min(best, (time.perf_counter() - t0) / reps)
    return best


def test_constant_time_step():
    rng = np.random.default_rng(11)
    w = random_lstm_weights(rng, 32, 8)
    x = rng.normal(size=8)
    short = fold(w, rng.normal(size=(10, 8)))
    long_ = fold(w, rng.normal(size=(10_000, 8)))
    assert long_.steps_seen == 10_000
    assert _per_event_cost(w, long_, x, 500) <= 2 * _per_event_cost(w, short, x, 500)
