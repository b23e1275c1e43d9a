"""Per-event cost of full-history replay versus one cached LSTM step.

    python scripts/lstm_history_scaling.py --hidden 150 --lengths 10 100 1000 10000
"""

import argparse
import statistics
import time

import numpy as np

from nbo.lstm import lstm_predict, lstm_replay, lstm_step, random_lstm_weights


def median_us(fn, repeats):
    samples = []
    for _ in range(repeats):
        t = time.perf_counter_ns()
        fn()
        samples.append(time.perf_counter_ns() - t)
    return statistics.median(samples) / 1e3


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--hidden", type=int, default=150)
    ap.add_argument("--input-dim", type=int, default=16)
    ap.add_argument("--lengths", type=int, nargs="+", default=[10, 100, 1000, 10_000])
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()

    rng = np.random.default_rng(args.seed)
    weights = random_lstm_weights(rng, args.hidden, args.input_dim)
    print(f"{'history':>8} {'replay_us':>12} {'cached_us':>10}")
    for n in args.lengths:
        seq = rng.normal(size=(n + 1, args.input_dim))
        state = lstm_replay(weights, seq[:n])
        replay = median_us(lambda: lstm_predict(weights, lstm_replay(weights, seq)), 5)
        cached = median_us(lambda: lstm_predict(weights, lstm_step(weights, state, seq[n])), 200)
        print(f"{n:>8} {replay:>12.1f} {cached:>10.1f}")


if __name__ == "__main__":
    main()
