"""Inference latency as a function of the idle gap between requests.

On some virtualized hosts a single call gets several times slower after the
thread has been idle for a few milliseconds, so low request rates can show
higher percentile latency than high ones. This isolates the effect from the
server: it times ``Engine.infer`` directly with sleeps or busy-spins between
calls.

    python scripts/idle_gap_probe.py --gaps-ms 0 0.1 1 5 10
"""

import argparse
import statistics
import sys
import time
from pathlib import Path

sys.path.insert(0, str(Path(__file__).resolve().parents[1] / "tests"))
from helpers import make_engine  # noqa: E402


def probe(engine, users, gap_s, spin, n):
    samples = []
    for k in range(n):
        if gap_s:
            if spin:
                end = time.perf_counter() + gap_s
                while time.perf_counter() < end:
                    pass
            else:
                time.sleep(gap_s)
        req = engine.prepare(users[k % len(users)])
        t = time.perf_counter_ns()
        engine.infer(req)
        samples.append((time.perf_counter_ns() - t) / 1e3)
    samples.sort()
    return statistics.median(samples), samples[int(0.9 * (n - 1))]


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--gaps-ms", type=float, nargs="+", default=[0, 0.1, 1, 5, 10])
    ap.add_argument("-n", type=int, default=300)
    args = ap.parse_args()

    engine, events = make_engine(users=200, events=5000, hidden=20, trees=30, depth=4)
    users = sorted({e.user_id for e in events})
    print(f"{'gap_ms':>7} {'mode':>6} {'p50_us':>8} {'p90_us':>8}")
    for gap in args.gaps_ms:
        for spin in (False, True) if gap else (False,):
            p50, p90 = probe(engine, users, gap / 1e3, spin, args.n)
            print(f"{gap:>7} {'spin' if spin else 'sleep':>6} {p50:>8.1f} {p90:>8.1f}")


if __name__ == "__main__":
    main()
