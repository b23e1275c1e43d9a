"""End-to-end latency run: synthetic data, toy models, snapshot, server, ramp.

    python scripts/latency_ramp.py --out runs/ramp --rate 100 --ramp 1000 --steps 4 --mix 0.0

Writes the bench CSV (plus the ``_util.csv`` trace) and prints the per-step
throughput and RL percentiles.
"""

import argparse
import csv
import subprocess
import sys
from pathlib import Path

ROOT = Path(__file__).resolve().parents[1]
SPEC = ROOT / "configs" / "feature_spec.json"


def nbo(*args):
    subprocess.run([sys.executable, "-m", "nbo", *map(str, args)], check=True)


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--out", default="runs/ramp")
    ap.add_argument("--seed", type=int, default=7)
    ap.add_argument("--users", type=int, default=1000)
    ap.add_argument("--events", type=int, default=20_000)
    ap.add_argument("--hidden", type=int, default=20)
    ap.add_argument("--rate", type=float, default=100)
    ap.add_argument("--ramp", type=float, default=1000)
    ap.add_argument("--steps", type=int, default=4)
    ap.add_argument("--mix", type=float, default=0.0)
    ap.add_argument("--duration", type=float, default=5.0)
    ap.add_argument("--partitions", type=int, default=2)
    ap.add_argument("--inference-workers", type=int, default=2)
    args = ap.parse_args()

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    ev, lstm, gbdt, snap = out / "events.csv", out / "lstm.json", out / "gbdt.json", out / "store.snap"
    nbo("gen-data", "--seed", args.seed, "--users", args.users, "--events", args.events,
        "--products", 500, "--out", ev)
    nbo("gen-model", "--seed", args.seed, "--hidden", args.hidden, "--input-dim", 12, "--trees", 30,
        "--depth", 4, "--features", 60, "--out-lstm", lstm, "--out-gbdt", gbdt, "--spec", SPEC)
    nbo("startup", "--transactions", ev, "--spec", SPEC, "--lstm", lstm, "--gbdt", gbdt, "--out", snap)

    server = subprocess.Popen(
        [sys.executable, "-m", "nbo", "serve", "--snapshot", str(snap), "--listen", "127.0.0.1:0",
         "--partitions", str(args.partitions), "--inference-workers", str(args.inference_workers)],
        stdout=subprocess.PIPE, text=True)
    try:
        addr = server.stdout.readline().split()[-1]
        report = out / "bench.csv"
        nbo("bench", "--addr", addr, "--rate", args.rate, "--ramp", args.ramp, "--steps", args.steps,
            "--mix", args.mix, "--duration", args.duration, "--events", ev, "--report", report)
    finally:
        server.terminate()
        server.wait(20)

    for row in csv.DictReader(open(report)):
        print(f"rate {row['target_rate']:>6}  rec/s {row['throughput_recommend']:>7}  "
              f"upd/s {row['throughput_update']:>7}  rl p50/p90/p99 "
              f"{row['rl_p50']}/{row['rl_p90']}/{row['rl_p99']} us")


if __name__ == "__main__":
    main()
