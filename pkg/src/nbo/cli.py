"""``nbo`` command line: data/model generation, startup build, serve, bench."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from .config import BenchConfig, ServerConfig, parse_addr
from .errors import ConfigError, ContractError, SnapshotError


def _positive_int(text: str) -> int:
    v = int(text)
    if v < 1:
        raise argparse.ArgumentTypeError(f"{text} must be >= 1")
    return v


def _nonneg_int(text: str) -> int:
    v = int(text)
    if v < 0:
        raise argparse.ArgumentTypeError(f"{text} must be >= 0")
    return v


def cmd_gen_data(args) -> int:
    from .bench.datagen import generate_events, write_events_csv

    events = generate_events(args.seed, args.users, args.events, args.products)
    write_events_csv(events, args.out)
    print(f"wrote {len(events)} events to {args.out}")
    return 0


def cmd_gen_model(args) -> int:
    from .bench.datagen import write_models
    from .features import load_feature_spec

    spec = load_feature_spec(args.spec) if args.spec else None
    write_models(args.seed, args.hidden, args.input_dim, args.trees, args.depth, args.features,
                 args.out_lstm, args.out_gbdt, spec=spec)
    print(f"wrote {args.out_lstm} and {args.out_gbdt}")
    return 0


def cmd_gen_spec(args) -> int:
    from .features import DEFAULT_SPEC, FeatureSpec

    spec = FeatureSpec.from_dict(DEFAULT_SPEC)
    Path(args.out).write_text(json.dumps(DEFAULT_SPEC, indent=2) + "\n")
    print(f"wrote {args.out} (features={spec.n_features}, lstm input={spec.input_dim})")
    return 0


def cmd_startup(args) -> int:
    from .bench.startup import run_startup

    report_path = args.report or f"{args.out}.timing.json"
    report = run_startup(args.transactions, args.spec, args.lstm, args.gbdt, args.out,
                         report_path=report_path)
    cal = report.calibration
    print(f"snapshot {args.out}: {report.users} users from {report.events} events")
    print(f"T0 (feature build) {report.t0_s:.3f}s  T2 (warm-up + load + calibration) {report.t2_s:.3f}s")
    if "skipped" in cal:
        print(f"calibration skipped: {cal['skipped']}; using w=0.5 tau=0.5")
    else:
        print(f"calibrated w={cal['w']:.2f} tau={cal['tau']:.3f} auc={cal['auc']:.4f} f={cal['fscore']:.4f}")
    print(f"timing report {report_path}")
    return 0


def cmd_serve(args) -> int:
    from .serving.engine import Engine
    from .serving.server import run_server
    from .store import restore

    host, port = parse_addr(args.listen)
    config = ServerConfig(
        host=host, port=port, partitions=args.partitions, inference_workers=args.inference_workers,
        batch_window_us=args.batch_window_us, pin_workers=args.pin_workers,
        single_threaded=args.single_threaded, snapshot_out=args.snapshot_out,
        monitor_period_s=args.monitor_period, scale_out_threshold=args.scale_out_threshold,
    ).validate()
    engine = Engine.from_store(restore(args.snapshot, partitions=config.partitions))

    def ready(addr):
        print(f"listening on {addr[0]}:{addr[1]}", flush=True)

    try:
        run_server(engine, config, ready=ready)
    except OSError as exc:
        raise ConfigError(f"cannot listen on {args.listen}: {exc}") from exc
    print("server stopped", flush=True)
    return 0


def cmd_bench(args) -> int:
    from .bench.loadgen import run_bench
    from .bench.report import COLUMNS

    host, port = parse_addr(args.addr)
    steps = args.steps or (2 if args.ramp else 1)
    cfg = BenchConfig(rate=args.rate, ramp_to=args.ramp, steps=steps, mix=args.mix,
                      duration_s=args.duration, connections=args.connections,
                      grace_s=args.grace, seed=args.seed, report_path=args.report,
                      events_path=args.events, users=args.users,
                      stats_poll_s=args.stats_poll).validate()
    report = run_bench(cfg, host, port)
    for row in report.rows:
        print(f"rate {row['target_rate']:.0f}/s: update {row['throughput_update']:.1f}/s "
              f"recommend {row['throughput_recommend']:.1f}/s  rl p50/p90/p99 "
              f"{row['rl_p50']}/{row['rl_p90']}/{row['rl_p99']} us  in_flight {row['in_flight']} "
              f"errors {row['errors']} scale_out {row['scale_out']}")
    if args.report:
        print(f"report {args.report} ({len(COLUMNS)} columns)")
    return 3 if report.partial else 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="nbo", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("gen-data", help="write a seeded synthetic transaction CSV")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--users", type=_positive_int, required=True)
    s.add_argument("--events", type=_nonneg_int, required=True)
    s.add_argument("--products", type=_positive_int, required=True)
    s.add_argument("--out", required=True)
    s.set_defaults(fn=cmd_gen_data)

    s = sub.add_parser("gen-model", help="write seeded random LSTM and GBDT model files")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--hidden", type=_positive_int, required=True)
    s.add_argument("--input-dim", type=_positive_int, required=True)
    s.add_argument("--trees", type=_nonneg_int, required=True)
    s.add_argument("--depth", type=_nonneg_int, required=True)
    s.add_argument("--features", type=_positive_int, required=True)
    s.add_argument("--out-lstm", required=True)
    s.add_argument("--out-gbdt", required=True)
    s.add_argument("--spec", help="feature spec to check dimensions against")
    s.set_defaults(fn=cmd_gen_model)

    s = sub.add_parser("gen-spec", help="write the default feature spec")
    s.add_argument("--out", required=True)
    s.set_defaults(fn=cmd_gen_spec)

    s = sub.add_parser("startup", help="build features, warm LSTM state, calibrate, snapshot")
    s.add_argument("--transactions", required=True)
    s.add_argument("--spec", required=True)
    s.add_argument("--lstm", required=True)
    s.add_argument("--gbdt", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--report", help="timing report path (default: OUT.timing.json)")
    s.set_defaults(fn=cmd_startup)

    s = sub.add_parser("serve", help="serve recommend and feature_update from a snapshot")
    s.add_argument("--snapshot", required=True)
    s.add_argument("--listen", default="127.0.0.1:7070")
    s.add_argument("--partitions", type=_positive_int, default=1)
    s.add_argument("--inference-workers", type=_positive_int, default=1)
    s.add_argument("--batch-window-us", type=_nonneg_int, default=0)
    s.add_argument("--pin-workers", action="store_true")
    s.add_argument("--single-threaded", action="store_true",
                   help="run every stage on the I/O thread (needs P=M=1)")
    s.add_argument("--snapshot-out", help="path written by the snapshot request")
    s.add_argument("--monitor-period", type=float, default=1.0)
    s.add_argument("--scale-out-threshold", type=float, default=0.80)
    s.set_defaults(fn=cmd_serve)

    s = sub.add_parser("bench", help="replay load against a server and write a CSV report")
    s.add_argument("--addr", required=True)
    s.add_argument("--rate", type=float, required=True)
    s.add_argument("--ramp", type=float, help="final rate of a linear ramp")
    s.add_argument("--steps", type=_positive_int, help="rate steps (default 2 with --ramp)")
    s.add_argument("--mix", type=float, default=0.8, help="FeatureUpdate share of messages")
    s.add_argument("--duration", type=float, default=10.0, help="seconds per rate step")
    s.add_argument("--report")
    s.add_argument("--events", help="transaction CSV to replay (default: synthetic)")
    s.add_argument("--users", type=_positive_int, default=1000)
    s.add_argument("--connections", type=_positive_int, default=8)
    s.add_argument("--grace", type=float, default=2.0)
    s.add_argument("--stats-poll", type=float, default=1.0)
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(fn=cmd_bench)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.fn(args)
    except (ContractError, ConfigError, SnapshotError, OSError, RuntimeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
