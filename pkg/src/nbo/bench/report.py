"""Bench report rows and CSV output. Latency columns are in microseconds."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

from ..metrics import percentiles
from ..serving.protocol import RECOMMEND_STAGES, UPDATE_STAGES

PCTS = (50, 90, 99)
STAGES = tuple(sorted(set(RECOMMEND_STAGES) | set(UPDATE_STAGES), key=lambda s: int(s[1:])))


def _pct_columns(prefix: str) -> list:
    return [f"{prefix}_p{p}" for p in PCTS]


COLUMNS = (
    ["step", "target_rate", "mix", "duration_s",
     "sent_update", "sent_recommend", "answered_update", "answered_recommend",
     "errors", "stale", "in_flight", "reconciled", "rl_sum_violations",
     "send_rate", "throughput_update", "throughput_recommend"]
    + _pct_columns("rl") + _pct_columns("e2e") + _pct_columns("process_time")
    + [c for s in STAGES for c in _pct_columns(s)]
    + ["util_mean", "util_max", "scale_out", "partial"]
)

TRACE_COLUMNS = ["t", "step", "busy", "io", "partition", "inference", "scale_out"]


@dataclass
class StepResult:
    step: int
    target_rate: float
    mix: float
    duration_s: float
    sent: dict = field(default_factory=lambda: {"feature_update": 0, "recommend": 0})
    answered: dict = field(default_factory=lambda: {"feature_update": 0, "recommend": 0})
    errors: int = 0
    stale: int = 0
    rl_sum_violations: int = 0
    rl: list = field(default_factory=list)
    e2e: list = field(default_factory=list)
    process_time: list = field(default_factory=list)
    stages: dict = field(default_factory=lambda: {s: [] for s in STAGES})
    util: list = field(default_factory=list)
    scale_out: bool = False
    partial: bool = False
    send_elapsed_s: float = 0.0

    @property
    def total_sent(self) -> int:
        return sum(self.sent.values())

    @property
    def in_flight(self) -> int:
        return self.total_sent - sum(self.answered.values()) - self.errors

    def row(self) -> dict:
        def pct(prefix, values):
            if not values:
                return {f"{prefix}_p{p}": "" for p in PCTS}
            got = percentiles(values, PCTS)
            return {f"{prefix}_p{p}": got[p] for p in PCTS}

        row = {
            "step": self.step, "target_rate": self.target_rate, "mix": self.mix,
            "duration_s": self.duration_s,
            "sent_update": self.sent["feature_update"], "sent_recommend": self.sent["recommend"],
            "answered_update": self.answered["feature_update"],
            "answered_recommend": self.answered["recommend"],
            "errors": self.errors, "stale": self.stale, "in_flight": self.in_flight,
            "reconciled": self.in_flight >= 0,
            "rl_sum_violations": self.rl_sum_violations,
            "send_rate": self.total_sent / self.send_elapsed_s if self.send_elapsed_s else 0.0,
            "throughput_update": self.answered["feature_update"] / self.duration_s,
            "throughput_recommend": self.answered["recommend"] / self.duration_s,
        }
        row.update(pct("rl", self.rl))
        row.update(pct("e2e", self.e2e))
        row.update(pct("process_time", self.process_time))
        for s in STAGES:
            row.update(pct(s, self.stages[s]))
        busy = [u["busy"] for u in self.util]
        row["util_mean"] = sum(busy) / len(busy) if busy else ""
        row["util_max"] = max(busy) if busy else ""
        row["scale_out"] = self.scale_out
        row["partial"] = self.partial
        return row


@dataclass
class BenchReport:
    steps: list = field(default_factory=list)

    @property
    def rows(self) -> list:
        return [s.row() for s in self.steps]

    @property
    def partial(self) -> bool:
        return any(s.partial for s in self.steps)

    def trace(self) -> list:
        return [dict(u, step=s.step) for s in self.steps for u in s.util]

    def write_csv(self, path, trace_path: Optional[str] = None) -> tuple:
        path = Path(path)
        with open(path, "w", newline="") as fh:
            w = csv.DictWriter(fh, COLUMNS, lineterminator="\n")
            w.writeheader()
            w.writerows(self.rows)
        trace_path = Path(trace_path) if trace_path else path.with_name(path.stem + "_util.csv")
        with open(trace_path, "w", newline="") as fh:
            w = csv.DictWriter(fh, TRACE_COLUMNS, lineterminator="\n", extrasaction="ignore")
            w.writeheader()
            w.writerows(self.trace())
        return path, trace_path
