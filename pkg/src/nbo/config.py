from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

from .errors import ConfigError


def parse_addr(addr: str) -> tuple[str, int]:
    host, sep, port = addr.rpartition(":")
    if not sep:
        raise ConfigError(f"address {addr!r} must be HOST:PORT")
    try:
        return host or "127.0.0.1", int(port)
    except ValueError as exc:
        raise ConfigError(f"bad port in {addr!r}") from exc


@dataclass
class ServerConfig:
    host: str = "127.0.0.1"
    port: int = 0
    partitions: int = 1
    inference_workers: int = 1
    batch_window_us: int = 0
    max_batch: int = 64
    pin_workers: bool = False
    single_threaded: bool = False
    monitor_period_s: float = 1.0
    scale_out_threshold: float = 0.80
    scale_out_periods: int = 3
    snapshot_out: Optional[str] = None
    switch_interval_s: Optional[float] = 0.0005
    drain_timeout_s: float = 5.0

    def validate(self) -> "ServerConfig":
        if self.partitions < 1 or self.inference_workers < 1:
            raise ConfigError("partitions and inference workers must be >= 1")
        if self.batch_window_us < 0:
            raise ConfigError("batch window must be >= 0")
        if self.max_batch < 1:
            raise ConfigError("max_batch must be >= 1")
        if not 0 <= self.port < 65536:
            raise ConfigError(f"port {self.port} out of range")
        if self.monitor_period_s <= 0 or self.scale_out_periods < 1:
            raise ConfigError("monitor period and scale-out periods must be positive")
        if self.single_threaded and (self.partitions != 1 or self.inference_workers != 1):
            raise ConfigError("single-threaded mode requires partitions = inference workers = 1")
        return self


@dataclass
class BenchConfig:
    """Load-replay settings. ``mix`` is the FeatureUpdate share of traffic."""

    rate: float = 100.0
    ramp_to: Optional[float] = None
    steps: int = 1
    mix: float = 0.8
    duration_s: float = 10.0
    connections: int = 8
    grace_s: float = 2.0
    seed: int = 0
    report_path: Optional[str] = None
    events_path: Optional[str] = None
    users: int = 1000
    stats_poll_s: float = 0.0
    rates: list = field(default_factory=list)

    def validate(self) -> "BenchConfig":
        if not 0.0 <= self.mix <= 1.0:
            raise ConfigError("mix must be in [0, 1]; recommend share is 1 - mix")
        if self.rate <= 0 or (self.ramp_to is not None and self.ramp_to <= 0):
            raise ConfigError("rates must be positive")
        if self.duration_s <= 0 or self.connections < 1 or self.steps < 1:
            raise ConfigError("duration, connections and steps must be positive")
        return self

    def step_rates(self) -> list[float]:
        if self.rates:
            return list(self.rates)
        if self.ramp_to is None or self.steps == 1:
            return [self.rate] if self.ramp_to is None else [self.rate, self.ramp_to][: self.steps]
        span = self.ramp_to - self.rate
        return [self.rate + span * k / (self.steps - 1) for k in range(self.steps)]
