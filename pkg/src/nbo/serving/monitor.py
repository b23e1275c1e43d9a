"""Worker busy-fraction sampling and the scale-out advisory."""

from __future__ import annotations

import logging
import threading
import time
from collections import deque
from dataclasses import dataclass
from typing import Callable, Sequence

log = logging.getLogger(__name__)


class BusyMeter:
    """Accumulates the wall time a worker spends processing work."""

    __slots__ = ("_busy_ns", "_since")

    def __init__(self):
        self._busy_ns = 0
        self._since = 0

    def begin(self) -> None:
        if not self._since:
            self._since = time.perf_counter_ns()

    def end(self) -> None:
        since, self._since = self._since, 0
        if since:
            self._busy_ns += time.perf_counter_ns() - since

    def busy_ns(self, now: int) -> int:
        since = self._since
        return self._busy_ns + (now - since if since else 0)


@dataclass(frozen=True)
class Reading:
    t: float
    pools: dict
    busy: float
    scale_out: bool


class UtilizationMonitor:
    """Samples named pools of ``BusyMeter`` every ``period_s``.

    A pool's busy fraction is its busy time over ``period * workers``. The
    reading uses the busiest pool; ``scale_out`` is raised once that exceeds
    ``threshold`` for ``periods`` consecutive samples and stays raised until a
    sample drops back under the threshold. Advisory only: it logs, it does
    not spawn anything.
    """

    def __init__(self, pools: dict[str, Sequence[BusyMeter]], period_s: float = 1.0,
                 threshold: float = 0.80, periods: int = 3, history: int = 600,
                 on_reading: Callable[[Reading], None] | None = None):
        self.pools = pools
        self.period_s = period_s
        self.threshold = threshold
        self.periods = periods
        self.readings: deque = deque(maxlen=history)
        self.scale_out = False
        self.signals = 0
        self._streak = 0
        self._on_reading = on_reading
        self._stop = threading.Event()
        self._thread: threading.Thread | None = None
        self._last_t = time.perf_counter_ns()
        self._last = self._totals(self._last_t)

    def _totals(self, now: int) -> dict:
        return {name: sum(m.busy_ns(now) for m in meters) for name, meters in self.pools.items()}

    def sample(self) -> Reading:
        now = time.perf_counter_ns()
        totals = self._totals(now)
        elapsed = max(now - self._last_t, 1)
        fractions = {
            name: min(1.0, (totals[name] - self._last[name]) / (elapsed * max(len(self.pools[name]), 1)))
            for name in self.pools
        }
        self._last, self._last_t = totals, now
        busy = max(fractions.values(), default=0.0)
        if busy > self.threshold:
            self._streak += 1
        else:
            self._streak = 0
            self.scale_out = False
        if self._streak >= self.periods and not self.scale_out:
            self.scale_out = True
            self.signals += 1
            log.warning("scale_out advisory: worker busy fraction %.2f above %.2f for %d periods",
                        busy, self.threshold, self._streak)
        reading = Reading(time.time(), fractions, busy, self.scale_out)
        self.readings.append(reading)
        if self._on_reading:
            self._on_reading(reading)
        return reading

    def _run(self):
        while not self._stop.wait(self.period_s):
            self.sample()

    def start(self) -> None:
        self._last_t = time.perf_counter_ns()
        self._last = self._totals(self._last_t)
        self._thread = threading.Thread(target=self._run, name="util-monitor", daemon=True)
        self._thread.start()

    def stop(self) -> None:
        self._stop.set()
        if self._thread:
            self._thread.join()
