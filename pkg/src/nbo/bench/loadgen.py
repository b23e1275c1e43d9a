"""Load replay against a running server.

FeatureUpdate traffic is open-loop: it is sent on schedule over connections
chosen by user hash (so one user's events stay in order) and acks are
collected by a reader per connection. Recommend traffic is closed-loop: each
request borrows an idle connection and holds it until the response arrives.
A single token bucket paces both.
"""

from __future__ import annotations

import asyncio
import itertools
import logging
import time
from typing import Iterable, Optional

from ..config import BenchConfig
from ..features import Event, fnv1a64
from ..serving import protocol
from .datagen import generate_events, load_events
from .report import STAGES, BenchReport, StepResult

log = logging.getLogger(__name__)

# stage marks are truncated to whole microseconds; allow two ticks of slack
RL_SUM_TOLERANCE_US = 2


class TokenBucket:
    """Tokens accrue at ``rate`` per second up to ``burst``."""

    def __init__(self, rate: float, burst: Optional[float] = None, clock=time.monotonic):
        if rate <= 0:
            raise ValueError("rate must be positive")
        self.rate = rate
        self.burst = burst if burst is not None else max(1.0, rate * 0.02)
        self._clock = clock
        self._tokens = 1.0
        self._t = clock()

    def _refill(self) -> None:
        now = self._clock()
        self._tokens = min(self.burst, self._tokens + (now - self._t) * self.rate)
        self._t = now

    def try_take(self) -> float:
        """Take a token and return 0, or return the seconds until one is due."""
        self._refill()
        if self._tokens >= 1.0 - 1e-9:  # float slack, or tiny waits never advance the clock
            self._tokens = max(0.0, self._tokens - 1.0)
            return 0.0
        return (1.0 - self._tokens) / self.rate

    async def acquire(self) -> None:
        while True:
            wait = self.try_take()
            if wait == 0.0:
                return
            await asyncio.sleep(wait)


def mix_schedule(mix: float) -> Iterable[str]:
    """Deterministic kind sequence whose update share tracks ``mix``.

    Error diffusion keeps the running count of updates within one message of
    ``mix * n`` for every prefix of length n.
    """
    acc = 0.0
    while True:
        acc += mix
        if acc >= 1.0 - 1e-12:
            acc -= 1.0
            yield "feature_update"
        else:
            yield "recommend"


async def _open(host: str, port: int):
    reader, writer = await asyncio.open_connection(host, port, limit=protocol.MAX_FRAME + 16)
    sock = writer.get_extra_info("socket")
    if sock is not None:
        import socket
        sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
    return reader, writer


async def _stats(host: str, port: int) -> dict:
    reader, writer = await _open(host, port)
    try:
        writer.write(protocol.encode_frame({"kind": "stats", "req_id": "stats"}))
        return protocol.decode_body(await protocol.read_frame(reader))
    finally:
        writer.close()


class _Step:
    def __init__(self, host, port, result: StepResult, connections: int):
        self.host, self.port = host, port
        self.result = result
        self.n_conn = connections
        self.pending: dict = {}          # req_id -> (kind, send_ns)
        self.update_conns: list = []
        self.idle: asyncio.Queue = asyncio.Queue()
        self.tasks: list = []
        self.rec_writers: list = []
        self.last_ts: dict = {}

    async def open(self):
        for _ in range(self.n_conn):
            reader, writer = await _open(self.host, self.port)
            self.update_conns.append(writer)
            self.tasks.append(asyncio.create_task(self._ack_reader(reader)))
        for _ in range(self.n_conn):
            conn = await _open(self.host, self.port)
            self.rec_writers.append(conn[1])
            self.idle.put_nowait(conn)

    def record(self, doc: dict, recv_ns: int) -> None:
        res = self.result
        entry = self.pending.pop(doc.get("req_id"), None)
        if entry is None:
            res.errors += 1  # answer to something we never sent, or a connection-level error
            return
        kind, send_ns = entry
        if doc.get("kind") == "error":
            res.errors += 1
            return
        res.answered[kind] += 1
        timing = doc.get("timing", {})
        for s, v in timing.items():
            if s in STAGES and (kind == "feature_update" or s in protocol.RECOMMEND_STAGES):
                res.stages[s].append(v)
        if kind == "recommend":
            res.rl.append(timing["rl_total"])
            parts = sum(timing.get(s, 0) for s in protocol.RECOMMEND_STAGES)
            if abs(timing["rl_total"] - parts) > RL_SUM_TOLERANCE_US:
                res.rl_sum_violations += 1
            res.e2e.append((recv_ns - send_ns) // 1000)
        else:
            if not doc.get("ok"):
                res.stale += 1
            res.process_time.append(doc["process_time"])

    async def _ack_reader(self, reader):
        try:
            while True:
                body = await protocol.read_frame(reader)
                if body is None:
                    return
                self.record(protocol.decode_body(body), time.perf_counter_ns())
        except (ConnectionError, protocol.ProtocolError, asyncio.IncompleteReadError):
            self.result.partial = True
        except asyncio.CancelledError:
            pass

    def _event_doc(self, ev: Event) -> dict:
        # rewrite to wall-clock time so replayed history is never stale
        ts = max(int(time.time() * 1000), self.last_ts.get(ev.user_id, 0))
        self.last_ts[ev.user_id] = ts
        doc = ev.to_dict()
        doc["ts"] = ts
        return doc

    def send_update(self, req_id, ev: Event) -> None:
        writer = self.update_conns[fnv1a64(ev.user_id.encode()) % self.n_conn]
        self.result.sent["feature_update"] += 1
        if writer.is_closing():
            self.result.partial = True
            return
        self.pending[req_id] = ("feature_update", time.perf_counter_ns())
        writer.write(protocol.encode_frame(
            protocol.feature_update_request(req_id, ev.user_id, self._event_doc(ev))))

    async def recommend(self, req_id, user_id: str) -> None:
        self.result.sent["recommend"] += 1
        reader, writer = await self.idle.get()
        self.pending[req_id] = ("recommend", time.perf_counter_ns())
        try:
            writer.write(protocol.encode_frame(protocol.recommend_request(req_id, user_id)))
            body = await protocol.read_frame(reader)
            if body is None:
                raise ConnectionError("server closed the connection")
            self.record(protocol.decode_body(body), time.perf_counter_ns())
        except (ConnectionError, protocol.ProtocolError, asyncio.IncompleteReadError):
            self.result.partial = True
            return
        self.idle.put_nowait((reader, writer))

    async def close(self):
        for t in self.tasks:
            t.cancel()
        for w in self.update_conns + self.rec_writers:
            w.close()


async def run_step(host: str, port: int, step: int, rate: float, cfg: BenchConfig,
                   events: Iterable[Event], req_ids) -> StepResult:
    res = StepResult(step, rate, cfg.mix, cfg.duration_s)
    st = _Step(host, port, res, cfg.connections)
    try:
        await st.open()
    except OSError as exc:
        log.error("cannot connect to %s:%d: %s", host, port, exc)
        res.partial = True
        return res

    stats0 = None
    poll_task = None
    if cfg.stats_poll_s > 0:
        stats0 = await _stats(host, port)

        async def poll():
            t0 = time.monotonic()
            while True:
                await asyncio.sleep(cfg.stats_poll_s)
                s = await _stats(host, port)
                u = s.get("utilization", {})
                res.util.append({"t": round(time.monotonic() - t0, 3), "busy": s["busy"],
                                 "io": u.get("io", 0.0), "partition": u.get("partition", 0.0),
                                 "inference": u.get("inference", 0.0),
                                 "scale_out": s["scale_out"]})

        poll_task = asyncio.create_task(poll())

    bucket = TokenBucket(rate)
    kinds = mix_schedule(cfg.mix)
    recs: set = set()
    n_total = round(rate * cfg.duration_s)
    t_start = time.monotonic()
    for _ in range(n_total):
        await bucket.acquire()
        ev = next(events)
        req_id = next(req_ids)
        if next(kinds) == "feature_update":
            st.send_update(req_id, ev)
        else:
            task = asyncio.create_task(st.recommend(req_id, ev.user_id))
            recs.add(task)
            task.add_done_callback(recs.discard)
    res.send_elapsed_s = time.monotonic() - t_start
    # hold until the nominal duration ends, then give stragglers a grace period
    await asyncio.sleep(max(0.0, cfg.duration_s - res.send_elapsed_s))
    deadline = time.monotonic() + cfg.grace_s
    while (st.pending or recs) and time.monotonic() < deadline:
        await asyncio.sleep(0.01)
    for t in list(recs):
        t.cancel()
    if poll_task is not None:
        poll_task.cancel()
        stats1 = await _stats(host, port)
        res.scale_out = bool(stats1["scale_out_signals"] > stats0["scale_out_signals"]
                             or stats1["scale_out"])
    await st.close()
    if res.in_flight:
        log.warning("step %d: %d requests unanswered at cutoff", step, res.in_flight)
    return res


def _event_source(cfg: BenchConfig):
    if cfg.events_path:
        events = load_events(cfg.events_path)
    else:
        events = generate_events(cfg.seed, cfg.users, max(cfg.users * 20, 1000), max(cfg.users, 10))
    if not events:
        raise ValueError("bench needs at least one event")
    return itertools.cycle(events)


async def run_bench_async(cfg: BenchConfig, host: str, port: int) -> BenchReport:
    cfg.validate()
    events = _event_source(cfg)
    req_ids = itertools.count(1)
    report = BenchReport()
    for k, rate in enumerate(cfg.step_rates()):
        res = await run_step(host, port, k, rate, cfg, events, req_ids)
        report.steps.append(res)
        row = res.row()
        log.info("step %d rate %.0f: sent %d, answered %d/%d, rl p90 %s us",
                 k, rate, res.total_sent, row["answered_update"], row["answered_recommend"],
                 row["rl_p90"])
    return report


def run_bench(cfg: BenchConfig, host: str, port: int) -> BenchReport:
    report = asyncio.run(run_bench_async(cfg, host, port))
    if cfg.report_path:
        report.write_csv(cfg.report_path)
    return report


def replay_scores(host: str, port: int, events: Iterable[Event]) -> list:
    """Sequential replay: apply each event, then score its user.

    Uses the events' own timestamps, so against equal snapshots and a
    single-threaded server the returned list is reproducible bit for bit.
    """
    scores = []
    with protocol.BlockingClient(host, port) as c:
        for k, ev in enumerate(events):
            c.call(protocol.feature_update_request(2 * k, ev.user_id, ev.to_dict()))
            resp = c.call(protocol.recommend_request(2 * k + 1, ev.user_id))
            scores.append(resp["score"])
    return scores
