"""Threaded TCP server for the recommend and feature-update interfaces.

Layout: one asyncio thread accepts connections, reads and parses frames,
fetches features for recommends and writes responses. Feature updates go to
the partition worker that owns the user (one writer per partition). Prepared
recommends go to a shared queue drained by the inference workers, which may
collect a micro-batch before scoring. Workers hand results back to the loop
with ``call_soon_threadsafe``.
"""

from __future__ import annotations

import asyncio
import logging
import os
import queue
import selectors
import signal
import sys
import threading
import time
from collections import Counter
from typing import Optional

from ..config import ServerConfig
from ..errors import ContractError
from ..features import Event
from ..store import snapshot
from . import protocol
from .engine import Engine, Timeline, now_ns
from .monitor import BusyMeter, UtilizationMonitor

log = logging.getLogger(__name__)

_STOP = object()


class _TimedSelector(selectors.DefaultSelector):
    """Counts the event loop as busy whenever it is not blocked in select."""

    def __init__(self, meter: BusyMeter):
        super().__init__()
        self.meter = meter
        meter.begin()

    def select(self, timeout=None):
        if timeout is not None and timeout <= 0:
            return super().select(timeout)  # callbacks are ready: still busy
        self.meter.end()
        try:
            return super().select(timeout)
        finally:
            self.meter.begin()


def _take(q: queue.SimpleQueue, meter: BusyMeter):
    """Dequeue; the worker only counts as idle while its queue is empty."""
    try:
        item = q.get_nowait()
    except queue.Empty:
        meter.end()
        item = q.get()
    meter.begin()
    return item


class _Conn:
    __slots__ = ("writer", "last_update")

    def __init__(self, writer: asyncio.StreamWriter):
        self.writer = writer
        # partition -> future of the most recent update sent on this connection
        self.last_update: dict = {}


class Server:
    def __init__(self, engine: Engine, config: Optional[ServerConfig] = None):
        self.engine = engine
        self.config = (config or ServerConfig()).validate()
        self.counters: Counter = Counter()
        self.batch_sizes: Counter = Counter()
        self.address: Optional[tuple] = None
        self._inflight = 0
        self._closing = False
        self._loop: Optional[asyncio.AbstractEventLoop] = None
        self._server: Optional[asyncio.base_events.Server] = None
        self._conns: set = set()
        self._threads: list = []
        self._stopped: Optional[asyncio.Event] = None
        cfg = self.config
        self._threaded = not cfg.single_threaded
        self._part_queues = [queue.SimpleQueue() for _ in range(cfg.partitions)] if self._threaded else []
        self._infer_queue: queue.SimpleQueue = queue.SimpleQueue()
        self.part_meters = [BusyMeter() for _ in range(cfg.partitions)]
        self.infer_meters = [BusyMeter() for _ in range(cfg.inference_workers)]
        self.io_meter = BusyMeter()
        self.monitor = UtilizationMonitor(
            {"io": [self.io_meter], "partition": self.part_meters, "inference": self.infer_meters},
            period_s=cfg.monitor_period_s, threshold=cfg.scale_out_threshold,
            periods=cfg.scale_out_periods)
        if engine.store.partitions != cfg.partitions:
            raise ContractError(
                f"store has {engine.store.partitions} partitions, config asks for {cfg.partitions}")

    # --- lifecycle ---

    def new_event_loop(self) -> asyncio.AbstractEventLoop:
        """A loop whose busy time feeds the "io" utilization pool."""
        return asyncio.SelectorEventLoop(_TimedSelector(self.io_meter))

    async def start(self) -> tuple:
        self._loop = asyncio.get_running_loop()
        self._stopped = asyncio.Event()
        cfg = self.config
        self._server = await asyncio.start_server(self._on_connection, cfg.host, cfg.port,
                                                  limit=protocol.MAX_FRAME + 16)
        self.address = self._server.sockets[0].getsockname()[:2]
        if self._threaded:
            cpus = sorted(os.sched_getaffinity(0)) if cfg.pin_workers else []
            for p in range(cfg.partitions):
                self._spawn(self._partition_worker, f"partition-{p}", p, cpus)
            for m in range(cfg.inference_workers):
                self._spawn(self._inference_worker, f"inference-{m}", m, cpus)
        self.monitor.start()
        log.info("listening on %s:%d (P=%d, M=%d, window=%dus, single_threaded=%s)",
                 *self.address, cfg.partitions, cfg.inference_workers, cfg.batch_window_us,
                 cfg.single_threaded)
        return self.address

    def _spawn(self, target, name, index, cpus):
        def run():
            if cpus:
                cpu = cpus[(index + (0 if name.startswith("partition") else self.config.partitions)) % len(cpus)]
                os.sched_setaffinity(0, {cpu})
            target(index)

        t = threading.Thread(target=run, name=name, daemon=True)
        t.start()
        self._threads.append(t)

    async def stop(self) -> None:
        """Stop accepting, drain in-flight work, then stop the workers."""
        if self._server is None:
            return
        self._server.close()
        self._closing = True  # connection handlers stop taking new frames
        deadline = time.monotonic() + self.config.drain_timeout_s
        while self._inflight > 0 and time.monotonic() < deadline:
            await asyncio.sleep(0.005)
        if self._inflight:
            log.warning("shutdown with %d requests still in flight", self._inflight)
        for q in self._part_queues:
            q.put(_STOP)
        if self._threaded:
            for _ in range(self.config.inference_workers):
                self._infer_queue.put(_STOP)
        for t in self._threads:
            await asyncio.to_thread(t.join)
        self.monitor.stop()
        for conn in list(self._conns):
            conn.writer.close()
        await self._server.wait_closed()
        self._server = None
        self._stopped.set()

    async def wait_stopped(self) -> None:
        await self._stopped.wait()

    # --- connection handling ---

    async def _on_connection(self, reader: asyncio.StreamReader, writer: asyncio.StreamWriter):
        sock = writer.get_extra_info("socket")
        if sock is not None:
            import socket as _s
            sock.setsockopt(_s.IPPROTO_TCP, _s.TCP_NODELAY, 1)
        conn = _Conn(writer)
        self._conns.add(conn)
        self.counters["connections"] += 1
        try:
            while True:
                try:
                    header = await reader.readexactly(protocol.HEADER.size)
                except asyncio.IncompleteReadError as exc:
                    if exc.partial:
                        log.info("connection closed inside a frame header")
                    break
                start = now_ns()
                (n,) = protocol.HEADER.unpack(header)
                if n > protocol.MAX_FRAME:
                    self.counters["errors"] += 1
                    self._send(conn, protocol.error(None, f"frame of {n} bytes exceeds {protocol.MAX_FRAME}"))
                    break
                body = await reader.readexactly(n)
                if self._closing:
                    break
                await self._dispatch(conn, body, start)
        except (asyncio.IncompleteReadError, ConnectionError):
            pass
        finally:
            self._conns.discard(conn)
            writer.close()

    def _send(self, conn: _Conn, doc: dict) -> None:
        if conn.writer.is_closing():
            self.counters["dropped"] += 1
            return
        conn.writer.write(protocol.encode_frame(doc))

    def _reply(self, conn: _Conn, doc: dict) -> None:
        self._inflight -= 1
        self.counters["answered"] += 1
        self._send(conn, doc)

    async def _dispatch(self, conn: _Conn, body: bytes, start: int) -> None:
        self.counters["received"] += 1
        tl = Timeline(start)
        try:
            msg = protocol.decode_body(body)
            req_id = msg.get("req_id")
            kind = protocol.validate_request(msg)
        except protocol.ProtocolError as exc:
            self.counters["errors"] += 1
            self._send(conn, protocol.error(exc.req_id, str(exc)))
            return
        if kind == "recommend":
            self.counters["recommend"] += 1
            self._inflight += 1
            await self._recommend(conn, req_id, msg["user_id"], tl)
        elif kind == "feature_update":
            try:
                event = Event.from_dict(msg["user_id"], msg["event"])
            except ContractError as exc:
                self.counters["errors"] += 1
                self._send(conn, protocol.error(req_id, str(exc)))
                return
            self.counters["feature_update"] += 1
            self._inflight += 1
            self._feature_update(conn, req_id, event, tl)
        elif kind == "stats":
            self._send(conn, self.stats(req_id, digest=bool(msg.get("digest"))))
        else:
            self._send(conn, await self._snapshot(req_id))

    def _feature_update(self, conn: _Conn, req_id, event: Event, tl: Timeline) -> None:
        tl.mark("T1")
        if not self._threaded:
            tl.mark("T3")
            self._finish_update(conn, self.engine.apply_update(req_id, event, tl))
            return
        p = self.engine.store.partition_of(event.user_id)
        fut = self._loop.create_future()
        fut.add_done_callback(lambda f: self._finish_update(conn, f.result()))
        conn.last_update[p] = fut
        self._part_queues[p].put((req_id, event, tl, fut))

    def _finish_update(self, conn: _Conn, resp: dict) -> None:
        if not resp["ok"]:
            self.counters["stale"] += 1
        self._reply(conn, resp)

    async def _recommend(self, conn: _Conn, req_id, user_id: str, tl: Timeline) -> None:
        tl.mark("T1")
        # session ordering: earlier updates from this connection to the same
        # partition must land before the read
        pending = conn.last_update.get(self.engine.store.partition_of(user_id)) if self._threaded else None
        if pending is not None and not pending.done():
            await asyncio.shield(pending)
        tl.mark("T6")
        prepared = self.engine.prepare(user_id)
        tl.mark("T7")
        tl.mark("T8")
        if not self._threaded:
            tl.mark("T9")
            scores = self.engine.infer(prepared)
            tl.mark("T10")
            self.batch_sizes[1] += 1
            self._finish_recommend(conn, req_id, prepared, scores, tl)
            return
        self._infer_queue.put((conn, req_id, prepared, tl))

    def _finish_recommend(self, conn, req_id, prepared, scores, tl) -> None:
        self._reply(conn, self.engine.finish_recommend(req_id, prepared, scores, tl))

    def _finish_batch(self, results: list) -> None:
        for conn, req_id, prepared, scores, tl in results:
            self._finish_recommend(conn, req_id, prepared, scores, tl)

    # --- workers ---

    def _partition_worker(self, p: int) -> None:
        q = self._part_queues[p]
        meter = self.part_meters[p]
        engine = self.engine
        loop = self._loop
        while True:
            item = _take(q, meter)
            if item is _STOP:
                meter.end()
                return
            req_id, event, tl, fut = item
            tl.mark("T3")
            try:
                resp = engine.apply_update(req_id, event, tl)
            except Exception as exc:  # keep the worker alive
                log.exception("update failed")
                resp = protocol.ack(req_id, False, tl.breakdown(), reason=f"internal error: {exc}")
            loop.call_soon_threadsafe(fut.set_result, resp)

    def _collect(self, first) -> list:
        batch = [first]
        window_ns = self.config.batch_window_us * 1000
        if window_ns <= 0:
            return batch
        deadline = now_ns() + window_ns
        q = self._infer_queue
        while len(batch) < self.config.max_batch:
            remaining = deadline - now_ns()
            if remaining <= 0:
                break
            try:
                item = q.get(timeout=remaining / 1e9)
            except queue.Empty:
                break
            if item is _STOP:
                q.put(_STOP)  # let the next idle worker see it
                break
            batch.append(item)
        return batch

    def _inference_worker(self, m: int) -> None:
        q = self._infer_queue
        meter = self.infer_meters[m]
        engine = self.engine
        loop = self._loop
        windowed = self.config.batch_window_us > 0
        while True:
            first = _take(q, meter)
            if first is _STOP:
                meter.end()
                return
            if windowed:
                meter.end()  # waiting for the window to fill is idle time
                batch = self._collect(first)
                meter.begin()
            else:
                batch = [first]
            for _, _, _, tl in batch:
                tl.mark("T9")
            results = []
            for conn, req_id, prepared, tl in batch:
                scores = engine.infer(prepared)
                tl.mark("T10")
                results.append((conn, req_id, prepared, scores, tl))
            self.batch_sizes[len(batch)] += 1
            loop.call_soon_threadsafe(self._finish_batch, results)

    # --- admin messages ---

    def stats(self, req_id=None, digest: bool = False) -> dict:
        cfg = self.config
        last = self.monitor.readings[-1] if self.monitor.readings else None
        doc = {
            "kind": "stats_response", "req_id": req_id,
            "partitions": cfg.partitions, "inference_workers": cfg.inference_workers,
            "batch_window_us": cfg.batch_window_us, "single_threaded": cfg.single_threaded,
            "users": len(self.engine.store),
            "counters": dict(self.counters), "inflight": self._inflight,
            "batch_sizes": {str(k): v for k, v in sorted(self.batch_sizes.items())},
            "utilization": last.pools if last else {},
            "busy": last.busy if last else 0.0,
            "scale_out": self.monitor.scale_out,
            "scale_out_signals": self.monitor.signals,
        }
        if digest:
            doc["digest"] = self.engine.store.digest()
        return doc

    async def _snapshot(self, req_id) -> dict:
        path = self.config.snapshot_out
        if not path:
            return protocol.error(req_id, "server started without a snapshot output path")
        t0 = time.perf_counter()
        try:
            await asyncio.to_thread(snapshot, self.engine.store, path)
        except OSError as exc:
            return protocol.error(req_id, f"snapshot failed: {exc}")
        return {"kind": "snapshot_response", "req_id": req_id, "path": str(path),
                "users": len(self.engine.store), "seconds": time.perf_counter() - t0}


async def _serve(server: Server, ready=None) -> None:
    addr = await server.start()
    if ready is not None:
        ready(addr)
    loop = asyncio.get_running_loop()
    stop = asyncio.Event()
    for sig in (signal.SIGINT, signal.SIGTERM):
        try:
            loop.add_signal_handler(sig, stop.set)
        except (NotImplementedError, RuntimeError, ValueError):
            pass
    await stop.wait()
    await server.stop()


def run_server(engine: Engine, config: ServerConfig, ready=None) -> Server:
    """Serve until SIGINT or SIGTERM, then drain and return."""
    if config.switch_interval_s:
        sys.setswitchinterval(config.switch_interval_s)
    server = Server(engine, config)
    loop = server.new_event_loop()
    try:
        loop.run_until_complete(_serve(server, ready))
    finally:
        loop.run_until_complete(loop.shutdown_asyncgens())
        loop.close()
    return server


class ServerThread:
    """Runs a ``Server`` on a background event loop; for tests and benches."""

    def __init__(self, engine: Engine, config: Optional[ServerConfig] = None):
        self.server = Server(engine, config)
        self._loop = self.server.new_event_loop()
        self._thread = threading.Thread(target=self._loop.run_forever, name="server-loop", daemon=True)

    def start(self) -> tuple:
        self._thread.start()
        return asyncio.run_coroutine_threadsafe(self.server.start(), self._loop).result(10)

    @property
    def address(self) -> tuple:
        return self.server.address

    def call(self, fn, *args):
        """Run ``fn(*args)`` on the server loop and return its result."""
        async def run():
            return fn(*args)
        return asyncio.run_coroutine_threadsafe(run(), self._loop).result(10)

    def stop(self) -> None:
        asyncio.run_coroutine_threadsafe(self.server.stop(), self._loop).result(30)
        self._loop.call_soon_threadsafe(self._loop.stop)
        self._thread.join()
        self._loop.close()

    def __enter__(self):
        self.start()
        return self

    def __exit__(self, *exc):
        self.stop()
