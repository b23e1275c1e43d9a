"""Shared setup for serving and CLI tests."""

import subprocess
import sys

from nbo.bench.datagen import generate_events, toy_setup
from nbo.ensemble import EnsembleModel
from nbo.features import build_records
from nbo.serving.engine import Engine
from nbo.store import FeatureStore


def make_engine(partitions=1, seed=3, users=40, events=1500, hidden=12, trees=20, depth=3,
                w=0.5, tau=0.5):
    spec, lstm, gbdt = toy_setup(seed=seed, hidden=hidden, trees=trees, depth=depth)
    store = FeatureStore(spec, lstm.hidden_dim, partitions=partitions)
    evs = generate_events(seed, users, events, 60)
    for rec in build_records(evs, spec, lstm).values():
        store.put(rec)
    return Engine(store, lstm, gbdt, EnsembleModel(w, tau)), evs


def event_doc(ts, kind="view", item="p000001", category="c0001", price=None):
    return {"ts": ts, "type": kind, "item": item, "category": category, "price": price}


class ServeProcess:
    """``nbo serve`` in a child process, bound to an ephemeral port."""

    def __init__(self, snapshot, *extra):
        cmd = [sys.executable, "-m", "nbo", "serve", "--snapshot", str(snapshot),
               "--listen", "127.0.0.1:0", *map(str, extra)]
        self.proc = subprocess.Popen(cmd, stdout=subprocess.PIPE, stderr=subprocess.PIPE, text=True)
        line = self.proc.stdout.readline()
        if not line.startswith("listening on "):
            self.proc.kill()
            raise RuntimeError(f"server failed to start: {line}{self.proc.stderr.read()}")
        host, port = line.split()[-1].rsplit(":", 1)
        self.host, self.port = host, int(port)

    def stop(self, timeout=20):
        self.proc.terminate()
        try:
            return self.proc.wait(timeout)
        finally:
            if self.proc.poll() is None:
                self.proc.kill()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.stop()
