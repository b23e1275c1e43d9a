"""User-partitioned in-memory store and its snapshot file format.

Records are immutable and replaced wholesale on write, so a reader always
sees some complete version of a record (possibly a slightly stale one) and
never blocks the partition's writer.

Snapshot layout::

    b"NBOSNAP1"
    u32 big-endian length + UTF-8 JSON header
    u32 big-endian length + UTF-8 JSON record     (repeated, sorted by user id)
    32-byte SHA-256 of everything above
"""

from __future__ import annotations

import hashlib
import json
import os
import struct
from pathlib import Path
from typing import Iterator, Optional

import numpy as np

from .errors import SnapshotError
from .features import (
    CounterBlock,
    FeatureDictionary,
    FeatureSpec,
    IdentityBlock,
    OneHotVector,
    UserRecord,
    cold_record,
    fnv1a64,
    vectorize,
)
from .lstm import LstmState

MAGIC = b"NBOSNAP1"
FORMAT_VERSION = 1
_LEN = struct.Struct(">I")


def partition_of(user_id: str, partitions: int) -> int:
    return fnv1a64(user_id.encode("utf-8")) % partitions


class FeatureStore:
    def __init__(self, spec: FeatureSpec, hidden_dim: int, partitions: int = 1,
                 meta: Optional[dict] = None):
        if partitions < 1:
            raise ValueError("partitions must be >= 1")
        self.spec = spec
        self.hidden_dim = hidden_dim
        self.partitions = partitions
        self.meta = dict(meta or {})
        self._parts: list[dict] = [{} for _ in range(partitions)]

    def partition_of(self, user_id: str) -> int:
        return partition_of(user_id, self.partitions)

    def get(self, user_id: str) -> Optional[UserRecord]:
        return self._parts[self.partition_of(user_id)].get(user_id)

    def get_user(self, user_id: str) -> UserRecord:
        """Stored record, or a cold-start record that is not inserted."""
        rec = self.get(user_id)
        if rec is None:
            return cold_record(user_id, self.spec, self.hidden_dim)
        return rec

    def put(self, record: UserRecord) -> None:
        self._parts[self.partition_of(record.user_id)][record.user_id] = record

    def partition_size(self, p: int) -> int:
        return len(self._parts[p])

    def __len__(self) -> int:
        return sum(len(p) for p in self._parts)

    def __contains__(self, user_id: str) -> bool:
        return self.get(user_id) is not None

    def records(self) -> Iterator[UserRecord]:
        """All records in user-id order; safe to call while writers run."""
        snapshot = {}
        for part in self._parts:
            snapshot.update(part.copy())
        for user in sorted(snapshot):
            yield snapshot[user]

    def digest(self) -> str:
        h = hashlib.sha256()
        for rec in self.records():
            h.update(_encode_record(rec, self.spec))
        return h.hexdigest()

    def equals(self, other: "FeatureStore") -> bool:
        mine, theirs = list(self.records()), list(other.records())
        return len(mine) == len(theirs) and all(
            _record_json(a, self.spec) == _record_json(b, other.spec) for a, b in zip(mine, theirs)
        )


def _dictionary_json(d: FeatureDictionary, spec: FeatureSpec) -> list:
    out = []
    for b, state in zip(spec.blocks, d.blocks):
        if isinstance(b, CounterBlock):
            out.append(list(state))
        elif isinstance(b, IdentityBlock):
            out.append(state)
        else:
            out.append([[k, state[k]] for k in sorted(state)])
    return out


def _dictionary_from_json(doc: list, spec: FeatureSpec) -> FeatureDictionary:
    if len(doc) != len(spec.blocks):
        raise SnapshotError("dictionary block count does not match the feature spec")
    blocks = []
    for b, state in zip(spec.blocks, doc):
        if isinstance(b, CounterBlock):
            blocks.append(tuple(int(t) for t in state))
        elif isinstance(b, IdentityBlock):
            blocks.append(None if state is None else int(state))
        else:
            blocks.append({int(k): int(v) for k, v in state})
    return FeatureDictionary(tuple(blocks))


def _record_json(rec: UserRecord, spec: FeatureSpec) -> dict:
    return {
        "user_id": rec.user_id,
        "last_update": rec.last_update,
        "dictionary": _dictionary_json(rec.dictionary, spec),
        "onehot": list(rec.onehot.indices),
        "h": rec.lstm_state.h.tolist(),
        "c": rec.lstm_state.c.tolist(),
        "steps_seen": rec.lstm_state.steps_seen,
    }


def _dumps(doc) -> bytes:
    return json.dumps(doc, sort_keys=True, separators=(",", ":"), allow_nan=False).encode("utf-8")


def _encode_record(rec: UserRecord, spec: FeatureSpec) -> bytes:
    return _dumps(_record_json(rec, spec))


def _decode_record(doc: dict, spec: FeatureSpec, hidden_dim: int) -> UserRecord:
    d = _dictionary_from_json(doc["dictionary"], spec)
    onehot = vectorize(d, spec)
    if list(onehot.indices) != doc["onehot"]:
        raise SnapshotError(f"record {doc['user_id']!r}: one-hot cache disagrees with dictionary")
    h = np.array(doc["h"], dtype=np.float64)
    c = np.array(doc["c"], dtype=np.float64)
    if h.shape != (hidden_dim,) or c.shape != (hidden_dim,):
        raise SnapshotError(f"record {doc['user_id']!r}: LSTM state has the wrong size")
    return UserRecord(doc["user_id"], d, onehot, LstmState(h, c, int(doc["steps_seen"])),
                      doc["last_update"])


def snapshot_bytes(store: FeatureStore) -> bytes:
    records = list(store.records())
    header = {
        "format": "nbo-snapshot",
        "version": FORMAT_VERSION,
        "spec": store.spec.to_dict(),
        "hidden_dim": store.hidden_dim,
        "n_records": len(records),
        "meta": store.meta,
    }
    chunks = [MAGIC]
    for body in [_dumps(header)] + [_encode_record(r, store.spec) for r in records]:
        chunks.append(_LEN.pack(len(body)))
        chunks.append(body)
    payload = b"".join(chunks)
    return payload + hashlib.sha256(payload).digest()


def snapshot(store: FeatureStore, path) -> None:
    """Write atomically: a crash mid-write leaves any previous file intact."""
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(snapshot_bytes(store))
        fh.flush()
        os.fsync(fh.fileno())
    os.replace(tmp, path)


def restore_bytes(data: bytes, partitions: int = 1) -> FeatureStore:
    if len(data) < len(MAGIC) + 32 or not data.startswith(MAGIC):
        raise SnapshotError("not a snapshot file (bad magic or truncated)")
    payload, checksum = data[:-32], data[-32:]
    if hashlib.sha256(payload).digest() != checksum:
        raise SnapshotError("snapshot checksum mismatch (corrupt or truncated file)")
    bodies = []
    pos = len(MAGIC)
    while pos < len(payload):
        if pos + 4 > len(payload):
            raise SnapshotError("truncated length prefix")
        (n,) = _LEN.unpack_from(payload, pos)
        pos += 4
        if pos + n > len(payload):
            raise SnapshotError("truncated record")
        bodies.append(payload[pos:pos + n])
        pos += n
    if not bodies:
        raise SnapshotError("snapshot has no header")
    try:
        header = json.loads(bodies[0])
        if header.get("format") != "nbo-snapshot" or header.get("version") != FORMAT_VERSION:
            raise SnapshotError("unsupported snapshot format/version")
        spec = FeatureSpec.from_dict(header["spec"])
        hidden_dim = int(header["hidden_dim"])
        if header["n_records"] != len(bodies) - 1:
            raise SnapshotError("record count does not match header")
        store = FeatureStore(spec, hidden_dim, partitions, header.get("meta"))
        for body in bodies[1:]:
            store.put(_decode_record(json.loads(body), spec, hidden_dim))
    except (KeyError, TypeError, ValueError) as exc:
        if isinstance(exc, SnapshotError):
            raise
        raise SnapshotError(f"malformed snapshot content: {exc}") from exc
    return store


def restore(path, partitions: int = 1) -> FeatureStore:
    try:
        data = Path(path).read_bytes()
    except OSError as exc:
        raise SnapshotError(f"cannot read snapshot {path}: {exc}") from exc
    return restore_bytes(data, partitions)
