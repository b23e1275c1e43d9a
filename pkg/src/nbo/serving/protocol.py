"""Length-prefixed JSON framing.

Each frame is a 4-byte big-endian unsigned body length followed by a UTF-8
JSON object. Bodies larger than ``MAX_FRAME`` are a connection-level error.
"""

from __future__ import annotations

import asyncio
import json
import socket
import struct
from typing import Any, Optional

HEADER = struct.Struct(">I")
MAX_FRAME = 1 << 20

REQUEST_KINDS = ("recommend", "feature_update", "stats", "snapshot")
RESPONSE_KINDS = ("recommend_response", "ack", "error", "stats_response", "snapshot_response")
RECOMMEND_STAGES = ("T1", "T6", "T7", "T8", "T9", "T10", "T11")
UPDATE_STAGES = ("T1", "T3", "T4", "T5")
ALL_STAGES = tuple(f"T{k}" for k in range(1, 12))


class ProtocolError(ValueError):
    def __init__(self, message: str, req_id: Any = None):
        super().__init__(message)
        self.req_id = req_id


class FrameTooLarge(ProtocolError):
    pass


def dumps(doc: dict) -> bytes:
    return json.dumps(doc, separators=(",", ":"), allow_nan=False).encode("utf-8")


def encode_frame(doc: dict) -> bytes:
    return frame_bytes(dumps(doc))


def frame_bytes(body: bytes) -> bytes:
    if len(body) > MAX_FRAME:
        raise FrameTooLarge(f"frame of {len(body)} bytes exceeds {MAX_FRAME}")
    return HEADER.pack(len(body)) + body


def decode_body(body: bytes) -> dict:
    try:
        doc = json.loads(body)
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ProtocolError(f"malformed frame: {exc}") from exc
    if not isinstance(doc, dict):
        raise ProtocolError("frame body must be a JSON object")
    return doc


def validate_request(doc: dict) -> str:
    req_id = doc.get("req_id")
    kind = doc.get("kind")
    if kind not in REQUEST_KINDS:
        raise ProtocolError(f"unknown message kind {kind!r}", req_id)
    if kind in ("recommend", "feature_update"):
        if not isinstance(doc.get("user_id"), str) or not doc["user_id"]:
            raise ProtocolError("user_id must be a non-empty string", req_id)
        event = doc.get("event")
        if kind == "feature_update" and not isinstance(event, dict):
            raise ProtocolError("feature_update needs an event object", req_id)
        if event is not None and not isinstance(event, dict):
            raise ProtocolError("event must be an object", req_id)
    return kind


# --- message builders --------------------------------------------------------


def recommend_request(req_id, user_id: str, event: Optional[dict] = None) -> dict:
    doc = {"kind": "recommend", "req_id": req_id, "user_id": user_id}
    if event is not None:
        doc["event"] = event
    return doc


def feature_update_request(req_id, user_id: str, event: dict) -> dict:
    return {"kind": "feature_update", "req_id": req_id, "user_id": user_id, "event": event}


def recommend_response(req_id, score: float, p_gbdt: float, p_lstm: float, decision: bool,
                       cold_start: bool, timing: dict) -> dict:
    full = {k: timing.get(k, 0) for k in ALL_STAGES}
    full["rl_total"] = timing.get("rl_total", 0)
    return {"kind": "recommend_response", "req_id": req_id, "score": score, "p_gbdt": p_gbdt,
            "p_lstm": p_lstm, "decision": decision, "cold_start": cold_start, "timing": full}


def ack(req_id, ok: bool, timing: dict, **extra) -> dict:
    stages = {k: timing.get(k, 0) for k in UPDATE_STAGES}
    doc = {"kind": "ack", "req_id": req_id, "ok": ok,
           "process_time": sum(stages.values()), "timing": stages}
    doc.update(extra)
    return doc


def error(req_id, message: str) -> dict:
    return {"kind": "error", "req_id": req_id, "error": message}


# --- transport helpers -------------------------------------------------------


async def read_frame(reader: asyncio.StreamReader, max_frame: int = MAX_FRAME) -> Optional[bytes]:
    """Next frame body, or None on a clean EOF between frames."""
    try:
        header = await reader.readexactly(HEADER.size)
    except asyncio.IncompleteReadError as exc:
        if not exc.partial:
            return None
        raise ProtocolError("connection closed inside a frame header") from exc
    (n,) = HEADER.unpack(header)
    if n > max_frame:
        raise FrameTooLarge(f"frame of {n} bytes exceeds {max_frame}")
    try:
        return await reader.readexactly(n)
    except asyncio.IncompleteReadError as exc:
        raise ProtocolError("connection closed inside a frame body") from exc


def _recv_exact(sock: socket.socket, n: int) -> bytes:
    buf = bytearray()
    while len(buf) < n:
        chunk = sock.recv(n - len(buf))
        if not chunk:
            raise ConnectionError("connection closed")
        buf += chunk
    return bytes(buf)


class BlockingClient:
    """Minimal synchronous client, one request in flight at a time."""

    def __init__(self, host: str, port: int, timeout: float = 10.0):
        self.sock = socket.create_connection((host, port), timeout=timeout)
        self.sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
        self._next_id = 0

    def send(self, doc: dict) -> None:
        self.sock.sendall(encode_frame(doc))

    def recv(self) -> dict:
        (n,) = HEADER.unpack(_recv_exact(self.sock, HEADER.size))
        if n > MAX_FRAME:
            raise FrameTooLarge(f"frame of {n} bytes exceeds {MAX_FRAME}")
        return decode_body(_recv_exact(self.sock, n))

    def call(self, doc: dict) -> dict:
        if "req_id" not in doc:
            self._next_id += 1
            doc = dict(doc, req_id=self._next_id)
        self.send(doc)
        return self.recv()

    def close(self) -> None:
        self.sock.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()
