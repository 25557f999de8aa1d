"""Minimal publish/subscribe broker and client over TCP.

Frames are a 4-byte big-endian length followed by UTF-8 JSON::

    {"op": "publish"|"subscribe"|"ack", "routing_key": ..., "kind": ...,
     "message_id": ..., "payload": {...}, "sent_at": ...}

Each routing key fans out to all of its current subscribers. Messages
published to a key nobody listens on are retained for ``retention_s`` and
flushed to the first subscriber. Everything lives in memory.
"""
from __future__ import annotations

import argparse
import json
import logging
import queue
import signal
import socket
import struct
import threading
import time
import uuid
from collections import defaultdict, deque
from dataclasses import dataclass, field
from typing import Any, Callable

log = logging.getLogger(__name__)

MAX_PAYLOAD = 1 << 20
MAX_FRAME = MAX_PAYLOAD + 64 * 1024
RETENTION_S = 60.0

KINDS = ("modeling_request", "modeling_result", "relay_hop")
_REQUIRED = {
    "modeling_request": ("request_id", "initiator", "peer", "bits_needed"),
    "modeling_result": ("request_id", "status"),
    "relay_hop": ("relay_id", "ciphertext"),
}

ENGINE_KEY = "qdnet.engine"


def node_key(name: str) -> str:
    return f"qdnet.node.{name}"


class BusError(RuntimeError):
    pass


class BusUnavailable(BusError):
    pass


class PayloadTooLarge(BusError):
    pass


class _WriteFailed(BusUnavailable):
    """The frame never left this process."""


@dataclass
class BusMessage:
    routing_key: str
    kind: str
    payload: dict
    message_id: str = field(default_factory=lambda: uuid.uuid4().hex)
    sent_at: float = field(default_factory=time.time)

    def __post_init__(self):
        if not self.routing_key:
            raise ValueError("routing_key must be non-empty")
        if self.kind not in KINDS:
            raise ValueError(f"unknown message kind {self.kind!r}")
        missing = [k for k in _REQUIRED[self.kind] if k not in self.payload]
        if missing:
            raise ValueError(f"{self.kind} payload missing {missing}")

    def to_frame(self, op: str = "publish") -> dict:
        return {
            "op": op,
            "routing_key": self.routing_key,
            "kind": self.kind,
            "message_id": self.message_id,
            "payload": self.payload,
            "sent_at": self.sent_at,
        }

    @classmethod
    def from_frame(cls, frame: dict) -> "BusMessage":
        return cls(frame["routing_key"], frame["kind"], frame.get("payload") or {},
                   frame["message_id"], frame.get("sent_at", 0.0))


def encode_frame(obj: dict) -> bytes:
    body = json.dumps(obj, separators=(",", ":")).encode("utf-8")
    return struct.pack(">I", len(body)) + body


def _recv_exact(sock: socket.socket, n: int) -> bytes | None:
    buf = bytearray()
    while len(buf) < n:
        chunk = sock.recv(min(n - len(buf), 1 << 16))
        if not chunk:
            return None
        buf += chunk
    return bytes(buf)


def read_frame(sock: socket.socket, limit: int = MAX_FRAME) -> dict | None:
    """Read one frame; ``None`` on clean EOF. Oversized frames raise after draining."""
    head = _recv_exact(sock, 4)
    if head is None:
        return None
    (length,) = struct.unpack(">I", head)
    body = _recv_exact(sock, length)
    if body is None:
        return None
    if length > limit:
        raise PayloadTooLarge(f"frame of {length} bytes exceeds {limit}")
    return json.loads(body.decode("utf-8"))


def write_frame(sock: socket.socket, obj: dict) -> bytes:
    data = encode_frame(obj)
    sock.sendall(data)
    return data


# -- broker ------------------------------------------------------------------


class _Conn:
    def __init__(self, sock: socket.socket, peer):
        self.sock = sock
        self.peer = peer
        self.lock = threading.Lock()
        self.keys: set[str] = set()
        self.alive = True

    def send(self, obj: dict) -> bytes | None:
        with self.lock:
            if not self.alive:
                return None
            try:
                return write_frame(self.sock, obj)
            except OSError:
                self.alive = False
                return None


class Broker:
    """In-memory broker. ``tap(direction, frame_bytes)`` sees every frame."""

    def __init__(self, address: str = "127.0.0.1", port: int = 0, *,
                 retention_s: float = RETENTION_S,
                 tap: Callable[[str, bytes], None] | None = None):
        self.address = address
        self.port = port
        self.retention_s = retention_s
        self.tap = tap
        self._lock = threading.Lock()
        self._subs: dict[str, list[_Conn]] = defaultdict(list)
        self._retained: dict[str, deque] = defaultdict(deque)
        self._conns: set[_Conn] = set()
        self._sock: socket.socket | None = None
        self._stopped = threading.Event()
        self._threads: list[threading.Thread] = []

    def start(self) -> "Broker":
        sock = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
        sock.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
        try:
            sock.bind((self.address, self.port))
        except OSError as exc:
            sock.close()
            raise BusError(f"cannot bind broker to {self.address}:{self.port}: {exc}") from exc
        sock.listen(128)
        self.port = sock.getsockname()[1]
        self._sock = sock
        for target in (self._accept_loop, self._purge_loop):
            t = threading.Thread(target=target, name=f"broker-{target.__name__}", daemon=True)
            t.start()
            self._threads.append(t)
        log.info("broker listening on %s:%d", self.address, self.port)
        return self

    def stop(self) -> None:
        self._stopped.set()
        if self._sock is not None:
            # shutdown wakes a blocked accept(); close alone leaves the port listening
            try:
                self._sock.shutdown(socket.SHUT_RDWR)
            except OSError:
                pass
            self._sock.close()
            for t in self._threads:
                if t.name.endswith("_accept_loop"):
                    t.join(2.0)
        with self._lock:
            conns = list(self._conns)
            self._conns.clear()
            self._subs.clear()
            self._retained.clear()
        for c in conns:
            with c.lock:
                c.alive = False
                try:
                    c.sock.shutdown(socket.SHUT_RDWR)
                except OSError:
                    pass
                c.sock.close()

    def __enter__(self):
        return self.start()

    def __exit__(self, *exc):
        self.stop()

    @property
    def endpoint(self) -> tuple[str, int]:
        return self.address, self.port

    def active_keys(self) -> set[str]:
        with self._lock:
            return {k for k, subs in self._subs.items() if subs}

    def retained_count(self, key: str | None = None) -> int:
        with self._lock:
            if key is not None:
                return len(self._retained.get(key, ()))
            return sum(len(q) for q in self._retained.values())

    def _accept_loop(self):
        while not self._stopped.is_set():
            try:
                sock, peer = self._sock.accept()
            except OSError:
                return
            if self._stopped.is_set():
                sock.close()
                return
            sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
            conn = _Conn(sock, peer)
            with self._lock:
                self._conns.add(conn)
            threading.Thread(target=self._serve, args=(conn,), daemon=True).start()

    def _purge_loop(self):
        while not self._stopped.wait(1.0):
            self._purge(time.monotonic())

    def _purge(self, now: float):
        with self._lock:
            for key in list(self._retained):
                q = self._retained[key]
                while q and q[0][1] <= now:
                    q.popleft()
                if not q:
                    del self._retained[key]

    def _emit(self, conn: _Conn, obj: dict):
        data = conn.send(obj)
        if data is not None and self.tap is not None:
            self.tap("out", data)

    def _serve(self, conn: _Conn):
        try:
            while not self._stopped.is_set():
                try:
                    frame = read_frame(conn.sock)
                except PayloadTooLarge as exc:
                    self._emit(conn, {"op": "ack", "ok": False, "error": str(exc)})
                    continue
                if frame is None:
                    break
                if self.tap is not None:
                    self.tap("in", encode_frame(frame))
                self._handle(conn, frame)
        except (OSError, ValueError) as exc:
            log.debug("connection %s dropped: %s", conn.peer, exc)
        finally:
            with self._lock:
                self._conns.discard(conn)
                for key in conn.keys:
                    if conn in self._subs.get(key, ()):
                        self._subs[key].remove(conn)
            with conn.lock:
                conn.alive = False
            try:
                conn.sock.close()
            except OSError:
                pass

    def _handle(self, conn: _Conn, frame: dict):
        op = frame.get("op")
        mid = frame.get("message_id")
        key = frame.get("routing_key")
        if op == "subscribe":
            if not key:
                self._emit(conn, {"op": "ack", "message_id": mid, "ok": False, "error": "missing routing_key"})
                return
            with self._lock:
                if conn not in self._subs[key]:
                    self._subs[key].append(conn)
                conn.keys.add(key)
                pending = list(self._retained.pop(key, ()))
            self._emit(conn, {"op": "ack", "message_id": mid, "ok": True})
            now = time.monotonic()
            for msg, expires in pending:
                if expires > now:
                    self._emit(conn, msg)
        elif op == "publish":
            try:
                BusMessage.from_frame(frame)
            except (KeyError, ValueError) as exc:
                self._emit(conn, {"op": "ack", "message_id": mid, "ok": False, "error": str(exc)})
                return
            with self._lock:
                targets = list(self._subs.get(key, ()))
                if not targets:
                    self._retained[key].append((frame, time.monotonic() + self.retention_s))
                # Deliver while holding the lock so that per-key order matches
                # the order publishes were accepted.
                for t in targets:
                    self._emit(t, frame)
            self._emit(conn, {"op": "ack", "message_id": mid, "ok": True})
        else:
            self._emit(conn, {"op": "ack", "message_id": mid, "ok": False, "error": f"bad op {op!r}"})


# -- client ------------------------------------------------------------------


class Subscription:
    """Stream of messages for one routing key.

    Without a callback, messages queue up and are read with :meth:`get` or by
    iterating.
    """

    def __init__(self, key: str, callback: Callable[[BusMessage], None] | None = None):
        self.key = key
        self.callback = callback
        self._queue: queue.Queue[BusMessage] = queue.Queue()

    def _deliver(self, msg: BusMessage):
        if self.callback is not None:
            self.callback(msg)
        else:
            self._queue.put(msg)

    def get(self, timeout: float | None = None) -> BusMessage:
        return self._queue.get(timeout=timeout)

    def __iter__(self):
        while True:
            yield self._queue.get()


class BusClient:
    def __init__(self, address: str, port: int, *, reconnect: bool = True,
                 tap: Callable[[str, bytes], None] | None = None):
        self.address = address
        self.port = port
        self.reconnect = reconnect
        self.tap = tap
        self.connected = threading.Event()
        self.disconnected = threading.Event()
        self._closed = False
        self._sock: socket.socket | None = None
        self._send_lock = threading.Lock()
        self._pending: dict[str, tuple[threading.Event, list]] = {}
        self._pending_lock = threading.Lock()
        self._subs: dict[str, list[Subscription]] = defaultdict(list)
        self._dispatch: queue.Queue = queue.Queue()
        threading.Thread(target=self._dispatch_loop, name="bus-dispatch", daemon=True).start()

    @classmethod
    def from_endpoint(cls, endpoint: str, **kwargs) -> "BusClient":
        address, _, port = endpoint.rpartition(":")
        return cls(address or "127.0.0.1", int(port), **kwargs)

    def connect(self, timeout: float = 5.0) -> "BusClient":
        deadline = time.monotonic() + timeout
        delay = 0.05
        while True:
            try:
                self._open()
                return self
            except OSError as exc:
                if time.monotonic() + delay > deadline:
                    raise BusUnavailable(f"broker {self.address}:{self.port} unreachable: {exc}") from exc
                time.sleep(delay)
                delay = min(delay * 2, 0.5)

    def _open(self):
        sock = socket.create_connection((self.address, self.port), timeout=5.0)
        sock.settimeout(None)
        sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
        self._sock = sock
        self.disconnected.clear()
        threading.Thread(target=self._read_loop, args=(sock,), name="bus-reader", daemon=True).start()
        for key in list(self._subs):
            self._send_and_wait({"op": "subscribe", "routing_key": key,
                                 "message_id": uuid.uuid4().hex}, 5.0)
        self.connected.set()

    def close(self):
        self._closed = True
        self.connected.clear()
        sock = self._sock
        if sock is not None:
            try:
                sock.shutdown(socket.SHUT_RDWR)
            except OSError:
                pass
            sock.close()
        self._dispatch.put(None)

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()

    def _send(self, obj: dict):
        sock = self._sock
        if sock is None:
            raise BusUnavailable("not connected")
        data = encode_frame(obj)
        with self._send_lock:
            try:
                sock.sendall(data)
            except OSError as exc:
                raise _WriteFailed(str(exc)) from exc
        if self.tap is not None:
            self.tap("out", data)

    def _send_and_wait(self, obj: dict, timeout: float) -> dict:
        ev: threading.Event = threading.Event()
        slot: list = []
        with self._pending_lock:
            self._pending[obj["message_id"]] = (ev, slot)
        try:
            self._send(obj)
            if not ev.wait(timeout):
                raise BusUnavailable(f"no ack for {obj['op']} within {timeout}s")
        finally:
            with self._pending_lock:
                self._pending.pop(obj["message_id"], None)
        ack = slot[0]
        if ack is None:
            raise BusUnavailable("connection lost before ack")
        if not ack.get("ok", False):
            raise BusError(ack.get("error", "rejected by broker"))
        return ack

    def publish(self, msg: BusMessage, *, timeout: float = 5.0, wait_ack: bool = True) -> dict | None:
        frame = msg.to_frame("publish")
        if len(json.dumps(msg.payload, separators=(",", ":")).encode("utf-8")) > MAX_PAYLOAD:
            raise PayloadTooLarge(f"payload exceeds {MAX_PAYLOAD} bytes")
        deadline = time.monotonic() + timeout
        while True:
            remaining = max(0.0, deadline - time.monotonic())
            if not self.connected.wait(remaining if not self._closed else 0):
                raise BusUnavailable(f"broker {self.address}:{self.port} unreachable")
            sock = self._sock
            try:
                if not wait_ack:
                    self._send(frame)
                    return None
                return self._send_and_wait(frame, max(remaining, 0.1))
            except _WriteFailed:
                # A write to a socket the reader has not yet seen die never
                # reached the broker; retry once the client has reconnected.
                if not self.reconnect or self._closed or time.monotonic() >= deadline:
                    raise
                while self._sock is sock and time.monotonic() < deadline and not self._closed:
                    time.sleep(0.02)

    def subscribe(self, key: str, callback: Callable[[BusMessage], None] | None = None,
                  *, timeout: float = 5.0) -> Subscription:
        sub = Subscription(key, callback)
        first = not self._subs[key]
        self._subs[key].append(sub)
        if first and self.connected.is_set():
            self._send_and_wait({"op": "subscribe", "routing_key": key,
                                 "message_id": uuid.uuid4().hex}, timeout)
        return sub

    def _read_loop(self, sock: socket.socket):
        try:
            while True:
                frame = read_frame(sock)
                if frame is None:
                    break
                op = frame.get("op")
                if op == "ack":
                    with self._pending_lock:
                        entry = self._pending.get(frame.get("message_id"))
                    if entry is not None:
                        entry[1].append(frame)
                        entry[0].set()
                elif op == "publish":
                    self._dispatch.put(frame)
        except (OSError, ValueError, BusError):
            pass
        if sock is not self._sock:
            return
        self.connected.clear()
        self.disconnected.set()
        with self._pending_lock:
            for ev, slot in self._pending.values():
                slot.append(None)
                ev.set()
        if self.reconnect and not self._closed:
            threading.Thread(target=self._reconnect_loop, daemon=True).start()

    def _reconnect_loop(self):
        delay = 0.05
        while not self._closed:
            try:
                self._open()
                log.info("reconnected to broker %s:%d", self.address, self.port)
                return
            except (OSError, BusError):
                time.sleep(delay)
                delay = min(delay * 2, 1.0)

    def _dispatch_loop(self):
        while True:
            frame = self._dispatch.get()
            if frame is None:
                return
            try:
                msg = BusMessage.from_frame(frame)
            except (KeyError, ValueError):
                log.warning("dropping malformed frame")
                continue
            for sub in list(self._subs.get(msg.routing_key, ())):
                try:
                    sub._deliver(msg)
                except Exception:  # noqa: BLE001 - a bad callback must not kill the stream
                    log.exception("subscriber callback failed for %s", msg.routing_key)


def run_broker(bind: str, **kwargs) -> Broker:
    address, _, port = bind.rpartition(":")
    return Broker(address or "0.0.0.0", int(port), **kwargs).start()


def main(argv: list[str] | None = None) -> int:
    parser = argparse.ArgumentParser(prog="qdnet-bus", description="run the message broker")
    parser.add_argument("--bind", required=True, help="address:port")
    parser.add_argument("--capture", help="append every frame (hex) to this file")
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO, format="%(asctime)s bus %(message)s")

    tap = None
    if args.capture:
        fh = open(args.capture, "a", encoding="utf-8")
        cap_lock = threading.Lock()

        def tap(direction: str, data: bytes):
            with cap_lock:
                fh.write(json.dumps({"dir": direction, "frame": data.hex()}) + "\n")
                fh.flush()

    broker = run_broker(args.bind, tap=tap)
    stop = threading.Event()
    signal.signal(signal.SIGTERM, lambda *_: stop.set())
    signal.signal(signal.SIGINT, lambda *_: stop.set())
    print(f"bus ready {broker.address}:{broker.port}", flush=True)
    stop.wait()
    broker.stop()
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
