"""Emulated QKD node: ETSI GS QKD 014 key delivery API plus local key store.

The HTTP front and the bus handler run concurrently. ``enc_keys`` (get key)
blocks until the engine's result arrives on this node's routing key, so the
response time carries the emulated generation latency. ``dec_keys`` (get key
with key IDs) answers from the local store only.
"""
from __future__ import annotations

import argparse
import base64
import json
import logging
import re
import signal
import threading
import time
import uuid
from dataclasses import dataclass
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from typing import Callable
from urllib.parse import parse_qs, urlsplit

from qdnet import bus as busmod
from qdnet.config import NetworkConfig, load_config

log = logging.getLogger(__name__)

DEFAULT_TTL_S = 600.0
DEFAULT_KEY_SIZE = 256
MIN_KEY_SIZE = 8
MAX_KEY_SIZE = 65536
MAX_KEY_PER_REQUEST = 1
MAX_KEY_COUNT = 100_000
ENGINE_TIMEOUT_S = 120.0


class ApiError(Exception):
    def __init__(self, status: int, message: str):
        super().__init__(message)
        self.status = status
        self.message = message


@dataclass
class StoredKey:
    key_id: str
    material: bytes
    peer_sae: str
    stored_at: float
    ttl_s: float = DEFAULT_TTL_S

    def expired(self, now: float) -> bool:
        return now > self.stored_at + self.ttl_s


class KeyStore:
    """Thread-safe key_ID -> StoredKey map with TTL expiry."""

    def __init__(self, ttl_s: float = DEFAULT_TTL_S, clock: Callable[[], float] = time.monotonic):
        if ttl_s <= 0:
            raise ValueError("ttl_s must be positive")
        self.ttl_s = ttl_s
        self.clock = clock
        self._keys: dict[str, StoredKey] = {}
        self._lock = threading.Lock()

    def insert(self, key_id: str, material: bytes, peer_sae: str) -> bool:
        with self._lock:
            if key_id in self._keys:
                return False
            self._keys[key_id] = StoredKey(key_id, material, peer_sae, self.clock(), self.ttl_s)
            return True

    def get(self, key_id: str) -> StoredKey | None:
        now = self.clock()
        with self._lock:
            key = self._keys.get(key_id)
            if key is None:
                return None
            if key.expired(now):
                del self._keys[key_id]
                return None
            return key

    def count(self, peer_sae: str | None = None) -> int:
        now = self.clock()
        with self._lock:
            return sum(1 for k in self._keys.values()
                       if not k.expired(now) and (peer_sae is None or k.peer_sae == peer_sae))

    def purge(self) -> int:
        now = self.clock()
        with self._lock:
            dead = [kid for kid, k in self._keys.items() if k.expired(now)]
            for kid in dead:
                del self._keys[kid]
        return len(dead)

    def __len__(self) -> int:
        with self._lock:
            return len(self._keys)


def key_container(keys: list[StoredKey]) -> dict:
    return {"keys": [{"key_ID": k.key_id, "key": base64.b64encode(k.material).decode("ascii")}
                     for k in keys]}


class NodeService:
    def __init__(self, name: str, config: NetworkConfig, *, ttl_s: float = DEFAULT_TTL_S,
                 engine_timeout_s: float = ENGINE_TIMEOUT_S,
                 clock: Callable[[], float] = time.monotonic):
        self.name = name
        self.config = config
        self.decl = config.node(name)
        self.store = KeyStore(ttl_s, clock)
        self.engine_timeout_s = engine_timeout_s
        self._pending: dict[str, tuple[threading.Event, list]] = {}
        self._pending_lock = threading.Lock()
        self._bus: busmod.BusClient | None = None
        self._http: ThreadingHTTPServer | None = None
        self._stop = threading.Event()

    @property
    def routing_key(self) -> str:
        return busmod.node_key(self.name)

    # -- wiring --------------------------------------------------------------

    def attach(self, client: busmod.BusClient):
        self._bus = client
        client.subscribe(self.routing_key, self._on_message)

    def serve(self, address: str = "127.0.0.1", port: int | None = None) -> ThreadingHTTPServer:
        port = self.decl.api_port if port is None else port
        handler = type("Handler", (_Handler,), {"service": self})
        server = ThreadingHTTPServer((address, port), handler)
        server.daemon_threads = True
        self._http = server
        threading.Thread(target=server.serve_forever, kwargs={"poll_interval": 0.05},
                         name=f"api-{self.name}", daemon=True).start()
        threading.Thread(target=self._purge_loop, name=f"purge-{self.name}", daemon=True).start()
        return server

    def stop(self):
        self._stop.set()
        if self._http is not None:
            self._http.shutdown()
            self._http.server_close()

    def _purge_loop(self):
        while not self._stop.wait(1.0):
            n = self.store.purge()
            if n:
                log.info("%s purged %d expired keys", self.name, n)

    # -- ETSI GS QKD 014 operations -------------------------------------------

    def _peer_for_sae(self, sae_id: str):
        peer = self.config.node_by_sae(sae_id)
        if peer is None or peer.name == self.name:
            raise ApiError(404, f"unknown SAE {sae_id!r}")
        return peer

    def get_status(self, slave_sae_id: str) -> dict:
        peer = self._peer_for_sae(slave_sae_id)
        return {
            "source_KME_ID": self.name,
            "target_KME_ID": peer.name,
            "master_SAE_ID": self.decl.sae_id,
            "slave_SAE_ID": peer.sae_id,
            "key_size": DEFAULT_KEY_SIZE,
            "stored_key_count": self.store.count(peer.sae_id),
            "max_key_count": MAX_KEY_COUNT,
            "max_key_per_request": MAX_KEY_PER_REQUEST,
            "max_key_size": MAX_KEY_SIZE,
            "min_key_size": MIN_KEY_SIZE,
        }

    def get_key(self, slave_sae_id: str, number: int = 1, size: int | None = None) -> dict:
        peer = self._peer_for_sae(slave_sae_id)
        size = DEFAULT_KEY_SIZE if size is None else size
        if not isinstance(size, int) or isinstance(size, bool) or size % 8 or not MIN_KEY_SIZE <= size <= MAX_KEY_SIZE:
            raise ApiError(400, f"size must be a multiple of 8 in [{MIN_KEY_SIZE}, {MAX_KEY_SIZE}]")
        if not isinstance(number, int) or isinstance(number, bool) or not 1 <= number <= MAX_KEY_PER_REQUEST:
            raise ApiError(400, f"number must be in [1, {MAX_KEY_PER_REQUEST}]")
        if self.config.link_between(self.name, peer.name) is None:
            raise ApiError(400, f"{peer.name} is not adjacent to {self.name}; use a relay")
        if self._bus is None:
            raise ApiError(503, "node not connected to the message bus")

        request_id = str(uuid.uuid4())
        ev, slot = threading.Event(), []
        with self._pending_lock:
            self._pending[request_id] = (ev, slot)
        try:
            msg = busmod.BusMessage(busmod.ENGINE_KEY, "modeling_request", {
                "request_id": request_id, "initiator": self.name, "peer": peer.name,
                "bits_needed": number * size, "reply_to": self.routing_key,
            })
            try:
                self._bus.publish(msg)
            except busmod.BusError as exc:
                raise ApiError(503, f"modeling engine unreachable: {exc}") from None
            log.info("%s requested %d bits with %s (request %s)", self.name, number * size, peer.name, request_id)
            if not ev.wait(self.engine_timeout_s):
                raise ApiError(503, "timed out waiting for the modeling engine")
        finally:
            with self._pending_lock:
                self._pending.pop(request_id, None)

        result = slot[0]
        if result.get("status") == "error":
            code = 400 if result.get("category") in ("unknown_node", "not_adjacent", "invalid_request") else 503
            raise ApiError(code, result.get("error") or "key generation failed")
        key = self.store.get(result["key_id"])
        if key is None:
            raise ApiError(503, "key expired before delivery")
        return key_container([key])

    def get_key_with_ids(self, master_sae_id: str, key_ids: list[str]) -> dict:
        master = self._peer_for_sae(master_sae_id)
        if not key_ids:
            raise ApiError(400, "no key_ID given")
        found = []
        for kid in key_ids:
            key = self.store.get(kid)
            if key is None or key.peer_sae != master.sae_id:
                raise ApiError(400, f"key_ID {kid} not found or expired")
            found.append(key)
        return key_container(found)

    def store_result(self, payload: dict):
        status = payload.get("status")
        rid = payload.get("request_id")
        if status != "error":
            other = payload["peer"] if payload.get("role") == "initiator" else payload["initiator"]
            peer_sae = self.config.node(other).sae_id
            material = base64.b64decode(payload.get("key_material", ""))
            if self.store.insert(payload["key_id"], material, peer_sae):
                log.info("%s stored key %s (%d bits, %s, with %s)", self.name, payload["key_id"],
                         payload.get("bits", 8 * len(material)), status, other)
            else:
                log.warning("%s rejected duplicate key_ID %s", self.name, payload["key_id"])
        if payload.get("role") == "initiator":
            with self._pending_lock:
                entry = self._pending.get(rid)
            if entry is not None:
                entry[1].append(payload)
                entry[0].set()

    def _on_message(self, msg: busmod.BusMessage):
        if msg.kind == "modeling_result":
            self.store_result(msg.payload)


_PATH = re.compile(r"^/api/v1/keys/(?P<sae>[^/]+)/(?P<op>status|enc_keys|dec_keys)/?$")


class _Handler(BaseHTTPRequestHandler):
    service: NodeService
    protocol_version = "HTTP/1.1"

    def log_message(self, fmt, *args):
        log.debug("%s " + fmt, self.address_string(), *args)

    def _reply(self, status: int, body: dict):
        data = json.dumps(body).encode("utf-8")
        self.send_response(status)
        self.send_header("Content-Type", "application/json")
        self.send_header("Content-Length", str(len(data)))
        self.end_headers()
        self.wfile.write(data)

    def _body(self) -> dict:
        length = int(self.headers.get("Content-Length") or 0)
        if not length:
            return {}
        try:
            body = json.loads(self.rfile.read(length).decode("utf-8"))
        except (ValueError, UnicodeDecodeError):
            raise ApiError(400, "request body is not valid JSON") from None
        if not isinstance(body, dict):
            raise ApiError(400, "request body must be a JSON object")
        return body

    @staticmethod
    def _int(value, name: str) -> int | None:
        if value is None:
            return None
        if isinstance(value, list):
            value = value[0]
        try:
            return int(value)
        except (TypeError, ValueError):
            raise ApiError(400, f"{name} must be an integer") from None

    def _dispatch(self, method: str):
        url = urlsplit(self.path)
        m = _PATH.match(url.path)
        try:
            if m is None:
                raise ApiError(404, f"no such endpoint {url.path}")
            sae, op = m.group("sae"), m.group("op")
            query = parse_qs(url.query)
            body = self._body() if method == "POST" else {}
            svc = self.service
            if op == "status":
                if method != "GET":
                    raise ApiError(405, "status only supports GET")
                result = svc.get_status(sae)
            elif op == "enc_keys":
                number = self._int(body.get("number", query.get("number")), "number")
                size = self._int(body.get("size", query.get("size")), "size")
                result = svc.get_key(sae, 1 if number is None else number, size)
            else:
                if method == "POST":
                    entries = body.get("key_IDs")
                    if not isinstance(entries, list):
                        raise ApiError(400, "body must contain a key_IDs list")
                    ids = [e.get("key_ID") if isinstance(e, dict) else None for e in entries]
                    if not all(isinstance(i, str) for i in ids):
                        raise ApiError(400, "each key_IDs entry needs a key_ID string")
                else:
                    ids = query.get("key_ID", [])
                result = svc.get_key_with_ids(sae, ids)
        except ApiError as exc:
            self._reply(exc.status, {"message": exc.message})
            return
        except Exception as exc:  # noqa: BLE001
            log.exception("request failed")
            self._reply(500, {"message": f"internal error: {exc}"})
            return
        self._reply(200, result)

    def do_GET(self):
        self._dispatch("GET")

    def do_POST(self):
        self._dispatch("POST")


def main(argv: list[str] | None = None) -> int:
    parser = argparse.ArgumentParser(prog="qdnet-node", description="run one emulated QKD node")
    parser.add_argument("--name", required=True)
    parser.add_argument("--config", required=True)
    parser.add_argument("--bus", required=True, help="broker address:port")
    parser.add_argument("--port", type=int, help="API port (default from config)")
    parser.add_argument("--ttl", type=float, default=DEFAULT_TTL_S, help="key time-to-live in seconds")
    parser.add_argument("--address", default="127.0.0.1", help="API bind address")
    parser.add_argument("--engine-timeout", type=float, default=ENGINE_TIMEOUT_S)
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO, format=f"%(asctime)s node[{args.name}] %(message)s")

    config = load_config(args.config)
    node = NodeService(args.name, config, ttl_s=args.ttl, engine_timeout_s=args.engine_timeout)
    client = busmod.BusClient.from_endpoint(args.bus).connect(timeout=30.0)
    node.attach(client)
    node.serve(args.address, args.port)
    print(f"node {args.name} ready", flush=True)

    stop = threading.Event()
    signal.signal(signal.SIGTERM, lambda *_: stop.set())
    signal.signal(signal.SIGINT, lambda *_: stop.set())
    stop.wait()
    node.stop()
    client.close()
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
