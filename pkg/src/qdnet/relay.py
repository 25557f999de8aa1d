"""Trusted-node key relay over the ETSI key delivery API.

The initiator collects one QKD key per hop, draws a fresh end-to-end key and
one-time-pads it with the first hop key. Each trusted node strips its
upstream pad and applies its downstream pad; the target strips the last pad.
Ciphertexts travel between per-node relay agents over plain TCP using the bus
frame format (kind ``relay_hop``), never through the modeling path.
"""
from __future__ import annotations

import argparse
import base64
import logging
import secrets
import socket
import threading
import time
import uuid
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Callable

from qdnet.bus import BusMessage, encode_frame, read_frame
from qdnet.client import KeyDeliveryError, KmeClient
from qdnet.config import NetworkConfig

log = logging.getLogger(__name__)

Tap = Callable[[str, bytes], None]


class RelayError(RuntimeError):
    pass


def xor_bytes(data: bytes, pad: bytes) -> bytes:
    if len(data) != len(pad):
        raise RelayError(f"pad length {len(pad)} does not match payload length {len(data)}")
    return bytes(a ^ b for a, b in zip(data, pad))


@dataclass(frozen=True)
class RelayPath:
    nodes: tuple[str, ...]

    @classmethod
    def parse(cls, text: str) -> "RelayPath":
        return cls(tuple(n.strip() for n in text.split(",") if n.strip()))

    def validate(self, config: NetworkConfig) -> "RelayPath":
        if len(self.nodes) < 3:
            raise RelayError("a relay path needs at least one trusted node; use get_key directly")
        if len(set(self.nodes)) != len(self.nodes):
            raise RelayError("relay path visits a node twice")
        names = {n.name for n in config.nodes}
        for name in self.nodes:
            if name not in names:
                raise RelayError(f"unknown node {name!r}")
        for a, b in zip(self.nodes, self.nodes[1:]):
            if config.link_between(a, b) is None:
                raise RelayError(f"{a} and {b} are not adjacent")
        return self

    @property
    def hops(self) -> list[tuple[str, str]]:
        return list(zip(self.nodes, self.nodes[1:]))


def _fetch(client: KmeClient, master_sae: str, key_id: str, wait_s: float) -> bytes:
    # The peer copy of a hop key may land a moment after the initiator's.
    deadline = time.monotonic() + wait_s
    while True:
        try:
            return client.get_key_with_id(master_sae, key_id).key
        except KeyDeliveryError as exc:
            if exc.status != 400 or time.monotonic() >= deadline:
                raise RelayError(f"hop key {key_id} unavailable: {exc.message}") from None
            time.sleep(0.05)


def forward_hop(trusted: KmeClient, upstream_sae: str, upstream_key_id: str,
                downstream_sae: str, downstream_key_id: str, ciphertext: bytes,
                *, wait_s: float = 2.0) -> bytes:
    upstream = _fetch(trusted, upstream_sae, upstream_key_id, wait_s)
    downstream = _fetch(trusted, downstream_sae, downstream_key_id, wait_s)
    return xor_bytes(xor_bytes(ciphertext, upstream), downstream)


def _send_hop(address: tuple[str, int], payload: dict, tap: Tap | None, timeout: float) -> dict:
    msg = BusMessage(f"relay.{payload['hops'][payload['index']]['node']}", "relay_hop", payload)
    frame = msg.to_frame("publish")
    with socket.create_connection(address, timeout=timeout) as sock:
        data = encode_frame(frame)
        if tap is not None:
            tap("out", data)
        sock.sendall(data)
        ack = read_frame(sock)
    if ack is None:
        raise RelayError(f"relay agent at {address} closed the connection")
    if tap is not None:
        tap("in", encode_frame(ack))
    if not ack.get("ok"):
        raise RelayError(ack.get("error", "relay hop failed"))
    return ack


class RelayAgent:
    """KME-side agent for one node: forwards (trusted) or terminates (target) relays."""

    def __init__(self, name: str, client: KmeClient, *, address: str = "127.0.0.1", port: int = 0,
                 tap: Tap | None = None, wait_s: float = 2.0, timeout: float = 30.0):
        self.name = name
        self.client = client
        self.tap = tap
        self.wait_s = wait_s
        self.timeout = timeout
        self.received: dict[str, bytes] = {}
        self._sock = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
        self._sock.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
        self._sock.bind((address, port))
        self._sock.listen(16)
        self.address = self._sock.getsockname()
        self._closed = False
        threading.Thread(target=self._accept, name=f"relay-{name}", daemon=True).start()

    def close(self):
        self._closed = True
        self._sock.close()

    def _accept(self):
        while not self._closed:
            try:
                conn, _ = self._sock.accept()
            except OSError:
                return
            threading.Thread(target=self._serve, args=(conn,), daemon=True).start()

    def _serve(self, conn: socket.socket):
        with conn:
            try:
                frame = read_frame(conn)
            except (OSError, ValueError):
                return
            if frame is None:
                return
            if self.tap is not None:
                self.tap("in", encode_frame(frame))
            mid = frame.get("message_id")
            try:
                self.handle(frame.get("payload") or {})
                reply = {"op": "ack", "message_id": mid, "ok": True}
            except (RelayError, KeyError, ValueError) as exc:
                log.warning("relay at %s failed: %s", self.name, exc)
                reply = {"op": "ack", "message_id": mid, "ok": False, "error": f"{self.name}: {exc}"}
            data = encode_frame(reply)
            if self.tap is not None:
                self.tap("out", data)
            try:
                conn.sendall(data)
            except OSError:
                pass

    def handle(self, payload: dict):
        hop = payload["hops"][payload["index"]]
        if hop["node"] != self.name:
            raise RelayError(f"hop addressed to {hop['node']}")
        ciphertext = base64.b64decode(payload["ciphertext"])
        up_sae, up_kid = hop["upstream"]
        if hop.get("downstream"):
            down_sae, down_kid = hop["downstream"]
            out = forward_hop(self.client, up_sae, up_kid, down_sae, down_kid, ciphertext, wait_s=self.wait_s)
            nxt = dict(payload, index=payload["index"] + 1,
                       ciphertext=base64.b64encode(out).decode("ascii"))
            address = tuple(payload["hops"][payload["index"] + 1]["address"])
            _send_hop(address, nxt, self.tap, self.timeout)
        else:
            pad = _fetch(self.client, up_sae, up_kid, self.wait_s)
            self.received[payload["relay_id"]] = xor_bytes(ciphertext, pad)


@dataclass
class RelayResult:
    key_id: str
    key: bytes
    hop_key_ids: list[str]


class RelayKme:
    """Client-side key management entity able to relay keys across trusted nodes.

    ``urls`` maps node name to its ETSI API base URL. One :class:`RelayAgent`
    is started per node.
    """

    def __init__(self, config: NetworkConfig, urls: dict[str, str], *, tap: Tap | None = None,
                 rng: Callable[[int], bytes] = secrets.token_bytes, wait_s: float = 2.0):
        self.config = config
        self.tap = tap
        self.rng = rng
        self.clients = {name: KmeClient(url) for name, url in urls.items()}
        self.agents = {name: RelayAgent(name, c, tap=tap, wait_s=wait_s) for name, c in self.clients.items()}
        self.used_hop_keys: set[str] = set()
        self._lock = threading.Lock()

    def close(self):
        for agent in self.agents.values():
            agent.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()

    def _sae(self, name: str) -> str:
        return self.config.node(name).sae_id

    def _hop_key(self, a: str, b: str, size: int):
        try:
            return self.clients[a].get_key(self._sae(b), size)
        except KeyDeliveryError as exc:
            raise RelayError(f"hop key {a}->{b} failed: {exc}") from None

    def relay_key(self, path: RelayPath, size: int = 256) -> RelayResult:
        path.validate(self.config)
        if size % 8:
            raise RelayError("size must be a multiple of 8")
        hops = path.hops
        with ThreadPoolExecutor(max_workers=len(hops)) as pool:
            keys = list(pool.map(lambda h: self._hop_key(h[0], h[1], size), hops))
        ids = [k.key_id for k in keys]
        with self._lock:
            reused = self.used_hop_keys.intersection(ids)
            if reused:
                raise RelayError(f"hop key(s) {sorted(reused)} already consumed")
            self.used_hop_keys.update(ids)

        first_pad = keys[0].key
        # Downstream hop material stays with the nodes; only ids travel.
        del keys
        e2e = self.rng(size // 8)
        relay_id = str(uuid.uuid4())
        route = []
        for i, name in enumerate(path.nodes[1:], start=1):
            entry = {
                "node": name,
                "address": list(self.agents[name].address),
                "upstream": [self._sae(path.nodes[i - 1]), ids[i - 1]],
                "downstream": [self._sae(path.nodes[i + 1]), ids[i]] if i < len(ids) else None,
            }
            route.append(entry)
        payload = {
            "relay_id": relay_id,
            "ciphertext": base64.b64encode(xor_bytes(e2e, first_pad)).decode("ascii"),
            "hops": route,
            "index": 0,
        }
        _send_hop(tuple(route[0]["address"]), payload, self.tap, timeout=60.0)
        return RelayResult(relay_id, e2e, ids)

    def received_key(self, target: str, relay_id: str) -> bytes:
        return self.agents[target].received[relay_id]


def relay_key(config: NetworkConfig, urls: dict[str, str], path: RelayPath, size: int = 256) -> tuple[bytes, str]:
    with RelayKme(config, urls) as kme:
        res = kme.relay_key(path, size)
        return res.key, res.key_id


def add_cli(sub: argparse._SubParsersAction):
    p = sub.add_parser("relay", help="relay an end-to-end key across trusted nodes")
    p.add_argument("--path", required=True, help="comma-separated node names, initiator first")
    p.add_argument("--size", type=int, default=256)
    p.add_argument("--config", required=True)
    p.add_argument("--inventory", help="inventory for node addresses (default 127.0.0.1)")
    p.add_argument("--reveal", action="store_true", help="print the key in hex at both ends")
    p.set_defaults(func=_cli)


def _cli(args) -> int:
    from qdnet.config import load_config, load_inventory, validate_pair

    config = load_config(args.config)
    if args.inventory:
        plan = validate_pair(config, load_inventory(args.inventory))
        urls = {n.name: plan.node_url(n.name) for n in config.nodes}
    else:
        urls = {n.name: f"http://127.0.0.1:{n.api_port}" for n in config.nodes}
    path = RelayPath.parse(args.path)
    with RelayKme(config, urls) as kme:
        try:
            res = kme.relay_key(path, args.size)
        except RelayError as exc:
            print(f"relay failed: {exc}")
            return 1
        target = kme.received_key(path.nodes[-1], res.key_id)
        print(f"key_ID {res.key_id}")
        if args.reveal:
            print(f"{path.nodes[0]} {res.key.hex()}")
            print(f"{path.nodes[-1]} {target.hex()}")
        print("match" if target == res.key else "MISMATCH")
        return 0 if target == res.key else 1
