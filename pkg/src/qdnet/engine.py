"""Quantum-behavior modeling engine.

Consumes modeling requests from the bus, runs protocol rounds on the
requested link until enough key bits exist, holds the result back for the
emulated generation time and then publishes it to both endpoints.

Work on one link is serialized (one worker per link, plus a busy-until
schedule); different links progress independently.
"""
from __future__ import annotations

import argparse
import base64
import heapq
import itertools
import json
import logging
import signal
import sys
import threading
import time
import uuid
import zlib
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from qdnet import bus as busmod
from qdnet.config import LinkDecl, NetworkConfig, load_config
from qdnet.params import LinkPhysics
from qdnet.quantum import RoundOutcome, get_protocol

log = logging.getLogger(__name__)


class RequestError(ValueError):
    def __init__(self, category: str, message: str):
        super().__init__(f"{category}: {message}")
        self.category = category
        self.message = message


@dataclass
class ModelingRequest:
    request_id: str
    initiator: str
    peer: str
    bits_needed: int
    received_at: float = 0.0

    def __post_init__(self):
        if isinstance(self.bits_needed, bool) or not isinstance(self.bits_needed, int) or self.bits_needed < 1:
            raise RequestError("invalid_request", "bits_needed must be a positive integer")
        if self.initiator == self.peer:
            raise RequestError("invalid_request", "initiator and peer must differ")

    @classmethod
    def from_payload(cls, payload: dict, received_at: float = 0.0) -> "ModelingRequest":
        try:
            return cls(str(payload["request_id"]), str(payload["initiator"]), str(payload["peer"]),
                       payload["bits_needed"], received_at)
        except KeyError as exc:
            raise RequestError("invalid_request", f"missing field {exc}") from None


@dataclass
class ModelingResult:
    request_id: str
    key_id: str
    key_material: np.ndarray
    qber: float
    simulated_duration_s: float
    status: str  # "ok" | "compromised" | "error"
    peer_key_material: np.ndarray
    initiator: str = ""
    peer: str = ""
    rounds: int = 0
    channel_uses: int = 0
    generated_bits: int = 0
    error: str | None = None


@dataclass
class LinkSchedule:
    link_id: str
    busy_until: float = 0.0


def schedule(link: LinkSchedule, now: float, duration_s: float, time_scale: float = 1.0) -> float:
    """Reserve the link for ``duration_s`` emulated seconds; return completion time."""
    if duration_s < 0:
        raise ValueError("duration_s must be >= 0")
    completion = max(now, link.busy_until) + duration_s / time_scale
    link.busy_until = max(link.busy_until, completion)
    return completion


def validate_request(req: ModelingRequest, config: NetworkConfig) -> LinkDecl:
    names = {n.name for n in config.nodes}
    for name in (req.initiator, req.peer):
        if name not in names:
            raise RequestError("unknown_node", f"node {name!r} is not part of the network")
    link = config.link_between(req.initiator, req.peer)
    if link is None:
        raise RequestError("not_adjacent", f"{req.initiator} and {req.peer} are not neighbors")
    return link


def pack_bits(bits: np.ndarray) -> str:
    return base64.b64encode(np.packbits(np.asarray(bits, dtype=np.uint8)).tobytes()).decode("ascii")


def unpack_bits(text: str, nbits: int) -> np.ndarray:
    raw = np.frombuffer(base64.b64decode(text), dtype=np.uint8)
    return np.unpackbits(raw)[:nbits]


class EventLog:
    """Append-only JSONL log. Falls back to stderr when the file is unwritable."""

    def __init__(self, path=None):
        self.path = path
        self._lock = threading.Lock()
        self._fh = None
        self._stderr = False
        if path is not None:
            try:
                self._fh = open(path, "a", encoding="utf-8")
            except OSError as exc:
                print(f"engine log {path} unwritable ({exc}); using stderr", file=sys.stderr)
                self._stderr = True
        self.records: list[dict] = []

    def write(self, event: str, *, level: str = "info", request_id: str | None = None,
              link: str | None = None, qber: float | None = None,
              duration_s: float | None = None, **detail) -> dict:
        rec = {"ts": time.time(), "level": level, "event": event,
               "request_id": request_id, "link": link}
        if qber is not None:
            rec["qber"] = qber
        if duration_s is not None:
            rec["duration_s"] = duration_s
        rec["detail"] = detail
        line = json.dumps(rec)
        with self._lock:
            self.records.append(rec)
            if self._fh is not None:
                try:
                    self._fh.write(line + "\n")
                    self._fh.flush()
                    return rec
                except OSError:
                    self._stderr = True
            if self._stderr:
                print(line, file=sys.stderr)
        return rec

    def close(self):
        with self._lock:
            if self._fh is not None:
                self._fh.close()
                self._fh = None


class _LinkState:
    def __init__(self, link: LinkDecl):
        self.link = link
        self.schedule = LinkSchedule(link.link_id)
        self.link_hash = zlib.crc32(link.link_id.encode())
        self.worker = ThreadPoolExecutor(max_workers=1, thread_name_prefix=f"link-{link.link_id}")
        self.alice = np.zeros(0, dtype=np.uint8)
        self.bob = np.zeros(0, dtype=np.uint8)
        self.flagged = np.zeros(0, dtype=bool)
        self.round_index = 0
        self.generated = 0
        self.delivered = 0
        self.last_qber = 0.0

    @property
    def available(self) -> int:
        return self.alice.size

    def push(self, outcome: RoundOutcome):
        self.alice = np.concatenate([self.alice, outcome.secure_bits])
        self.bob = np.concatenate([self.bob, outcome.peer_bits])
        flags = np.full(outcome.secure_bits.size, outcome.compromised_divergent)
        self.flagged = np.concatenate([self.flagged, flags])
        self.generated += outcome.secure_bits.size

    def take(self, n: int):
        a, b, f = self.alice[:n], self.bob[:n], self.flagged[:n]
        self.alice, self.bob, self.flagged = self.alice[n:], self.bob[n:], self.flagged[n:]
        self.delivered += n
        return a, b, f

    def clear(self):
        self.alice = self.alice[:0]
        self.bob = self.bob[:0]
        self.flagged = self.flagged[:0]


class _DelayQueue:
    """Runs callables at monotonic deadlines, in (deadline, submission) order."""

    def __init__(self, clock: Callable[[], float]):
        self.clock = clock
        self._heap: list = []
        self._seq = itertools.count()
        self._cv = threading.Condition()
        self._stopped = False
        self._thread = threading.Thread(target=self._run, name="delayed-publisher", daemon=True)
        self._thread.start()

    def put(self, due: float, fn: Callable[[], None]):
        with self._cv:
            heapq.heappush(self._heap, (due, next(self._seq), fn))
            self._cv.notify()

    def stop(self):
        with self._cv:
            self._stopped = True
            self._cv.notify()

    def _run(self):
        while True:
            with self._cv:
                while not self._stopped:
                    if self._heap:
                        wait = self._heap[0][0] - self.clock()
                        if wait <= 0:
                            break
                        self._cv.wait(wait)
                    else:
                        self._cv.wait()
                if self._stopped:
                    return
                _, _, fn = heapq.heappop(self._heap)
            try:
                fn()
            except Exception:  # noqa: BLE001
                log.exception("delayed task failed")


class ModelingEngine:
    def __init__(
        self,
        config: NetworkConfig,
        *,
        publisher: Callable[[busmod.BusMessage], object] | None = None,
        event_log: EventLog | None = None,
        time_scale: float | None = None,
        seed: int | None = None,
        buffer_keys: bool | None = None,
        release_compromised: bool | None = None,
        max_rounds: int | None = None,
        clock: Callable[[], float] = time.monotonic,
    ):
        opts = config.engine_options
        self.config = config
        self.publisher = publisher
        self.log = event_log or EventLog()
        self.time_scale = time_scale if time_scale is not None else config.time_scale
        if self.time_scale <= 0:
            raise ValueError("time_scale must be > 0")
        seed = seed if seed is not None else opts.seed
        self.seed = seed if seed is not None else int.from_bytes(uuid.uuid4().bytes[:8], "big")
        self.buffer_keys = opts.buffer_keys if buffer_keys is None else buffer_keys
        self.release_compromised = opts.release_compromised if release_compromised is None else release_compromised
        self.max_rounds = max_rounds if max_rounds is not None else opts.max_rounds
        self.clock = clock
        self._states: dict[str, _LinkState] = {}
        self._states_lock = threading.Lock()
        self._delay = _DelayQueue(clock)
        self._bus: busmod.BusClient | None = None

    # -- wiring --------------------------------------------------------------

    def attach(self, client: busmod.BusClient):
        self._bus = client
        if self.publisher is None:
            self.publisher = client.publish
        client.subscribe(busmod.ENGINE_KEY, self.on_message)

    def stop(self):
        self._delay.stop()
        with self._states_lock:
            for st in self._states.values():
                st.worker.shutdown(wait=False, cancel_futures=True)

    def state(self, link: LinkDecl) -> _LinkState:
        with self._states_lock:
            st = self._states.get(link.link_id)
            if st is None:
                st = self._states[link.link_id] = _LinkState(link)
            return st

    # -- request path --------------------------------------------------------

    def on_message(self, msg: busmod.BusMessage):
        if msg.kind != "modeling_request":
            self.log.write("error", level="warning", detail_reason=f"unexpected kind {msg.kind}")
            return
        self.submit_payload(msg.payload)

    def submit_payload(self, payload: dict):
        received = self.clock()
        rid = str(payload.get("request_id"))
        try:
            req = ModelingRequest.from_payload(payload, received)
        except RequestError as exc:
            self.log.write("error", level="error", request_id=rid, reason=str(exc))
            initiator = payload.get("initiator")
            if initiator:
                self._publish_error(rid, str(initiator), str(payload.get("peer", "")), exc)
            return
        self.submit(req)

    def submit(self, req: ModelingRequest):
        """Validate ``req`` and queue it on its link's worker."""
        if not req.received_at:
            req.received_at = self.clock()
        self.log.write("received", request_id=req.request_id, initiator=req.initiator,
                       peer=req.peer, bits_needed=req.bits_needed)
        try:
            link = validate_request(req, self.config)
        except RequestError as exc:
            self.log.write("error", level="error", request_id=req.request_id, reason=str(exc),
                           category=exc.category)
            self._publish_error(req.request_id, req.initiator, req.peer, exc)
            return None
        self.log.write("validated", request_id=req.request_id, link=link.link_id)
        st = self.state(link)
        return st.worker.submit(self._work, req, link)

    def _work(self, req: ModelingRequest, link: LinkDecl):
        st = self.state(link)
        try:
            result = self.fulfill(req, link)
        except Exception as exc:  # noqa: BLE001 - a broken protocol must not wedge the link
            log.exception("protocol %s failed", link.protocol)
            self.log.write("error", level="error", request_id=req.request_id, link=link.link_id,
                           reason=f"protocol failure: {exc}")
            self._publish_error(req.request_id, req.initiator, req.peer,
                                RequestError("protocol_failure", str(exc)))
            return None
        completion = schedule(st.schedule, req.received_at, result.simulated_duration_s, self.time_scale)
        self.log.write("scheduled", request_id=req.request_id, link=link.link_id,
                       duration_s=result.simulated_duration_s,
                       wall_delay_s=completion - req.received_at, status=result.status)

        def fire():
            self.publish_result(result, busmod.node_key(req.initiator), busmod.node_key(req.peer))
            fields = dict(
                request_id=req.request_id, link=link.link_id,
                duration_s=result.simulated_duration_s, status=result.status,
                bits=int(result.key_material.size), rounds=result.rounds,
                channel_uses=result.channel_uses, generated_bits=result.generated_bits,
                wall_delay_s=self.clock() - req.received_at,
            )
            if result.status != "error":
                fields["qber"] = result.qber
            self.log.write("published", **fields)

        self._delay.put(completion, fire)
        return result

    def fulfill(self, req: ModelingRequest, link: LinkDecl) -> ModelingResult:
        """Run rounds on ``link`` until ``req.bits_needed`` secure bits are buffered."""
        st = self.state(link)
        protocol = get_protocol(link.protocol)
        params = link.params
        phys = LinkPhysics.from_link(link)
        rounds: list[RoundOutcome] = []
        while st.available < req.bits_needed:
            if len(rounds) >= self.max_rounds:
                duration = sum(o.simulated_duration_s for o in rounds)
                if not self.buffer_keys:
                    st.clear()
                msg = f"only {st.available} of {req.bits_needed} bits after {len(rounds)} rounds"
                self.log.write("error", level="error", request_id=req.request_id, link=link.link_id,
                               reason=msg, category="max_rounds")
                empty = np.zeros(0, dtype=np.uint8)
                return ModelingResult(req.request_id, req.request_id, empty, self._pooled_qber(rounds, st),
                                      duration, "error", empty, req.initiator, req.peer,
                                      rounds=len(rounds),
                                      channel_uses=sum(o.channel_uses for o in rounds),
                                      generated_bits=sum(o.secure_bits.size for o in rounds),
                                      error=msg)
            seed = [self.seed, st.link_hash, st.round_index]
            st.round_index += 1
            outcome = protocol(params, phys, seed, release_divergent=self.release_compromised)
            rounds.append(outcome)
            st.push(outcome)
            st.last_qber = outcome.qber
            level = "warning" if (outcome.aborted or outcome.compromised_divergent) else "info"
            self.log.write("round_completed", level=level, request_id=req.request_id, link=link.link_id,
                           qber=outcome.qber, duration_s=outcome.simulated_duration_s,
                           round_index=st.round_index - 1, secure_bits=int(outcome.secure_bits.size),
                           sifted_bits=int(outcome.alice_sifted.size), channel_uses=outcome.channel_uses,
                           aborted=outcome.aborted, compromised=outcome.compromised_divergent,
                           above_threshold=outcome.qber > params.qber_abort_threshold)
        alice, bob, flags = st.take(req.bits_needed)
        if not self.buffer_keys:
            st.clear()
        status = "compromised" if flags.any() else "ok"
        return ModelingResult(
            request_id=req.request_id,
            key_id=req.request_id,
            key_material=alice,
            qber=self._pooled_qber(rounds, st),
            simulated_duration_s=sum(o.simulated_duration_s for o in rounds),
            status=status,
            peer_key_material=bob,
            initiator=req.initiator,
            peer=req.peer,
            rounds=len(rounds),
            channel_uses=sum(o.channel_uses for o in rounds),
            generated_bits=sum(o.secure_bits.size for o in rounds),
        )

    @staticmethod
    def _pooled_qber(rounds: list[RoundOutcome], st: _LinkState) -> float:
        sampled = sum(o.sample_size for o in rounds)
        if sampled == 0:
            return st.last_qber
        return sum(o.sample_errors for o in rounds) / sampled

    # -- result path ---------------------------------------------------------

    def _payload(self, res: ModelingResult, role: str, bits: np.ndarray) -> dict:
        return {
            "request_id": res.request_id,
            "key_id": res.key_id,
            "status": res.status,
            "role": role,
            "initiator": res.initiator,
            "peer": res.peer,
            "bits": int(bits.size),
            "key_material": pack_bits(bits),
            "qber": res.qber,
            "simulated_duration_s": res.simulated_duration_s,
            "error": res.error,
        }

    def publish_result(self, res: ModelingResult, initiator_key: str, peer_key: str):
        messages = [busmod.BusMessage(initiator_key, "modeling_result",
                                      self._payload(res, "initiator", res.key_material))]
        if res.status != "error":
            messages.append(busmod.BusMessage(peer_key, "modeling_result",
                                              self._payload(res, "peer", res.peer_key_material)))
        for msg in messages:
            self._send(msg, res.request_id)

    def _publish_error(self, request_id: str, initiator: str, peer: str, exc: RequestError):
        payload = {"request_id": request_id, "key_id": request_id, "status": "error",
                   "role": "initiator", "initiator": initiator, "peer": peer,
                   "bits": 0, "key_material": "", "error": str(exc), "category": exc.category}
        self._send(busmod.BusMessage(busmod.node_key(initiator), "modeling_result", payload), request_id)

    def _send(self, msg: busmod.BusMessage, request_id: str, attempts: int = 8):
        if self.publisher is None:
            raise RuntimeError("engine has no publisher attached")
        delay = 0.05
        for attempt in range(1, attempts + 1):
            try:
                self.publisher(msg)
                return
            except busmod.BusError as exc:
                if attempt == 3:
                    self.log.write("error", level="error", request_id=request_id,
                                   reason=f"publish to {msg.routing_key} failing: {exc}")
                time.sleep(delay)
                delay = min(delay * 2, 2.0)
        self.log.write("error", level="error", request_id=request_id,
                       reason=f"gave up publishing to {msg.routing_key}")

    def link_stats(self) -> dict[str, dict]:
        with self._states_lock:
            return {lid: {"generated": st.generated, "delivered": st.delivered,
                          "buffered": st.available, "busy_until": st.schedule.busy_until,
                          "rounds": st.round_index}
                    for lid, st in self._states.items()}


def main(argv: list[str] | None = None) -> int:
    parser = argparse.ArgumentParser(prog="qdnet-engine", description="run the modeling engine")
    parser.add_argument("--config", required=True)
    parser.add_argument("--bus", required=True, help="broker address:port")
    parser.add_argument("--log", help="JSONL event log path")
    parser.add_argument("--time-scale", type=float)
    parser.add_argument("--seed", type=int)
    parser.add_argument("--no-buffer", action="store_true", help="drop leftover bits after each request")
    parser.add_argument("--strict", action="store_true", help="abort compromised rounds instead of delivering")
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO, format="%(asctime)s engine %(message)s")

    config = load_config(args.config)
    event_log = EventLog(args.log)
    engine = ModelingEngine(
        config, event_log=event_log, time_scale=args.time_scale, seed=args.seed,
        buffer_keys=False if args.no_buffer else None,
        release_compromised=False if args.strict else None,
    )
    client = busmod.BusClient.from_endpoint(args.bus).connect(timeout=30.0)
    engine.attach(client)
    event_log.write("engine_ready", seed=engine.seed, time_scale=engine.time_scale,
                    links=[l.link_id for l in config.links])
    print("engine ready", flush=True)

    stop = threading.Event()
    signal.signal(signal.SIGTERM, lambda *_: stop.set())
    signal.signal(signal.SIGINT, lambda *_: stop.set())
    stop.wait()
    engine.stop()
    client.close()
    event_log.close()
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
