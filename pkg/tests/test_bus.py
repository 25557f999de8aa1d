import queue
import socket
import struct
import threading
import time

import pytest
from hypothesis import given, settings, strategies as st

from qdnet.bus import (
    ENGINE_KEY, MAX_PAYLOAD, Broker, BusClient, BusError, BusMessage, BusUnavailable, PayloadTooLarge,
    encode_frame, node_key, read_frame,
)


def request(i=0, key=ENGINE_KEY):
    return BusMessage(key, "modeling_request",
                      {"request_id": f"r{i}", "initiator": "A", "peer": "B", "bits_needed": 8, "seq": i})


def result(key, i=0):
    return BusMessage(key, "modeling_result", {"request_id": f"r{i}", "status": "ok", "seq": i})


@pytest.fixture
def broker():
    b = Broker().start()
    yield b
    b.stop()


@pytest.fixture
def connect(broker):
    clients = []

    def make(**kw):
        c = BusClient(*broker.endpoint, **kw).connect()
        clients.append(c)
        return c

    yield make
    for c in clients:
        c.close()


def test_frame_layout():
    data = encode_frame({"op": "ack"})
    (n,) = struct.unpack(">I", data[:4])
    assert n == len(data) - 4 and data[4:] == b'{"op":"ack"}'


def test_delivered_exactly_once(connect):
    engine, node = connect(), connect()
    sub = engine.subscribe(ENGINE_KEY)
    node.publish(request(1))
    assert sub.get(timeout=2).payload["request_id"] == "r1"
    with pytest.raises(queue.Empty):
        sub.get(timeout=0.3)


def test_result_reaches_node_stream(connect):
    node, engine = connect(), connect()
    sub = node.subscribe(node_key("Quintin"))
    engine.publish(result(node_key("Quintin"), 7))
    assert sub.get(timeout=2).payload["seq"] == 7


def test_retained_until_subscriber(broker, connect):
    pub = connect()
    pub.publish(request(3, "late.key"))
    assert broker.retained_count("late.key") == 1
    sub = connect().subscribe("late.key")
    assert sub.get(timeout=2).payload["seq"] == 3
    assert broker.retained_count("late.key") == 0


def test_retention_expires():
    with Broker(retention_s=0.2) as b:
        with BusClient(*b.endpoint).connect() as pub, BusClient(*b.endpoint).connect() as late:
            pub.publish(request(1, "k"))
            time.sleep(0.4)
            sub = late.subscribe("k")
            with pytest.raises(queue.Empty):
                sub.get(timeout=0.3)


def test_subscribe_unknown_key_is_valid(connect):
    assert connect().subscribe("never.used").key == "never.used"


def test_fifo_over_ten_thousand(connect):
    pub, rx = connect(), connect()
    got = []
    done = threading.Event()

    def on(msg):
        got.append(msg.payload["seq"])
        if len(got) == 10_000:
            done.set()

    rx.subscribe("fifo", on)
    for i in range(10_000):
        pub.publish(result("fifo", i), wait_ack=(i % 500 == 499))
    assert done.wait(30)
    assert got == list(range(10_000))


@given(st.lists(st.sampled_from("abcdefgh"), min_size=1, max_size=5, unique=True),
       st.lists(st.sampled_from("abcdefgh"), min_size=1, max_size=20))
@settings(max_examples=15)
def test_no_cross_key_leakage(sub_keys, pub_keys):
    with Broker() as b:
        with BusClient(*b.endpoint).connect() as rx, BusClient(*b.endpoint).connect() as tx:
            subs = {k: rx.subscribe(k) for k in sub_keys}
            sentinel = rx.subscribe("sentinel")
            for i, k in enumerate(pub_keys):
                tx.publish(result(k, i))
            tx.publish(result("sentinel", -1))
            # one connection, one dispatcher: everything before the sentinel is already queued
            sentinel.get(timeout=2)
            for k, sub in subs.items():
                seen = []
                while True:
                    try:
                        seen.append(sub.get(timeout=0.01))
                    except queue.Empty:
                        break
                assert all(m.routing_key == k for m in seen)
                assert [m.payload["seq"] for m in seen] == [i for i, pk in enumerate(pub_keys) if pk == k]


def test_oversized_payload_rejected(connect):
    c = connect()
    big = BusMessage("k", "modeling_result", {"request_id": "x", "status": "ok", "blob": "a" * MAX_PAYLOAD})
    with pytest.raises(PayloadTooLarge):
        c.publish(big)


def test_broker_rejects_oversized_frame_on_the_wire(broker):
    frame = {"op": "publish", "routing_key": "k", "kind": "modeling_result", "message_id": "m",
             "payload": {"request_id": "x", "status": "ok", "blob": "a" * (2 * MAX_PAYLOAD)}}
    with socket.create_connection(broker.endpoint) as s:
        s.sendall(encode_frame(frame))
        ack = read_frame(s)
    assert ack["ok"] is False


def test_payload_kind_mismatch():
    with pytest.raises(ValueError):
        BusMessage("k", "modeling_request", {"request_id": "r"})
    with pytest.raises(ValueError):
        BusMessage("k", "gossip", {})


def test_unreachable_broker():
    s = socket.socket()
    s.bind(("127.0.0.1", 0))
    port = s.getsockname()[1]
    s.close()
    with pytest.raises(BusUnavailable):
        BusClient("127.0.0.1", port).connect(timeout=0.3)


def test_clients_observe_disconnect():
    b = Broker().start()
    clients = [BusClient(*b.endpoint, reconnect=False).connect() for _ in range(5)]
    b.stop()
    try:
        assert all(c.disconnected.wait(3) for c in clients)
    finally:
        for c in clients:
            c.close()


def test_restart_loses_retained_and_clients_resume():
    b = Broker().start()
    port = b.port
    pub = BusClient(*b.endpoint).connect()
    rx = BusClient(*b.endpoint).connect()
    sub = rx.subscribe("k")
    pub.publish(result("orphan", 0))
    b.stop()
    assert rx.disconnected.wait(3)
    b2 = Broker("127.0.0.1", port).start()
    try:
        assert rx.connected.wait(5) and pub.connected.wait(5)
        assert b2.retained_count() == 0
        pub.publish(result("k", 1))
        assert sub.get(timeout=3).payload["seq"] == 1
    finally:
        pub.close()
        rx.close()
        b2.stop()


def test_five_keys_for_four_nodes_and_engine(broker, connect):
    engine = connect()
    engine.subscribe(ENGINE_KEY)
    for name in ("Quintin", "Quijote", "Quevedo", "Aquiles"):
        connect().subscribe(node_key(name))
    assert broker.active_keys() == {ENGINE_KEY} | {node_key(n) for n in ("Quintin", "Quijote", "Quevedo", "Aquiles")}


def test_callback_may_publish(connect):
    c = connect()
    out = c.subscribe("reply")

    def echo(msg):
        c.publish(result("reply", msg.payload["seq"]))

    c.subscribe("ping", echo)
    connect().publish(result("ping", 5))
    assert out.get(timeout=2).payload["seq"] == 5


def test_fanout_to_all_subscribers(connect):
    subs = [connect().subscribe("fan") for _ in range(3)]
    connect().publish(result("fan", 9))
    assert [s.get(timeout=2).payload["seq"] for s in subs] == [9, 9, 9]


def test_bad_op_nacked(broker):
    with socket.create_connection(broker.endpoint) as s:
        s.sendall(encode_frame({"op": "teleport", "message_id": "m"}))
        assert read_frame(s)["ok"] is False
