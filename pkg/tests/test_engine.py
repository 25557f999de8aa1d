import json
import threading
import time
from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from qdnet.bus import ENGINE_KEY, BusMessage, node_key
from qdnet.config import EngineOptions, parse_config
from qdnet.engine import (
    EventLog, LinkSchedule, ModelingEngine, ModelingRequest, RequestError, pack_bits, schedule,
    unpack_bits, validate_request,
)
from qdnet.params import ProtocolParams
from qdnet.quantum import RoundOutcome, register_protocol, unregister_protocol

from conftest import STAR_YAML


class Recorder:
    """Stands in for the bus: remembers every published message with its wall time."""

    def __init__(self):
        self.messages = []
        self.cv = threading.Condition()

    def __call__(self, msg):
        with self.cv:
            self.messages.append((time.monotonic(), msg))
            self.cv.notify_all()

    def wait_for(self, request_id, role="initiator", timeout=10.0):
        deadline = time.monotonic() + timeout
        with self.cv:
            while True:
                for t, m in self.messages:
                    if m.payload["request_id"] == request_id and m.payload.get("role") == role:
                        return t, m
                left = deadline - time.monotonic()
                if left <= 0:
                    raise TimeoutError(request_id)
                self.cv.wait(left)


@pytest.fixture
def make_engine(star):
    engines = []

    def make(config=None, **kw):
        rec = Recorder()
        kw.setdefault("seed", 1)
        eng = ModelingEngine(config or star, publisher=rec, **kw)
        engines.append(eng)
        return eng, rec

    yield make
    for e in engines:
        e.stop()


def req(rid, a="Quintin", b="Quijote", bits=64):
    return ModelingRequest(rid, a, b, bits)


# -- schedule --------------------------------------------------------------------

def test_schedule_examples():
    link = LinkSchedule("A--B")
    assert schedule(link, 0.0, 5.0) == 5.0 and link.busy_until == 5.0
    assert schedule(link, 0.0, 2.0) == 7.0
    other = LinkSchedule("C--D")
    assert schedule(LinkSchedule("X"), 0.0, 5.0) == 5.0
    assert schedule(other, 0.0, 2.0) == 2.0


def test_schedule_time_scale_and_negative():
    link = LinkSchedule("A--B")
    assert schedule(link, 10.0, 50.0, time_scale=50.0) == 11.0
    with pytest.raises(ValueError):
        schedule(link, 0.0, -1.0)


@given(st.lists(st.tuples(st.floats(0, 100), st.floats(0, 10)), max_size=30))
def test_busy_until_never_decreases(calls):
    link = LinkSchedule("L")
    prev_busy, prev_done = 0.0, 0.0
    for now, dur in sorted(calls):
        done = schedule(link, now, dur)
        assert link.busy_until >= prev_busy
        assert done >= prev_done and done >= now + dur - 1e-9
        prev_busy, prev_done = link.busy_until, done


# -- validation ------------------------------------------------------------------

def test_validate_request(star):
    assert validate_request(req("r"), star).link_id == "Quintin--Quijote"
    with pytest.raises(RequestError) as info:
        validate_request(req("r", "Quintin", "Quevedo"), star)
    assert info.value.category == "not_adjacent"
    with pytest.raises(RequestError) as info:
        validate_request(req("r", "Quintin", "Ghost"), star)
    assert info.value.category == "unknown_node"


def test_request_invariants():
    with pytest.raises(RequestError):
        ModelingRequest("r", "Quintin", "Quintin", 8)
    with pytest.raises(RequestError):
        ModelingRequest("r", "A", "B", 0)


def test_error_result_goes_to_initiator(make_engine):
    eng, rec = make_engine()
    eng.submit(req("bad", "Quintin", "Quevedo"))
    _, msg = rec.wait_for("bad")
    assert msg.routing_key == node_key("Quintin")
    assert msg.payload["status"] == "error" and msg.payload["category"] == "not_adjacent"


# -- fulfill ---------------------------------------------------------------------

def test_buffer_accounting(make_engine, star):
    eng, _ = make_engine()
    link = star.link_between("Quintin", "Quijote")
    st_ = eng.state(link)
    first = eng.fulfill(req("a"), link)
    assert first.rounds == 1 and first.key_material.size == 64
    yield_ = first.generated_bits
    assert st_.available == yield_ - 64
    second = eng.fulfill(req("b", bits=512), link)
    assert second.rounds == (0 if yield_ - 64 >= 512 else second.rounds)
    assert second.key_material.size == 512
    assert st_.available == yield_ + second.generated_bits - 576


def test_round_yield_oracle():
    # Ideal channel, default params: ~half the pulses sift, a quarter of those is disclosed.
    from qdnet.quantum import run_bb84_with_eve

    p = ProtocolParams()
    sizes = [run_bb84_with_eve(p, None, s).secure_bits.size for s in range(10)]
    assert abs(np.mean(sizes) - 10_000 * 0.5 * 0.75) < 50


def test_no_buffer_mode_discards_leftovers(make_engine, star):
    eng, _ = make_engine(buffer_keys=False)
    link = star.link_between("Quintin", "Quijote")
    eng.fulfill(req("a"), link)
    assert eng.state(link).available == 0


@given(st.lists(st.integers(1, 3000), min_size=1, max_size=8))
@settings(max_examples=20)
def test_buffer_soundness(sizes):
    cfg = parse_config(STAR_YAML)
    eng = ModelingEngine(cfg, publisher=lambda m: None, seed=3)
    link = cfg.link_between("Quintin", "Quijote")
    try:
        for i, n in enumerate(sizes):
            res = eng.fulfill(req(f"r{i}", bits=n), link)
            assert res.key_material.size == n and res.status == "ok"
            assert np.array_equal(res.key_material, res.peer_key_material)
        st_ = eng.state(link)
        assert st_.delivered == sum(sizes) <= st_.generated
    finally:
        eng.stop()


def test_eavesdropped_link_is_compromised(make_engine, star):
    eng, _ = make_engine()
    res = eng.fulfill(req("e", "Quijote", "Aquiles", 256), star.link_between("Quijote", "Aquiles"))
    # textbook attacker at 30% stays under the threshold
    assert res.status == "ok"
    strong = replace(star, links=tuple(
        replace(l, eve=replace(l.eve, error_per_intercept=0.5)) if l.eve else l for l in star.links))
    eng2, _ = make_engine(strong)
    res = eng2.fulfill(req("e", "Quijote", "Aquiles", 256), strong.link_between("Quijote", "Aquiles"))
    assert res.status == "compromised" and res.qber > 0.11
    assert res.key_material.size == res.peer_key_material.size == 256
    assert not np.array_equal(res.key_material, res.peer_key_material)


def test_strict_mode_hits_max_rounds(make_engine, star):
    full = replace(star, links=tuple(
        replace(l, eve=replace(l.eve, intercept_fraction=1.0)) if l.eve else l for l in star.links))
    eng, rec = make_engine(full, release_compromised=False, max_rounds=3)
    eng.submit(req("s", "Quijote", "Aquiles", 64))
    _, msg = rec.wait_for("s", timeout=20)
    assert msg.payload["status"] == "error" and "3 rounds" in msg.payload["error"]
    assert [m.payload["role"] for _, m in rec.messages] == ["initiator"]


# -- publication and timing ------------------------------------------------------

def test_both_endpoints_receive_same_key(make_engine):
    eng, rec = make_engine()
    eng.submit(req("k", bits=128))
    _, mi = rec.wait_for("k", "initiator")
    _, mp = rec.wait_for("k", "peer")
    assert mi.routing_key == node_key("Quintin") and mp.routing_key == node_key("Quijote")
    assert mi.payload["key_id"] == mp.payload["key_id"] == "k"
    assert mi.payload["key_material"] == mp.payload["key_material"]
    assert unpack_bits(mi.payload["key_material"], 128).size == 128


def test_latency_fidelity(make_engine, star):
    phys = ProtocolParams(pulses_per_round=2000, classical_overhead_s=1.0)
    cfg = replace(star, links=tuple(replace(l, phys=phys) for l in star.links))
    eng, rec = make_engine(cfg, time_scale=10.0)
    for i, bits in enumerate((64, 2000, 5000)):
        r = req(f"t{i}", bits=bits)
        eng.submit(r)
        t_pub, msg = rec.wait_for(r.request_id)
        delay = t_pub - r.received_at
        floor = msg.payload["simulated_duration_s"] / 10.0
        assert floor <= delay <= floor + 0.1


def test_same_link_serialization(make_engine, star):
    phys = ProtocolParams(pulses_per_round=2000, classical_overhead_s=1.0)
    cfg = replace(star, links=tuple(replace(l, phys=phys) for l in star.links))
    eng, rec = make_engine(cfg, time_scale=20.0, buffer_keys=False)
    first = req("long", bits=3000)
    eng.submit(first)
    eng.submit(req("short", bits=64))
    t_long, ml = rec.wait_for("long")
    t_short, ms = rec.wait_for("short")
    assert t_long < t_short
    total = (ml.payload["simulated_duration_s"] + ms.payload["simulated_duration_s"]) / 20.0
    assert t_short - first.received_at >= total - 0.1


def slow_protocol(params, phys, seed, *, release_divergent=False):
    bits = np.ones(1000, dtype=np.uint8)
    return RoundOutcome(bits, bits.copy(), bits, bits.copy(), 0.0, 10, 0, 1, 1, 100.0)


def test_cross_link_independence():
    register_protocol("slow_fake", slow_protocol)
    try:
        cfg = parse_config(STAR_YAML.replace(
            "{endpoint_a: Quintin, endpoint_b: Quijote, length_km: 20.0, attenuation_db: 8.0}",
            "{endpoint_a: Quintin, endpoint_b: Quijote, length_km: 20.0, attenuation_db: 8.0, protocol: slow_fake}"))
        rec = Recorder()
        eng = ModelingEngine(cfg, publisher=rec, time_scale=50.0, seed=0)
        try:
            slow = req("slow", bits=64)
            fast = req("fast", "Quijote", "Quevedo", 64)
            eng.submit(slow)
            eng.submit(fast)
            t_fast, m = rec.wait_for("fast")
            assert t_fast - fast.received_at < m.payload["simulated_duration_s"] / 50.0 + 0.1
            t_slow, _ = rec.wait_for("slow")
            assert t_slow - slow.received_at >= 2.0
        finally:
            eng.stop()
    finally:
        unregister_protocol("slow_fake")


def test_broken_protocol_yields_error_result():
    def boom(*a, **k):
        raise RuntimeError("detector on fire")

    register_protocol("boom", boom)
    try:
        cfg = parse_config(STAR_YAML.replace("attenuation_db: 5.4}", "attenuation_db: 5.4, protocol: boom}"))
        rec = Recorder()
        eng = ModelingEngine(cfg, publisher=rec, seed=0)
        eng.submit(req("b", "Quijote", "Quevedo"))
        _, m = rec.wait_for("b")
        assert m.payload["status"] == "error" and "detector on fire" in m.payload["error"]
        eng.submit(req("ok", "Quijote", "Quintin"))
        assert rec.wait_for("ok")[1].payload["status"] == "ok"
        eng.stop()
    finally:
        unregister_protocol("boom")


def test_determinism_across_engines(star):
    keys = []
    for _ in range(2):
        rec = Recorder()
        eng = ModelingEngine(star, publisher=rec, seed=99)
        eng.submit(req("x", bits=300))
        keys.append(rec.wait_for("x")[1].payload["key_material"])
        eng.stop()
    assert keys[0] == keys[1]


def test_bits_round_trip():
    bits = np.random.default_rng(0).integers(0, 2, 77, dtype=np.uint8)
    assert np.array_equal(unpack_bits(pack_bits(bits), 77), bits)


# -- bus wiring and log ----------------------------------------------------------

def test_payload_path_and_log(tmp_path, star):
    path = tmp_path / "engine.jsonl"
    log = EventLog(str(path))
    rec = Recorder()
    eng = ModelingEngine(star, publisher=rec, event_log=log, seed=5)
    eng.on_message(BusMessage(ENGINE_KEY, "modeling_request",
                              {"request_id": "p", "initiator": "Quintin", "peer": "Quijote", "bits_needed": 512}))
    rec.wait_for("p", "peer")
    time.sleep(0.05)
    eng.submit_payload({"request_id": "m", "initiator": "Quintin", "peer": "Quijote", "bits_needed": "many"})
    eng.stop()
    log.close()
    records = [json.loads(l) for l in path.read_text().splitlines()]
    events = [r["event"] for r in records if r["request_id"] == "p"]
    n_rounds = events.count("round_completed")
    assert events == ["received", "validated"] + ["round_completed"] * n_rounds + ["scheduled", "published"]
    assert n_rounds >= 1
    for r in records:
        assert {"ts", "level", "event", "request_id", "link", "detail"} <= set(r)
    published = next(r for r in records if r["event"] == "published")
    assert "qber" in published and "duration_s" in published
    bad = [r for r in records if r["request_id"] == "m"]
    assert len(bad) == 1 and bad[0]["event"] == "error" and "bits_needed" in bad[0]["detail"]["reason"]
    # key material never reaches the log
    key = rec.wait_for("p")[1].payload["key_material"]
    assert key not in path.read_text()


def test_log_falls_back_to_stderr(tmp_path, capsys):
    log = EventLog(str(tmp_path / "missing" / "dir" / "x.jsonl"))
    log.write("received", request_id="r")
    err = capsys.readouterr().err
    assert "unwritable" in err and '"event": "received"' in err


def test_compromised_exchange_logs_qber(tmp_path, star):
    strong = replace(star, links=tuple(
        replace(l, eve=replace(l.eve, error_per_intercept=0.5)) if l.eve else l for l in star.links))
    log = EventLog()
    rec = Recorder()
    eng = ModelingEngine(strong, publisher=rec, event_log=log, seed=5)
    eng.submit(req("c", "Quijote", "Aquiles", 256))
    rec.wait_for("c", "peer")
    time.sleep(0.05)
    eng.stop()
    pub = next(r for r in log.records if r["event"] == "published")
    assert pub["qber"] > 0.11 and pub["detail"]["status"] == "compromised"
    assert any(r["level"] == "warning" for r in log.records if r["event"] == "round_completed")
