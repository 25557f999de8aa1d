import base64
import random
import time

import pytest
from hypothesis import HealthCheck, given, settings, strategies as st

from qdnet.client import DeliveredKey
from qdnet.config import BusEndpoint, LinkDecl, NetworkConfig, NodeDecl
from qdnet.local import EmulatedNetwork
from qdnet.params import ProtocolParams
from qdnet.relay import RelayError, RelayKme, RelayPath, forward_hop, xor_bytes


def test_xor_example():
    assert xor_bytes(b"\xab", b"\x5c") == b"\xf7"
    assert xor_bytes(b"\xf7", b"\x5c") == b"\xab"


@given(st.binary(max_size=64).flatmap(lambda d: st.tuples(st.just(d), st.binary(min_size=len(d), max_size=len(d)))))
def test_xor_involution(pair):
    data, pad = pair
    assert xor_bytes(xor_bytes(data, pad), pad) == data


def test_pad_length_mismatch():
    with pytest.raises(RelayError):
        xor_bytes(b"abc", b"ab")


class StubKme:
    def __init__(self, keys):
        self.keys = keys
        self.calls = []

    def get_key_with_id(self, master, key_id):
        self.calls.append((master, key_id))
        return DeliveredKey(key_id, self.keys[key_id])


same_len = st.integers(1, 64).flatmap(lambda n: st.tuples(*(st.binary(min_size=n, max_size=n),) * 3))


@given(same_len)
def test_forward_hop_is_double_pad(triple):
    ct, up, down = triple
    kme = StubKme({"u": up, "d": down})
    assert forward_hop(kme, "A", "u", "C", "d", ct) == xor_bytes(xor_bytes(ct, up), down)
    assert kme.calls == [("A", "u"), ("C", "d")]


@given(same_len)
def test_forward_hop_cancellation(triple):
    ct, key, _ = triple
    assert forward_hop(StubKme({"u": key, "d": key}), "A", "u", "C", "d", ct) == ct
    zero = bytes(len(ct))
    assert forward_hop(StubKme({"u": zero, "d": key}), "A", "u", "C", "d", ct) == xor_bytes(ct, key)


def test_path_validation(star):
    RelayPath(("Quintin", "Quijote", "Quevedo")).validate(star)
    for bad in [("Quintin", "Quevedo"), ("Quintin", "Quevedo", "Quijote"), ("Quintin", "Quijote", "Quintin"),
                ("Quintin", "Quijote", "Ghost")]:
        with pytest.raises(RelayError):
            RelayPath(bad).validate(star)
    assert RelayPath.parse("Quintin, Quijote,Quevedo").nodes == ("Quintin", "Quijote", "Quevedo")


def test_relay_on_star(star):
    frames = []
    with EmulatedNetwork(star, seed=1, broker_tap=lambda d, b: frames.append(b)) as net:
        with RelayKme(star, net.urls, tap=lambda d, b: frames.append(b)) as kme:
            path = RelayPath(("Quintin", "Quijote", "Quevedo"))
            res = kme.relay_key(path, 256)
            assert len(res.key) == 32
            assert kme.received_key("Quevedo", res.key_id) == res.key
            assert len(res.hop_key_ids) == 2 and set(res.hop_key_ids) <= kme.used_hop_keys
            assert not any(res.key in f or base64.b64encode(res.key) in f for f in frames)
            # one-time-pad discipline: hop keys are never reused
            res2 = kme.relay_key(path, 256)
            assert not set(res2.hop_key_ids) & set(res.hop_key_ids)


def test_relay_rejects_bad_size(star):
    with EmulatedNetwork(star, seed=1) as net, RelayKme(star, net.urls) as kme:
        with pytest.raises(RelayError):
            kme.relay_key(RelayPath(("Quintin", "Quijote", "Quevedo")), 100)


def test_expired_hop_key_surfaces(star):
    with EmulatedNetwork(star, ttl_s=0.3, seed=1) as net, RelayKme(star, net.urls) as kme:
        up = kme.clients["Quintin"].get_key("Quijote", 64)
        down = kme.clients["Quijote"].get_key("Quevedo", 64)
        time.sleep(0.5)
        with pytest.raises(RelayError, match="unavailable"):
            forward_hop(kme.clients["Quijote"], "Quintin", up.key_id, "Quevedo", down.key_id,
                        bytes(8), wait_s=0.1)


def test_trusted_node_failure_reported(star):
    with EmulatedNetwork(star, seed=1) as net, RelayKme(star, net.urls, wait_s=0.1) as kme:
        path = RelayPath(("Quintin", "Quijote", "Quevedo"))
        kme.agents["Quijote"].client = kme.clients["Quevedo"]  # wrong node: cannot see Quintin's hop key
        with pytest.raises(RelayError, match="Quijote"):
            kme.relay_key(path, 64)


# -- random topologies -----------------------------------------------------------

FAST = ProtocolParams(pulses_per_round=2000, classical_overhead_s=0.01)


@st.composite
def topology_and_path(draw):
    n = draw(st.integers(3, 7))
    names = [f"n{i}" for i in range(n)]
    rng = random.Random(draw(st.integers(0, 2**32)))
    edges = set()
    for i in range(1, n):  # random tree keeps every node reachable
        edges.add((names[rng.randrange(i)], names[i]))
    for _ in range(draw(st.integers(0, n))):
        a, b = rng.sample(names, 2)
        if (b, a) not in edges:
            edges.add((a, b))
    nodes = tuple(NodeDecl(x, f"sae-{x}", 1 + i, x) for i, x in enumerate(names))
    links = tuple(LinkDecl(a, b, 5.0, 1.0, phys=FAST) for a, b in sorted(edges))
    cfg = NetworkConfig(nodes, links, "engine", BusEndpoint(), time_scale=100.0)
    adj = {x: cfg.neighbors(x) for x in names}
    # random simple path of length >= 3 by random walk without revisits
    for _ in range(50):
        path = [rng.choice(names)]
        while True:
            nxt = [y for y in adj[path[-1]] if y not in path]
            if not nxt or (len(path) >= 3 and rng.random() < 0.4):
                break
            path.append(rng.choice(nxt))
        if len(path) >= 3:
            return cfg, tuple(path)
    return cfg, None


@given(topology_and_path(), st.sampled_from([64, 128, 256]))
@settings(max_examples=8, deadline=None, suppress_health_check=[HealthCheck.too_slow])
def test_relay_random_topologies(case, size):
    cfg, path = case
    if path is None:
        return
    with EmulatedNetwork(cfg, seed=0) as net, RelayKme(cfg, net.urls) as kme:
        res = kme.relay_key(RelayPath(path), size)
        assert kme.received_key(path[-1], res.key_id) == res.key
        assert len(res.key) == size // 8
