"""Reproduction runs over locally deployed networks.

* ``scenario_b``: the four event-diagram processes (same-link serialization,
  cross-link parallelism, eavesdropped link, trusted-node relay).
* ``sweep_c``: key-exchange time and bits per channel use against key size on
  the lossy star links.
* ``scaling_a``: orchestrator stage timings against node count.

Every run deploys real processes through :class:`qdnet.orchestrator.Orchestrator`
and tears them down afterwards.
"""
from __future__ import annotations

import argparse
import csv
import json
import math
import random
import socket
import statistics
import tempfile
import threading
import time
from dataclasses import dataclass, field, replace
from importlib import resources
from pathlib import Path

from scipy import stats

from qdnet.client import KmeClient
from qdnet.config import (
    BusEndpoint, LinkDecl, NetworkConfig, NodeDecl, dump_inventory, load_config, local_inventory,
)
from qdnet.orchestrator import STAGES, Deployment, Orchestrator
from qdnet.relay import RelayKme, RelayPath

PROCESS_1, PROCESS_2, PROCESS_3, PROCESS_4 = 1, 2, 3, 4


class ScenarioFailure(AssertionError):
    pass


def bundled_config(name: str) -> Path:
    return Path(str(resources.files("qdnet") / "configs" / name))


def free_ports(n: int) -> list[int]:
    socks = []
    try:
        for _ in range(n):
            s = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
            s.bind(("127.0.0.1", 0))
            socks.append(s)
        return [s.getsockname()[1] for s in socks]
    finally:
        for s in socks:
            s.close()


def localize(config: NetworkConfig) -> NetworkConfig:
    """Same network on fresh free localhost ports."""
    ports = free_ports(len(config.nodes) + 1)
    nodes = tuple(replace(n, api_port=p) for n, p in zip(config.nodes, ports))
    bus = BusEndpoint("127.0.0.1", ports[-1], config.bus_endpoint.host)
    return replace(config, nodes=nodes, bus_endpoint=bus)


def with_seed(config: NetworkConfig, seed: int | None) -> NetworkConfig:
    if seed is None:
        return config
    return replace(config, engine_options=replace(config.engine_options, seed=seed))


class LocalDeployment:
    """Context manager: deploy ``config`` on local hosts, tear down on exit."""

    def __init__(self, config: NetworkConfig, *, state_root=None, time_scale: float | None = None,
                 **orch_kwargs):
        self._tmp = None
        if state_root is None:
            self._tmp = tempfile.TemporaryDirectory(prefix="qdnet-")
            state_root = self._tmp.name
        self.config = config
        self.inventory = local_inventory(config)
        self.orchestrator = Orchestrator(state_root=state_root, **orch_kwargs)
        self.time_scale = time_scale
        self.deployment: Deployment | None = None

    def __enter__(self) -> Deployment:
        self.deployment = self.orchestrator.deploy(self.config, self.inventory, time_scale=self.time_scale)
        return self.deployment

    def __exit__(self, *exc):
        self.orchestrator.teardown(self.inventory)
        if self._tmp is not None:
            self._tmp.cleanup()


def read_log(path) -> list[dict]:
    try:
        with open(path, encoding="utf-8") as fh:
            return [json.loads(line) for line in fh if line.strip()]
    except FileNotFoundError:
        return []


def wait_for_record(path, request_id: str, event: str = "published", timeout: float = 5.0) -> dict:
    deadline = time.monotonic() + timeout
    while True:
        for rec in read_log(path):
            if rec.get("request_id") == request_id and rec.get("event") == event:
                return rec
        if time.monotonic() > deadline:
            raise TimeoutError(f"no {event} record for {request_id}")
        time.sleep(0.02)


def mean_ci95(values: list[float]) -> tuple[float, float]:
    """Mean and half-width of the 95% Student-t interval."""
    n = len(values)
    if n == 0:
        return math.nan, math.nan
    m = statistics.fmean(values)
    if n < 2:
        return m, math.nan
    half = stats.t.ppf(0.975, n - 1) * statistics.stdev(values) / math.sqrt(n)
    return m, float(half)


# -- scenario B ------------------------------------------------------------------


@dataclass
class ScenarioResult:
    events: list[dict] = field(default_factory=list)
    keys: dict[str, str] = field(default_factory=dict)
    qber: float | None = None
    log: list[dict] = field(default_factory=list)

    def ordering(self) -> list[tuple]:
        return [(e["process"], e["event"], e["node"], e["peer"], e["bits"]) for e in self.events]


class _Recorder:
    def __init__(self):
        self.t0 = time.monotonic()
        self.events: list[dict] = []
        self.lock = threading.Lock()

    def add(self, process: int, event: str, node: str, peer: str, bits: int, **extra) -> dict:
        ev = {"process": process, "event": event, "node": node, "peer": peer, "bits": bits,
              "t": time.monotonic() - self.t0, **extra}
        with self.lock:
            self.events.append(ev)
        return ev


def _get_key(rec: _Recorder, process: int, client: KmeClient, node: str, peer: str, peer_sae: str,
             bits: int, out: dict):
    rec.add(process, "request_sent", node, peer, bits)
    key = client.get_key(peer_sae, bits)
    out["key"] = key
    out["event"] = rec.add(process, "key_received", node, peer, bits, key_id=key.key_id)


def run_processes(config: NetworkConfig, urls: dict[str, str], engine_log: str, *,
                  seed: int = 0, relay_size: int = 256) -> ScenarioResult:
    """Run processes 1-4 against a deployed four-node star and check their orderings."""
    rec = _Recorder()
    res = ScenarioResult()
    sae = {n.name: n.sae_id for n in config.nodes}
    clients = {name: KmeClient(url) for name, url in urls.items()}

    # 1: two consecutive requests on Quintin-Quijote, long key first.
    long_, short = {}, {}
    t_long = threading.Thread(target=_get_key, args=(rec, PROCESS_1, clients["Quintin"], "Quintin",
                                                     "Quijote", sae["Quijote"], 512, long_))
    t_short = threading.Thread(target=_get_key, args=(rec, PROCESS_1, KmeClient(urls["Quintin"]), "Quintin",
                                                      "Quijote", sae["Quijote"], 64, short))
    t_long.start()
    time.sleep(0.05)
    t_short.start()
    t_long.join()
    t_short.join()
    if not long_["event"]["t"] < short["event"]["t"]:
        raise ScenarioFailure("process 1: the 512-bit key must be received before the 64-bit key")
    res.keys["p1_512"] = long_["key"].key.hex()
    res.keys["p1_64"] = short["key"].key.hex()

    # 2: concurrent requests from Quijote on two different links.
    a, b = {}, {}
    t_a = threading.Thread(target=_get_key, args=(rec, PROCESS_2, clients["Quijote"], "Quijote", "Quintin",
                                                  sae["Quintin"], 512, a))
    t_b = threading.Thread(target=_get_key, args=(rec, PROCESS_2, KmeClient(urls["Quijote"]), "Quijote",
                                                  "Quevedo", sae["Quevedo"], 64, b))
    t_a.start()
    time.sleep(0.05)
    t_b.start()
    t_a.join()
    t_b.join()
    if not b["event"]["t"] < a["event"]["t"]:
        raise ScenarioFailure("process 2: the 64-bit Quijote-Quevedo key must arrive before the 512-bit key")
    res.keys["p2_512"] = a["key"].key.hex()
    res.keys["p2_64"] = b["key"].key.hex()

    # 3: the eavesdropped link.
    c: dict = {}
    _get_key(rec, PROCESS_3, clients["Quijote"], "Quijote", "Aquiles", sae["Aquiles"], 256, c)
    peer_copy = clients["Aquiles"].get_key_with_id(sae["Quijote"], c["key"].key_id).key
    rec.add(PROCESS_3, "peer_retrieved", "Aquiles", "Quijote", 256, key_id=c["key"].key_id)
    published = wait_for_record(engine_log, c["key"].key_id)
    res.qber = published.get("qber")
    if peer_copy == c["key"].key:
        raise ScenarioFailure("process 3: nodes on the eavesdropped link received identical keys")
    if res.qber is None or res.qber <= 0.11:
        raise ScenarioFailure(f"process 3: logged QBER {res.qber} does not exceed 0.11")
    res.keys["p3_initiator"] = c["key"].key.hex()
    res.keys["p3_peer"] = peer_copy.hex()

    # 4: Quintin -> Quijote -> Quevedo relay.
    rng = random.Random(seed)
    with RelayKme(config, urls, rng=rng.randbytes) as kme:
        path = RelayPath(("Quintin", "Quijote", "Quevedo"))
        rec.add(PROCESS_4, "relay_started", "Quintin", "Quevedo", relay_size)
        relay = kme.relay_key(path, relay_size)
        target = kme.received_key("Quevedo", relay.key_id)
        rec.add(PROCESS_4, "relay_delivered", "Quevedo", "Quintin", relay_size, key_id=relay.key_id)
    if target != relay.key:
        raise ScenarioFailure("process 4: Quevedo did not recover Quintin's end-to-end key")
    res.keys["p4_e2e"] = relay.key.hex()

    res.events = sorted(rec.events, key=lambda e: e["t"])
    res.log = read_log(engine_log)
    return res


def scenario_b(config: NetworkConfig | None = None, *, seed: int = 2025, time_scale: float = 50.0,
               out_dir=None, state_root=None) -> ScenarioResult:
    config = config or load_config(bundled_config("star_adversarial.yaml"))
    config = with_seed(localize(config), seed)
    with LocalDeployment(config, state_root=state_root, time_scale=time_scale) as dep:
        res = run_processes(dep.config, dep.urls, dep.engine_log, seed=seed)
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        with open(out / "scenario_b_events.jsonl", "w") as fh:
            for ev in res.events:
                fh.write(json.dumps(ev) + "\n")
        with open(out / "scenario_b_engine_log.jsonl", "w") as fh:
            for r in res.log:
                fh.write(json.dumps(r) + "\n")
        (out / "scenario_b_keys.json").write_text(json.dumps({"qber": res.qber, "keys": res.keys}, indent=1))
    return res


# -- sweep C ---------------------------------------------------------------------


@dataclass
class SweepRow:
    link: str
    size: int
    times: list[float]
    kbrs: list[float]
    wall: list[float]
    failures: int = 0

    def summary(self) -> dict:
        t_mean, t_ci = mean_ci95(self.times)
        k_mean, k_ci = mean_ci95(self.kbrs)
        return {"link": self.link, "size": self.size, "n": len(self.times), "failures": self.failures,
                "mean_time_s": t_mean, "ci95_time_s": t_ci, "mean_kbr": k_mean, "ci95_kbr": k_ci,
                "mean_wall_s": statistics.fmean(self.wall) if self.wall else math.nan}


def sweep_links(config: NetworkConfig, urls: dict[str, str], engine_log: str, sizes: list[int],
                reps: int = 10) -> list[SweepRow]:
    rows = []
    for link in config.links:
        client = KmeClient(urls[link.endpoint_a])
        peer_sae = config.node(link.endpoint_b).sae_id
        for size in sizes:
            row = SweepRow(link.link_id, size, [], [], [])
            for _ in range(reps):
                t0 = time.monotonic()
                try:
                    key = client.get_key(peer_sae, size)
                    rec = wait_for_record(engine_log, key.key_id)
                except Exception:  # noqa: BLE001 - a failed exchange is a missing datum
                    row.failures += 1
                    continue
                row.wall.append(time.monotonic() - t0)
                row.times.append(rec["duration_s"])
                d = rec["detail"]
                row.kbrs.append(d["generated_bits"] / d["channel_uses"] if d["channel_uses"] else 0.0)
            rows.append(row)
    return rows


def sweep_c(config: NetworkConfig | None = None, *, sizes=(64, 128, 256, 512), reps: int = 10,
            seed: int = 7, time_scale: float = 50.0, out_dir=None, state_root=None) -> list[SweepRow]:
    config = config or load_config(bundled_config("star_realistic.yaml"))
    config = with_seed(localize(config), seed)
    with LocalDeployment(config, state_root=state_root, time_scale=time_scale) as dep:
        rows = sweep_links(dep.config, dep.urls, dep.engine_log, list(sizes), reps)
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        with open(out / "sweep_c.csv", "w", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=list(rows[0].summary()))
            writer.writeheader()
            for row in rows:
                writer.writerow(row.summary())
    return rows


def check_sweep(rows: list[SweepRow]) -> dict[str, list[str]]:
    """Qualitative sweep properties; each value lists violations (empty means pass).

    ``monotone``: per-link mean time strictly increasing in size.
    ``link_order``: Aquiles > Quintin-Quijote > Quevedo mean time at every size.
    ``kbr_flat``: per link, every pair of size means within 3 pooled standard errors.
    """
    by_link: dict[str, dict[int, SweepRow]] = {}
    for row in rows:
        by_link.setdefault(row.link, {})[row.size] = row
    out: dict[str, list[str]] = {"monotone": [], "link_order": [], "kbr_flat": []}
    for link, sized in by_link.items():
        sizes = sorted(sized)
        means = [statistics.fmean(sized[s].times) for s in sizes]
        for (s0, m0), (s1, m1) in zip(zip(sizes, means), zip(sizes[1:], means[1:])):
            if not m1 > m0:
                out["monotone"].append(f"{link}: {s1} bits {m1:.4f}s <= {s0} bits {m0:.4f}s")
        for i, a in enumerate(sizes):
            for b in sizes[i + 1:]:
                ka, kb = sized[a].kbrs, sized[b].kbrs
                se = math.sqrt(statistics.variance(ka) / len(ka) + statistics.variance(kb) / len(kb))
                diff = abs(statistics.fmean(ka) - statistics.fmean(kb))
                if diff > 3 * se:
                    out["kbr_flat"].append(f"{link}: KBR {a} vs {b} differ by {diff:.5f} > 3*{se:.5f}")
    order = ["Quijote--Aquiles", "Quintin--Quijote", "Quijote--Quevedo"]
    if all(l in by_link for l in order):
        for size in sorted(by_link[order[0]]):
            t = [statistics.fmean(by_link[l][size].times) for l in order]
            if not t[0] > t[1] > t[2]:
                out["link_order"].append(f"{size} bits: " + ", ".join(f"{l}={v:.4f}" for l, v in zip(order, t)))
    else:
        out["link_order"].append("sweep does not cover the three star links")
    return out


# -- scaling A -------------------------------------------------------------------


def star_config(n: int, *, time_scale: float = 1.0) -> NetworkConfig:
    """``n`` nodes, each on its own host, all linked to the first."""
    names = [f"n{i}" for i in range(n)]
    ports = free_ports(n + 1)
    nodes = tuple(NodeDecl(name, name, port, f"host-{name}") for name, port in zip(names, ports))
    links = tuple(LinkDecl(names[0], name, 10.0, 2.0) for name in names[1:])
    return NetworkConfig(nodes, links, "host-engine", BusEndpoint("127.0.0.1", ports[-1]), time_scale)


@dataclass
class ScalingRun:
    node_count: int
    stages: dict[str, float]
    invocations: dict[str, int]
    total_s: float


def scaling_a(counts=(2, 4, 10), *, reps: int = 10, forks: int = 1, out_dir=None,
              state_root=None) -> list[ScalingRun]:
    runs = []
    for n in counts:
        for _ in range(reps):
            config = star_config(n)
            with LocalDeployment(config, state_root=state_root, forks=forks) as dep:
                rep = dep.report
            runs.append(ScalingRun(n, dict(rep.stages), dict(rep.invocations), rep.total_s))
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        with open(out / "scaling_a_runs.jsonl", "w") as fh:
            for r in runs:
                fh.write(json.dumps(r.__dict__) + "\n")
        with open(out / "scaling_a.csv", "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["node_count", "stage", "mean_s", "ci95_s", "invocations"])
            for n in counts:
                sel = [r for r in runs if r.node_count == n]
                for stage in STAGES:
                    m, ci = mean_ci95([r.stages[stage] for r in sel])
                    writer.writerow([n, stage, m, ci, sel[0].invocations[stage]])
    return runs


def check_scaling(runs: list[ScalingRun]) -> list[str]:
    """Exact invocation counts and nondecreasing node-stage means; returns violations."""
    problems = []
    counts = sorted({r.node_count for r in runs})
    for r in runs:
        for stage, n in r.invocations.items():
            want = r.node_count if stage.startswith("node_") else 1
            if n != want:
                problems.append(f"N={r.node_count}: {stage} ran {n} times, expected {want}")
    for stage in (s for s in STAGES if s.startswith("node_")):
        means = [statistics.fmean(r.stages[stage] for r in runs if r.node_count == n) for n in counts]
        for (n0, m0), (n1, m1) in zip(zip(counts, means), zip(counts[1:], means[1:])):
            if m1 < m0:
                problems.append(f"{stage}: mean {m1:.4f}s at N={n1} below {m0:.4f}s at N={n0}")
    return problems


# -- CLI -------------------------------------------------------------------------


def main(argv: list[str] | None = None) -> int:
    parser = argparse.ArgumentParser(prog="qdnet-harness", description="reproduction runs")
    parser.add_argument("--out", default="results", help="output directory")
    parser.add_argument("--state-dir", help="orchestrator state directory (default: temporary)")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("scenario-b", help="event-diagram processes 1-4")
    p.add_argument("--config", help="network config (default: bundled star_adversarial.yaml)")
    p.add_argument("--seed", type=int, default=2025)
    p.add_argument("--time-scale", type=float, default=50.0)

    p = sub.add_parser("sweep-c", help="time and KBR against key size")
    p.add_argument("--config", help="network config (default: bundled star_realistic.yaml)")
    p.add_argument("--sizes", default="64,128,256,512")
    p.add_argument("--reps", type=int, default=10)
    p.add_argument("--seed", type=int, default=7)
    p.add_argument("--time-scale", type=float, default=50.0)

    p = sub.add_parser("scaling-a", help="orchestration stage timings against node count")
    p.add_argument("--counts", default="2,4,10")
    p.add_argument("--reps", type=int, default=10)
    p.add_argument("--forks", type=int, default=1)
    args = parser.parse_args(argv)

    if args.command == "scenario-b":
        cfg = load_config(args.config) if args.config else None
        res = scenario_b(cfg, seed=args.seed, time_scale=args.time_scale, out_dir=args.out,
                         state_root=args.state_dir)
        for ev in res.events:
            print(f"{ev['t']:8.3f}s  process {ev['process']}  {ev['event']:<16} {ev['node']}->{ev['peer']} {ev['bits']} bits")
        print(f"eavesdropped link QBER {res.qber:.4f}")
    elif args.command == "sweep-c":
        cfg = load_config(args.config) if args.config else None
        sizes = [int(s) for s in args.sizes.split(",")]
        rows = sweep_c(cfg, sizes=sizes, reps=args.reps, seed=args.seed, time_scale=args.time_scale,
                       out_dir=args.out, state_root=args.state_dir)
        for row in rows:
            s = row.summary()
            print(f"{s['link']:<18} {s['size']:>4}  time {s['mean_time_s']:.3f}±{s['ci95_time_s']:.3f} s"
                  f"  KBR {s['mean_kbr']:.4f}±{s['ci95_kbr']:.4f}")
    else:
        counts = [int(c) for c in args.counts.split(",")]
        runs = scaling_a(counts, reps=args.reps, forks=args.forks, out_dir=args.out, state_root=args.state_dir)
        for n in counts:
            sel = [r for r in runs if r.node_count == n]
            means = {s: statistics.fmean(r.stages[s] for r in sel) for s in STAGES}
            print(f"N={n:<3} " + "  ".join(f"{s}={means[s]:.3f}s" for s in STAGES))
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
