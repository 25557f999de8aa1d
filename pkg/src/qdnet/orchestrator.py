"""Deploy and tear down an emulated QKD network.

``start`` runs five stages in strict order, each a barrier across hosts:

1. node_installation      install the node package for every node
2. engine_installation    install the engine package on the engine host
3. bus_configuration      start the broker (on the engine host by default)
4. node_initialization    launch every node process, wait for its API
5. engine_initialization  launch the engine, wait for its ready record

Hosts are reached through a small remote-execution layer: ``local`` hosts run
subprocesses under a per-host directory, ``ssh`` hosts go through the
``ssh``/``scp`` binaries. Launched processes are recorded on the controller
side so ``stop`` only needs the inventory.
"""
from __future__ import annotations

import json
import os
import shlex
import shutil
import socket
import subprocess
import sys
import threading
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Any, Callable

import psutil
import requests

import qdnet
from qdnet.config import (
    DeploymentPlan, HostDecl, Inventory, NetworkConfig, dump_config, load_config,
    load_inventory, validate_pair,
)

STAGES = (
    "node_installation",
    "engine_installation",
    "bus_configuration",
    "node_initialization",
    "engine_initialization",
)
DEFAULT_STATE_DIR = Path(os.environ.get("QDNET_STATE_DIR", Path.home() / ".qdnet"))


class OrchestrationError(RuntimeError):
    def __init__(self, stage: str, host: str | None, message: str):
        where = f" on host {host}" if host else ""
        super().__init__(f"{stage}{where}: {message}")
        self.stage = stage
        self.host = host
        self.message = message


class RemoteError(RuntimeError):
    """A remote action failed. ``auth`` is set for connection/authentication failures."""

    def __init__(self, host: str, message: str, *, auth: bool = False):
        super().__init__(f"{host}: {message}")
        self.host = host
        self.auth = auth


# -- actions -----------------------------------------------------------------


@dataclass
class CopyTree:
    src: Path
    dest: str  # relative to the host work dir


@dataclass
class WriteFile:
    dest: str
    content: str


@dataclass
class RunCommand:
    argv: list[str]


@dataclass
class LaunchProcess:
    role: str
    name: str
    module: str
    args: list[str]
    lib: str  # relative dir placed on PYTHONPATH
    log: str


@dataclass
class ProbeProcess:
    pid: int


@dataclass
class KillProcess:
    pid: int


@dataclass
class ReadFile:
    path: str


@dataclass
class ProcessRecord:
    role: str
    name: str
    host: str
    pid: int
    workdir: str
    log: str


class LocalConnection:
    def __init__(self, host: HostDecl, state_root: Path, python: str = sys.executable):
        self.host = host
        self.workdir = state_root / host.host_name
        self.python = python
        self._children: dict[int, subprocess.Popen] = {}

    def path(self, rel: str) -> Path:
        return self.workdir / rel

    def execute(self, action) -> Any:
        if isinstance(action, CopyTree):
            dest = self.path(action.dest)
            if dest.exists():
                shutil.rmtree(dest)
            shutil.copytree(action.src, dest, ignore=shutil.ignore_patterns("__pycache__", "*.pyc"))
            return str(dest)
        if isinstance(action, WriteFile):
            dest = self.path(action.dest)
            dest.parent.mkdir(parents=True, exist_ok=True)
            dest.write_text(action.content, encoding="utf-8")
            return str(dest)
        if isinstance(action, RunCommand):
            proc = subprocess.run(action.argv, cwd=self.workdir, capture_output=True, text=True)
            if proc.returncode != 0:
                raise RemoteError(self.host.host_name, f"{action.argv[0]} exited {proc.returncode}: {proc.stderr.strip()}")
            return proc.stdout
        if isinstance(action, LaunchProcess):
            self.workdir.mkdir(parents=True, exist_ok=True)
            env = dict(os.environ)
            env["PYTHONPATH"] = str(self.path(action.lib))
            log = open(self.path(action.log), "ab")
            proc = subprocess.Popen([self.python, "-m", action.module, *action.args], cwd=self.workdir,
                                    env=env, stdout=log, stderr=subprocess.STDOUT, stdin=subprocess.DEVNULL,
                                    start_new_session=True)
            log.close()
            _local_children[proc.pid] = proc
            return ProcessRecord(action.role, action.name, self.host.host_name, proc.pid,
                                 str(self.workdir), str(self.path(action.log)))
        if isinstance(action, ProbeProcess):
            return _local_alive(action.pid)
        if isinstance(action, KillProcess):
            return _local_kill(action.pid)
        if isinstance(action, ReadFile):
            try:
                return self.path(action.path).read_text(encoding="utf-8")
            except FileNotFoundError:
                return ""
        raise TypeError(f"unsupported action {action!r}")


# Popen handles for children of this controller process, so they get reaped.
_local_children: dict[int, subprocess.Popen] = {}


def _local_alive(pid: int) -> bool:
    child = _local_children.get(pid)
    if child is not None:
        return child.poll() is None
    try:
        proc = psutil.Process(pid)
        return proc.is_running() and proc.status() != psutil.STATUS_ZOMBIE
    except psutil.NoSuchProcess:
        return False


def _local_kill(pid: int, grace_s: float = 5.0) -> bool:
    """Terminate a qdnet process; False if it was already gone."""
    try:
        proc = psutil.Process(pid)
        cmdline = " ".join(proc.cmdline())
    except (psutil.NoSuchProcess, psutil.ZombieProcess):
        _reap(pid)
        return False
    except psutil.AccessDenied:
        cmdline = ""
    if "qdnet" not in cmdline:
        # pid was recycled by something that is not ours
        return False
    try:
        proc.terminate()
        proc.wait(grace_s)
    except psutil.TimeoutExpired:
        proc.kill()
        proc.wait(grace_s)
    except psutil.NoSuchProcess:
        pass
    _reap(pid)
    return True


def _reap(pid: int):
    child = _local_children.pop(pid, None)
    if child is not None:
        try:
            child.wait(1.0)
        except subprocess.TimeoutExpired:
            pass


class SshConnection:
    def __init__(self, host: HostDecl, ssh: tuple[str, ...] = ("ssh",), scp: tuple[str, ...] = ("scp",),
                 python: str = "python3", timeout: float = 60.0):
        self.host = host
        self.ssh = tuple(ssh)
        self.scp = tuple(scp)
        self.python = python
        self.timeout = timeout
        self.workdir = f".qdnet/{host.host_name}"

    @property
    def target(self) -> str:
        return f"{self.host.user}@{self.host.address}" if self.host.user else self.host.address

    def _opts(self, port_flag: str) -> list[str]:
        opts = ["-o", "BatchMode=yes", "-o", "ConnectTimeout=10"]
        if self.host.auth:
            opts += ["-i", self.host.auth]
        if self.host.port:
            opts += [port_flag, str(self.host.port)]
        return opts

    def _run(self, argv: list[str]) -> str:
        try:
            proc = subprocess.run(argv, capture_output=True, text=True, timeout=self.timeout)
        except FileNotFoundError as exc:
            raise RemoteError(self.host.host_name, f"cannot run {argv[0]}: {exc}", auth=True) from None
        except subprocess.TimeoutExpired:
            raise RemoteError(self.host.host_name, "connection timed out", auth=True) from None
        if proc.returncode == 255:
            raise RemoteError(self.host.host_name, f"connection/authentication failed: {proc.stderr.strip()}", auth=True)
        if proc.returncode != 0:
            raise RemoteError(self.host.host_name, f"remote command exited {proc.returncode}: {proc.stderr.strip()}")
        return proc.stdout

    def _remote(self, command: str) -> str:
        return self._run([*self.ssh, *self._opts("-p"), self.target, command])

    def execute(self, action) -> Any:
        wd = self.workdir
        if isinstance(action, CopyTree):
            dest = f"{wd}/{action.dest}"
            self._remote(f"rm -rf {shlex.quote(dest)} && mkdir -p {shlex.quote(os.path.dirname(dest))}")
            self._run([*self.scp, *self._opts("-P"), "-r", str(action.src), f"{self.target}:{dest}"])
            return dest
        if isinstance(action, WriteFile):
            dest = f"{wd}/{action.dest}"
            self._remote(f"mkdir -p {shlex.quote(os.path.dirname(dest))} && "
                         f"printf %s {shlex.quote(action.content)} > {shlex.quote(dest)}")
            return dest
        if isinstance(action, RunCommand):
            return self._remote(f"cd {shlex.quote(wd)} && " + shlex.join(action.argv))
        if isinstance(action, LaunchProcess):
            cmd = (f"mkdir -p {shlex.quote(wd)} && cd {shlex.quote(wd)} && "
                   f"PYTHONPATH={shlex.quote(action.lib)} nohup {self.python} -m {action.module} "
                   f"{shlex.join(action.args)} > {shlex.quote(action.log)} 2>&1 < /dev/null & echo $!")
            pid = int(self._remote(cmd).strip().splitlines()[-1])
            return ProcessRecord(action.role, action.name, self.host.host_name, pid, wd, f"{wd}/{action.log}")
        if isinstance(action, ProbeProcess):
            try:
                self._remote(f"kill -0 {action.pid}")
                return True
            except RemoteError as exc:
                if exc.auth:
                    raise
                return False
        if isinstance(action, KillProcess):
            try:
                self._remote(f"kill {action.pid}")
                return True
            except RemoteError as exc:
                if exc.auth:
                    raise
                return False
        if isinstance(action, ReadFile):
            try:
                return self._remote(f"cat {shlex.quote(wd + '/' + action.path)}")
            except RemoteError as exc:
                if exc.auth:
                    raise
                return ""
        raise TypeError(f"unsupported action {action!r}")


def connect(host: HostDecl, state_root: Path, *, ssh: tuple[str, ...] = ("ssh",),
            scp: tuple[str, ...] = ("scp",), python: str = sys.executable):
    if host.connection == "local":
        return LocalConnection(host, state_root, python)
    return SshConnection(host, ssh, scp)


def execute_remote(host: HostDecl, action, *, state_root: Path = DEFAULT_STATE_DIR, **kwargs) -> Any:
    """Perform one action on ``host`` through its connection mode."""
    return connect(host, Path(state_root), **kwargs).execute(action)


# -- reports -----------------------------------------------------------------


@dataclass
class StageReport:
    stages: dict[str, float] = field(default_factory=lambda: {s: 0.0 for s in STAGES})
    invocations: dict[str, int] = field(default_factory=lambda: {s: 0 for s in STAGES})
    node_count: int = 0
    total_s: float = 0.0

    def to_json(self) -> dict:
        return {"stages": dict(self.stages), "invocations": dict(self.invocations),
                "node_count": self.node_count, "total_s": self.total_s}

    def table(self) -> str:
        width = max(len(s) for s in STAGES)
        lines = [f"{'stage':<{width}}  {'seconds':>9}  {'actions':>7}"]
        for s in STAGES:
            lines.append(f"{s:<{width}}  {self.stages[s]:9.3f}  {self.invocations[s]:7d}")
        lines.append(f"{'total':<{width}}  {self.total_s:9.3f}")
        lines.append(f"nodes: {self.node_count}")
        return "\n".join(lines)


@dataclass
class StopReport:
    stopped: list[str] = field(default_factory=list)
    unreachable: dict[str, str] = field(default_factory=dict)

    @property
    def nothing_to_stop(self) -> bool:
        return not self.stopped and not self.unreachable

    def summary(self) -> str:
        if self.nothing_to_stop:
            return "nothing to stop"
        out = [f"stopped {len(self.stopped)} process(es)"]
        for host, err in self.unreachable.items():
            out.append(f"unreachable host {host}: {err}")
        return "\n".join(out)


@dataclass
class Deployment:
    plan: DeploymentPlan
    report: StageReport
    records: list[ProcessRecord]
    state_root: Path
    engine_log: str

    @property
    def config(self) -> NetworkConfig:
        return self.plan.config

    def node_url(self, name: str) -> str:
        return self.plan.node_url(name)

    @property
    def urls(self) -> dict[str, str]:
        return {n.name: self.node_url(n.name) for n in self.config.nodes}


def _records_path(state_root: Path, host_name: str) -> Path:
    return state_root / host_name / "processes.json"


def _port_free(address: str, port: int) -> bool:
    with socket.socket(socket.AF_INET, socket.SOCK_STREAM) as s:
        s.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
        try:
            s.bind((address, port))
        except OSError:
            return False
    return True


class Orchestrator:
    def __init__(self, *, state_root: Path | str | None = None, forks: int = 5,
                 ready_timeout_s: float = 30.0, ttl_s: float = 600.0, capture_bus: bool = False,
                 ssh: tuple[str, ...] = ("ssh",), scp: tuple[str, ...] = ("scp",),
                 python: str = sys.executable, engine_args: list[str] | None = None):
        self.state_root = Path(state_root) if state_root is not None else DEFAULT_STATE_DIR
        self.forks = max(1, forks)
        self.ready_timeout_s = ready_timeout_s
        self.ttl_s = ttl_s
        self.capture_bus = capture_bus
        self.ssh = ssh
        self.scp = scp
        self.python = python
        self.engine_args = list(engine_args or [])
        self._conns: dict[str, Any] = {}

    def _conn(self, host: HostDecl):
        conn = self._conns.get(host.host_name)
        if conn is None:
            conn = self._conns[host.host_name] = connect(host, self.state_root, ssh=self.ssh,
                                                         scp=self.scp, python=self.python)
        return conn

    # -- start -----------------------------------------------------------------

    def start(self, config_file, inventory_file, *, time_scale: float | None = None) -> Deployment:
        config = load_config(config_file)
        inventory = load_inventory(inventory_file)
        return self.deploy(config, inventory, time_scale=time_scale)

    def deploy(self, config: NetworkConfig, inventory: Inventory, *,
               time_scale: float | None = None) -> Deployment:
        t0 = time.perf_counter()
        if time_scale is not None:
            config = replace(config, time_scale=time_scale)
        plan = validate_pair(config, inventory)
        report = StageReport(node_count=len(config.nodes))
        records: list[ProcessRecord] = []
        lock = threading.Lock()
        package = Path(qdnet.__file__).parent
        network_yaml = dump_config(config)
        engine_host = inventory.host(config.engine_host)
        bus_host = inventory.host(plan.bus_endpoint.host or config.engine_host)
        engine_log = "engine/engine.log.jsonl"

        def record(rec: ProcessRecord):
            with lock:
                records.append(rec)
                self._save_records(rec.host, [r for r in records if r.host == rec.host])

        def run_stage(stage: str, tasks: list[tuple[HostDecl, Callable[[], Any]]]):
            start = time.perf_counter()

            def go(task):
                host, fn = task
                try:
                    out = fn()
                except RemoteError as exc:
                    raise OrchestrationError(stage, host.host_name, str(exc)) from exc
                except OSError as exc:
                    raise OrchestrationError(stage, host.host_name, str(exc)) from exc
                with lock:
                    report.invocations[stage] += 1
                return out

            with ThreadPoolExecutor(max_workers=self.forks) as pool:
                futures = [pool.submit(go, t) for t in tasks]
                errors = []
                for f in futures:
                    try:
                        f.result()
                    except OrchestrationError as exc:
                        errors.append(exc)
            report.stages[stage] = time.perf_counter() - start
            if errors:
                raise errors[0]

        def install(host: HostDecl, role_dir: str):
            conn = self._conn(host)
            conn.execute(CopyTree(package, f"{role_dir}/lib/qdnet"))
            conn.execute(WriteFile(f"{role_dir}/network.yaml", network_yaml))

        try:
            run_stage("node_installation", [
                (plan.node_host(n.name), lambda n=n: install(plan.node_host(n.name), f"node-{n.name}"))
                for n in config.nodes
            ])
            run_stage("engine_installation", [(engine_host, lambda: install(engine_host, "engine"))])

            def start_bus():
                conn = self._conn(bus_host)
                if bus_host.host_name != engine_host.host_name:
                    install(bus_host, "engine")
                ep = plan.bus_endpoint
                self._check_port(bus_host, ep.address, ep.port, "bus_configuration")
                args = ["--bind", f"{ep.address}:{ep.port}"]
                if self.capture_bus:
                    args += ["--capture", "bus/frames.jsonl"]
                conn.execute(WriteFile("bus/.keep", ""))
                rec = conn.execute(LaunchProcess("bus", "bus", "qdnet.bus", args, "engine/lib", "bus/bus.log"))
                record(rec)
                self._wait(rec, bus_host, "bus_configuration", lambda: self._tcp_ready(ep.address, ep.port))

            run_stage("bus_configuration", [(bus_host, start_bus)])

            def start_node(decl):
                host = plan.node_host(decl.name)
                conn = self._conn(host)
                self._check_port(host, host.address, decl.api_port, "node_initialization")
                args = ["--name", decl.name, "--config", f"node-{decl.name}/network.yaml",
                        "--bus", str(plan.bus_endpoint), "--port", str(decl.api_port),
                        "--ttl", str(self.ttl_s), "--address", host.address]
                rec = conn.execute(LaunchProcess("node", decl.name, "qdnet.node", args,
                                                 f"node-{decl.name}/lib", f"node-{decl.name}/node.log"))
                record(rec)
                url = plan.node_url(decl.name)
                neighbors = config.neighbors(decl.name)
                probe_sae = config.node(neighbors[0]).sae_id if neighbors else decl.sae_id
                self._wait(rec, host, "node_initialization", lambda: self._http_ready(url, probe_sae))

            run_stage("node_initialization", [(plan.node_host(n.name), lambda n=n: start_node(n))
                                              for n in config.nodes])

            def start_engine():
                conn = self._conn(engine_host)
                args = ["--config", "engine/network.yaml", "--bus", str(plan.bus_endpoint),
                        "--log", engine_log, "--time-scale", str(config.time_scale), *self.engine_args]
                rec = conn.execute(LaunchProcess("engine", "engine", "qdnet.engine", args,
                                                 "engine/lib", "engine/engine.out"))
                record(rec)
                self._wait(rec, engine_host, "engine_initialization",
                           lambda: "engine_ready" in conn.execute(ReadFile(engine_log)))

            run_stage("engine_initialization", [(engine_host, start_engine)])
        except Exception:
            self._terminate(records, inventory)
            raise

        report.total_s = time.perf_counter() - t0
        engine_conn = self._conn(engine_host)
        log_path = str(engine_conn.path(engine_log)) if isinstance(engine_conn, LocalConnection) else engine_log
        plan.processes = {h: [asdict(r) for r in records if r.host == h] for h in {r.host for r in records}}
        return Deployment(plan, report, records, self.state_root, log_path)

    def _check_port(self, host: HostDecl, address: str, port: int, stage: str):
        if host.connection == "local" and not _port_free(address, port):
            raise OrchestrationError(stage, host.host_name, f"port conflict: {address}:{port} already in use")

    def _wait(self, rec: ProcessRecord, host: HostDecl, stage: str, ready: Callable[[], bool]):
        conn = self._conn(host)
        deadline = time.monotonic() + self.ready_timeout_s
        while time.monotonic() < deadline:
            if ready():
                return
            if not conn.execute(ProbeProcess(rec.pid)):
                tail = conn.execute(ReadFile(os.path.relpath(rec.log, rec.workdir)))[-2000:] \
                    if isinstance(conn, LocalConnection) else ""
                raise OrchestrationError(stage, host.host_name, f"{rec.role} {rec.name} exited early\n{tail}")
            time.sleep(0.02)
        raise OrchestrationError(stage, host.host_name, f"{rec.role} {rec.name} not ready after {self.ready_timeout_s}s")

    @staticmethod
    def _tcp_ready(address: str, port: int) -> bool:
        try:
            with socket.create_connection((address, port), timeout=0.5):
                return True
        except OSError:
            return False

    @staticmethod
    def _http_ready(url: str, sae: str) -> bool:
        try:
            resp = requests.get(f"{url}/api/v1/keys/{sae}/status", timeout=0.5)
        except requests.RequestException:
            return False
        return resp.headers.get("Content-Type", "").startswith("application/json")

    def _save_records(self, host_name: str, records: list[ProcessRecord]):
        path = _records_path(self.state_root, host_name)
        path.parent.mkdir(parents=True, exist_ok=True)
        existing = []
        if path.exists():
            existing = [r for r in json.loads(path.read_text()) if r["pid"] not in {x.pid for x in records}]
        path.write_text(json.dumps(existing + [asdict(r) for r in records], indent=1))

    def _terminate(self, records: list[ProcessRecord], inventory: Inventory):
        for rec in reversed(records):
            try:
                self._conn(inventory.host(rec.host)).execute(KillProcess(rec.pid))
            except RemoteError:
                pass
        for host in {r.host for r in records}:
            path = _records_path(self.state_root, host)
            if path.exists():
                keep = [r for r in json.loads(path.read_text()) if r["pid"] not in {x.pid for x in records}]
                if keep:
                    path.write_text(json.dumps(keep))
                else:
                    path.unlink()

    # -- stop ------------------------------------------------------------------

    def stop(self, inventory_file) -> StopReport:
        return self.teardown(load_inventory(inventory_file))

    def teardown(self, inventory: Inventory) -> StopReport:
        report = StopReport()
        for host in inventory.hosts:
            path = _records_path(self.state_root, host.host_name)
            if not path.exists():
                continue
            recs = json.loads(path.read_text())
            conn = self._conn(host)
            remaining = []
            # engine first, bus last
            order = {"engine": 0, "node": 1, "bus": 2}
            for rec in sorted(recs, key=lambda r: order.get(r["role"], 1)):
                try:
                    if conn.execute(KillProcess(rec["pid"])):
                        report.stopped.append(f"{host.host_name}:{rec['role']}:{rec['name']}")
                except RemoteError as exc:
                    report.unreachable[host.host_name] = str(exc)
                    remaining.append(rec)
            if remaining:
                path.write_text(json.dumps(remaining))
            else:
                path.unlink()
        return report


# -- CLI -----------------------------------------------------------------------


def main(argv: list[str] | None = None) -> int:
    import argparse

    from qdnet import relay

    parser = argparse.ArgumentParser(prog="qdnet", description="emulated QKD network orchestrator")
    parser.add_argument("--state-dir", help=f"controller state directory (default {DEFAULT_STATE_DIR})")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("start", help="deploy a network")
    p.add_argument("--config", required=True)
    p.add_argument("--inventory", required=True)
    p.add_argument("--time-scale", type=float)
    p.add_argument("--report", help="write the stage report as JSON here")
    p.add_argument("--forks", type=int, default=5, help="parallel host actions per stage")
    p.add_argument("--ttl", type=float, default=600.0, help="node key TTL in seconds")
    p.add_argument("--capture-bus", action="store_true", help="record every bus frame")

    p = sub.add_parser("stop", help="terminate every network process")
    p.add_argument("--inventory", required=True)

    relay.add_cli(sub)
    args = parser.parse_args(argv)

    if args.command == "relay":
        return args.func(args)

    from qdnet.config import ConfigError

    if args.command == "start":
        orch = Orchestrator(state_root=args.state_dir, forks=args.forks, ttl_s=args.ttl,
                            capture_bus=args.capture_bus)
        try:
            dep = orch.start(args.config, args.inventory, time_scale=args.time_scale)
        except (ConfigError, OrchestrationError) as exc:
            print(f"start failed: {exc}", file=sys.stderr)
            return 1
        print(dep.report.table())
        for name, url in dep.urls.items():
            print(f"{name}: {url}")
        print(f"engine log: {dep.engine_log}")
        if args.report:
            Path(args.report).write_text(json.dumps(dep.report.to_json(), indent=2))
        return 0

    orch = Orchestrator(state_root=args.state_dir)
    try:
        rep = orch.stop(args.inventory)
    except ConfigError as exc:
        print(f"stop failed: {exc}", file=sys.stderr)
        return 1
    print(rep.summary())
    return 0 if not rep.unreachable else 2


if __name__ == "__main__":
    raise SystemExit(main())
