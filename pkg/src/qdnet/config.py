"""Network configuration and device inventory documents.

Both documents are YAML. The network configuration describes nodes, QKD links
and where the modeling engine and bus live; the inventory says how to reach
each host. ``validate_pair`` joins the two into a :class:`DeploymentPlan`.
"""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from typing import Any, Mapping

import yaml

from qdnet.params import EveDecl, ProtocolParams

PROTOCOLS = ("bb84_with_eve", "extended_bb84")
CONNECTIONS = ("local", "ssh")

# Protocols registered at runtime (see qdnet.quantum.register_protocol) are
# accepted by the parser as well; this set is updated by the registry.
_extra_protocols: dict[str, bool] = {}


class ConfigError(ValueError):
    """Invalid configuration or inventory document.

    ``category`` is a stable machine-readable tag, e.g. ``unknown_endpoint``.
    """

    def __init__(self, category: str, message: str):
        super().__init__(f"{category}: {message}")
        self.category = category
        self.message = message


class ConfigSyntaxError(ConfigError):
    def __init__(self, message: str, line: int | None = None, column: int | None = None):
        where = f" (line {line}, column {column})" if line is not None else ""
        super().__init__("syntax", message + where)
        self.line = line
        self.column = column


@dataclass(frozen=True)
class NodeDecl:
    name: str
    sae_id: str
    api_port: int
    host: str


@dataclass(frozen=True)
class LinkDecl:
    endpoint_a: str
    endpoint_b: str
    length_km: float
    attenuation_db: float
    protocol: str = "bb84_with_eve"
    eve: EveDecl | None = None
    phys: ProtocolParams | None = None

    @property
    def link_id(self) -> str:
        return f"{self.endpoint_a}--{self.endpoint_b}"

    @property
    def endpoints(self) -> frozenset[str]:
        return frozenset((self.endpoint_a, self.endpoint_b))

    @property
    def params(self) -> ProtocolParams:
        return self.phys if self.phys is not None else ProtocolParams()

    def other(self, name: str) -> str:
        return self.endpoint_b if name == self.endpoint_a else self.endpoint_a


@dataclass(frozen=True)
class BusEndpoint:
    address: str = "127.0.0.1"
    port: int = 5672
    host: str | None = None  # inventory host running the broker; engine host if None

    def __str__(self) -> str:
        return f"{self.address}:{self.port}"


@dataclass(frozen=True)
class EngineOptions:
    seed: int | None = None
    buffer_keys: bool = True
    release_compromised: bool = True
    max_rounds: int = 100


@dataclass(frozen=True)
class NetworkConfig:
    nodes: tuple[NodeDecl, ...]
    links: tuple[LinkDecl, ...]
    engine_host: str
    bus_endpoint: BusEndpoint = BusEndpoint()
    time_scale: float = 1.0
    engine_options: EngineOptions = EngineOptions()

    def node(self, name: str) -> NodeDecl:
        for n in self.nodes:
            if n.name == name:
                return n
        raise KeyError(name)

    def node_by_sae(self, sae_id: str) -> NodeDecl | None:
        for n in self.nodes:
            if n.sae_id == sae_id:
                return n
        return None

    def link_between(self, a: str, b: str) -> LinkDecl | None:
        pair = frozenset((a, b))
        for link in self.links:
            if link.endpoints == pair:
                return link
        return None

    def neighbors(self, name: str) -> list[str]:
        return [link.other(name) for link in self.links if name in link.endpoints]

    @property
    def hosts(self) -> set[str]:
        refs = {n.host for n in self.nodes} | {self.engine_host}
        if self.bus_endpoint.host:
            refs.add(self.bus_endpoint.host)
        return refs


@dataclass(frozen=True)
class HostDecl:
    host_name: str
    address: str = "127.0.0.1"
    connection: str = "local"
    user: str | None = None
    auth: str | None = None  # opaque credential reference, e.g. a key file path
    port: int | None = None


@dataclass(frozen=True)
class Inventory:
    hosts: tuple[HostDecl, ...]

    def host(self, name: str) -> HostDecl:
        for h in self.hosts:
            if h.host_name == name:
                return h
        raise KeyError(name)


@dataclass(frozen=True)
class Assignment:
    role: str  # "bus" | "node" | "engine"
    name: str
    host: str


@dataclass
class DeploymentPlan:
    config: NetworkConfig
    inventory: Inventory
    assignments: list[Assignment]
    bus_endpoint: BusEndpoint
    processes: dict[str, list[dict[str, Any]]] = field(default_factory=dict)

    @property
    def launch_order(self) -> list[Assignment]:
        rank = {"bus": 0, "node": 1, "engine": 2}
        return sorted(self.assignments, key=lambda a: rank[a.role])

    def by_host(self) -> dict[str, list[Assignment]]:
        out: dict[str, list[Assignment]] = {}
        for a in self.assignments:
            out.setdefault(a.host, []).append(a)
        return out

    def node_host(self, name: str) -> HostDecl:
        for a in self.assignments:
            if a.role == "node" and a.name == name:
                return self.inventory.host(a.host)
        raise KeyError(name)

    def node_url(self, name: str) -> str:
        host = self.node_host(name)
        return f"http://{host.address}:{self.config.node(name).api_port}"


# -- parsing helpers ---------------------------------------------------------


def _load_yaml(document: str) -> Any:
    try:
        return yaml.safe_load(document)
    except yaml.MarkedYAMLError as exc:
        mark = exc.problem_mark
        line = mark.line + 1 if mark is not None else None
        col = mark.column + 1 if mark is not None else None
        raise ConfigSyntaxError(str(exc.problem or exc), line, col) from None
    except yaml.YAMLError as exc:
        raise ConfigSyntaxError(str(exc)) from None


def _require(mapping: Mapping, key: str, where: str) -> Any:
    if key not in mapping or mapping[key] is None:
        raise ConfigError("missing_field", f"{where}: missing '{key}'")
    return mapping[key]


def _mapping(obj: Any, where: str) -> Mapping:
    if not isinstance(obj, Mapping):
        raise ConfigError("invalid_value", f"{where}: expected a mapping")
    return obj


def _check_keys(mapping: Mapping, allowed: set[str], where: str) -> None:
    extra = set(mapping) - allowed
    if extra:
        raise ConfigError("unknown_field", f"{where}: unknown field(s) {sorted(extra)}")


def _number(value: Any, where: str, *, minimum: float | None = None) -> float:
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        raise ConfigError("invalid_value", f"{where}: expected a number, got {value!r}")
    if minimum is not None and value < minimum:
        raise ConfigError("invalid_value", f"{where}: must be >= {minimum}, got {value}")
    return float(value)


def _identifier(value: Any, where: str) -> str:
    if not isinstance(value, (str, int)) or isinstance(value, bool) or str(value).strip() == "":
        raise ConfigError("invalid_value", f"{where}: expected a non-empty name")
    return str(value)


def _port(value: Any, where: str) -> int:
    if isinstance(value, bool) or not isinstance(value, int) or not 1 <= value <= 65535:
        raise ConfigError("invalid_value", f"{where}: port must be an integer in [1, 65535]")
    return value


def known_protocols() -> dict[str, bool]:
    """Protocol name -> whether it admits an eavesdropper."""
    out = {name: True for name in PROTOCOLS}
    out.update(_extra_protocols)
    return out


def _params(raw: Any, where: str) -> ProtocolParams:
    raw = _mapping(raw, where)
    names = {f.name for f in dataclasses.fields(ProtocolParams)}
    _check_keys(raw, names, where)
    try:
        return ProtocolParams(**raw)
    except (TypeError, ValueError) as exc:
        raise ConfigError("invalid_value", f"{where}: {exc}") from None


def _eve(raw: Any, length_km: float, where: str) -> EveDecl:
    raw = _mapping(raw, where)
    _check_keys(raw, {"intercept_fraction", "position_km", "error_per_intercept"}, where)
    kwargs = {k: _number(v, f"{where}.{k}") for k, v in raw.items()}
    try:
        eve = EveDecl(**kwargs)
    except ValueError as exc:
        raise ConfigError("invalid_value", f"{where}: {exc}") from None
    if eve.position_km > length_km:
        raise ConfigError("invalid_value", f"{where}: position_km beyond link length {length_km}")
    return eve


def _node(raw: Any, i: int) -> NodeDecl:
    where = f"nodes[{i}]"
    raw = _mapping(raw, where)
    _check_keys(raw, {"name", "sae_id", "api_port", "host"}, where)
    name = _identifier(_require(raw, "name", where), f"{where}.name")
    sae = _identifier(raw.get("sae_id", name), f"{where}.sae_id")
    port = _port(_require(raw, "api_port", where), f"{where}.api_port")
    host = _identifier(raw.get("host", name), f"{where}.host")
    return NodeDecl(name=name, sae_id=sae, api_port=port, host=host)


def _link(raw: Any, i: int) -> LinkDecl:
    where = f"links[{i}]"
    raw = _mapping(raw, where)
    _check_keys(
        raw,
        {"endpoint_a", "endpoint_b", "length_km", "attenuation_db",
         "attenuation_db_per_km", "protocol", "eve", "phys"},
        where,
    )
    a = _identifier(_require(raw, "endpoint_a", where), f"{where}.endpoint_a")
    b = _identifier(_require(raw, "endpoint_b", where), f"{where}.endpoint_b")
    length = _number(raw.get("length_km", 0.0), f"{where}.length_km", minimum=0.0)
    if "attenuation_db" in raw and "attenuation_db_per_km" in raw:
        raise ConfigError(
            "attenuation_conflict",
            f"{where}: give either attenuation_db or attenuation_db_per_km, not both",
        )
    if "attenuation_db_per_km" in raw:
        per_km = _number(raw["attenuation_db_per_km"], f"{where}.attenuation_db_per_km", minimum=0.0)
        attenuation = per_km * length
    else:
        attenuation = _number(raw.get("attenuation_db", 0.0), f"{where}.attenuation_db", minimum=0.0)
    protocol = str(raw.get("protocol", "bb84_with_eve"))
    protocols = known_protocols()
    if protocol not in protocols:
        raise ConfigError("unknown_protocol", f"{where}: unknown protocol {protocol!r}")
    eve = None
    if raw.get("eve") is not None:
        if not protocols[protocol]:
            raise ConfigError("eve_not_supported", f"{where}: protocol {protocol} does not admit an eavesdropper")
        eve = _eve(raw["eve"], length, f"{where}.eve")
    phys = _params(raw["phys"], f"{where}.phys") if raw.get("phys") is not None else None
    return LinkDecl(a, b, length, attenuation, protocol, eve, phys)


def _bus(raw: Any) -> BusEndpoint:
    if raw is None:
        return BusEndpoint()
    if isinstance(raw, str):
        address, _, port = raw.rpartition(":")
        if not address or not port.isdigit():
            raise ConfigError("invalid_value", "bus_endpoint: expected 'address:port'")
        return BusEndpoint(address=address, port=_port(int(port), "bus_endpoint.port"))
    raw = _mapping(raw, "bus_endpoint")
    _check_keys(raw, {"address", "port", "host"}, "bus_endpoint")
    return BusEndpoint(
        address=str(raw.get("address", "127.0.0.1")),
        port=_port(raw.get("port", 5672), "bus_endpoint.port"),
        host=str(raw["host"]) if raw.get("host") is not None else None,
    )


def _engine_options(raw: Any) -> EngineOptions:
    if raw is None:
        return EngineOptions()
    raw = _mapping(raw, "engine_options")
    _check_keys(raw, {f.name for f in dataclasses.fields(EngineOptions)}, "engine_options")
    opts = EngineOptions(**raw)
    if opts.max_rounds < 1:
        raise ConfigError("invalid_value", "engine_options.max_rounds must be >= 1")
    return opts


def parse_config(document: str) -> NetworkConfig:
    """Parse and validate a network configuration document."""
    raw = _load_yaml(document)
    raw = _mapping(raw, "config")
    _check_keys(raw, {"nodes", "links", "engine_host", "bus_endpoint", "time_scale", "engine_options"}, "config")

    nodes_raw = _require(raw, "nodes", "config")
    if not isinstance(nodes_raw, list) or not nodes_raw:
        raise ConfigError("invalid_value", "config.nodes: expected a non-empty list")
    nodes = tuple(_node(n, i) for i, n in enumerate(nodes_raw))
    names = [n.name for n in nodes]
    dup = {n for n in names if names.count(n) > 1}
    if dup:
        raise ConfigError("duplicate_node", f"duplicate node name(s) {sorted(dup)}")
    saes = [n.sae_id for n in nodes]
    dup = {s for s in saes if saes.count(s) > 1}
    if dup:
        raise ConfigError("duplicate_sae", f"duplicate sae_id(s) {sorted(dup)}")

    links_raw = raw.get("links") or []
    if not isinstance(links_raw, list):
        raise ConfigError("invalid_value", "config.links: expected a list")
    links = tuple(_link(l, i) for i, l in enumerate(links_raw))
    seen: set[frozenset[str]] = set()
    for i, link in enumerate(links):
        for end in (link.endpoint_a, link.endpoint_b):
            if end not in names:
                raise ConfigError("unknown_endpoint", f"links[{i}]: unknown endpoint {end!r}")
        if link.endpoint_a == link.endpoint_b:
            raise ConfigError("self_loop", f"links[{i}]: endpoints must be distinct")
        if link.endpoints in seen:
            raise ConfigError(
                "duplicate_link", f"links[{i}]: more than one link between {sorted(link.endpoints)}"
            )
        seen.add(link.endpoints)

    engine_host = _identifier(_require(raw, "engine_host", "config"), "config.engine_host")
    time_scale = _number(raw.get("time_scale", 1.0), "config.time_scale")
    if time_scale <= 0:
        raise ConfigError("invalid_value", "config.time_scale must be > 0")
    return NetworkConfig(
        nodes=nodes,
        links=links,
        engine_host=engine_host,
        bus_endpoint=_bus(raw.get("bus_endpoint")),
        time_scale=time_scale,
        engine_options=_engine_options(raw.get("engine_options")),
    )


def _host(raw: Any, i: int) -> HostDecl:
    where = f"hosts[{i}]"
    raw = _mapping(raw, where)
    _check_keys(raw, {"host_name", "address", "connection", "user", "auth", "port"}, where)
    name = _identifier(_require(raw, "host_name", where), f"{where}.host_name")
    connection = str(raw.get("connection", "local"))
    if connection not in CONNECTIONS:
        raise ConfigError("invalid_value", f"{where}.connection: expected one of {CONNECTIONS}")
    if connection == "ssh" and not raw.get("address"):
        raise ConfigError("missing_address", f"{where}: ssh host {name!r} needs an address")
    port = _port(raw["port"], f"{where}.port") if raw.get("port") is not None else None
    return HostDecl(
        host_name=name,
        address=str(raw.get("address") or "127.0.0.1"),
        connection=connection,
        user=str(raw["user"]) if raw.get("user") is not None else None,
        auth=str(raw["auth"]) if raw.get("auth") is not None else None,
        port=port,
    )


def parse_inventory(document: str) -> Inventory:
    raw = _mapping(_load_yaml(document), "inventory")
    _check_keys(raw, {"hosts"}, "inventory")
    hosts_raw = _require(raw, "hosts", "inventory")
    if not isinstance(hosts_raw, list):
        raise ConfigError("invalid_value", "inventory.hosts: expected a list")
    hosts = tuple(_host(h, i) for i, h in enumerate(hosts_raw))
    names = [h.host_name for h in hosts]
    dup = {n for n in names if names.count(n) > 1}
    if dup:
        raise ConfigError("duplicate_host", f"duplicate host_name(s) {sorted(dup)}")
    return Inventory(hosts=hosts)


def validate_pair(config: NetworkConfig, inv: Inventory) -> DeploymentPlan:
    """Resolve every host reference in ``config`` against ``inv``."""
    known = {h.host_name for h in inv.hosts}
    missing = sorted(config.hosts - known)
    if missing:
        raise ConfigError("unresolved_host", f"host(s) {missing} not present in inventory")
    bus_host = config.bus_endpoint.host or config.engine_host
    address = {h.host_name: h.address for h in inv.hosts}
    bound: dict[tuple[str, int], str] = {(address[bus_host], config.bus_endpoint.port): "bus"}
    for n in config.nodes:
        slot = (address[n.host], n.api_port)
        if slot in bound:
            raise ConfigError("port_conflict", f"node {n.name} and {bound[slot]} both bind {slot[0]}:{slot[1]}")
        bound[slot] = f"node {n.name}"
    assignments = [Assignment("bus", "bus", bus_host)]
    assignments += [Assignment("node", n.name, n.host) for n in config.nodes]
    assignments.append(Assignment("engine", "engine", config.engine_host))
    return DeploymentPlan(config, inv, assignments, config.bus_endpoint)


# -- serialization -----------------------------------------------------------


def _params_dict(p: ProtocolParams) -> dict:
    return dataclasses.asdict(p)


def config_to_dict(config: NetworkConfig) -> dict:
    links = []
    for link in config.links:
        d: dict[str, Any] = {
            "endpoint_a": link.endpoint_a,
            "endpoint_b": link.endpoint_b,
            "length_km": link.length_km,
            "attenuation_db": link.attenuation_db,
            "protocol": link.protocol,
        }
        if link.eve is not None:
            d["eve"] = dataclasses.asdict(link.eve)
        if link.phys is not None:
            d["phys"] = _params_dict(link.phys)
        links.append(d)
    bus: dict[str, Any] = {"address": config.bus_endpoint.address, "port": config.bus_endpoint.port}
    if config.bus_endpoint.host is not None:
        bus["host"] = config.bus_endpoint.host
    return {
        "nodes": [dataclasses.asdict(n) for n in config.nodes],
        "links": links,
        "engine_host": config.engine_host,
        "bus_endpoint": bus,
        "time_scale": config.time_scale,
        "engine_options": dataclasses.asdict(config.engine_options),
    }


def dump_config(config: NetworkConfig) -> str:
    return yaml.safe_dump(config_to_dict(config), sort_keys=False)


def dump_inventory(inv: Inventory) -> str:
    hosts = []
    for h in inv.hosts:
        hosts.append({k: v for k, v in dataclasses.asdict(h).items() if v is not None})
    return yaml.safe_dump({"hosts": hosts}, sort_keys=False)


def load_config(path) -> NetworkConfig:
    with open(path, encoding="utf-8") as fh:
        return parse_config(fh.read())


def load_inventory(path) -> Inventory:
    with open(path, encoding="utf-8") as fh:
        return parse_inventory(fh.read())


def local_inventory(config: NetworkConfig) -> Inventory:
    """One ``local`` inventory entry per host referenced by ``config``."""
    return Inventory(tuple(HostDecl(h) for h in sorted(config.hosts)))
