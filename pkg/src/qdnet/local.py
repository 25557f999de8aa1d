"""Whole network (broker, engine, nodes) inside one process, for tests and notebooks."""
from __future__ import annotations

from qdnet import bus as busmod
from qdnet.config import NetworkConfig
from qdnet.engine import EventLog, ModelingEngine
from qdnet.node import DEFAULT_TTL_S, NodeService


class EmulatedNetwork:
    def __init__(self, config: NetworkConfig, *, ttl_s: float = DEFAULT_TTL_S, log_path=None,
                 broker_tap=None, engine_timeout_s: float = 120.0, **engine_kwargs):
        self.config = config
        self.ttl_s = ttl_s
        self.broker = busmod.Broker("127.0.0.1", 0, tap=broker_tap)
        self.event_log = EventLog(log_path)
        self.engine_kwargs = engine_kwargs
        self.engine_timeout_s = engine_timeout_s
        self.engine: ModelingEngine | None = None
        self.nodes: dict[str, NodeService] = {}
        self.urls: dict[str, str] = {}
        self._clients: list[busmod.BusClient] = []

    def _client(self) -> busmod.BusClient:
        c = busmod.BusClient(*self.broker.endpoint).connect()
        self._clients.append(c)
        return c

    def start(self) -> "EmulatedNetwork":
        self.broker.start()
        self.engine = ModelingEngine(self.config, event_log=self.event_log, **self.engine_kwargs)
        self.engine.attach(self._client())
        for decl in self.config.nodes:
            node = NodeService(decl.name, self.config, ttl_s=self.ttl_s,
                               engine_timeout_s=self.engine_timeout_s)
            node.attach(self._client())
            server = node.serve("127.0.0.1", 0)
            self.nodes[decl.name] = node
            self.urls[decl.name] = f"http://127.0.0.1:{server.server_address[1]}"
        return self

    def stop(self):
        for node in self.nodes.values():
            node.stop()
        if self.engine is not None:
            self.engine.stop()
        for c in self._clients:
            c.close()
        self.broker.stop()
        self.event_log.close()

    def __enter__(self):
        return self.start()

    def __exit__(self, *exc):
        self.stop()
