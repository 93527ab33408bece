"""Deterministic in-process multi-depot cluster for tests and demos.

Depots run real servers on loopback sockets speaking the production wire
protocol; only time is simulated, so lease scenarios are driven by
``advance_clock`` instead of sleeping.  Faults are injected explicitly:
stopping a depot, flipping stored bytes, or refusing inbound writes at a
seeded rate.  With a ``seed``, key material is drawn from a reproducible
generator so identical operation sequences give identical outcomes.
"""

from __future__ import annotations

import random
import secrets
import threading
from dataclasses import dataclass, field
from typing import Callable, Optional

from .client import DepotClient
from .depot import Depot, DepotConfig
from .errors import E_PROTO, E_UNKNOWN_NODE, EbpError
from .server import DepotServer
from .topology import AdjacencyGraph, DepotDirectory

DEFAULT_LIMITS = {
    "max_allocation_bytes": 8 << 20,
    "max_total_bytes": 512 << 20,
    "max_duration_seconds": 7 * 24 * 3600,
}

TOPOLOGIES = ("chain", "ring", "star", "full")


class SimClock:
    """Shared simulated clock; starts at zero for readable lease arithmetic."""

    def __init__(self, start: float = 0.0):
        self._lock = threading.Lock()
        self._now = float(start)

    def now(self) -> float:
        with self._lock:
            return self._now

    def advance(self, delta: float) -> float:
        if delta < 0:
            raise EbpError(E_PROTO, "clock cannot run backwards")
        with self._lock:
            self._now += delta
            return self._now


@dataclass
class CorruptDirective:
    node_id: str
    predicate: Callable[[str], bool]  # alloc_id -> bool
    byte_index: int
    xor_mask: int


@dataclass
class RefuseTransfers:
    node_id: str
    probability: float
    seed: int = 0

    def __post_init__(self):
        if not 0.0 <= self.probability <= 1.0:
            raise EbpError(E_PROTO, "probability must be within [0, 1]")


@dataclass
class FaultPlan:
    stop: list[str] = field(default_factory=list)
    corrupt: list[CorruptDirective] = field(default_factory=list)
    refuse_transfers: list[RefuseTransfers] = field(default_factory=list)


def _edges_for(topology: str, n: int) -> set[tuple[int, int]]:
    if topology == "chain":
        return {(i, i + 1) for i in range(n - 1)}
    if topology == "ring":
        return {(i, (i + 1) % n) for i in range(n)} if n > 1 else set()
    if topology == "star":
        return {(0, i) for i in range(1, n)} | {(i, 0) for i in range(1, n)}
    if topology == "full":
        return {(i, j) for i in range(n) for j in range(n) if i != j}
    raise EbpError(E_PROTO, f"unknown topology {topology!r}")


class SimCluster:
    """n depots named d0..d(n-1) with operator-configured adjacency."""

    def __init__(self, depots: list[Depot], servers: list[DepotServer],
                 clock: SimClock, graph: AdjacencyGraph):
        self.depots = depots
        self.servers = servers
        self.clock = clock
        self.graph = graph
        self._by_node = {d.node_id: i for i, d in enumerate(depots)}
        self._stopped: set[str] = set()

    # -- lookup ---------------------------------------------------------------

    def _index(self, node_id: str) -> int:
        index = self._by_node.get(node_id)
        if index is None:
            raise EbpError(E_UNKNOWN_NODE, f"no depot named {node_id!r}")
        return index

    def depot(self, node_id: str) -> Depot:
        return self.depots[self._index(node_id)]

    def server(self, node_id: str) -> DepotServer:
        return self.servers[self._index(node_id)]

    def client(self, node_id: str, timeout: float = 10.0) -> DepotClient:
        return DepotClient(self.depot(node_id).endpoint, timeout=timeout)

    def directory(self) -> DepotDirectory:
        directory = DepotDirectory()
        for depot in self.depots:
            directory.add(depot.node_id, depot.endpoint,
                          depot.config.max_allocation_bytes)
        return directory

    # -- simulation controls ----------------------------------------------------

    def advance_clock(self, delta: float) -> float:
        """Move simulated time forward and run the expiry sweep everywhere."""
        now = self.clock.advance(delta)
        for depot in self.depots:
            depot.expire_sweep(now)
        return now

    def inject_fault(self, plan: FaultPlan) -> None:
        for node_id in plan.stop:
            self.stop(node_id)
        for directive in plan.corrupt:
            self.depot(directive.node_id).corrupt(
                directive.predicate, directive.byte_index, directive.xor_mask)
        for directive in plan.refuse_transfers:
            server = self.server(directive.node_id)
            gate_rng = random.Random(directive.seed)
            probability = directive.probability
            server.refuse_writes = lambda r=gate_rng, p=probability: r.random() < p
        # faults touch only the named depots; nothing else is shared

    def stop(self, node_id: str) -> None:
        index = self._index(node_id)
        if node_id not in self._stopped:
            self.servers[index].shutdown()
            self._stopped.add(node_id)

    def close(self) -> None:
        for server in self.servers:
            server.shutdown()

    def __enter__(self) -> "SimCluster":
        return self

    def __exit__(self, *exc_info) -> None:
        self.close()


def spawn_cluster(n: int, base_config: Optional[dict] = None,
                  topology: str = "chain", seed: Optional[int] = None,
                  start_time: float = 0.0) -> SimCluster:
    """Start ``n`` loopback depots wired into the given topology.

    ``base_config`` overrides DepotConfig limit fields; ``seed`` makes key
    material reproducible (tests only).
    """
    if n < 1:
        raise ValueError("a cluster needs at least one depot")
    limits = dict(DEFAULT_LIMITS)
    limits.update(base_config or {})
    clock = SimClock(start_time)
    if seed is None:
        rng = secrets.token_bytes
    else:
        seeded = random.Random(seed)
        rng = seeded.randbytes
    edges = _edges_for(topology, n)
    node_ids = [f"d{i}" for i in range(n)]
    depots: list[Depot] = []
    servers: list[DepotServer] = []
    try:
        for i, node_id in enumerate(node_ids):
            config = DepotConfig(
                node_id=node_id,
                listen_endpoint="127.0.0.1:0",
                allowed_adjacent={node_ids[j] for a, j in edges if a == i},
                **limits,
            )
            depot = Depot(config, clock=clock.now, rng=rng)
            depots.append(depot)
            servers.append(DepotServer(depot).start())
        endpoints = {d.node_id: d.endpoint for d in depots}
        for depot in depots:
            depot.config.adjacent_endpoints = {
                nbr: endpoints[nbr] for nbr in depot.config.allowed_adjacent}
    except BaseException:
        for server in servers:
            server.shutdown()
        raise
    graph = AdjacencyGraph(nodes=set(node_ids))
    for a, b in edges:
        graph.add_edge(node_ids[a], node_ids[b])
    return SimCluster(depots, servers, clock, graph)
