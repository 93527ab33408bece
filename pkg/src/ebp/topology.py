"""Depot directory and the directed adjacency graph used for routing.

Adjacency is directed: an edge src -> dst means src's operator allows
pushing transfers to dst.  Routes are minimum-hop; ties break to the
lexicographically smallest node sequence so results are reproducible.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

from .errors import E_NOROUTE, E_PROTO, E_UNKNOWN_NODE, EbpError


@dataclass(frozen=True)
class DirectoryEntry:
    endpoint: str
    max_allocation_bytes: Optional[int] = None  # advisory placement hint


@dataclass
class DepotDirectory:
    entries: dict[str, DirectoryEntry] = field(default_factory=dict)

    def add(self, node_id: str, endpoint: str,
            max_allocation_bytes: Optional[int] = None) -> None:
        if node_id in self.entries:
            raise EbpError(E_PROTO, f"duplicate directory node {node_id!r}")
        self.entries[node_id] = DirectoryEntry(endpoint, max_allocation_bytes)

    def node_ids(self) -> list[str]:
        return sorted(self.entries)

    def endpoint(self, node_id: str) -> str:
        entry = self.entries.get(node_id)
        if entry is None:
            raise EbpError(E_UNKNOWN_NODE, f"node {node_id!r} not in directory")
        return entry.endpoint


@dataclass
class AdjacencyGraph:
    nodes: set[str] = field(default_factory=set)
    edges: set[tuple[str, str]] = field(default_factory=set)

    def add_node(self, node_id: str) -> None:
        self.nodes.add(node_id)

    def add_edge(self, src: str, dst: str) -> None:
        if src == dst:
            raise EbpError(E_PROTO, f"self-loop on {src!r} is not a peering")
        for node in (src, dst):
            if node not in self.nodes:
                raise EbpError(E_UNKNOWN_NODE, f"edge endpoint {node!r} unknown")
        self.edges.add((src, dst))

    def neighbors(self, node_id: str) -> set[str]:
        if node_id not in self.nodes:
            raise EbpError(E_UNKNOWN_NODE, f"node {node_id!r} not in graph")
        return {dst for src, dst in self.edges if src == node_id}


def route(graph: AdjacencyGraph, src: str, dst: str) -> list[str]:
    """Minimum-hop directed path [src, ..., dst]; lexicographic tie-break."""
    for node in (src, dst):
        if node not in graph.nodes:
            raise EbpError(E_UNKNOWN_NODE, f"node {node!r} not in graph")
    if src == dst:
        return [src]
    # distance-to-destination over reversed edges
    inbound: dict[str, list[str]] = {n: [] for n in graph.nodes}
    outbound: dict[str, list[str]] = {n: [] for n in graph.nodes}
    for a, b in graph.edges:
        outbound[a].append(b)
        inbound[b].append(a)
    dist = {dst: 0}
    queue = deque([dst])
    while queue:
        node = queue.popleft()
        for prev in inbound[node]:
            if prev not in dist:
                dist[prev] = dist[node] + 1
                queue.append(prev)
    if src not in dist:
        raise EbpError(E_NOROUTE, f"no directed path {src} -> {dst}")
    # walking toward dst, always taking the smallest next node that stays on
    # a shortest path, yields the lexicographically smallest node sequence
    path = [src]
    node = src
    while node != dst:
        node = min(v for v in outbound[node]
                   if dist.get(v, -1) == dist[node] - 1)
        path.append(node)
    return path


def _strip_comment(line: str) -> str:
    return line.split("#", 1)[0].strip()


def load_directory(text: str) -> DepotDirectory:
    """Parse lines of ``node_id endpoint [max_alloc]``; ``#`` comments."""
    directory = DepotDirectory()
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = _strip_comment(raw)
        if not line:
            continue
        parts = line.split()
        if len(parts) not in (2, 3):
            raise EbpError(E_PROTO, f"directory line {lineno}: "
                                    "expected node_id endpoint [max_alloc]")
        max_alloc = None
        if len(parts) == 3:
            try:
                max_alloc = int(parts[2])
            except ValueError:
                raise EbpError(E_PROTO,
                               f"directory line {lineno}: bad max_alloc") from None
        directory.add(parts[0], parts[1], max_alloc)
    return directory


def load_graph(text: str, directory: DepotDirectory) -> AdjacencyGraph:
    """Parse lines of ``src -> dst``; nodes must exist in the directory."""
    graph = AdjacencyGraph(nodes=set(directory.entries))
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = _strip_comment(raw)
        if not line:
            continue
        parts = line.split()
        if len(parts) != 3 or parts[1] != "->":
            raise EbpError(E_PROTO, f"graph line {lineno}: expected 'src -> dst'")
        graph.add_edge(parts[0], parts[2])
    return graph


def load(directory_file: str | Path, graph_file: str | Path
         ) -> tuple[DepotDirectory, AdjacencyGraph]:
    directory = load_directory(Path(directory_file).read_text(encoding="utf-8"))
    graph = load_graph(Path(graph_file).read_text(encoding="utf-8"), directory)
    return directory, graph
