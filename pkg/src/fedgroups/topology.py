"""Topology graphs and their decomposition into federated groups.

A federated group is one hub plus its direct members: a star. Any graph built
from directed leader->follower edges and undirected peer edges decomposes
into such stars, and the runtime only ever executes stars.
"""

from __future__ import annotations

import json
from collections import defaultdict
from dataclasses import dataclass, field


class TopologyError(ValueError):
    pass


class DuplicateNode(TopologyError):
    pass


class UnknownNode(TopologyError):
    pass


class SelfLoop(TopologyError):
    pass


class DuplicateEdge(TopologyError):
    pass


class CyclicLeadership(TopologyError):
    """The directed edges contain a cycle, so no bottom-up schedule exists."""


@dataclass(frozen=True)
class NodeId:
    id: str
    address: str | None = None

    def __post_init__(self):
        if not isinstance(self.id, str) or not self.id:
            raise ValueError("node id must be a non-empty string")


@dataclass(frozen=True)
class FederatedGroup:
    group_id: int
    hub: str
    members: tuple[str, ...]
    depth: int = 0
    undirected: bool = False

    def __post_init__(self):
        if not self.members:
            raise ValueError("a federated group needs at least one member")
        if self.hub in self.members:
            raise ValueError("hub cannot be its own member")


@dataclass(frozen=True)
class Diagnostic:
    severity: str  # "error" | "warning"
    code: str
    message: str
    nodes: tuple[str, ...] = ()

    def __str__(self) -> str:
        return f"{self.severity}: {self.code}: {self.message}"


@dataclass
class TopologyGraph:
    """Directed leader->follower edges plus undirected peer edges.

    Mutating helpers return ``self`` so construction can be chained; treat
    the graph as frozen once it has been decomposed.
    """

    nodes: dict[str, NodeId] = field(default_factory=dict)
    edges: set[tuple[str, str]] = field(default_factory=set)
    undirected_edges: set[frozenset[str]] = field(default_factory=set)

    def add_node(self, node: NodeId | str, address: str | None = None) -> TopologyGraph:
        if isinstance(node, str):
            node = NodeId(node, address)
        if node.id in self.nodes:
            raise DuplicateNode(f"node {node.id!r} already present")
        self.nodes[node.id] = node
        return self

    def add_edge(self, leader: str, follower: str, directed: bool = True) -> TopologyGraph:
        for n in (leader, follower):
            if n not in self.nodes:
                raise UnknownNode(f"unknown node {n!r}")
        if leader == follower:
            raise SelfLoop(f"self loop on {leader!r}")
        if directed:
            if (leader, follower) in self.edges:
                raise DuplicateEdge(f"duplicate edge {leader}->{follower}")
            self.edges.add((leader, follower))
        else:
            pair = frozenset((leader, follower))
            if pair in self.undirected_edges:
                raise DuplicateEdge(f"duplicate edge {leader}--{follower}")
            self.undirected_edges.add(pair)
        return self

    def followers(self, node: str) -> list[str]:
        return sorted(v for u, v in self.edges if u == node)

    def neighbors(self, node: str) -> list[str]:
        return sorted(next(iter(p - {node})) for p in self.undirected_edges if node in p)

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, TopologyGraph):
            return NotImplemented
        return (
            self.nodes == other.nodes
            and self.edges == other.edges
            and self.undirected_edges == other.undirected_edges
        )


def add_node(g: TopologyGraph, n: NodeId | str) -> TopologyGraph:
    return g.add_node(n)


def add_edge(g: TopologyGraph, leader: str, follower: str, directed: bool = True) -> TopologyGraph:
    return g.add_edge(leader, follower, directed)


def _find_cycle(nodes, edges) -> list[str] | None:
    adj = defaultdict(list)
    for u, v in sorted(edges):
        adj[u].append(v)
    color = dict.fromkeys(nodes, 0)
    for start in sorted(nodes):
        if color[start]:
            continue
        stack = [(start, iter(adj[start]))]
        path = [start]
        color[start] = 1
        while stack:
            node, it = stack[-1]
            nxt = next(it, None)
            if nxt is None:
                color[node] = 2
                stack.pop()
                path.pop()
            elif color[nxt] == 1:
                return path[path.index(nxt):] + [nxt]
            elif color[nxt] == 0:
                color[nxt] = 1
                stack.append((nxt, iter(adj[nxt])))
                path.append(nxt)
    return None


def _depths(g: TopologyGraph) -> dict[str, int]:
    """Longest distance of each node from any in-degree-0 root (Kahn order)."""
    indeg = dict.fromkeys(g.nodes, 0)
    adj = defaultdict(list)
    for u, v in g.edges:
        indeg[v] += 1
        adj[u].append(v)
    depth = dict.fromkeys(g.nodes, 0)
    ready = sorted(n for n, d in indeg.items() if d == 0)
    seen = 0
    while ready:
        u = ready.pop()
        seen += 1
        for v in adj[u]:
            depth[v] = max(depth[v], depth[u] + 1)
            indeg[v] -= 1
            if indeg[v] == 0:
                ready.append(v)
    if seen != len(g.nodes):
        raise CyclicLeadership("directed edges contain a cycle")
    return depth


def decompose(g: TopologyGraph) -> list[FederatedGroup]:
    """Split ``g`` into star-shaped federated groups.

    Every node with out-degree >= 1 leads a group of its followers; every node
    with an undirected neighbour leads a group of its neighbours. Groups come
    back deepest first (ties by hub id, directed before undirected), which is
    the bottom-up execution order.
    """
    cycle = _find_cycle(g.nodes, g.edges)
    if cycle:
        raise CyclicLeadership("directed cycle: " + " -> ".join(cycle))
    depth = _depths(g)

    staged = []
    for hub in g.nodes:
        followers = g.followers(hub)
        if followers:
            staged.append((-depth[hub], hub, 0, tuple(followers)))
    for hub in g.nodes:
        peers = g.neighbors(hub)
        if peers:
            staged.append((0, hub, 1, tuple(peers)))
    staged.sort()
    return [
        FederatedGroup(group_id=i, hub=hub, members=members, depth=-neg_depth, undirected=bool(kind))
        for i, (neg_depth, hub, kind, members) in enumerate(staged)
    ]


def validate(g: TopologyGraph) -> list[Diagnostic]:
    diags = []
    cycle = _find_cycle(g.nodes, g.edges)
    if cycle:
        diags.append(
            Diagnostic("error", "directed-cycle", "directed cycle " + " -> ".join(cycle), tuple(cycle[:-1]))
        )
    touched = {n for e in g.edges for n in e} | {n for p in g.undirected_edges for n in p}
    for n in sorted(g.nodes):
        if n not in touched and len(g.nodes) > 1:
            diags.append(Diagnostic("warning", "isolated-node", f"node {n!r} has no edges", (n,)))
    if len(g.nodes) == 1:
        (n,) = g.nodes
        diags.append(Diagnostic("warning", "no-role", f"node {n!r} is neither hub nor member", (n,)))
    return diags


def graph_to_dict(g: TopologyGraph) -> dict:
    nodes = []
    for n in sorted(g.nodes):
        entry = {"id": n}
        if g.nodes[n].address is not None:
            entry["address"] = g.nodes[n].address
        nodes.append(entry)
    return {
        "nodes": nodes,
        "directed": [list(e) for e in sorted(g.edges)],
        "undirected": sorted(sorted(p) for p in g.undirected_edges),
    }


def graph_from_dict(data: dict) -> TopologyGraph:
    unknown = set(data) - {"nodes", "directed", "undirected"}
    if unknown:
        raise TopologyError(f"unknown topology keys: {sorted(unknown)}")
    g = TopologyGraph()
    for entry in data.get("nodes", []):
        if isinstance(entry, str):
            g.add_node(entry)
        else:
            g.add_node(NodeId(entry["id"], entry.get("address")))
    for u, v in data.get("directed", []):
        g.add_edge(u, v, directed=True)
    for a, b in data.get("undirected", []):
        g.add_edge(a, b, directed=False)
    return g


def export_graph(g: TopologyGraph, format: str = "json") -> bytes:
    if format == "json":
        return json.dumps(graph_to_dict(g), sort_keys=True, indent=2).encode()
    if format == "dot":
        # Mixed graphs need a digraph; peer edges then render without arrowheads.
        peer_only = not g.edges and g.undirected_edges
        lines = ["graph topology {" if peer_only else "digraph topology {"]
        for n in sorted(g.nodes):
            lines.append(f'  "{n}";')
        for u, v in sorted(g.edges):
            lines.append(f'  "{u}" -> "{v}";')
        for a, b in sorted(sorted(p) for p in g.undirected_edges):
            lines.append(f'  "{a}" -- "{b}";' if peer_only else f'  "{a}" -> "{b}" [dir=none];')
        lines.append("}")
        return ("\n".join(lines) + "\n").encode()
    raise ValueError(f"unknown export format {format!r}")


def import_graph(data: bytes | str) -> TopologyGraph:
    return graph_from_dict(json.loads(data))


def induced_star(g: TopologyGraph, group: FederatedGroup, directed: bool = True) -> TopologyGraph:
    """The subgraph spanned by one group's hub and members."""
    sub = TopologyGraph()
    for n in (group.hub, *group.members):
        sub.add_node(g.nodes[n])
    for m in group.members:
        sub.add_edge(group.hub, m, directed=directed)
    return sub
