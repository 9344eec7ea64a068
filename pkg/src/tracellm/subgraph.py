"""k-hop enclosing subgraphs around execution paths."""

from __future__ import annotations

import json
from dataclasses import dataclass
from typing import Callable, Iterable

from .call_tree import CallForest, CallNode, ExecPath
from .errors import ContractViolation

DEFAULT_K = 1


def neighbors(node: CallNode) -> set[CallNode]:
    """In- and out-neighbors: the parent (if any) and all children."""
    out = set(node.children)
    if node.parent is not None:
        out.add(node.parent)
    return out


def k_hop_closure(
    path: ExecPath | Iterable[CallNode],
    k: int,
    neighbor_fn: Callable[[CallNode], Iterable[CallNode]] = neighbors,
) -> set[CallNode]:
    if k < 0:
        raise ContractViolation("k must be non-negative")
    nodes = path.nodes if isinstance(path, ExecPath) else path
    closure = set(nodes)
    frontier = set(closure)
    for _ in range(k):
        grown = {u for v in frontier for u in neighbor_fn(v)} - closure
        if not grown:
            break
        closure |= grown
        frontier = grown
    return closure


@dataclass(frozen=True, eq=False)
class EnclosingSubgraph:
    center_path_key: str
    k: int
    nodes: frozenset[CallNode]
    edges: frozenset[tuple[CallNode, CallNode]]
    center: tuple[CallNode, ...] = ()

    def to_dict(self) -> dict:
        return {
            "center_path": self.center_path_key,
            "k": self.k,
            "nodes": [n.record.to_dict() for n in sorted(self.nodes, key=lambda n: n.index)],
            "edges": sorted([p.index, c.index] for p, c in self.edges),
        }

    def serialize(self) -> bytes:
        return json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":")).encode("utf-8")

    def addresses(self) -> set[str]:
        return {a for n in self.nodes for a in (n.record.sender, n.record.to)}


def extract_subgraph(forest: CallForest, path: ExecPath, k: int = DEFAULT_K, center_path_key: str = "") -> EnclosingSubgraph:
    """Subgraph of the forest induced on the k-hop closure of the path."""
    members = set(forest.nodes())
    if not all(n in members for n in path.nodes):
        raise ContractViolation("path does not belong to this forest")
    closure = k_hop_closure(path, k)
    edges = frozenset((n, c) for n in closure for c in n.children if c in closure)
    return EnclosingSubgraph(center_path_key, k, frozenset(closure), edges, tuple(path.nodes))


def subgraph_stats(sg: EnclosingSubgraph) -> dict[str, int]:
    return {
        "node_count": len(sg.nodes),
        "edge_count": len(sg.edges),
        "serialized_size": len(sg.serialize()),
    }
