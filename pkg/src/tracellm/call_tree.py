"""Call forests rebuilt from flat traces, and their root-to-leaf paths.

Each :class:`CallNode` is one invocation instance; its address label is the
callee (``record.to``) and the record doubles as the attributes of the edge
coming into it from its parent.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterator, Sequence

from .trace_model import CallRecord


@dataclass(eq=False)
class CallNode:
    record: CallRecord
    children: list[CallNode] = field(default_factory=list)
    parent: CallNode | None = field(default=None, repr=False)

    @property
    def address(self) -> str:
        return self.record.to

    @property
    def index(self) -> int:
        return self.record.index

    def is_leaf(self) -> bool:
        return not self.children

    def to_dict(self) -> dict:
        return {"record": self.record.to_dict(), "children": [c.to_dict() for c in self.children]}


@dataclass(eq=False)
class CallForest:
    roots: list[CallNode] = field(default_factory=list)

    def nodes(self) -> Iterator[CallNode]:
        """Pre-order over every tree."""
        stack = list(reversed(self.roots))
        while stack:
            node = stack.pop()
            yield node
            stack.extend(reversed(node.children))

    def __len__(self) -> int:
        return sum(1 for _ in self.nodes())

    def node_by_index(self) -> dict[int, CallNode]:
        return {n.index: n for n in self.nodes()}

    def edges(self) -> list[tuple[CallNode, CallNode]]:
        return [(n, c) for n in self.nodes() for c in n.children]

    def to_dict(self) -> dict:
        return {"roots": [r.to_dict() for r in self.roots]}


@dataclass(eq=False)
class ExecPath:
    nodes: tuple[CallNode, ...]

    @property
    def sig(self) -> list[str]:
        # edge e_j enters nodes[j]; the root has no incoming edge on the path
        return [n.record.method for n in self.nodes[1:]]

    @property
    def root(self) -> CallNode:
        return self.nodes[0]

    @property
    def leaf(self) -> CallNode:
        return self.nodes[-1]

    @property
    def length(self) -> int:
        return len(self.nodes) - 1

    def key(self, tx_hash: str) -> str:
        return path_key(tx_hash, self.leaf.index)

    def summary(self, tx_hash: str) -> dict:
        return {
            "path_key": self.key(tx_hash),
            "tx_hash": tx_hash,
            "leaf_index": self.leaf.index,
            "node_indices": [n.index for n in self.nodes],
            "addresses": [self.root.record.sender] + [n.address for n in self.nodes],
            "sig": self.sig,
        }


def path_key(tx_hash: str, leaf_index: int) -> str:
    return f"{tx_hash}:{leaf_index}"


def build_forest(trace: Sequence[CallRecord]) -> CallForest:
    """Rebuild the invocation forest of one transaction from its flat trace.

    A frame stack tracks the active call chain.  Each record pops frames until
    the top frame's callee is the record's caller and attaches there; when no
    active frame matches, the record opens a new tree.
    """
    forest = CallForest()
    stack: list[CallNode] = []
    for record in trace:
        while stack and stack[-1].record.to != record.sender:
            stack.pop()
        node = CallNode(record)
        if stack:
            node.parent = stack[-1]
            stack[-1].children.append(node)
        else:
            forest.roots.append(node)
        stack.append(node)
    return forest


def enumerate_paths(forest: CallForest) -> list[ExecPath]:
    """All root-to-leaf paths in depth-first order."""
    paths: list[ExecPath] = []
    for root in forest.roots:
        stack: list[tuple[CallNode, tuple[CallNode, ...]]] = [(root, (root,))]
        while stack:
            node, prefix = stack.pop()
            if not node.children:
                paths.append(ExecPath(prefix))
                continue
            for child in reversed(node.children):
                stack.append((child, prefix + (child,)))
    return paths


def out_degree(node: CallNode) -> int:
    return len(node.children)
