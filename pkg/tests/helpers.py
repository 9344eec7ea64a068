"""Shared generators and deliberately naive reference implementations."""

from __future__ import annotations

import math
import random
from collections import Counter
from fractions import Fraction

from tracellm.chain_access import CallType, Status
from tracellm.trace_model import CallRecord

METHODS = ["transfer", "transferFrom", "balanceOf", "swap", "getReserves", "deposit", "withdraw",
           "fallback", "initialize", "sync", "0xdeadbeef", "approve"]


def addr(i: int) -> str:
    return "0x" + f"{i:040x}"


def random_forest_spec(rng: random.Random, n_nodes: int, max_roots: int = 3):
    """A valid ordered forest as ``(parents, records)`` with records in pre-order.

    Valid means every child's caller is its parent's callee, no address repeats
    along any root-to-node chain, and root callers never appear as callees.
    ``parents[i]`` is the pre-order index of node i's parent, or -1.
    """
    n_roots = rng.randint(1, max(1, min(max_roots, n_nodes)))
    # random recursive tree over non-root nodes, attached under the roots
    children: dict[int, list[int]] = {i: [] for i in range(n_nodes)}
    tree_parent = [-1] * n_nodes
    for i in range(n_roots, n_nodes):
        p = rng.randrange(i)
        tree_parent[i] = p
        children[p].append(i)

    pool = list(range(1, 10 * n_nodes + 20))
    callee: dict[int, int] = {}
    sender_of_root: dict[int, int] = {}

    def assign(node: int, chain: set[int]) -> None:
        options = [a for a in rng.sample(pool, min(len(pool), len(chain) + 8)) if a not in chain]
        callee[node] = options[0]
        for c in children[node]:
            assign(c, chain | {callee[node]})

    for r in range(n_roots):
        sender_of_root[r] = 10**6 + r  # outside the callee pool
        assign(r, set())

    order: list[int] = []

    def walk(node: int) -> None:
        order.append(node)
        for c in children[node]:
            walk(c)

    for r in range(n_roots):
        walk(r)
    position = {node: i for i, node in enumerate(order)}

    records, parents = [], []
    for i, node in enumerate(order):
        p = tree_parent[node]
        sender = sender_of_root[node] if p == -1 else callee[p]
        method = rng.choice(METHODS)
        records.append(CallRecord(
            index=i,
            sender=addr(sender),
            to=addr(callee[node]),
            selector=None if method == "fallback" else bytes(4),
            method=method,
            value=rng.choice([0, 0, 10**18]),
            call_type=rng.choice(list(CallType)),
            status=rng.choice([Status.SUCCESS, Status.SUCCESS, Status.REVERT]),
        ))
        parents.append(-1 if p == -1 else position[p])
    return parents, records


def forest_shape(forest) -> list[int]:
    """Parent pre-order index of every node, in pre-order."""
    out = []
    for node in forest.nodes():
        out.append(-1 if node.parent is None else node.parent.index)
    return out


# -- naive oracles --------------------------------------------------------------


def naive_paths(parents: list[int]) -> list[list[int]]:
    """Root-to-leaf index chains found by walking up from every leaf."""
    has_child = {p for p in parents if p != -1}
    paths = []
    for leaf in range(len(parents)):
        if leaf in has_child:
            continue
        chain, cur = [], leaf
        while cur != -1:
            chain.append(cur)
            cur = parents[cur]
        paths.append(list(reversed(chain)))
    return paths


def naive_features(parents, records, suspicious_names):
    """Per-path (fanout, depth, frequency, semantic, tfidf) straight from the definitions."""
    paths = naive_paths(parents)
    sigs = [tuple(records[i].method for i in p[1:]) for p in paths]
    out_deg = Counter(p for p in parents if p != -1)
    n_docs = len(sigs)
    out = {}
    for p, sig in zip(paths, sigs):
        fan = sum(out_deg.get(i, 0) for i in p)
        freq = sum(1 for other in sigs if other == sig)
        if sig:
            sem = Fraction(sum(1 for t in sig if t in suspicious_names or _unresolved(t, suspicious_names)), len(sig))
        else:
            sem = Fraction(0)
        tf_idf = {}
        for t in set(sig):
            tf = sig.count(t) / len(sig)
            df = sum(1 for other in sigs if t in other)
            tf_idf[t] = tf * math.log(n_docs / (1 + df))
        out[p[-1]] = (fan, len(p), freq, sem, tf_idf)
    return out


def _unresolved(token: str, names) -> bool:
    return "any" in names and len(token) == 10 and token.startswith("0x") and all(
        c in "0123456789abcdef" for c in token[2:])


def naive_closure(adjacency: dict[int, set[int]], seeds: set[int], k: int) -> set[int]:
    """Nodes within undirected distance k of any seed, by repeated full scans."""
    dist = {s: 0 for s in seeds}
    changed = True
    while changed:
        changed = False
        for u in list(dist):
            for v in adjacency[u]:
                if dist[u] + 1 <= k and (v not in dist or dist[v] > dist[u] + 1):
                    dist[v] = dist[u] + 1
                    changed = True
    return set(dist)
