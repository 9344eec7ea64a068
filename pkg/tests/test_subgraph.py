from __future__ import annotations

import json
import random

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from helpers import addr, naive_closure, random_forest_spec
from tracellm.call_tree import build_forest, enumerate_paths
from tracellm.errors import ContractViolation
from tracellm.subgraph import extract_subgraph, k_hop_closure, subgraph_stats
from tracellm.trace_model import CallRecord


def chain_forest():
    # 100 -> 1 -> 2 -> 3, 2 -> 4, 1 -> 5
    recs = [CallRecord(0, addr(100), addr(1), None, "a"), CallRecord(1, addr(1), addr(2), None, "b"),
            CallRecord(2, addr(2), addr(3), None, "c"), CallRecord(3, addr(2), addr(4), None, "d"),
            CallRecord(4, addr(1), addr(5), None, "e")]
    return build_forest(recs)


def test_small_closures():
    forest = chain_forest()
    paths = enumerate_paths(forest)
    leaf5 = next(p for p in paths if p.leaf.index == 4)
    assert {n.index for n in k_hop_closure(leaf5, 0)} == {0, 4}
    assert {n.index for n in k_hop_closure(leaf5, 1)} == {0, 1, 4}
    assert {n.index for n in k_hop_closure(leaf5, 2)} == {0, 1, 2, 3, 4}
    with pytest.raises(ContractViolation):
        k_hop_closure(leaf5, -1)


def test_subgraph_is_induced_and_serializable():
    forest = chain_forest()
    path = enumerate_paths(forest)[0]
    sg = extract_subgraph(forest, path, 1, "0xt:2")
    assert {(p.index, c.index) for p, c in sg.edges} == {(0, 1), (1, 2), (1, 3), (0, 4)}
    doc = json.loads(sg.serialize())
    assert doc["center_path"] == "0xt:2" and doc["k"] == 1
    assert [n["index"] for n in doc["nodes"]] == [0, 1, 2, 3, 4]
    assert subgraph_stats(sg)["serialized_size"] == len(sg.serialize())
    assert addr(5) in sg.addresses()


def test_foreign_path_rejected():
    a, b = chain_forest(), chain_forest()
    with pytest.raises(ContractViolation):
        extract_subgraph(a, enumerate_paths(b)[0])


@settings(max_examples=100, deadline=None)
@given(st.integers(1, 40), st.integers(0, 2**32), st.integers(0, 5))
def test_closure_matches_distance_scan(n_nodes, seed, k):
    parents, records = random_forest_spec(random.Random(seed), n_nodes)
    forest = build_forest(records)
    adjacency = {i: set() for i in range(n_nodes)}
    for c, p in enumerate(parents):
        if p != -1:
            adjacency[c].add(p)
            adjacency[p].add(c)
    for path in enumerate_paths(forest):
        got = {n.index for n in k_hop_closure(path, k)}
        assert got == naive_closure(adjacency, {n.index for n in path.nodes}, k)


@settings(max_examples=50, deadline=None)
@given(st.integers(1, 40), st.integers(0, 2**32))
def test_closure_monotone_in_k(n_nodes, seed):
    _, records = random_forest_spec(random.Random(seed), n_nodes)
    forest = build_forest(records)
    for path in enumerate_paths(forest):
        prev = None
        for k in range(5):
            sg = extract_subgraph(forest, path, k)
            if prev is not None:
                assert prev.nodes <= sg.nodes and prev.edges <= sg.edges
            prev = sg
