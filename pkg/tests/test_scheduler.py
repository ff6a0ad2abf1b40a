"""Batch formation and empty-slot filling."""

import pytest

from tunetest.scheduler import (degree_lower_bound, fill_empty_slots,
                                form_batches)
from tunetest.timing import FlipFlop, TimingEdge, TimingGraph


def graph_from(edge_pairs, exclusions=(), period=10.0):
    nodes = sorted({n for pair in edge_pairs.values() for n in pair})
    flip_flops = {n: FlipFlop(id=n) for n in nodes}
    edges = {}
    for i, (eid, (src, dst)) in enumerate(sorted(edge_pairs.items())):
        edges[eid] = TimingEdge(id=eid, src=src, dst=dst,
                                setup_var=i, hold_var=-1)
    excl = {tuple(sorted(p)) for p in exclusions}
    return TimingGraph(flip_flops=flip_flops, edges=edges,
                       designated_period=period, exclusions=excl)


def check_invariants(batches, graph, expected_edges):
    seen = []
    for batch in batches:
        out_used, in_used = set(), set()
        for eid in batch.edges:
            e = graph.edges[eid]
            assert e.src not in out_used, "out-degree violated"
            assert e.dst not in in_used, "in-degree violated"
            out_used.add(e.src)
            in_used.add(e.dst)
        for a in batch.edges:
            for b in batch.edges:
                if a < b:
                    assert not graph.excluded(a, b)
        seen.extend(batch.edges)
    assert sorted(seen) == sorted(expected_edges)


def test_two_chains_share_one_batch():
    pairs = {"p14": ("f1", "f4"), "p46": ("f4", "f6"), "p67": ("f6", "f7"),
             "p89": ("f8", "f9"), "p9a": ("f9", "fa"), "pab": ("fa", "fb")}
    graph = graph_from(pairs)
    batches = form_batches(pairs, graph)
    assert len(batches) == 1
    check_invariants(batches, graph, pairs)


def test_shared_sink_splits_batches():
    pairs = {"p14": ("f1", "f4"), "p34": ("f3", "f4")}
    graph = graph_from(pairs)
    batches = form_batches(pairs, graph)
    assert len(batches) == 2
    check_invariants(batches, graph, pairs)


def test_star_out_edges_need_k_batches():
    k = 5
    pairs = {f"p{i}": ("hub", f"f{i}") for i in range(k)}
    graph = graph_from(pairs)
    batches = form_batches(pairs, graph)
    assert degree_lower_bound(pairs, graph) == k
    assert len(batches) == k  # greedy attains the out-degree lower bound
    check_invariants(batches, graph, pairs)


def test_cycle_allowed_in_one_batch():
    pairs = {"p01": ("f0", "f1"), "p12": ("f1", "f2"), "p20": ("f2", "f0")}
    graph = graph_from(pairs)
    batches = form_batches(pairs, graph)
    assert len(batches) == 1
    check_invariants(batches, graph, pairs)


def test_exclusion_pairs_separate():
    pairs = {"p01": ("f0", "f1"), "p23": ("f2", "f3")}
    graph = graph_from(pairs, exclusions=[("p01", "p23")])
    batches = form_batches(pairs, graph)
    assert len(batches) == 2
    check_invariants(batches, graph, pairs)


def test_batch_count_within_twice_lower_bound():
    import numpy as np
    rng = np.random.default_rng(4)
    nodes = [f"f{i}" for i in range(12)]
    pairs = {}
    seen = set()
    while len(pairs) < 30:
        a, b = rng.choice(len(nodes), size=2, replace=False)
        key = (nodes[a], nodes[b])
        if key in seen:
            continue
        seen.add(key)
        pairs[f"p{len(pairs):02d}"] = key
    graph = graph_from(pairs)
    batches = form_batches(pairs, graph)
    check_invariants(batches, graph, pairs)
    lb = degree_lower_bound(pairs, graph)
    assert lb <= len(batches) <= 2 * lb


def test_fill_no_candidates_noop():
    pairs = {"p01": ("f0", "f1")}
    graph = graph_from(pairs)
    batches = form_batches(pairs, graph)
    filled, inserted = fill_empty_slots(batches, [], {}, graph)
    assert inserted == []
    assert [b.edges for b in filled] == [b.edges for b in batches]


def test_fill_disjoint_edge_inserted():
    pairs = {"p01": ("f0", "f1"), "p23": ("f2", "f3")}
    graph = graph_from(pairs)
    batches = form_batches(["p01"], graph)
    filled, inserted = fill_empty_slots(batches, ["p23"], {"p23": 1.0}, graph)
    assert inserted == ["p23"]
    assert sorted(filled[0].edges) == ["p01", "p23"]


def test_fill_ordering_prefers_large_variance():
    # pA and pB conflict on node f2; only one fits alongside p01
    pairs = {"p01": ("f0", "f1"), "pA": ("f2", "f3"), "pB": ("f2", "f4")}
    graph = graph_from(pairs)
    batches = form_batches(["p01"], graph)
    filled, inserted = fill_empty_slots(batches, ["pA", "pB"],
                                        {"pA": 2.0, "pB": 0.5}, graph)
    assert "pA" in filled[0].edges  # higher posterior std wins the slot
    assert "pB" not in filled[0].edges
    assert inserted == ["pA"]

    filled2, inserted2 = fill_empty_slots(batches, ["pA", "pB"],
                                          {"pA": 0.5, "pB": 2.0}, graph)
    assert "pB" in filled2[0].edges
    assert inserted2 == ["pB"]


def test_fill_respects_exclusions():
    pairs = {"p01": ("f0", "f1"), "p23": ("f2", "f3")}
    graph = graph_from(pairs, exclusions=[("p01", "p23")])
    batches = form_batches(["p01"], graph)
    filled, inserted = fill_empty_slots(batches, ["p23"], {"p23": 3.0}, graph)
    assert inserted == []
    assert filled[0].edges == ["p01"]


def test_unknown_edge_rejected():
    graph = graph_from({"p01": ("f0", "f1")})
    with pytest.raises(KeyError):
        form_batches(["nope"], graph)
