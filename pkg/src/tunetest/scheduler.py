"""Parallel test batch formation and empty-slot filling.

Paths measured together must be attributable: within one batch every
flip-flop may have at most one batch path entering and one leaving, and
mutually exclusive pairs (paths that cannot be sensitized together) must
land in different batches.  Batching is greedy chain-growing; optimal
batch-count packing is out of scope, but the emitted count is recorded next
to the per-node degree lower bound so the gap is visible.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Mapping

from .timing import TimingGraph


@dataclass
class TestBatch:
    batch_index: int
    edges: list[str]
    capacity: int  # theoretical slot cap: one in-edge per flip-flop

    def __contains__(self, edge_id: str) -> bool:
        return edge_id in self.edges


class _BatchState:
    """Incremental degree / exclusion bookkeeping for one batch."""

    def __init__(self, graph: TimingGraph):
        self.graph = graph
        self.edges: list[str] = []
        self.out_used: set[str] = set()
        self.in_used: set[str] = set()

    def fits(self, edge_id: str) -> bool:
        e = self.graph.edges[edge_id]
        if e.src in self.out_used or e.dst in self.in_used:
            return False
        return not any(self.graph.excluded(edge_id, other)
                       for other in self.edges)

    def add(self, edge_id: str) -> None:
        e = self.graph.edges[edge_id]
        self.edges.append(edge_id)
        self.out_used.add(e.src)
        self.in_used.add(e.dst)


def degree_lower_bound(edge_ids: Iterable[str], graph: TimingGraph) -> int:
    """Provable batch-count floor: the busiest node's max(in, out) degree."""
    indeg: dict[str, int] = {}
    outdeg: dict[str, int] = {}
    bound = 0
    for eid in edge_ids:
        e = graph.edges[eid]
        outdeg[e.src] = outdeg.get(e.src, 0) + 1
        indeg[e.dst] = indeg.get(e.dst, 0) + 1
        bound = max(bound, outdeg[e.src], indeg[e.dst])
    return bound


def form_batches(tested: Iterable[str], graph: TimingGraph) -> list[TestBatch]:
    """Pack the tested paths into as few valid batches as the greedy finds.

    Edges are taken in id order; each batch absorbs every remaining edge it
    can (chains grow automatically because a chain's interior nodes stay
    available at one in- and one out-slot each).
    """
    remaining = sorted(set(tested))
    for eid in remaining:
        if eid not in graph.edges:
            raise KeyError(f"unknown edge {eid!r}")
    capacity = len(graph.flip_flops)
    batches: list[TestBatch] = []
    while remaining:
        state = _BatchState(graph)
        leftovers: list[str] = []
        for eid in remaining:
            if state.fits(eid):
                state.add(eid)
            else:
                leftovers.append(eid)
        batches.append(TestBatch(batch_index=len(batches),
                                 edges=state.edges, capacity=capacity))
        remaining = leftovers
    return batches


def fill_empty_slots(batches: list[TestBatch], untested: Iterable[str],
                     posterior_stds: Mapping[str, float],
                     graph: TimingGraph) -> tuple[list[TestBatch], list[str]]:
    """Add unmeasured paths to batch slots that are going to run anyway.

    Candidates are tried in descending predicted-std order (large residual
    variance means prediction alone is weak) and land in the first batch
    that still satisfies the degree and exclusion invariants.  Returns the
    updated batches and the list of inserted edges, which are from then on
    part of the tested set.
    """
    states = []
    for batch in batches:
        st = _BatchState(graph)
        for eid in batch.edges:
            st.add(eid)
        states.append(st)

    order = sorted(set(untested),
                   key=lambda e: (-posterior_stds.get(e, 0.0), e))
    inserted: list[str] = []
    for eid in order:
        for st in states:
            if st.fits(eid):
                st.add(eid)
                inserted.append(eid)
                break
    out = [TestBatch(batch_index=i, edges=st.edges, capacity=b.capacity)
           for i, (st, b) in enumerate(zip(states, batches))]
    return out, sorted(inserted)
