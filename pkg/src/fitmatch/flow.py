"""Exact integer min-cost-max-flow and max-flow/min-cut primitives.

The min-cost solver is successive shortest augmenting paths with node
potentials: all arc costs are nonnegative integers (ticks), so Dijkstra with
reduced costs is exact and no negative-cost initialization pass is needed.
Unit capacities on assignment networks bound the number of augmentations by
the number of left features.

The hot loop is compiled with numba when available; a pure-python twin of the
same algorithm (same tie-breaking, identical output) is kept both as a
fallback and as a cross-check target for tests.
"""

from __future__ import annotations

import heapq
import os
from dataclasses import dataclass

import numpy as np

try:  # pragma: no cover - exercised implicitly by the dispatch tests
    from numba import njit

    _HAS_NUMBA = os.environ.get("FITMATCH_NO_NUMBA", "") == ""
except ImportError:  # pragma: no cover
    _HAS_NUMBA = False

_INF = np.int64(2**62)


class FlowNetwork:
    """Directed graph with integer capacities and integer costs.

    Arcs keep their insertion order; shortest-path searches visit them in
    that order, which makes solver output deterministic for a fixed input.
    """

    def __init__(self, node_count: int, source: int, sink: int):
        if not 0 <= source < node_count or not 0 <= sink < node_count:
            raise ValueError("source/sink out of range")
        if source == sink:
            raise ValueError("source and sink must differ")
        self.node_count = node_count
        self.source = source
        self.sink = sink
        self._tails: list[np.ndarray] = []
        self._heads: list[np.ndarray] = []
        self._caps: list[np.ndarray] = []
        self._costs: list[np.ndarray] = []
        self._n_arcs = 0

    def add_arc(self, tail: int, head: int, capacity: int, cost: int = 0) -> int:
        """Add one arc and return its index."""
        return self.add_arcs([tail], [head], [capacity], [cost])

    def add_arcs(self, tails, heads, capacities, costs) -> int:
        """Bulk-add arcs; returns the index of the first one added."""
        tails = np.asarray(tails, dtype=np.int64)
        heads = np.asarray(heads, dtype=np.int64)
        capacities = np.asarray(capacities, dtype=np.int64)
        costs = np.asarray(costs, dtype=np.int64)
        if not (tails.shape == heads.shape == capacities.shape == costs.shape):
            raise ValueError("arc arrays must have equal length")
        if tails.size:
            if tails.min() < 0 or tails.max() >= self.node_count:
                raise ValueError("arc tail out of range")
            if heads.min() < 0 or heads.max() >= self.node_count:
                raise ValueError("arc head out of range")
            if np.any(tails == heads):
                raise ValueError("self-loop arcs are not allowed")
            if capacities.min() < 0:
                raise ValueError("capacities must be nonnegative")
        first = self._n_arcs
        self._tails.append(tails)
        self._heads.append(heads)
        self._caps.append(capacities)
        self._costs.append(costs)
        self._n_arcs += tails.size
        return first

    @property
    def arc_count(self) -> int:
        return self._n_arcs

    def arc_arrays(self):
        tails = np.concatenate(self._tails) if self._tails else np.empty(0, np.int64)
        heads = np.concatenate(self._heads) if self._heads else np.empty(0, np.int64)
        caps = np.concatenate(self._caps) if self._caps else np.empty(0, np.int64)
        costs = np.concatenate(self._costs) if self._costs else np.empty(0, np.int64)
        return tails, heads, caps, costs


@dataclass(frozen=True)
class FlowResult:
    flow_per_arc: np.ndarray
    total_flow: int
    total_cost: int


def _residual_csr(net: FlowNetwork):
    """Interleave forward/backward residual arcs (2i, 2i+1) and index by tail.

    A stable sort keeps per-node arc order equal to insertion order.
    """
    tails, heads, caps, costs = net.arc_arrays()
    m = tails.size
    r_tail = np.empty(2 * m, np.int64)
    r_head = np.empty(2 * m, np.int64)
    r_cap = np.empty(2 * m, np.int64)
    r_cost = np.empty(2 * m, np.int64)
    r_tail[0::2], r_tail[1::2] = tails, heads
    r_head[0::2], r_head[1::2] = heads, tails
    r_cap[0::2], r_cap[1::2] = caps, 0
    r_cost[0::2], r_cost[1::2] = costs, -costs

    order = np.argsort(r_tail, kind="stable").astype(np.int64)
    start = np.zeros(net.node_count + 1, np.int64)
    np.add.at(start, r_tail + 1, 1)
    start = np.cumsum(start)
    return order, start, r_head, r_cap, r_cost


def _ssp_python(n, s, t, order, start, head, cap, cost):
    """Reference successive-shortest-paths; mirrors the numba kernel exactly."""
    INF = int(_INF)
    potential = [0] * n
    parent = [0] * n
    total_flow = 0
    while True:
        dist = [INF] * n
        closed = [False] * n
        dist[s] = 0
        heap = [(0, s)]
        while heap:
            d, v = heapq.heappop(heap)
            if closed[v] or d > dist[v]:
                continue
            closed[v] = True
            if v == t:
                break
            for k in range(start[v], start[v + 1]):
                arc = int(order[k])
                if cap[arc] <= 0:
                    continue
                u = int(head[arc])
                nd = d + int(cost[arc]) + potential[v] - potential[u]
                if nd < dist[u]:
                    dist[u] = nd
                    parent[u] = arc
                    heapq.heappush(heap, (nd, u))
        if not closed[t]:
            break
        dt = dist[t]
        for v in range(n):
            potential[v] += min(dist[v], dt)
        # bottleneck along the parent chain, then augment
        b = INF
        v = t
        while v != s:
            arc = parent[v]
            b = min(b, int(cap[arc]))
            v = int(head[arc ^ 1])
        v = t
        while v != s:
            arc = parent[v]
            cap[arc] -= b
            cap[arc ^ 1] += b
            v = int(head[arc ^ 1])
        total_flow += b
    return total_flow


if _HAS_NUMBA:

    @njit(cache=True)
    def _ssp_numba(n, s, t, order, start, head, cap, cost):  # pragma: no cover
        INF = np.int64(2**62)
        potential = np.zeros(n, np.int64)
        parent = np.zeros(n, np.int64)
        dist = np.empty(n, np.int64)
        closed = np.empty(n, np.bool_)
        heap_d = np.empty(2 * head.size + n + 16, np.int64)
        heap_v = np.empty(2 * head.size + n + 16, np.int64)
        total_flow = np.int64(0)
        while True:
            for i in range(n):
                dist[i] = INF
                closed[i] = False
            dist[s] = 0
            heap_d[0] = 0
            heap_v[0] = s
            hs = 1
            while hs > 0:
                d = heap_d[0]
                v = heap_v[0]
                hs -= 1
                heap_d[0] = heap_d[hs]
                heap_v[0] = heap_v[hs]
                i = 0
                while True:  # sift down, key (dist, node)
                    l = 2 * i + 1
                    if l >= hs:
                        break
                    r = l + 1
                    c = l
                    if r < hs and (
                        heap_d[r] < heap_d[l]
                        or (heap_d[r] == heap_d[l] and heap_v[r] < heap_v[l])
                    ):
                        c = r
                    if heap_d[c] < heap_d[i] or (
                        heap_d[c] == heap_d[i] and heap_v[c] < heap_v[i]
                    ):
                        heap_d[i], heap_d[c] = heap_d[c], heap_d[i]
                        heap_v[i], heap_v[c] = heap_v[c], heap_v[i]
                        i = c
                    else:
                        break
                if closed[v] or d > dist[v]:
                    continue
                closed[v] = True
                if v == t:
                    break
                pv = potential[v]
                for k in range(start[v], start[v + 1]):
                    arc = order[k]
                    if cap[arc] <= 0:
                        continue
                    u = head[arc]
                    nd = d + cost[arc] + pv - potential[u]
                    if nd < dist[u]:
                        dist[u] = nd
                        parent[u] = arc
                        j = hs
                        heap_d[j] = nd
                        heap_v[j] = u
                        hs += 1
                        while j > 0:  # sift up
                            p = (j - 1) // 2
                            if heap_d[j] < heap_d[p] or (
                                heap_d[j] == heap_d[p] and heap_v[j] < heap_v[p]
                            ):
                                heap_d[j], heap_d[p] = heap_d[p], heap_d[j]
                                heap_v[j], heap_v[p] = heap_v[p], heap_v[j]
                                j = p
                            else:
                                break
            if not closed[t]:
                break
            dt = dist[t]
            for v in range(n):
                dv = dist[v]
                potential[v] += dv if dv < dt else dt
            b = INF
            v = t
            while v != s:
                arc = parent[v]
                if cap[arc] < b:
                    b = cap[arc]
                v = head[arc ^ 1]
            v = t
            while v != s:
                arc = parent[v]
                cap[arc] -= b
                cap[arc ^ 1] += b
                v = head[arc ^ 1]
            total_flow += b
        return total_flow


def solve_min_cost_max_flow(net: FlowNetwork) -> FlowResult:
    """Maximum s-t flow of minimum total cost.

    Requires nonnegative arc costs (the network constructions here guarantee
    it). Output is deterministic for a fixed arc insertion order.
    """
    _, _, caps_in, costs_in = net.arc_arrays()
    if caps_in.size and costs_in.min() < 0:
        raise ValueError("min-cost solver requires nonnegative arc costs")
    order, start, head, cap, cost = _residual_csr(net)
    original_cap = cap[0::2].copy()
    if _HAS_NUMBA:
        total_flow = int(
            _ssp_numba(net.node_count, net.source, net.sink, order, start, head, cap, cost)
        )
    else:
        total_flow = _ssp_python(
            net.node_count, net.source, net.sink, order, start, head, cap, cost
        )
    flows = original_cap - cap[0::2]
    total_cost = int(np.sum(flows * costs_in))
    return FlowResult(flow_per_arc=flows, total_flow=total_flow, total_cost=int(total_cost))


def solve_min_cost_max_flow_reference(net: FlowNetwork) -> FlowResult:
    """Pure-python twin of solve_min_cost_max_flow (used in cross-checks)."""
    _, _, caps_in, costs_in = net.arc_arrays()
    order, start, head, cap, cost = _residual_csr(net)
    original_cap = cap[0::2].copy()
    total_flow = _ssp_python(
        net.node_count, net.source, net.sink, order, start, head, cap, cost
    )
    flows = original_cap - cap[0::2]
    total_cost = int(np.sum(flows * costs_in))
    return FlowResult(flow_per_arc=flows, total_flow=total_flow, total_cost=int(total_cost))


def min_cut(net: FlowNetwork) -> tuple[set[int], int]:
    """Max-flow via Dinic, then the source side of the residual graph.

    Returns (source_side_nodes, cut_value); the set contains the source and
    never the sink.
    """
    order, start, head, cap, _ = _residual_csr(net)
    n, s, t = net.node_count, net.source, net.sink
    level = np.empty(n, np.int64)
    it = np.empty(n, np.int64)
    INF = int(_INF)

    def bfs() -> bool:
        level.fill(-1)
        level[s] = 0
        queue = [s]
        qi = 0
        while qi < len(queue):
            v = queue[qi]
            qi += 1
            for k in range(start[v], start[v + 1]):
                arc = int(order[k])
                u = int(head[arc])
                if cap[arc] > 0 and level[u] < 0:
                    level[u] = level[v] + 1
                    queue.append(u)
        return level[t] >= 0

    def dfs(v: int, pushed: int) -> int:
        if v == t:
            return pushed
        while it[v] < start[v + 1]:
            arc = int(order[it[v]])
            u = int(head[arc])
            if cap[arc] > 0 and level[u] == level[v] + 1:
                got = dfs(u, min(pushed, int(cap[arc])))
                if got > 0:
                    cap[arc] -= got
                    cap[arc ^ 1] += got
                    return got
            it[v] += 1
        return 0

    total = 0
    while bfs():
        it[:] = start[:-1]
        while True:
            pushed = dfs(s, INF)
            if pushed == 0:
                break
            total += pushed

    # residual reachability from s marks the source side of a minimum cut
    side = {s}
    queue = [s]
    qi = 0
    while qi < len(queue):
        v = queue[qi]
        qi += 1
        for k in range(start[v], start[v + 1]):
            arc = int(order[k])
            u = int(head[arc])
            if cap[arc] > 0 and u not in side:
                side.add(u)
                queue.append(u)
    return side, total
