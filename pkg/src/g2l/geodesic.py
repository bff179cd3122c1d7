"""K-NN moment graph and geodesic (shortest-path) distances.

The graph is directed: an edge i -> j exists iff j is among the n nearest
neighbors of i under the distance 1 - cosine similarity, and carries that
distance as its weight. Geodesic distances are per-source Dijkstra runs;
a Floyd-Warshall all-pairs routine serves as the brute-force oracle the
Dijkstra results are tested against. Nodes unreachable from a source get
the finite cap `g_cap` instead of infinity so downstream exponential
weights stay finite.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .numcore import EmbeddingMatrix

DEFAULT_G_CAP = 10.0
DEFAULT_NEIGHBORS = 10


@dataclass(frozen=True)
class MomentGraph:
    """Weighted directed K-NN graph over moment embeddings."""

    node_count: int
    neighbors: int
    srcs: np.ndarray
    dsts: np.ndarray
    weights: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "srcs", np.asarray(self.srcs, dtype=np.int64).reshape(-1))
        object.__setattr__(self, "dsts", np.asarray(self.dsts, dtype=np.int64).reshape(-1))
        object.__setattr__(self, "weights", np.asarray(self.weights, dtype=np.float64).reshape(-1))
        if not (self.srcs.size == self.dsts.size == self.weights.size):
            raise ValueError("srcs, dsts, weights must have equal length")
        if self.srcs.size:
            if self.srcs.min() < 0 or self.srcs.max() >= self.node_count:
                raise ValueError("edge source index out of range")
            if self.dsts.min() < 0 or self.dsts.max() >= self.node_count:
                raise ValueError("edge target index out of range")
            if np.any(self.weights < 0):
                raise ValueError("edge weights must be nonnegative")
            if np.any(self.srcs == self.dsts):
                raise ValueError("self-loops are not allowed")

    def edges(self) -> list[tuple[int, int, float]]:
        return [
            (int(i), int(j), float(w))
            for i, j, w in zip(self.srcs, self.dsts, self.weights)
        ]


@dataclass(frozen=True)
class GeodesicTable:
    """Shortest-path distances from one source node to every node.

    Unreachable nodes carry `distances == g_cap` and `reachable == False`.
    """

    source: int
    distances: np.ndarray
    reachable: np.ndarray


def build_knn_graph(moments: EmbeddingMatrix, n: int) -> MomentGraph:
    """Directed K-NN graph under d = 1 - cosine, ties broken by lower index.

    Rows must be unit-norm so inner products are cosines. Tiny negative
    distances from rounding (cos marginally above 1) are clamped to 0.
    """
    if not moments.normalized:
        raise ValueError("build_knn_graph requires unit-norm moment embeddings")
    nv = moments.rows
    if not (1 <= n < nv):
        raise ValueError(f"neighbor count n={n} must satisfy 1 <= n < node count {nv}")
    a = moments.array
    dist = 1.0 - a @ a.T
    np.clip(dist, 0.0, None, out=dist)
    np.fill_diagonal(dist, np.inf)
    # stable argsort: equal distances resolve to the lower index
    order = np.argsort(dist, axis=1, kind="stable")[:, :n]
    srcs = np.repeat(np.arange(nv, dtype=np.int64), n)
    dsts = order.reshape(-1).astype(np.int64)
    weights = dist[srcs, dsts]
    return MomentGraph(node_count=nv, neighbors=n, srcs=srcs, dsts=dsts, weights=weights)


def _padded_adjacency(graph: MomentGraph):
    """Fixed-width adjacency (neighbor ids, weights) padded with inf slots.

    Parallel edges collapse to their minimum weight; padding weights are
    +inf so relaxing a pad slot can never win. K-NN graphs have uniform
    out-degree, so there the padding is a no-op.
    """
    nv = graph.node_count
    if graph.srcs.size == 0:
        return np.zeros((nv, 0), dtype=np.int64), np.zeros((nv, 0))
    order = np.lexsort((graph.weights, graph.dsts, graph.srcs))
    srcs = graph.srcs[order]
    dsts = graph.dsts[order]
    weights = graph.weights[order]
    first = np.ones(srcs.size, dtype=bool)
    first[1:] = (srcs[1:] != srcs[:-1]) | (dsts[1:] != dsts[:-1])
    srcs, dsts, weights = srcs[first], dsts[first], weights[first]
    degrees = np.bincount(srcs, minlength=nv)
    width = int(degrees.max())
    # pad slots target the row's own node (self-loops cannot occur as real
    # edges) so duplicate fancy-index writes never clobber a relaxed entry
    nbr = np.tile(np.arange(nv, dtype=np.int64)[:, None], (1, width))
    w = np.full((nv, width), np.inf)
    slot = np.arange(width)[None, :] < degrees[:, None]
    nbr[slot] = dsts
    w[slot] = weights
    return nbr, w


def _dijkstra_multi(nbr: np.ndarray, w: np.ndarray, node_count: int, sources, g_cap: float):
    """Dijkstra from several sources at once.

    Classic greedy extract-min with vectorized relaxation: each iteration
    pops the per-source cheapest unvisited node (masked argmin) and
    relaxes its out-edges; all sources advance in lockstep as array rows.
    """
    sources = np.asarray(sources, dtype=np.int64)
    ns = sources.size
    dist = np.full((ns, node_count), np.inf)
    rows = np.arange(ns)
    dist[rows, sources] = 0.0
    scan = dist.copy()
    rows2 = rows[:, None]
    for _ in range(node_count):
        u = np.argmin(scan, axis=1)
        du = scan[rows, u]
        alive = np.isfinite(du)
        if not alive.any():
            break
        scan[rows, u] = np.inf
        if nbr.shape[1] == 0:
            continue
        nb = nbr[u]                     # (ns, width)
        cand = du[:, None] + w[u]
        old = dist[rows2, nb]
        better = cand < old             # never true for visited or pad slots
        if better.any():
            dist[rows2, nb] = np.where(better, cand, old)
            scan[rows2, nb] = np.where(better, cand, scan[rows2, nb])
    reachable = np.isfinite(dist)
    dist = np.where(reachable, dist, g_cap)
    return [
        GeodesicTable(source=int(s), distances=dist[i], reachable=reachable[i])
        for i, s in enumerate(sources)
    ]


def dijkstra(graph: MomentGraph, source: int, g_cap: float = DEFAULT_G_CAP) -> GeodesicTable:
    """Shortest directed path lengths from `source` to every node."""
    return tables_from_targets(graph, [source], g_cap)[0]


def geodesics_from_targets(
    moments: EmbeddingMatrix,
    targets: list[int],
    n: int,
    g_cap: float = DEFAULT_G_CAP,
) -> list[GeodesicTable]:
    """One geodesic table per target, all over a single shared K-NN graph."""
    graph = build_knn_graph(moments, n)
    return tables_from_targets(graph, targets, g_cap)


def tables_from_targets(graph: MomentGraph, targets, g_cap: float = DEFAULT_G_CAP) -> list[GeodesicTable]:
    targets = [int(t) for t in targets]
    for t in targets:
        if not (0 <= t < graph.node_count):
            raise ValueError(f"source {t} out of range for {graph.node_count} nodes")
    nbr, w = _padded_adjacency(graph)
    return _dijkstra_multi(nbr, w, graph.node_count, targets, g_cap)


def all_pairs_oracle(graph: MomentGraph, g_cap: float = DEFAULT_G_CAP) -> np.ndarray:
    """Floyd-Warshall all-pairs shortest paths; the oracle for dijkstra().

    Entry (i, j) equals dijkstra(graph, i).distances[j]; unreachable pairs
    get g_cap, the diagonal is 0.
    """
    nv = graph.node_count
    d = np.full((nv, nv), np.inf)
    np.fill_diagonal(d, 0.0)
    # parallel edges keep the minimum weight
    np.minimum.at(d, (graph.srcs, graph.dsts), graph.weights)
    for k in range(nv):
        np.minimum(d, d[:, k : k + 1] + d[k : k + 1, :], out=d)
    d[~np.isfinite(d)] = g_cap
    return d


def graph_to_json_dict(graph: MomentGraph, tables: list[GeodesicTable]) -> dict:
    """JSON-friendly dump used by the `geodesic` CLI subcommand."""
    return {
        "nodes": graph.node_count,
        "n": graph.neighbors,
        "edges": [[i, j, w] for i, j, w in graph.edges()],
        "tables": [
            {"source": int(t.source), "dist": [float(x) for x in t.distances]}
            for t in tables
        ],
    }
