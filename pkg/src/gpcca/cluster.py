"""Graph-based community clustering of embeddings and partition scoring.

Samples are connected to their k nearest neighbors in embedding space
(Euclidean metric, union-symmetrized, weight 1/(1+distance)) and the graph
is partitioned by greedy modularity optimization with a resolution
parameter. Agreement between partitions is measured by the Adjusted Rand
Index.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DataError

__all__ = ["NeighborGraph", "Partition", "knn_graph", "louvain", "adjusted_rand_index"]


@dataclass(frozen=True)
class NeighborGraph:
    """Weighted undirected graph in CSR form (both edge directions stored)."""

    n: int
    indptr: np.ndarray
    indices: np.ndarray
    weights: np.ndarray

    def __post_init__(self):
        if self.n < 1:
            raise DataError("empty graph")
        if self.weights.size and self.weights.min() <= 0.0:
            raise DataError("edge weights must be positive")

    def degree(self) -> np.ndarray:
        """Weighted degree per node."""
        out = np.zeros(self.n)
        np.add.at(out, np.repeat(np.arange(self.n), np.diff(self.indptr)), self.weights)
        return out

    def neighbor_counts(self) -> np.ndarray:
        return np.diff(self.indptr)


@dataclass(frozen=True)
class Partition:
    """Cluster labels forming a surjection onto {0..K-1}."""

    labels: np.ndarray

    def __post_init__(self):
        labels = np.asarray(self.labels, dtype=int)
        object.__setattr__(self, "labels", labels)
        if labels.ndim != 1 or labels.size == 0:
            raise DataError("labels must be a non-empty vector")
        uniq = np.unique(labels)
        if uniq[0] != 0 or uniq[-1] != uniq.size - 1:
            raise DataError("labels must cover 0..K-1; use Partition.from_labels")

    @classmethod
    def from_labels(cls, labels) -> "Partition":
        """Canonicalize arbitrary labels to 0..K-1 by first occurrence."""
        labels = np.asarray(labels)
        _, first = np.unique(labels, return_index=True)
        order = {labels[i]: rank for rank, i in enumerate(np.sort(first))}
        return cls(np.array([order[v] for v in labels], dtype=int))

    @property
    def n(self) -> int:
        return self.labels.size

    @property
    def n_clusters(self) -> int:
        return int(self.labels.max()) + 1


def knn_graph(embeddings: np.ndarray, k: int) -> NeighborGraph:
    """Symmetrized k-nearest-neighbor graph over embedding columns.

    Each sample is linked to its k nearest other samples (ties broken by
    index), edges are unioned with their reverses, and a distance dist maps
    to weight 1/(1+dist).
    """
    x = np.asarray(embeddings, dtype=float)
    if x.ndim != 2:
        raise DataError("embeddings must be a (d x n) matrix")
    if not np.isfinite(x).all():
        raise DataError("non-finite embedding values")
    n = x.shape[1]
    if not (1 <= k < n):
        raise DataError(f"neighbor count k={k} must satisfy 1 <= k < n={n}")

    sq = np.sum(x * x, axis=0)
    d2 = sq[:, None] + sq[None, :] - 2.0 * (x.T @ x)
    np.maximum(d2, 0.0, out=d2)
    np.fill_diagonal(d2, np.inf)  # exclude self-loops
    order = np.argsort(d2, axis=1, kind="stable")[:, :k]

    rows = np.repeat(np.arange(n), k)
    cols = order.ravel()
    a, b = np.minimum(rows, cols), np.maximum(rows, cols)
    pairs = np.unique(a * n + b)
    pi, pj = pairs // n, pairs % n
    dist = np.sqrt(d2[pi, pj])
    wgt = 1.0 / (1.0 + dist)

    src = np.concatenate([pi, pj])
    dst = np.concatenate([pj, pi])
    w2 = np.concatenate([wgt, wgt])
    perm = np.lexsort((dst, src))
    src, dst, w2 = src[perm], dst[perm], w2[perm]
    indptr = np.zeros(n + 1, dtype=np.int64)
    np.add.at(indptr, src + 1, 1)
    indptr = np.cumsum(indptr)
    return NeighborGraph(n=n, indptr=indptr, indices=dst, weights=w2)


def _one_level(indptr, indices, weights, self_w, two_w, resolution, order):
    """One local-moving pass set: relocate nodes until no move improves the
    resolution-scaled modularity. Returns (communities, moved_any)."""
    n = indptr.size - 1
    k_tot = np.zeros(n)
    for i in range(n):
        k_tot[i] = weights[indptr[i] : indptr[i + 1]].sum() + 2.0 * self_w[i]
    comm = np.arange(n)
    sigma_tot = k_tot.copy()

    moved_any = False
    improved = True
    while improved:
        improved = False
        for i in order:
            ci = comm[i]
            ki = k_tot[i]
            sigma_tot[ci] -= ki
            # weights from i to each neighboring community
            nbr = indices[indptr[i] : indptr[i + 1]]
            wts = weights[indptr[i] : indptr[i + 1]]
            link = {}
            for j, wij in zip(nbr, wts):
                cj = comm[j]
                link[cj] = link.get(cj, 0.0) + wij
            base = link.get(ci, 0.0) - resolution * ki * sigma_tot[ci] / two_w
            best_c, best_gain = ci, base
            for cj, wic in link.items():
                if cj == ci:
                    continue
                gain = wic - resolution * ki * sigma_tot[cj] / two_w
                if gain > best_gain:
                    best_gain = gain
                    best_c = cj
            comm[i] = best_c
            sigma_tot[best_c] += ki
            if best_c != ci:
                improved = True
                moved_any = True
    return comm, moved_any


def _aggregate(indptr, indices, weights, self_w, comm):
    """Collapse communities into single nodes; returns the quotient graph."""
    uniq, dense = np.unique(comm, return_inverse=True)
    nc = uniq.size
    self_new = np.zeros(nc)
    np.add.at(self_new, dense, self_w)
    edge = {}
    n = indptr.size - 1
    for i in range(n):
        ci = dense[i]
        for off in range(indptr[i], indptr[i + 1]):
            j = indices[off]
            if j < i:
                continue
            cj = dense[j]
            wij = weights[off]
            if ci == cj:
                self_new[ci] += wij
            else:
                key = (min(ci, cj), max(ci, cj))
                edge[key] = edge.get(key, 0.0) + wij
    src, dst, w2 = [], [], []
    for (a, b), wab in edge.items():
        src += [a, b]
        dst += [b, a]
        w2 += [wab, wab]
    src = np.asarray(src, dtype=np.int64)
    dst = np.asarray(dst, dtype=np.int64)
    w2 = np.asarray(w2, dtype=float)
    if src.size:
        perm = np.lexsort((dst, src))
        src, dst, w2 = src[perm], dst[perm], w2[perm]
    indptr_new = np.zeros(nc + 1, dtype=np.int64)
    np.add.at(indptr_new, src + 1, 1)
    indptr_new = np.cumsum(indptr_new)
    return indptr_new, dst, w2, self_new, dense


def louvain(graph: NeighborGraph, resolution: float = 0.8, seed: int = 0, order=None) -> Partition:
    """Greedy modularity communities with a resolution parameter.

    Optimizes Q = sum_c [S_in/(2W) - resolution * (S_tot/(2W))^2] by repeated
    local moving and graph aggregation. The node visit order of the first
    level is a seeded shuffle (deterministic for a fixed seed); pass
    ``order`` to override it explicitly.
    """
    if resolution <= 0.0:
        raise DataError("resolution must be > 0")
    n = graph.n
    if n == 1:
        return Partition(np.zeros(1, dtype=int))
    two_w = float(graph.weights.sum())
    if two_w == 0.0:
        return Partition(np.zeros(n, dtype=int))  # no edges: a single community

    if order is None:
        rng = np.random.default_rng(seed)
        order = rng.permutation(n)
    else:
        order = np.asarray(order, dtype=int)
        if np.sort(order).tolist() != list(range(n)):
            raise DataError("order must be a permutation of all nodes")

    indptr, indices, weights = graph.indptr, graph.indices, graph.weights
    self_w = np.zeros(n)
    node_comm = np.arange(n)

    level_order = order
    while True:
        comm, moved = _one_level(
            indptr, indices, weights, self_w, two_w, resolution, level_order
        )
        if not moved:
            break
        indptr, indices, weights, self_w, dense = _aggregate(
            indptr, indices, weights, self_w, comm
        )
        node_comm = dense[node_comm]
        if indptr.size - 1 == 1:
            break
        level_order = np.arange(indptr.size - 1)
    return Partition.from_labels(node_comm)


def adjusted_rand_index(a: Partition, b: Partition) -> float:
    """Chance-corrected agreement between two partitions, in [-1, 1]."""
    la, lb = a.labels, b.labels
    if la.size != lb.size:
        raise DataError("partitions must cover the same samples")
    n = la.size
    _, ia = np.unique(la, return_inverse=True)
    _, ib = np.unique(lb, return_inverse=True)
    ka, kb = int(ia.max()) + 1, int(ib.max()) + 1
    cont = np.zeros((ka, kb), dtype=np.int64)
    np.add.at(cont, (ia, ib), 1)

    def comb2(x):
        return x * (x - 1) / 2.0

    sum_cells = comb2(cont).sum()
    sum_a = comb2(cont.sum(axis=1)).sum()
    sum_b = comb2(cont.sum(axis=0)).sum()
    total = comb2(np.array(n, dtype=float))
    expected = sum_a * sum_b / total if total > 0 else 0.0
    max_index = (sum_a + sum_b) / 2.0
    if max_index == expected:
        return 1.0  # both partitions trivial and identical in structure
    return float((sum_cells - expected) / (max_index - expected))
