"""Undirected graphs, hop-distance matrices, degree features and edge noise.

Distances use ``UNREACHABLE`` (``numpy.inf``) for pairs in different
components; it is never replaced by a large finite number.

Randomness goes through :func:`make_rng`, a PCG64 generator seeded from a
``numpy.random.SeedSequence`` built out of integer keys, so the same keys give
the same stream on every platform.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
from scipy.sparse import csr_matrix
from scipy.sparse.csgraph import shortest_path

UNREACHABLE = np.inf


def make_rng(*keys: int) -> np.random.Generator:
    """PCG64 generator keyed by a tuple of nonnegative integers.

    ``make_rng(seed, graph_index)`` and ``make_rng(seed, graph_index + 1)`` are
    statistically independent streams; this is how per-graph and per-epoch
    randomness is split off a single run seed.
    """
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(list(keys))))


@dataclass(frozen=True)
class PerturbConfig:
    p: float = 0.05
    seed: int = 0

    def __post_init__(self):
        if not 0.0 <= self.p <= 1.0:
            raise ValueError(f"flip probability must lie in [0, 1], got {self.p}")


@dataclass
class Graph:
    """Simple undirected graph with optional node features and a class label.

    ``edges`` is an ``(E, 2)`` int array with ``i < j`` in every row, sorted
    and free of duplicates. Use :meth:`from_edges` to normalise raw pairs.
    """

    num_nodes: int
    edges: np.ndarray
    node_features: Optional[np.ndarray] = None
    label: int = 0
    topo: Optional[np.ndarray] = field(default=None, repr=False)
    topo_pert: Optional[np.ndarray] = field(default=None, repr=False)

    def __post_init__(self):
        edges = np.asarray(self.edges, dtype=np.int64).reshape(-1, 2)
        if len(edges):
            if edges.min() < 0 or edges.max() >= self.num_nodes:
                raise ValueError("edge endpoint out of range")
            if np.any(edges[:, 0] >= edges[:, 1]):
                raise ValueError("edges must be stored as (i, j) with i < j and no self-loops")
            if len(np.unique(edges, axis=0)) != len(edges):
                raise ValueError("duplicate edge")
        self.edges = edges
        if self.node_features is not None:
            self.node_features = np.asarray(self.node_features, dtype=np.float64)
            if self.node_features.shape[0] != self.num_nodes:
                raise ValueError(
                    f"node_features has {self.node_features.shape[0]} rows for {self.num_nodes} nodes"
                )

    @classmethod
    def from_edges(cls, num_nodes: int, pairs: Sequence, **kwargs) -> "Graph":
        """Build a graph from arbitrary pairs; orders, deduplicates and drops self-loops."""
        arr = np.asarray(pairs, dtype=np.int64).reshape(-1, 2)
        arr = arr[arr[:, 0] != arr[:, 1]]
        arr = np.sort(arr, axis=1)
        arr = np.unique(arr, axis=0) if len(arr) else arr
        return cls(num_nodes, arr, **kwargs)

    @classmethod
    def from_adjacency(cls, adj: np.ndarray, **kwargs) -> "Graph":
        i, j = np.nonzero(np.triu(np.asarray(adj), k=1))
        return cls(len(adj), np.stack([i, j], axis=1), **kwargs)

    def adjacency(self) -> np.ndarray:
        adj = np.zeros((self.num_nodes, self.num_nodes), dtype=np.int8)
        if len(self.edges):
            adj[self.edges[:, 0], self.edges[:, 1]] = 1
            adj[self.edges[:, 1], self.edges[:, 0]] = 1
        return adj

    def edge_index(self) -> np.ndarray:
        """Both directions of every edge as a ``(2, 2E)`` array."""
        e = self.edges
        return np.concatenate([e.T, e[:, ::-1].T], axis=1)


def floyd_warshall(adj: np.ndarray) -> np.ndarray:
    """All-pairs hop distances by Floyd-Warshall relaxation.

    O(n^3); kept as the reference entry point. :func:`hop_distances` gives
    the same matrix faster and is what the feature pipeline calls.
    """
    adj = np.asarray(adj)
    n = adj.shape[0]
    dist = np.full((n, n), UNREACHABLE)
    dist[adj != 0] = 1.0
    np.fill_diagonal(dist, 0.0)
    for k in range(n):
        np.minimum(dist, dist[:, k, None] + dist[None, k, :], out=dist)
    return dist


def hop_distances(adj: np.ndarray) -> np.ndarray:
    """All-pairs hop distances via breadth-first search from every node."""
    adj = np.asarray(adj)
    n = adj.shape[0]
    if n == 0:
        return np.zeros((0, 0))
    return shortest_path(csr_matrix(adj), method="D", directed=False, unweighted=True)


def node_degrees(g: Graph) -> np.ndarray:
    deg = np.zeros(g.num_nodes, dtype=np.int64)
    if len(g.edges):
        np.add.at(deg, g.edges.ravel(), 1)
    return deg


def one_hot_degree(deg, d_max: int) -> np.ndarray:
    """One-hot of ``min(deg, d_max)``, length ``d_max + 1``.

    Accepts a scalar (returns a vector) or an array of degrees (returns one
    row per entry).
    """
    if d_max < 0:
        raise ValueError("d_max must be nonnegative")
    deg = np.asarray(deg)
    idx = np.minimum(deg, d_max).astype(np.int64)
    out = np.zeros(deg.shape + (d_max + 1,))
    np.put_along_axis(out, idx[..., None], 1.0, axis=-1)
    return out


def perturb_edges(adj: np.ndarray, cfg: PerturbConfig, rng: Optional[np.random.Generator] = None) -> np.ndarray:
    """Flip each upper-triangle entry with probability ``cfg.p``.

    The result is symmetric with a zero diagonal. ``rng`` overrides the
    generator derived from ``cfg.seed``.
    """
    adj = np.asarray(adj)
    n = adj.shape[0]
    if rng is None:
        rng = make_rng(cfg.seed)
    iu = np.triu_indices(n, k=1)
    upper = adj[iu] != 0
    flips = rng.random(len(upper)) < cfg.p
    out = np.zeros((n, n), dtype=adj.dtype if adj.dtype != bool else np.int8)
    out[iu] = upper ^ flips
    return out + out.T


def drop_edges(edges: np.ndarray, p: float, seed=None, rng: Optional[np.random.Generator] = None) -> np.ndarray:
    """Keep each undirected edge with probability ``1 - p``.

    ``edges`` is an ``(E, 2)`` array of undirected pairs; removing a pair
    removes both directions once the caller expands it.
    """
    if not 0.0 <= p <= 1.0:
        raise ValueError(f"drop probability must lie in [0, 1], got {p}")
    edges = np.asarray(edges).reshape(-1, 2)
    if rng is None:
        rng = make_rng(seed if seed is not None else 0)
    keep = rng.random(len(edges)) >= p
    return edges[keep]
