"""Graph container and the structural quantities derived from it.

Edges are stored once per undirected pair with ``u < v``; symmetry and
self-loops only appear when the normalized adjacency is materialized.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence, Union

import numpy as np
import scipy.sparse as sp

FeatureMatrix = Union[np.ndarray, sp.csr_matrix]

GATING_BLOCKS = ("x", "n", "phi", "deg")


@dataclass(eq=False)
class Graph:
    """Undirected, unweighted graph with node features and labels."""

    num_nodes: int
    edges: np.ndarray  # [E, 2] int64, u < v, unique
    features: FeatureMatrix  # [n, d]
    labels: Optional[np.ndarray] = None  # [n] int64
    name: str = "graph"
    _norm_adj: Optional[sp.csr_matrix] = field(default=None, repr=False)

    def __post_init__(self):
        self.edges = np.asarray(self.edges, dtype=np.int64).reshape(-1, 2)
        if self.num_nodes < 1:
            raise ValueError("graph needs at least one node")
        if self.features.shape[0] != self.num_nodes:
            raise ValueError(
                f"features have {self.features.shape[0]} rows, expected {self.num_nodes}"
            )
        if len(self.edges):
            if self.edges.min() < 0 or self.edges.max() >= self.num_nodes:
                raise ValueError("edge endpoint outside [0, num_nodes)")
            if np.any(self.edges[:, 0] >= self.edges[:, 1]):
                raise ValueError("edges must be stored as (u, v) with u < v, no self-loops")
            keys = self.edges[:, 0] * self.num_nodes + self.edges[:, 1]
            if len(np.unique(keys)) != len(keys):
                raise ValueError("duplicate undirected edge")
        if self.labels is not None:
            self.labels = np.asarray(self.labels, dtype=np.int64)
            if self.labels.shape != (self.num_nodes,):
                raise ValueError("labels must be a vector of length num_nodes")
            if len(self.labels) and self.labels.min() < 0:
                raise ValueError("labels must be nonnegative class ids")

    @classmethod
    def from_edge_list(cls, num_nodes, edge_list, features, labels=None, name="graph"):
        """Build a graph from arbitrary (possibly duplicated / directed) pairs.

        Self-loops are dropped and each undirected pair is kept once.
        """
        e = np.asarray(edge_list, dtype=np.int64).reshape(-1, 2)
        e = e[e[:, 0] != e[:, 1]]
        e = np.sort(e, axis=1)
        if len(e):
            e = np.unique(e, axis=0)
        return cls(num_nodes=int(num_nodes), edges=e, features=features, labels=labels, name=name)

    @property
    def num_edges(self) -> int:
        return len(self.edges)

    @property
    def feature_dim(self) -> int:
        return self.features.shape[1]

    @property
    def num_classes(self) -> int:
        if self.labels is None or not len(self.labels):
            return 0
        return int(self.labels.max()) + 1

    def degrees(self) -> np.ndarray:
        """Degree of every node, self-loops excluded."""
        deg = np.bincount(self.edges.ravel(), minlength=self.num_nodes)
        return deg.astype(np.int64)

    def adjacency(self) -> sp.csr_matrix:
        """Symmetric 0/1 adjacency without self-loops."""
        n = self.num_nodes
        u, v = self.edges[:, 0], self.edges[:, 1]
        rows = np.concatenate([u, v])
        cols = np.concatenate([v, u])
        data = np.ones(len(rows), dtype=np.float64)
        return sp.csr_matrix((data, (rows, cols)), shape=(n, n))

    def dense_features(self, dtype=np.float64) -> np.ndarray:
        if sp.issparse(self.features):
            return self.features.toarray().astype(dtype, copy=False)
        return np.asarray(self.features, dtype=dtype)

    def structure_key(self) -> tuple:
        """Cheap structural fingerprint used for equality checks in tests."""
        return (self.num_nodes, self.num_edges, self.feature_dim, self.num_classes)


def normalized_adjacency(graph: Graph) -> sp.csr_matrix:
    """Symmetric normalization ``D^-1/2 (A + I) D^-1/2``, cached on the graph.

    Isolated nodes keep a single self-loop, so their row is ``[.., 1, ..]``.
    """
    if graph._norm_adj is not None:
        return graph._norm_adj
    a = graph.adjacency() + sp.identity(graph.num_nodes, format="csr")
    deg = np.asarray(a.sum(axis=1)).ravel()
    inv_sqrt = 1.0 / np.sqrt(deg)
    d = sp.diags(inv_sqrt)
    norm = (d @ a @ d).tocsr()
    norm.sort_indices()
    graph._norm_adj = norm
    return norm


def homophily_degrees(graph: Graph) -> tuple[np.ndarray, np.ndarray]:
    """Count same-label and cross-label neighbours of every node."""
    if graph.labels is None:
        raise ValueError("homophily degrees need node labels")
    u, v = graph.edges[:, 0], graph.edges[:, 1]
    same = graph.labels[u] == graph.labels[v]
    d_hom = np.bincount(u[same], minlength=graph.num_nodes) + np.bincount(
        v[same], minlength=graph.num_nodes
    )
    d_het = graph.degrees() - d_hom
    return d_hom.astype(np.int64), d_het.astype(np.int64)


def neighbor_diff(graph: Graph) -> FeatureMatrix:
    """Elementwise ``|Â X - X|`` with Â the normalized adjacency.

    Sparse features give a sparse result; dense features a dense one.
    """
    adj = normalized_adjacency(graph)
    x = graph.features
    if sp.issparse(x):
        x = x.tocsr().astype(np.float64)
        diff = (adj @ x - x).tocsr()
        diff.data = np.abs(diff.data)
        diff.eliminate_zeros()
        return diff
    x = np.asarray(x, dtype=np.float64)
    return np.abs(adj @ x - x)


@dataclass(eq=False)
class GatingFeatures:
    """Structural descriptors fed to the gate, kept blockwise.

    ``composite`` materializes ``X || N || phi || D`` with ``phi`` (the
    per-feature standard deviation over nodes) tiled to every row and the
    node degree tiled across ``d`` columns. The gate itself consumes the
    blocks directly, which avoids building the dense ``n x 4d`` matrix.
    """

    x: FeatureMatrix
    n: FeatureMatrix
    phi: np.ndarray  # [d]
    degree: np.ndarray  # [num_nodes]
    blocks: tuple = GATING_BLOCKS

    @property
    def feature_dim(self) -> int:
        return len(self.phi)

    @property
    def num_nodes(self) -> int:
        return len(self.degree)

    @property
    def width(self) -> int:
        return len(self.blocks) * self.feature_dim

    def block(self, name: str) -> np.ndarray:
        num, d = self.num_nodes, self.feature_dim
        if name == "x":
            return _dense(self.x)
        if name == "n":
            return _dense(self.n)
        if name == "phi":
            return np.tile(self.phi, (num, 1))
        if name == "deg":
            return np.repeat(self.degree.astype(np.float64)[:, None], d, axis=1)
        raise KeyError(name)

    @property
    def composite(self) -> np.ndarray:
        return np.concatenate([self.block(b) for b in self.blocks], axis=1)

    def without(self, name: str) -> "GatingFeatures":
        if name not in self.blocks:
            raise KeyError(f"block {name!r} not present")
        kept = tuple(b for b in self.blocks if b != name)
        return GatingFeatures(self.x, self.n, self.phi, self.degree, kept)


def _dense(m: FeatureMatrix) -> np.ndarray:
    if sp.issparse(m):
        return m.toarray().astype(np.float64)
    return np.asarray(m, dtype=np.float64)


def gating_features(graph: Graph, blocks: Sequence[str] = GATING_BLOCKS) -> GatingFeatures:
    for b in blocks:
        if b not in GATING_BLOCKS:
            raise ValueError(f"unknown gating block {b!r}")
    x = graph.features
    if sp.issparse(x):
        x = x.tocsr().astype(np.float64)
        mean = np.asarray(x.mean(axis=0)).ravel()
        sq_mean = np.asarray(x.multiply(x).mean(axis=0)).ravel()
        phi = np.sqrt(np.maximum(sq_mean - mean**2, 0.0))
    else:
        x = np.asarray(x, dtype=np.float64)
        phi = x.std(axis=0)
    return GatingFeatures(
        x=x,
        n=neighbor_diff(graph),
        phi=phi,
        degree=graph.degrees().astype(np.float64),
        blocks=tuple(blocks),
    )


def edge_homophily(graph: Graph) -> float:
    """Fraction of edges joining same-label endpoints (1.0 for edgeless graphs)."""
    if graph.num_edges == 0:
        return 1.0
    u, v = graph.edges[:, 0], graph.edges[:, 1]
    return float(np.mean(graph.labels[u] == graph.labels[v]))
