"""Graph containers and structural operations for node-classification data.

Graphs are undirected and attributed.  Edges are kept canonically as an
(m, 2) int64 array where each unordered pair is stored once as (lo, hi)
and rows are sorted lexicographically; this makes downstream computation
order-independent and serialization stable.  Labels use -1 for unknown.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Iterable, Sequence

import numpy as np
import scipy.sparse as sp
from scipy.sparse.csgraph import connected_components


class GraphError(ValueError):
    """Raised when a graph container or edit violates its contract."""


def _canonical_edges(edge_index: np.ndarray, num_nodes: int) -> np.ndarray:
    edges = np.asarray(edge_index, dtype=np.int64)
    if edges.size == 0:
        return np.zeros((0, 2), dtype=np.int64)
    if edges.ndim != 2 or edges.shape[1] != 2:
        raise GraphError(f"edge index must have shape (m, 2), got {edges.shape}")
    if edges.min() < 0 or edges.max() >= num_nodes:
        bad_rows = (edges < 0).any(axis=1) | (edges >= num_nodes).any(axis=1)
        u, v = edges[bad_rows][0]
        raise GraphError(
            f"edge ({u}, {v}) references a node outside [0, {num_nodes})"
        )
    lo = edges.min(axis=1)
    hi = edges.max(axis=1)
    if (lo == hi).any():
        raise GraphError(f"self-loop on node {int(lo[lo == hi][0])} is not allowed")
    stacked = np.stack([lo, hi], axis=1)
    order = np.lexsort((stacked[:, 1], stacked[:, 0]))
    stacked = stacked[order]
    if stacked.shape[0] > 1:
        dup = (np.diff(stacked[:, 0]) == 0) & (np.diff(stacked[:, 1]) == 0)
        if dup.any():
            k = int(np.argmax(dup))
            raise GraphError(
                f"duplicate edge ({stacked[k, 0]}, {stacked[k, 1]})"
            )
    return stacked


@dataclass
class Graph:
    """An undirected attributed graph with (possibly partial) node labels.

    Attributes:
        features: (n, d) float64 node feature matrix.
        edge_index: (m, 2) int64 canonical edge array (see module docstring).
        labels: (n,) int64 labels in [0, num_classes); -1 marks unknown.
        num_classes: number of label classes, >= 1.

    Instances are treated as immutable everywhere in the package; edits go
    through :func:`apply_edge_edits` or build a new instance.
    """

    features: np.ndarray
    edge_index: np.ndarray
    labels: np.ndarray
    num_classes: int
    _neighbor_cache: list | None = field(
        default=None, init=False, repr=False, compare=False
    )

    def __post_init__(self) -> None:
        features = np.asarray(self.features, dtype=np.float64)
        if features.ndim != 2:
            raise GraphError(f"features must be 2-D, got shape {features.shape}")
        labels = np.asarray(self.labels, dtype=np.int64)
        if labels.ndim != 1 or labels.shape[0] != features.shape[0]:
            raise GraphError(
                f"labels shape {labels.shape} does not match "
                f"{features.shape[0]} nodes"
            )
        if int(self.num_classes) < 1:
            raise GraphError(f"num_classes must be >= 1, got {self.num_classes}")
        if labels.size and (labels.min() < -1 or labels.max() >= self.num_classes):
            bad = labels[(labels < -1) | (labels >= self.num_classes)][0]
            raise GraphError(
                f"label {bad} outside [-1, {self.num_classes})"
            )
        self.features = features
        self.labels = labels
        self.num_classes = int(self.num_classes)
        self.edge_index = _canonical_edges(self.edge_index, features.shape[0])

    @property
    def num_nodes(self) -> int:
        return self.features.shape[0]

    @property
    def num_features(self) -> int:
        return self.features.shape[1]

    @property
    def num_edges(self) -> int:
        return self.edge_index.shape[0]

    def edge_set(self) -> set[tuple[int, int]]:
        """Edges as a set of (lo, hi) tuples (fresh copy, safe to mutate)."""
        return {(int(u), int(v)) for u, v in self.edge_index}

    def has_edge(self, u: int, v: int) -> bool:
        lo, hi = (u, v) if u < v else (v, u)
        idx = np.searchsorted(
            self.edge_index[:, 0] * (self.num_nodes + 1) + self.edge_index[:, 1],
            lo * (self.num_nodes + 1) + hi,
        )
        if idx >= self.num_edges:
            return False
        return bool(
            self.edge_index[idx, 0] == lo and self.edge_index[idx, 1] == hi
        )

    def degrees(self) -> np.ndarray:
        deg = np.zeros(self.num_nodes, dtype=np.int64)
        np.add.at(deg, self.edge_index[:, 0], 1)
        np.add.at(deg, self.edge_index[:, 1], 1)
        return deg

    def adjacency_lists(self) -> list[np.ndarray]:
        """Sorted neighbor array per node (cached on first use)."""
        if self._neighbor_cache is None:
            nbrs: list[list[int]] = [[] for _ in range(self.num_nodes)]
            for u, v in self.edge_index:
                nbrs[u].append(int(v))
                nbrs[v].append(int(u))
            self._neighbor_cache = [
                np.array(sorted(a), dtype=np.int64) for a in nbrs
            ]
        return self._neighbor_cache


@dataclass(frozen=True)
class EdgeEdit:
    """One symmetric edge edit: add (u, v) if ``add`` else remove it."""

    u: int
    v: int
    add: bool


def normalize_adjacency(graph: Graph) -> sp.csr_matrix:
    """Symmetrically normalized adjacency with self-loops.

    Returns S = D^{-1/2} (A + I) D^{-1/2} as float64 CSR, where D is the
    degree matrix of A + I.  S is symmetric; an edgeless graph gives the
    identity.
    """
    n = graph.num_nodes
    e = graph.edge_index
    rows = np.concatenate([e[:, 0], e[:, 1], np.arange(n)])
    cols = np.concatenate([e[:, 1], e[:, 0], np.arange(n)])
    vals = np.ones(rows.shape[0], dtype=np.float64)
    a_hat = sp.coo_matrix((vals, (rows, cols)), shape=(n, n)).tocsr()
    deg = np.asarray(a_hat.sum(axis=1)).ravel()
    inv_sqrt = 1.0 / np.sqrt(deg)
    scale = sp.diags(inv_sqrt)
    out = (scale @ a_hat @ scale).tocsr()
    out.sort_indices()
    return out


def largest_connected_component_with_map(graph: Graph) -> tuple[Graph, np.ndarray]:
    """Largest connected component plus the old-node-id map.

    Returns (subgraph, kept) where ``kept`` is the ascending array of
    original node ids; new node i corresponds to old node kept[i].  Among
    equally large components the one containing the smallest original node
    id wins.
    """
    n = graph.num_nodes
    if n == 0:
        return graph, np.zeros(0, dtype=np.int64)
    e = graph.edge_index
    adj = sp.coo_matrix(
        (np.ones(2 * e.shape[0]), (np.concatenate([e[:, 0], e[:, 1]]),
                                   np.concatenate([e[:, 1], e[:, 0]]))),
        shape=(n, n),
    ).tocsr()
    _, comp = connected_components(adj, directed=False)
    sizes = np.bincount(comp)
    best_size = sizes.max()
    candidates = np.flatnonzero(sizes == best_size)
    # tie-break: component whose minimum original node id is smallest
    first_node = np.array([np.flatnonzero(comp == c)[0] for c in candidates])
    label = candidates[np.argmin(first_node)]
    kept = np.flatnonzero(comp == label).astype(np.int64)
    remap = -np.ones(n, dtype=np.int64)
    remap[kept] = np.arange(kept.shape[0])
    mask = remap[e[:, 0]] >= 0
    new_edges = np.stack([remap[e[mask, 0]], remap[e[mask, 1]]], axis=1)
    sub = Graph(
        features=graph.features[kept].copy(),
        edge_index=new_edges,
        labels=graph.labels[kept].copy(),
        num_classes=graph.num_classes,
    )
    return sub, kept


def largest_connected_component(graph: Graph) -> Graph:
    sub, _ = largest_connected_component_with_map(graph)
    return sub


def sample_neighbor(graph: Graph, node: int, rng: np.random.Generator) -> int:
    """Uniform random neighbor of ``node``; an isolated node returns itself."""
    if node < 0 or node >= graph.num_nodes:
        raise GraphError(f"node {node} outside [0, {graph.num_nodes})")
    nbrs = graph.adjacency_lists()[node]
    if nbrs.size == 0:
        return int(node)
    return int(nbrs[rng.integers(0, nbrs.size)])


def sample_neighbors(
    graph: Graph, nodes: Sequence[int] | np.ndarray, rng: np.random.Generator
) -> np.ndarray:
    """Vectorized :func:`sample_neighbor` over a node array (one draw each)."""
    return np.array([sample_neighbor(graph, int(v), rng) for v in nodes],
                    dtype=np.int64)


def apply_edge_edits(graph: Graph, edits: Iterable[EdgeEdit]) -> Graph:
    """Apply symmetric edge edits, returning a new graph.

    Pure: the input graph is untouched.  Any illegal edit (self-loop,
    out-of-range node, adding a present edge, removing an absent one)
    raises GraphError naming the edit.
    """
    present = graph.edge_set()
    n = graph.num_nodes
    for k, edit in enumerate(edits):
        u, v = int(edit.u), int(edit.v)
        if u == v:
            raise GraphError(f"edit {k}: self-loop ({u}, {v}) is not allowed")
        if not (0 <= u < n and 0 <= v < n):
            raise GraphError(f"edit {k}: edge ({u}, {v}) outside [0, {n})")
        pair = (u, v) if u < v else (v, u)
        if edit.add:
            if pair in present:
                raise GraphError(f"edit {k}: cannot add existing edge {pair}")
            present.add(pair)
        else:
            if pair not in present:
                raise GraphError(f"edit {k}: cannot remove absent edge {pair}")
            present.remove(pair)
    new_edges = np.array(sorted(present), dtype=np.int64).reshape(-1, 2)
    return replace(graph, edge_index=new_edges)
