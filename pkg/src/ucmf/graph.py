"""Graph, node data and the degree-proportional negative sampler."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import scipy.sparse as sp

from .errors import (
    IsolatedNodeError,
    MissingLabelError,
    RangeError,
    SelfLoopError,
    ShapeError,
)

log = logging.getLogger(__name__)

UNLABELED = -1
SPLITS = ("none", "train", "val", "test")
SPLIT_CODE = {name: code for code, name in enumerate(SPLITS)}


@dataclass(frozen=True, eq=False)
class Graph:
    """Undirected simple graph stored as sorted CSR neighbor lists.

    ``directed_edge_count`` is the sum of degrees, i.e. every undirected
    edge is counted once per orientation.  That is the normalizer that makes
    ``d_i / |G|`` a probability distribution.
    """

    n_nodes: int
    indptr: np.ndarray
    indices: np.ndarray
    degrees: np.ndarray = field(init=False)
    directed_edge_count: int = field(init=False)

    def __post_init__(self):
        degrees = np.diff(self.indptr).astype(np.int64)
        object.__setattr__(self, "degrees", degrees)
        object.__setattr__(self, "directed_edge_count", int(degrees.sum()))
        self.indptr.setflags(write=False)
        self.indices.setflags(write=False)
        degrees.setflags(write=False)

    @classmethod
    def from_edges(cls, edges, n_nodes: int) -> "Graph":
        """Build a graph from undirected ``(u, v)`` pairs.

        Duplicate pairs (in either orientation) are dropped with a warning.
        """
        edges = np.asarray(edges, dtype=np.int64).reshape(-1, 2)
        if edges.size and (edges.min() < 0 or edges.max() >= n_nodes):
            bad = edges[(edges < 0).any(1) | (edges >= n_nodes).any(1)][0]
            raise RangeError(f"edge {tuple(bad)} out of range for n_nodes={n_nodes}")
        loops = edges[:, 0] == edges[:, 1]
        if loops.any():
            raise SelfLoopError(f"self-loop on node {edges[loops][0, 0]}")

        canon = np.sort(edges, axis=1)
        uniq = np.unique(canon, axis=0)
        if len(uniq) < len(canon):
            log.warning("dropped %d duplicate edge(s)", len(canon) - len(uniq))

        rows = np.concatenate([uniq[:, 0], uniq[:, 1]])
        cols = np.concatenate([uniq[:, 1], uniq[:, 0]])
        adj = sp.csr_matrix(
            (np.ones(len(rows), dtype=np.int8), (rows, cols)), shape=(n_nodes, n_nodes)
        )
        adj.sort_indices()
        graph = cls(n_nodes, adj.indptr.astype(np.int64), adj.indices.astype(np.int64))
        isolated = np.flatnonzero(graph.degrees == 0)
        if len(isolated):
            raise IsolatedNodeError(
                f"{len(isolated)} isolated node(s), first is {isolated[0]}"
            )
        return graph

    def neighbors(self, i: int) -> np.ndarray:
        return self.indices[self.indptr[i]:self.indptr[i + 1]]

    @property
    def n_edges(self) -> int:
        """Number of undirected edges."""
        return self.directed_edge_count // 2

    def directed_edges(self) -> np.ndarray:
        """All ``(i, j)`` with ``j`` in ``C_i``, in CSR order, shape (|G|, 2)."""
        src = np.repeat(np.arange(self.n_nodes), self.degrees)
        return np.stack([src, self.indices], axis=1)

    def undirected_edges(self) -> np.ndarray:
        e = self.directed_edges()
        return e[e[:, 0] < e[:, 1]]

    def adjacency(self) -> sp.csr_matrix:
        data = np.ones(len(self.indices))
        return sp.csr_matrix((data, self.indices, self.indptr), shape=(self.n_nodes,) * 2)

    def has_edge(self, i: int, j: int) -> bool:
        nb = self.neighbors(i)
        pos = np.searchsorted(nb, j)
        return bool(pos < len(nb) and nb[pos] == j)


def load_graph(edge_path, n_nodes: int) -> Graph:
    """Read a whitespace separated ``u v`` edge list; ``#`` lines are comments."""
    pairs = []
    with open(edge_path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.split()
            if len(parts) < 2:
                raise ShapeError(f"{edge_path}:{lineno}: expected 'u v', got {line!r}")
            pairs.append((int(parts[0]), int(parts[1])))
    return Graph.from_edges(np.array(pairs, dtype=np.int64).reshape(-1, 2), n_nodes)


def count_nodes(edge_path) -> int:
    """Largest node id in an edge file plus one."""
    top = -1
    with open(edge_path, encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if line and not line.startswith("#"):
                u, v = line.split()[:2]
                top = max(top, int(u), int(v))
    return top + 1


@dataclass(eq=False)
class NodeData:
    """Features, labels (``UNLABELED`` = -1) and split tags for every node."""

    features: np.ndarray | sp.csr_matrix | None
    labels: np.ndarray
    split: np.ndarray

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.int64)
        self.split = np.asarray(self.split, dtype=np.int8)
        n = len(self.labels)
        if len(self.split) != n:
            raise ShapeError(f"split has {len(self.split)} rows, labels have {n}")
        if self.features is not None and self.features.shape[0] != n:
            raise ShapeError(f"features have {self.features.shape[0]} rows, expected {n}")
        if self.split.min(initial=0) < 0 or self.split.max(initial=0) >= len(SPLITS):
            raise ShapeError("unknown split code")
        missing = np.flatnonzero((self.split == SPLIT_CODE["train"]) & (self.labels < 0))
        if len(missing):
            raise MissingLabelError(f"train node {missing[0]} has no label")

    @property
    def n_nodes(self) -> int:
        return len(self.labels)

    @property
    def n_features(self) -> int:
        return 0 if self.features is None else self.features.shape[1]

    @property
    def n_classes(self) -> int:
        return int(self.labels.max()) + 1

    def nodes(self, split: str) -> np.ndarray:
        return np.flatnonzero(self.split == SPLIT_CODE[split])

    def labeled_train_nodes(self) -> np.ndarray:
        return self.nodes("train")


def _read_pairs(path):
    out = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if line and not line.startswith("#"):
                a, b = line.split()[:2]
                out.append((int(a), b))
    return out


def normalize_rows(features):
    """Scale every row to unit L1 mass; all-zero rows are left alone."""
    if sp.issparse(features):
        sums = np.asarray(abs(features).sum(axis=1)).ravel()
        sums[sums == 0] = 1.0
        return sp.diags(1.0 / sums) @ features
    sums = np.abs(features).sum(axis=1, keepdims=True)
    sums[sums == 0] = 1.0
    return features / sums


def load_node_data(feature_path, label_path, split_path, graph: Graph,
                   normalize_features: bool = True) -> NodeData:
    """Load TSV features/labels/splits and validate them against ``graph``.

    ``feature_path`` may be None for featureless runs and ``label_path``
    None for label-free (unsupervised) runs.
    """
    n = graph.n_nodes
    features = None
    if feature_path is not None:
        features = np.loadtxt(feature_path, dtype=np.float64, delimiter=None, ndmin=2)
        if features.shape[0] != n:
            raise ShapeError(f"feature file has {features.shape[0]} rows for {n} nodes")
        if (features != 0).mean() < 0.1:
            features = sp.csr_matrix(features)
        if normalize_features:
            features = normalize_rows(features)

    labels = np.full(n, UNLABELED, dtype=np.int64)
    for node, cls in (_read_pairs(label_path) if label_path is not None else []):
        if not 0 <= node < n:
            raise RangeError(f"label for node {node} out of range")
        labels[node] = int(cls)
    present = np.unique(labels[labels >= 0])
    if len(present) and not np.array_equal(present, np.arange(len(present))):
        raise ShapeError(f"label ids are not contiguous from 0: {present.tolist()}")

    split = np.zeros(n, dtype=np.int8)
    if split_path is not None:
        for node, tag in _read_pairs(split_path):
            if not 0 <= node < n:
                raise RangeError(f"split entry for node {node} out of range")
            if tag not in SPLIT_CODE or tag == "none":
                raise ShapeError(f"unknown split tag {tag!r}")
            split[node] = SPLIT_CODE[tag]
    return NodeData(features, labels, split)


class NegSampler:
    """Draws node ids with probability ``d_i / |G|`` using an alias table."""

    def __init__(self, probs: np.ndarray):
        probs = np.asarray(probs, dtype=np.float64)
        self.probs = probs
        self.prob_table, self.alias = _alias_setup(probs)

    def draw(self, rng: np.random.Generator, size=None):
        n = len(self.probs)
        slot = rng.integers(n, size=size)
        keep = rng.random(size=size) < self.prob_table[slot]
        return np.where(keep, slot, self.alias[slot])


def _alias_setup(probs):
    n = len(probs)
    scaled = probs * n
    prob_table = np.ones(n)
    alias = np.arange(n)
    small = [i for i in range(n) if scaled[i] < 1.0]
    large = [i for i in range(n) if scaled[i] >= 1.0]
    while small and large:
        s = small.pop()
        g = large.pop()
        prob_table[s] = scaled[s]
        alias[s] = g
        scaled[g] -= 1.0 - scaled[s]
        if scaled[g] < 1.0:
            small.append(g)
        else:
            large.append(g)
    # leftovers are 1 up to rounding
    for i in small + large:
        prob_table[i] = 1.0
        alias[i] = i
    return prob_table, alias


def build_neg_sampler(graph: Graph) -> NegSampler:
    return NegSampler(graph.degrees / graph.directed_edge_count)


def sample_negative(sampler: NegSampler, rng: np.random.Generator) -> int:
    return int(sampler.draw(rng))
