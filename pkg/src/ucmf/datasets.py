"""Toy graphs, a planted-partition generator and dataset file conversion."""

from __future__ import annotations

import pickle
from pathlib import Path

import numpy as np
import scipy.sparse as sp

from .graph import SPLIT_CODE, UNLABELED, Graph, NodeData


def clique_edges(nodes):
    nodes = list(nodes)
    return [(a, b) for i, a in enumerate(nodes) for b in nodes[i + 1:]]


def path_graph(n: int = 3) -> Graph:
    return Graph.from_edges([(i, i + 1) for i in range(n - 1)], n)


def triangle() -> Graph:
    return Graph.from_edges(clique_edges(range(3)), 3)


def cycle(n: int = 4) -> Graph:
    return Graph.from_edges([(i, (i + 1) % n) for i in range(n)], n)


def star(leaves: int = 3) -> Graph:
    return Graph.from_edges([(0, i) for i in range(1, leaves + 1)], leaves + 1)


def two_cliques(size: int = 4) -> Graph:
    """Two ``size``-cliques joined by a single bridge edge."""
    edges = clique_edges(range(size)) + clique_edges(range(size, 2 * size))
    edges.append((size - 1, size))
    return Graph.from_edges(edges, 2 * size)


def two_triangles() -> Graph:
    return two_cliques(3)


def two_cliques_data(size: int = 4, labeled=(0, None)) -> NodeData:
    """Labels = clique membership; one train node per clique, rest test.

    The default trains on node 0 and on the first node of the second clique.
    """
    n = 2 * size
    labels = np.repeat([0, 1], size)
    first, second = labeled
    second = size if second is None else second
    split = np.full(n, SPLIT_CODE["test"], dtype=np.int8)
    split[[first, second]] = SPLIT_CODE["train"]
    return NodeData(None, labels, split)


def planted_partition(n_nodes: int, n_classes: int, avg_degree: float, p_in: float,
                      n_features: int, feature_signal: float, seed: int,
                      n_train_per_class: int = 20, n_val: int = 500, n_test: int = 1000):
    """A sparse citation-like graph: homophilous edges and bag-of-words features.

    ``p_in`` is the fraction of edges that stay inside a class;
    ``feature_signal`` the fraction of a node's active words drawn from its
    class vocabulary.  Returns ``(edges, features, labels, split)``.
    """
    rng = np.random.default_rng(seed)
    labels = rng.integers(n_classes, size=n_nodes)
    by_class = [np.flatnonzero(labels == c) for c in range(n_classes)]
    n_edges = int(n_nodes * avg_degree / 2)
    src = rng.integers(n_nodes, size=n_edges)
    inside = rng.random(n_edges) < p_in
    dst = np.empty(n_edges, dtype=np.int64)
    for e in range(n_edges):
        if inside[e]:
            pool = by_class[labels[src[e]]]
            dst[e] = pool[rng.integers(len(pool))]
        else:
            dst[e] = rng.integers(n_nodes)
    edges = {(min(a, b), max(a, b)) for a, b in zip(src, dst) if a != b}
    # attach every still-isolated node to a random member of its own class
    touched = np.zeros(n_nodes, dtype=bool)
    for a, b in edges:
        touched[a] = touched[b] = True
    for i in np.flatnonzero(~touched):
        pool = by_class[labels[i]]
        j = i
        while j == i:
            j = pool[rng.integers(len(pool))] if len(pool) > 1 else rng.integers(n_nodes)
        edges.add((min(i, j), max(i, j)))
    edges = np.array(sorted(edges), dtype=np.int64)

    vocab = np.array_split(rng.permutation(n_features), n_classes)
    words = 18
    rows, cols = [], []
    for i in range(n_nodes):
        own = rng.random(words) < feature_signal
        picks = np.where(own, rng.choice(vocab[labels[i]], size=words),
                         rng.integers(n_features, size=words))
        picks = np.unique(picks)
        rows.extend([i] * len(picks))
        cols.extend(picks.tolist())
    features = sp.csr_matrix((np.ones(len(rows)), (rows, cols)), shape=(n_nodes, n_features))

    split = np.zeros(n_nodes, dtype=np.int8)
    perm = rng.permutation(n_nodes)
    train = np.concatenate([perm[labels[perm] == c][:n_train_per_class] for c in range(n_classes)])
    split[train] = SPLIT_CODE["train"]
    rest = perm[split[perm] == 0]
    split[rest[:n_val]] = SPLIT_CODE["val"]
    split[rest[n_val:n_val + n_test]] = SPLIT_CODE["test"]
    return edges, features, labels, split


def write_dataset(out_dir, edges, features, labels, split):
    """Write the edge / feature / label / split text files."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "edges.txt", "w") as fh:
        fh.write(f"# {int(len(labels))} nodes\n")
        for u, v in edges:
            fh.write(f"{u} {v}\n")
    if features is not None:
        dense = features.toarray() if sp.issparse(features) else np.asarray(features)
        np.savetxt(out / "features.tsv", dense, delimiter="\t", fmt="%.17g")
    with open(out / "labels.tsv", "w") as fh:
        for i, y in enumerate(labels):
            if y != UNLABELED:
                fh.write(f"{i}\t{int(y)}\n")
    names = {code: name for name, code in SPLIT_CODE.items()}
    with open(out / "split.tsv", "w") as fh:
        for i, s in enumerate(split):
            if s:
                fh.write(f"{i}\t{names[int(s)]}\n")
    return out


def _load_planetoid_part(raw, name, part):
    with open(Path(raw) / f"ind.{name}.{part}", "rb") as fh:
        return pickle.load(fh, encoding="latin1")


def convert_planetoid(raw_dir, name: str, out_dir, n_val: int = 500):
    """Turn the ``ind.<name>.*`` files of the standard split into our text layout.

    Train = first 20 per class (``y``), val = the next ``n_val``, test = the
    ``test.index`` nodes, following the usual transductive protocol.
    Self-loops and duplicate edges in the raw adjacency dict are dropped.
    """
    x, y, tx, ty, allx, ally, graph = (
        _load_planetoid_part(raw_dir, name, p) for p in ("x", "y", "tx", "ty", "allx", "ally", "graph"))
    test_idx = np.loadtxt(Path(raw_dir) / f"ind.{name}.test.index", dtype=np.int64)
    test_sorted = np.sort(test_idx)

    features = sp.vstack([sp.csr_matrix(allx), sp.csr_matrix(tx)]).tolil()
    features[test_idx, :] = features[test_sorted, :]
    onehot = np.vstack([ally, ty])
    onehot[test_idx, :] = onehot[test_sorted, :]
    n = features.shape[0]
    labels = np.where(onehot.sum(1) > 0, onehot.argmax(1), UNLABELED)

    split = np.zeros(n, dtype=np.int8)
    split[np.arange(len(y))] = SPLIT_CODE["train"]
    split[np.arange(len(y), min(len(y) + n_val, n))] = SPLIT_CODE["val"]
    split[test_idx] = SPLIT_CODE["test"]

    edges = set()
    for u, nbrs in graph.items():
        for v in nbrs:
            if u != v and u < n and v < n:
                edges.add((min(u, v), max(u, v)))
    edges = np.array(sorted(edges), dtype=np.int64)
    return write_dataset(out_dir, edges, features.tocsr(), labels, split)
