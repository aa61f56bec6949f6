"""Accuracy, k-means community detection and conductance."""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass

import numpy as np

from .errors import EmptySplitError
from .graph import Graph, NodeData

log = logging.getLogger(__name__)


def accuracy(predictions: np.ndarray, node_data: NodeData, split: str = "test") -> float:
    nodes = node_data.nodes(split)
    if len(nodes) == 0:
        raise EmptySplitError(f"split {split!r} is empty")
    return float(np.mean(np.asarray(predictions)[nodes] == node_data.labels[nodes]))


@dataclass
class CommunityAssignment:
    labels: np.ndarray
    objective_trace: list

    @property
    def n_communities(self) -> int:
        return int(self.labels.max()) + 1

    def to_tsv(self, path):
        with open(path, "w") as fh:
            for i, c in enumerate(self.labels):
                fh.write(f"{i}\t{c}\n")


def _sq_dists(x: np.ndarray, centers: np.ndarray) -> np.ndarray:
    d = (x * x).sum(1)[:, None] - 2 * x @ centers.T + (centers * centers).sum(1)[None, :]
    return np.maximum(d, 0.0)


def kmeans_plus_plus(x: np.ndarray, n_clusters: int, rng: np.random.Generator) -> np.ndarray:
    centers = [x[rng.integers(len(x))]]
    closest = _sq_dists(x, np.array(centers))[:, 0]
    for _ in range(1, n_clusters):
        total = closest.sum()
        idx = rng.integers(len(x)) if total <= 0 else rng.choice(len(x), p=closest / total)
        centers.append(x[idx])
        closest = np.minimum(closest, _sq_dists(x, x[idx][None, :])[:, 0])
    return np.array(centers)


def kmeans(embeddings: np.ndarray, n_clusters: int, seed: int = 0,
           max_iter: int = 300) -> CommunityAssignment:
    """Lloyd iterations from k-means++ seeds.

    An empty cluster is re-seeded at the point farthest from its current
    center.  The within-cluster sum of squares is checked to be
    non-increasing after every iteration.
    """
    if n_clusters < 2:
        raise ValueError("need at least 2 clusters")
    x = np.asarray(embeddings, dtype=np.float64)
    if not np.isfinite(x).all():
        raise ValueError("embeddings must be finite")
    rng = np.random.default_rng(seed)
    centers = kmeans_plus_plus(x, n_clusters, rng)
    d = _sq_dists(x, centers)
    assign = d.argmin(1)
    trace = [float(d[np.arange(len(x)), assign].sum())]
    for _ in range(max_iter):
        for c in range(n_clusters):
            members = assign == c
            if members.any():
                centers[c] = x[members].mean(0)
        for c in range(n_clusters):
            if not (assign == c).any():
                own = _sq_dists(x, centers)[np.arange(len(x)), assign]
                far = int(own.argmax())
                if own[far] <= 0:
                    continue
                centers[c] = x[far]
                assign[far] = c
        d = _sq_dists(x, centers)
        new = d.argmin(1)
        obj = float(d[np.arange(len(x)), new].sum())
        scale = max(1.0, trace[-1])
        assert obj <= trace[-1] + 1e-9 * scale, "k-means objective increased"
        trace.append(obj)
        if np.array_equal(new, assign):
            break
        assign = new
    _, labels = np.unique(assign, return_inverse=True)
    return CommunityAssignment(labels.astype(np.int64), trace)


@dataclass
class ConductanceResult:
    per_community: np.ndarray
    mean: float
    leaving: np.ndarray
    within: np.ndarray


def conductance(assignment, graph: Graph, textbook: bool = False) -> ConductanceResult:
    """Edges leaving each community over edges inside it (undirected counts).

    Communities with no internal edge get ``inf`` and are left out of the
    mean.  ``textbook=True`` switches to ``cut / min(vol(S), vol(rest))``.
    """
    labels = np.asarray(getattr(assignment, "labels", assignment), dtype=np.int64)
    comms = np.unique(labels)
    e = graph.undirected_edges()
    a, b = labels[e[:, 0]], labels[e[:, 1]]
    leaving = np.array([np.sum((a == c) ^ (b == c)) for c in comms], dtype=np.int64)
    within = np.array([np.sum((a == c) & (b == c)) for c in comms], dtype=np.int64)
    if textbook:
        vol = np.array([graph.degrees[labels == c].sum() for c in comms], dtype=np.float64)
        denom = np.minimum(vol, graph.directed_edge_count - vol)
        with np.errstate(divide="ignore", invalid="ignore"):
            values = np.where(denom > 0, leaving / np.where(denom > 0, denom, 1), 0.0)
        return ConductanceResult(values, float(values.mean()), leaving, within)
    with np.errstate(divide="ignore"):
        values = np.where(within > 0, leaving / np.maximum(within, 1), np.inf)
    finite = np.isfinite(values)
    if not finite.all():
        log.warning("%d communit(ies) without internal edges excluded from the mean",
                    int((~finite).sum()))
    mean = float(values[finite].mean()) if finite.any() else float("inf")
    return ConductanceResult(values, mean, leaving, within)


def random_balanced_partition(n: int, n_parts: int, rng: np.random.Generator) -> np.ndarray:
    return rng.permutation(np.arange(n) % n_parts)


def write_metrics_csv(path, rows: list[dict]):
    if not rows:
        return
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(rows[0]))
        w.writeheader()
        w.writerows(rows)
