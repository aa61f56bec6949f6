"""Structure loss: sampled implicit MF over edges with k negatives each."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .graph import Graph, NegSampler
from .nn import ModelParams, encode_backward, encode_batch, scatter_add

LOSS_AT_DOT_ONE = float(np.logaddexp(0.0, -1.0))    # -ln sigmoid(1)
LOSS_AT_DOT_MINUS_ONE = float(np.logaddexp(0.0, 1.0))  # -ln sigmoid(-1)


@dataclass
class EdgeBatch:
    src: np.ndarray
    dst: np.ndarray
    negatives: np.ndarray  # (batch, k)

    def __len__(self):
        return len(self.src)

    @property
    def k(self) -> int:
        return self.negatives.shape[1]

    def split(self, parts: int) -> list["EdgeBatch"]:
        """Cut into ``parts`` contiguous pieces (last pieces may be shorter)."""
        bounds = np.array_split(np.arange(len(self)), parts)
        return [EdgeBatch(self.src[b], self.dst[b], self.negatives[b]) for b in bounds]


def sample_edge_batch(edges: np.ndarray, sampler: NegSampler, k: int, batch_size: int,
                      rng: np.random.Generator, undirected: bool = False) -> EdgeBatch:
    """Uniform draw (with replacement) of directed edges plus k negatives each.

    ``edges`` is an (E, 2) array of directed edges.  With ``undirected`` it
    must hold each undirected edge once; every draw then contributes both
    orientations, so the batch holds ``2 * batch_size`` rows.
    """
    pick = edges[rng.integers(len(edges), size=batch_size)]
    src, dst = pick[:, 0], pick[:, 1]
    if undirected:
        src, dst = np.concatenate([src, dst]), np.concatenate([dst, src])
    negatives = sampler.draw(rng, size=(len(src), k)) if k else np.zeros((len(src), 0), np.int64)
    return EdgeBatch(src, dst, negatives)


def positive_term(vi, vj) -> float:
    """``-log sigmoid(v_i . v_j)``."""
    return float(np.logaddexp(0.0, -np.dot(vi, vj)))


def negative_term(vi, vj) -> float:
    """``-log sigmoid(-v_i . v_j')``."""
    return float(np.logaddexp(0.0, np.dot(vi, vj)))


def sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * np.asarray(x)))


def beta_weights(degrees: np.ndarray, i: np.ndarray, j: np.ndarray, variant: str) -> np.ndarray:
    """Convolution coefficient per pair.

    ``standard``: ``(1/d_i) sqrt((d_i + 1) / (d_j + 1))``;
    ``alternative``: ``1/d_i``.
    """
    di = degrees[i].astype(np.float64)
    if variant == "standard":
        return np.sqrt((di + 1.0) / (degrees[j] + 1.0)) / di
    if variant == "alternative":
        return 1.0 / di
    raise ValueError(f"unknown beta variant {variant!r}")


def structure_batch_loss(params: ModelParams, batch: EdgeBatch, features=None, *,
                         unit: bool = True, beta: str | None = None,
                         degrees: np.ndarray | None = None, denom: float | None = None,
                         observe=None):
    """Mean over edges of positive + k negative terms, and its gradients.

    ``denom`` overrides the batch length as normalizer; parameter-server
    workers use it so that partial gradients sum to the global-batch mean.
    ``beta`` switches on per-pair convolution weights (needs ``degrees``).
    """
    b, k = len(batch), batch.k
    denom = float(b if denom is None else denom)
    nodes = np.concatenate([batch.src, batch.dst, batch.negatives.ravel()])
    uniq, inv = np.unique(nodes, return_inverse=True)
    v, cache = encode_batch(params, uniq, features, unit=unit)
    if observe is not None:
        observe(v)
    ii, jj, nn = inv[:b], inv[b:2 * b], inv[2 * b:].reshape(b, k)
    vi, vj, vn = v[ii], v[jj], v[nn]

    pos = np.einsum("bd,bd->b", vi, vj)
    neg = np.einsum("bd,bkd->bk", vi, vn)
    wp = np.ones(b)
    wn = np.ones((b, k))
    if beta is not None:
        wp = beta_weights(degrees, batch.src, batch.dst, beta)
        wn = beta_weights(degrees, np.repeat(batch.src, k), batch.negatives.ravel(), beta).reshape(b, k)

    pos_terms = np.logaddexp(0.0, -pos)
    neg_terms = np.logaddexp(0.0, neg)
    if unit:
        lo, hi = LOSS_AT_DOT_ONE - 1e-9, LOSS_AT_DOT_MINUS_ONE + 1e-9
        terms = np.concatenate([pos_terms, neg_terms.ravel()])
        assert np.all((terms >= lo) & (terms <= hi)), "edge term outside unit-sphere bounds"
    loss = (np.sum(wp * pos_terms) + np.sum(wn * neg_terms)) / denom

    gpos = -wp * sigmoid(-pos) / denom
    gneg = wn * sigmoid(neg) / denom
    rows = np.concatenate([ii, jj, nn.ravel()])
    contrib = np.concatenate([
        gpos[:, None] * vj + np.einsum("bk,bkd->bd", gneg, vn),
        gpos[:, None] * vi,
        (gneg[:, :, None] * vi[:, None, :]).reshape(-1, v.shape[1]),
    ])
    dv = scatter_add(len(v), rows, contrib)
    return float(loss), encode_backward(params, cache, dv)


def exact_negative_expectation(vi: np.ndarray, reps: np.ndarray, probs: np.ndarray) -> float:
    """``sum_j' P(j') * negative_term(v_i, v_j')`` evaluated over every node."""
    return float(np.sum(probs * np.logaddexp(0.0, reps @ vi)))


def directed_edge_array(graph: Graph, undirected: bool = False) -> np.ndarray:
    return graph.undirected_edges() if undirected else graph.directed_edges()
