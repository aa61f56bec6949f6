"""Numerical checks of the GCN-to-MF simplification.

Everything here works on tiny graphs and exact quantities: the closed-form
factorization target, the per-edge stationarity derivative, a full-batch
fit of free embeddings, the neighbor-smoothing diagnostic and the
Euclidean/cosine identity for unit vectors.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp
from scipy.optimize import minimize

from .errors import DegenerateNormError, NonConvergence
from .graph import Graph
from .structure import beta_weights, sigmoid

BETA_VARIANTS = ("standard", "alternative")


@dataclass(frozen=True)
class SmoothingOperator:
    """Per-directed-edge coefficients ``beta_ij * A_ij`` (CSR order)."""

    variant: str
    rows: np.ndarray
    cols: np.ndarray
    coef: np.ndarray

    @classmethod
    def build(cls, graph: Graph, variant: str = "standard") -> "SmoothingOperator":
        e = graph.directed_edges()
        coef = beta_weights(graph.degrees, e[:, 0], e[:, 1], variant)
        return cls(variant, e[:, 0], e[:, 1], coef)

    def matrix(self, n: int) -> sp.csr_matrix:
        return sp.csr_matrix((self.coef, (self.rows, self.cols)), shape=(n, n))

    def apply(self, reps: np.ndarray) -> np.ndarray:
        """Weighted neighbor sums ``sum_j beta_ij A_ij v_j`` for every node."""
        return self.matrix(len(reps)) @ reps


@dataclass(frozen=True)
class FactorizationTarget:
    """Shifted log co-occurrence on observed edges; everything else masked."""

    n: int
    rows: np.ndarray
    cols: np.ndarray
    values: np.ndarray

    def dense(self) -> np.ndarray:
        out = np.full((self.n, self.n), np.nan)
        out[self.rows, self.cols] = self.values
        return out


def closed_form_target(graph: Graph, k: float) -> FactorizationTarget:
    """``M_ij = log(|G| A_ij / (k d_i d_j))`` on every directed edge."""
    if k < 1:
        raise ValueError("k must be >= 1")
    e = graph.directed_edges()
    d = graph.degrees.astype(np.float64)
    vals = np.log(graph.directed_edge_count / (k * d[e[:, 0]] * d[e[:, 1]]))
    return FactorizationTarget(graph.n_nodes, e[:, 0], e[:, 1], vals)


def edge_loss_derivative(dots: np.ndarray, graph: Graph, k: float,
                         variant: str = "standard") -> np.ndarray:
    """Derivative of the local edge loss w.r.t. its dot product, per directed edge.

    ``-beta * sigmoid(-x) + (k beta d_i d_j / |G|) * sigmoid(x)``
    """
    e = graph.directed_edges()
    d = graph.degrees.astype(np.float64)
    beta = beta_weights(graph.degrees, e[:, 0], e[:, 1], variant)
    neg_weight = k * d[e[:, 0]] * d[e[:, 1]] / graph.directed_edge_count
    dots = np.asarray(dots, dtype=np.float64)
    return beta * (-sigmoid(-dots) + neg_weight * sigmoid(dots))


def stationarity_residual(dots: np.ndarray, graph: Graph, k: float,
                          variant: str = "standard") -> float:
    """Largest absolute edge-loss derivative over all edges."""
    return float(np.max(np.abs(edge_loss_derivative(dots, graph, k, variant))))


def edge_dots(emb: np.ndarray, graph: Graph) -> np.ndarray:
    e = graph.directed_edges()
    return np.einsum("ij,ij->i", emb[e[:, 0]], emb[e[:, 1]])


def local_edge_loss(emb: np.ndarray, graph: Graph, k: float, beta: str | None = None):
    """Sum over directed edges of the local edge loss, plus its gradient.

    Each edge carries its own positive term and the share of the exact
    negative expectation that lands on the same pair.  Non-edges are masked.
    """
    e = graph.directed_edges()
    i, j = e[:, 0], e[:, 1]
    d = graph.degrees.astype(np.float64)
    w = np.ones(len(e)) if beta is None else beta_weights(graph.degrees, i, j, beta)
    neg_weight = k * d[i] * d[j] / graph.directed_edge_count
    x = np.einsum("ij,ij->i", emb[i], emb[j])
    loss = np.sum(w * (np.logaddexp(0.0, -x) + neg_weight * np.logaddexp(0.0, x)))
    gx = w * (-sigmoid(-x) + neg_weight * sigmoid(x))
    grad = np.zeros_like(emb)
    np.add.at(grad, i, gx[:, None] * emb[j])
    np.add.at(grad, j, gx[:, None] * emb[i])
    return float(loss), grad


def free_factorization_fit(graph: Graph, k: float, dim: int, seed: int = 0, *,
                           beta: str | None = None, tol: float = 1e-9,
                           max_iter: int = 20000) -> np.ndarray:
    """Unconstrained embeddings minimizing the masked exact-expectation loss.

    Full-batch quasi-Newton descent on the embedding matrix.  Raises
    ``NonConvergence`` if some edge derivative is still above ``sqrt(tol)``.
    """
    n = graph.n_nodes
    rng = np.random.default_rng(seed)
    x0 = rng.normal(scale=0.5, size=(n, dim))

    def fun(flat):
        loss, grad = local_edge_loss(flat.reshape(n, dim), graph, k, beta)
        return loss, grad.ravel()

    res = minimize(fun, x0.ravel(), jac=True, method="L-BFGS-B",
                   options={"maxiter": max_iter, "gtol": tol, "ftol": 1e-15, "maxcor": 30})
    emb = res.x.reshape(n, dim)
    resid = stationarity_residual(edge_dots(emb, graph), graph, k)
    if not np.isfinite(resid) or resid > np.sqrt(tol):
        raise NonConvergence(f"edge derivative {resid:.3g} after {res.nit} iterations")
    return emb


def avg_neighbor_cosine(emb: np.ndarray, graph: Graph,
                        operator: SmoothingOperator | str = "standard") -> float:
    """Mean over nodes of ``1 - cos(v_i, sum_j beta_ij A_ij v_j)``."""
    if isinstance(operator, str):
        operator = SmoothingOperator.build(graph, operator)
    agg = operator.apply(emb)
    agg_norm = np.linalg.norm(agg, axis=1)
    if (agg_norm < 1e-12).any():
        raise DegenerateNormError("weighted neighbor sum vanished")
    own = np.linalg.norm(emb, axis=1)
    if (own < 1e-12).any():
        raise DegenerateNormError("zero representation")
    cos = np.einsum("ij,ij->i", emb, agg) / (own * agg_norm)
    return float(np.mean(1.0 - cos))


def euclidean_distance(p, q) -> float:
    return float(np.linalg.norm(np.asarray(p) - np.asarray(q)))


def cosine_distance(p, q) -> float:
    p, q = np.asarray(p), np.asarray(q)
    return float(1.0 - p @ q / (np.linalg.norm(p) * np.linalg.norm(q)))


def euler_cosine_gap(p, q) -> float:
    """``|‖p - q‖ - sqrt(2 * cosine_distance(p, q))|`` for unit ``p``, ``q``."""
    return abs(euclidean_distance(p, q) - np.sqrt(max(2.0 * cosine_distance(p, q), 0.0)))


def joint_loss(alpha: float, class_loss: float, structure_loss: float) -> float:
    """Fixed-weight mix ``alpha * l_c + (1 - alpha) * l_s``."""
    return alpha * class_loss + (1.0 - alpha) * structure_loss
