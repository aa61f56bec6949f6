"""Cross-entropy over labeled nodes."""

from __future__ import annotations

import numpy as np

from .errors import MissingLabelError
from .graph import NodeData
from .nn import (
    ModelParams,
    classify_backward,
    classify_batch,
    encode_backward,
    encode_batch,
    log_softmax,
    scatter_add,
    softmax,
)


def sample_label_batch(labeled: np.ndarray, batch_size: int, rng: np.random.Generator) -> np.ndarray:
    """Uniform draw with replacement from the labeled training nodes."""
    return labeled[rng.integers(len(labeled), size=batch_size)]


def cross_entropy_grad(logits: np.ndarray, labels: np.ndarray, denom: float):
    """Summed CE divided by ``denom`` and its gradient w.r.t. the logits."""
    logp = log_softmax(logits)
    rows = np.arange(len(labels))
    loss = -logp[rows, labels].sum() / denom
    dlogits = softmax(logits)
    dlogits[rows, labels] -= 1.0
    return float(loss), dlogits / denom


def classification_batch_loss(params: ModelParams, batch: np.ndarray, node_data: NodeData,
                              rng: np.random.Generator | None = None, *, unit: bool = True,
                              dropout: float = 0.5, training: bool = True,
                              denom: float | None = None, observe=None):
    """Mean cross-entropy over ``batch`` (node ids) and gradients for every block.

    Gradients reach the encoder (or the embedding table) through v_i.
    """
    batch = np.asarray(batch, dtype=np.int64)
    labels = node_data.labels[batch]
    if (labels < 0).any():
        raise MissingLabelError(f"node {batch[labels < 0][0]} has no label")
    denom = float(len(batch) if denom is None else denom)

    uniq, inv = np.unique(batch, return_inverse=True)
    v_u, enc_cache = encode_batch(params, uniq, node_data.features, unit=unit)
    if observe is not None:
        observe(v_u)
    v = v_u[inv]
    logits, cls_cache = classify_batch(params, v, training=training, rng=rng, dropout=dropout)
    loss, dlogits = cross_entropy_grad(logits, labels, denom)

    grads, dv = classify_backward(params, cls_cache, dlogits)
    grads.update(encode_backward(params, enc_cache, scatter_add(len(v_u), inv, dv)))
    return loss, grads
