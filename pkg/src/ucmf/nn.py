"""Dense network kernel: encoder f1, classifier f2, unitization, optimizers.

Every forward function returns its output together with a cache; the
matching ``*_backward`` takes that cache plus the upstream gradient.
Gradients are plain ``dict[str, ndarray]`` keyed like ``ModelParams.named()``
and only contain the blocks a loss actually touches.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, fields
from pathlib import Path

import numpy as np
import scipy.sparse as sp

from .errors import DegenerateNormError, ShapeError

NORM_FLOOR = 1e-12
HIDDEN_UNITS = 128
WEIGHT_BLOCKS = ("encoder_w", "hidden_w", "out_w")
CHECKPOINT_VERSION = 1


@dataclass(eq=False)
class ModelParams:
    hidden_w: np.ndarray
    hidden_b: np.ndarray
    out_w: np.ndarray
    out_b: np.ndarray
    encoder_w: np.ndarray | None = None
    encoder_b: np.ndarray | None = None
    embeddings: np.ndarray | None = None

    @classmethod
    def init(cls, dim: int, n_classes: int, rng: np.random.Generator, *,
             n_features: int | None = None, n_nodes: int | None = None,
             hidden: int = HIDDEN_UNITS) -> "ModelParams":
        """Glorot-uniform weights, zero biases.

        Pass ``n_features`` for the feature encoder or ``n_nodes`` for a free
        embedding table (featureless mode).
        """
        if (n_features is None) == (n_nodes is None):
            raise ValueError("give exactly one of n_features / n_nodes")
        enc_w = enc_b = emb = None
        if n_features is not None:
            enc_w = glorot(rng, n_features, dim)
            enc_b = np.zeros(dim)
        else:
            emb = glorot(rng, n_nodes, dim)
        return cls(
            hidden_w=glorot(rng, dim, hidden),
            hidden_b=np.zeros(hidden),
            out_w=glorot(rng, hidden, n_classes),
            out_b=np.zeros(n_classes),
            encoder_w=enc_w,
            encoder_b=enc_b,
            embeddings=emb,
        )

    @property
    def featureless(self) -> bool:
        return self.embeddings is not None

    @property
    def dim(self) -> int:
        return self.hidden_w.shape[0]

    def named(self) -> dict[str, np.ndarray]:
        return {f.name: getattr(self, f.name) for f in fields(self)
                if getattr(self, f.name) is not None}

    def copy(self) -> "ModelParams":
        return ModelParams(**{k: v.copy() for k, v in self.named().items()})

    def all_finite(self) -> bool:
        return all(np.isfinite(a).all() for a in self.named().values())

    def equals(self, other: "ModelParams") -> bool:
        a, b = self.named(), other.named()
        return a.keys() == b.keys() and all(np.array_equal(a[k], b[k]) for k in a)


def glorot(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=(fan_in, fan_out))


def default_dim(n_features: int, ratio: float = 0.10) -> int:
    return max(2, int(round(ratio * n_features)))


# ---------------------------------------------------------------- unitization

def unitize(v: np.ndarray) -> np.ndarray:
    """Project ``v`` (or every row of a matrix) onto the unit sphere."""
    v = np.asarray(v, dtype=np.float64)
    norms = np.linalg.norm(v, axis=-1, keepdims=True)
    if (norms < NORM_FLOOR).any():
        raise DegenerateNormError(f"norm {norms.min():.3g} below {NORM_FLOOR}")
    return v / norms


def scatter_add(n_rows: int, idx: np.ndarray, vals: np.ndarray) -> np.ndarray:
    """``out[idx[r]] += vals[r]`` for every row ``r`` (fast ``np.add.at``)."""
    idx = np.asarray(idx).ravel()
    onehot = sp.csr_matrix((np.ones(len(idx)), (idx, np.arange(len(idx)))),
                           shape=(n_rows, len(idx)))
    return np.asarray(onehot @ vals.reshape(len(idx), -1)).reshape((n_rows,) + vals.shape[1:])


def unitize_backward(v: np.ndarray, norms: np.ndarray, dv: np.ndarray) -> np.ndarray:
    """Apply the Jacobian (I - v v^T) / ||h|| row-wise."""
    return (dv - v * np.sum(v * dv, axis=-1, keepdims=True)) / norms


# ---------------------------------------------------------------- encoder f1

def encode_batch(params: ModelParams, ids: np.ndarray, features=None, unit: bool = True):
    """Representations for ``ids``: unitized f1(x_i), or embedding rows.

    Returns ``(v, cache)``.
    """
    ids = np.asarray(ids, dtype=np.int64)
    if params.featureless:
        x = None
        h = params.embeddings[ids]
    else:
        if features is None:
            raise ShapeError("feature mode needs the feature matrix")
        x = features[ids]
        h = np.asarray(x @ params.encoder_w) + params.encoder_b
    if unit:
        norms = np.linalg.norm(h, axis=1, keepdims=True)
        if (norms < NORM_FLOOR).any():
            raise DegenerateNormError(f"representation norm {norms.min():.3g}")
        v = h / norms
    else:
        norms, v = None, h
    return v, {"ids": ids, "x": x, "v": v, "norms": norms}


def encode_backward(params: ModelParams, cache, dv: np.ndarray) -> dict[str, np.ndarray]:
    dh = dv if cache["norms"] is None else unitize_backward(cache["v"], cache["norms"], dv)
    if params.featureless:
        return {"embeddings": scatter_add(len(params.embeddings), cache["ids"], dh)}
    x = cache["x"]
    gw = x.T @ dh
    return {"encoder_w": np.asarray(gw), "encoder_b": dh.sum(axis=0)}


def encode(params: ModelParams, x_or_id, unit: bool = True) -> np.ndarray:
    """Single-node encode: a feature vector, or a node id in featureless mode."""
    if params.featureless:
        v, _ = encode_batch(params, np.array([int(x_or_id)]), unit=unit)
    else:
        x = np.atleast_2d(np.asarray(x_or_id, dtype=np.float64))
        v, _ = encode_batch(params, np.array([0]), x, unit=unit)
    return v[0]


# ---------------------------------------------------------------- classifier f2

def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def log_softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def classify_batch(params: ModelParams, v: np.ndarray, training: bool = False,
                   rng: np.random.Generator | None = None, dropout: float = 0.5):
    """Logits of the two-layer ReLU classifier; returns ``(logits, cache)``.

    Dropout hits the hidden layer only, and only when ``training``.
    """
    pre = v @ params.hidden_w + params.hidden_b
    hid = np.maximum(pre, 0.0)
    mask = None
    if training and dropout > 0:
        if rng is None:
            raise ValueError("training-mode dropout needs an rng")
        mask = (rng.random(hid.shape) >= dropout) / (1.0 - dropout)
        hid = hid * mask
    logits = hid @ params.out_w + params.out_b
    return logits, {"v": v, "pre": pre, "hid": hid, "mask": mask}


def classify_backward(params: ModelParams, cache, dlogits: np.ndarray):
    """Returns ``(grads, dv)``."""
    grads = {
        "out_w": cache["hid"].T @ dlogits,
        "out_b": dlogits.sum(axis=0),
    }
    dhid = dlogits @ params.out_w.T
    if cache["mask"] is not None:
        dhid = dhid * cache["mask"]
    dpre = dhid * (cache["pre"] > 0)
    grads["hidden_w"] = cache["v"].T @ dpre
    grads["hidden_b"] = dpre.sum(axis=0)
    return grads, dpre @ params.hidden_w.T


def classify(params: ModelParams, v: np.ndarray, training: bool = False,
             rng: np.random.Generator | None = None, dropout: float = 0.5) -> np.ndarray:
    logits, _ = classify_batch(params, np.atleast_2d(v), training, rng, dropout)
    return softmax(logits)[0]


# ---------------------------------------------------------------- regularization

def l2_penalty(params: ModelParams, lam: float, blocks=WEIGHT_BLOCKS):
    """``lam * sum ||W||^2`` over the listed weight blocks, and its gradient."""
    named = params.named()
    loss = 0.0
    grads = {}
    for name in blocks:
        if name in named:
            w = named[name]
            loss += lam * float(np.sum(w * w))
            grads[name] = 2.0 * lam * w
    return loss, grads


def add_grads(into: dict, other: dict, scale: float = 1.0) -> dict:
    for k, g in other.items():
        into[k] = into[k] + scale * g if k in into else scale * g
    return into


def check_grad_shapes(params: ModelParams, grads: dict):
    named = params.named()
    for k, g in grads.items():
        if k not in named or named[k].shape != np.shape(g):
            want = named[k].shape if k in named else None
            raise ShapeError(f"gradient {k!r} has shape {np.shape(g)}, expected {want}")


# ---------------------------------------------------------------- optimizers

class Adam:
    """Adam with one moment pair per parameter block.

    Blocks absent from a step's gradient dict are left untouched, including
    their bias-correction counters.
    """

    def __init__(self, lr: float, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.state: dict[str, list] = {}

    def step(self, params: ModelParams, grads: dict[str, np.ndarray]):
        for name, g in grads.items():
            w = getattr(params, name)
            if name not in self.state:
                self.state[name] = [np.zeros_like(w), np.zeros_like(w), 0]
            m, v, t = self.state[name]
            t += 1
            m *= self.beta1
            m += (1 - self.beta1) * g
            v *= self.beta2
            v += (1 - self.beta2) * np.square(g)
            denom = np.sqrt(v / (1 - self.beta2 ** t))
            denom += self.eps
            step = m * (self.lr / (1 - self.beta1 ** t))
            step /= denom
            w -= step
            self.state[name][2] = t

    def state_dict(self):
        return self.state


class SGD:
    def __init__(self, lr: float):
        self.lr = lr

    def step(self, params: ModelParams, grads: dict[str, np.ndarray]):
        for name, g in grads.items():
            getattr(params, name)[...] -= self.lr * g


def make_optimizer(name: str, lr: float):
    if name == "adam":
        return Adam(lr)
    if name == "sgd":
        return SGD(lr)
    raise ValueError(f"unknown optimizer {name!r}")


# ---------------------------------------------------------------- checkpoints

def save_checkpoint(path, params: ModelParams, meta: dict | None = None):
    """Write every block as float64 into an ``.npz`` with a version header."""
    arrays = {k: np.ascontiguousarray(v, dtype="<f8") for k, v in params.named().items()}
    header = {"version": CHECKPOINT_VERSION,
              "shapes": {k: list(v.shape) for k, v in arrays.items()},
              "meta": meta or {}}
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        np.savez(fh, __header__=np.array(json.dumps(header)), **arrays)


def load_checkpoint(path):
    """Returns ``(params, meta)``."""
    with np.load(path, allow_pickle=False) as data:
        header = json.loads(str(data["__header__"]))
        if header["version"] != CHECKPOINT_VERSION:
            raise ShapeError(f"unsupported checkpoint version {header['version']}")
        arrays = {k: data[k].astype(np.float64) for k in header["shapes"]}
    for k, shape in header["shapes"].items():
        if list(arrays[k].shape) != shape:
            raise ShapeError(f"checkpoint block {k} has shape {arrays[k].shape}")
    return ModelParams(**arrays), header["meta"]


def to_dense(x):
    return x.toarray() if sp.issparse(x) else np.asarray(x)
