"""Alternating co-training loop (b structure batches, then 1 label batch)."""

from __future__ import annotations

import csv
import logging
import math
import time
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from .classification import classification_batch_loss, cross_entropy_grad, sample_label_batch
from .errors import DegenerateNormError, DivergenceError
from .graph import Graph, NegSampler, NodeData, build_neg_sampler
from .nn import (
    ModelParams,
    add_grads,
    classify_backward,
    classify_batch,
    default_dim,
    encode_batch,
    l2_penalty,
    make_optimizer,
)
from .structure import directed_edge_array, sample_edge_batch, structure_batch_loss

log = logging.getLogger(__name__)

STRUCTURE, CLASSIFY = "S", "C"
MODES = ("featureful", "featureless", "unsupervised")
VARIANTS = ("ucmf", "ucmf-u", "ucmf-c")
LEARNING_RATE_GRID = (0.001, 0.005, 0.01)
FEATURELESS_DIM = 128
# which weight matrices carry the L2 term (only when a step touches them).
# The encoder output is unitized, so its scale is invisible to every loss
# and decaying it only inflates the effective step size; "all" keeps it in.
L2_SCOPES = {"classifier": ("hidden_w", "out_w"), "all": ("encoder_w", "hidden_w", "out_w")}


@dataclass
class TrainConfig:
    k: int = 16
    b: int = 15
    batch_size: int = 256
    learning_rate: float = 0.01
    l2: float = 0.002
    dropout: float = 0.5
    dim_ratio: float | None = None
    dim: int | None = None
    hidden: int = 128
    max_epochs: int = 1000
    patience: int = 30
    seed: int = 0
    mode: str = "featureful"
    variant: str = "ucmf"
    alpha: float | None = None
    optimizer: str = "adam"
    undirected_sampling: bool = False
    beta: str | None = None
    divergence_threshold: float = 1e6
    l2_scope: str = "classifier"

    def __post_init__(self):
        self.validate()

    def validate(self):
        if self.b < 0 or self.k < 0:
            raise ValueError("b and k must be non-negative")
        if self.batch_size < 1:
            raise ValueError("batch_size must be positive")
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}")
        if self.variant not in VARIANTS:
            raise ValueError(f"variant must be one of {VARIANTS}")
        if self.dim_ratio is not None and not 0 < self.dim_ratio <= 1:
            raise ValueError("dim_ratio must be in (0, 1]")
        if self.mode == "featureless" and self.dim_ratio is not None:
            raise ValueError("featureless mode takes an explicit dim, not dim_ratio")
        if self.l2_scope not in L2_SCOPES:
            raise ValueError(f"l2_scope must be one of {tuple(L2_SCOPES)}")
        if self.alpha is not None and not 0 <= self.alpha <= 1:
            raise ValueError("alpha must be in [0, 1]")

    @property
    def unit(self) -> bool:
        return self.variant != "ucmf-u"

    @property
    def supervised(self) -> bool:
        return self.mode != "unsupervised" and self.variant != "ucmf-c"

    def resolve_dim(self, n_features: int) -> int:
        if self.dim is not None:
            return self.dim
        if n_features == 0:
            return FEATURELESS_DIM
        return default_dim(n_features, 0.10 if self.dim_ratio is None else self.dim_ratio)


def ablation_variant(config: TrainConfig, variant: str) -> TrainConfig:
    """UCMF (full), UCMF-U (no unitization) or UCMF-C (no co-training)."""
    return replace(config, variant=variant.lower())


def schedule(b: int, n_steps: int, supervised: bool = True, start: int = 0) -> list[str]:
    """Step kinds for global steps ``start .. start + n_steps - 1``."""
    if not supervised:
        return [STRUCTURE] * n_steps
    if b == 0:
        return [CLASSIFY] * n_steps
    return [CLASSIFY if (t % (b + 1)) == b else STRUCTURE for t in range(start, start + n_steps)]


def steps_per_epoch(config: TrainConfig, n_directed_edges: int, n_labeled: int) -> int:
    """Enough steps for the structure batches to touch every directed edge once in expectation."""
    if config.supervised and config.b == 0:
        return max(1, math.ceil(n_labeled / config.batch_size))
    n_s = max(1, math.ceil(n_directed_edges / config.batch_size))
    if not config.supervised:
        return n_s
    return n_s + math.ceil(n_s / config.b)


@dataclass
class EpochRecord:
    epoch: int
    structure_loss: float
    class_loss: float
    val_acc: float
    test_acc: float
    wall_ms: float = field(default=0.0, compare=False)
    rounds: int = 0
    bytes_transferred: int = 0


@dataclass
class TrainReport:
    epochs: list[EpochRecord] = field(default_factory=list)
    best_epoch: int = -1
    learning_rate: float = float("nan")
    final: dict = field(default_factory=dict)
    wall_ms: float = field(default=0.0, compare=False)
    distributed: bool = False

    def metric_rows(self, with_traffic: bool = False) -> list[tuple]:
        """Per-epoch metrics without wall-clock time (the reproducible part)."""
        rows = []
        for r in self.epochs:
            row = (r.epoch, r.structure_loss, r.class_loss, r.val_acc, r.test_acc)
            rows.append(row + (r.rounds, r.bytes_transferred) if with_traffic else row)
        return rows

    def identical(self, other: "TrainReport") -> bool:
        """Bitwise equality of every metric (NaN matches NaN), timing ignored."""
        def key(rep):
            rows = np.array(rep.metric_rows(), dtype=np.float64).tobytes()
            final = {k: v for k, v in rep.final.items()
                     if k not in ("rounds", "messages", "bytes", "workers", "staleness")}
            return rows, rep.best_epoch, repr(sorted(final.items()))
        return key(self) == key(other)

    @property
    def best_val_acc(self) -> float:
        return self.epochs[self.best_epoch].val_acc if self.epochs else float("nan")

    def to_csv(self, path):
        cols = ["epoch", "l_s", "l_c", "val_acc", "test_acc", "wall_ms"]
        if self.distributed:
            cols += ["rounds", "bytes"]
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(cols)
            for r in self.epochs:
                row = [r.epoch, repr(r.structure_loss), repr(r.class_loss),
                       repr(r.val_acc), repr(r.test_acc), f"{r.wall_ms:.1f}"]
                if self.distributed:
                    row += [r.rounds, r.bytes_transferred]
                w.writerow(row)


# ---------------------------------------------------------------- shared helpers

def init_rng(seed: int) -> np.random.Generator:
    return np.random.default_rng([seed, 0])


def data_rng(seed: int, worker: int = 0) -> np.random.Generator:
    return np.random.default_rng([seed, 1, worker])


def uses_features(config: TrainConfig, node_data: NodeData) -> bool:
    if config.mode == "featureless":
        return False
    if config.mode == "featureful" and node_data.features is None:
        raise ValueError("featureful mode needs node features")
    return node_data.features is not None


def init_params(graph: Graph, node_data: NodeData, config: TrainConfig,
                max_tries: int = 10) -> ModelParams:
    """Seeded init; re-rolls if any initial representation is degenerate."""
    rng = init_rng(config.seed)
    n_classes = max(node_data.n_classes, 2)
    feat = uses_features(config, node_data)
    dim = config.resolve_dim(node_data.n_features if feat else 0)
    for _ in range(max_tries):
        if feat:
            params = ModelParams.init(dim, n_classes, rng, n_features=node_data.n_features,
                                      hidden=config.hidden)
        else:
            params = ModelParams.init(dim, n_classes, rng, n_nodes=graph.n_nodes,
                                      hidden=config.hidden)
        try:
            embed_all(params, node_data, config.unit)
            return params
        except DegenerateNormError:
            log.warning("degenerate representation at init, re-rolling")
    raise DegenerateNormError("could not draw a non-degenerate initialization")


def embed_all(params: ModelParams, node_data: NodeData, unit: bool = True) -> np.ndarray:
    v, _ = encode_batch(params, np.arange(node_data.n_nodes), node_data.features, unit=unit)
    return v


def predict(params: ModelParams, node_data: NodeData, unit: bool = True) -> np.ndarray:
    logits, _ = classify_batch(params, embed_all(params, node_data, unit), training=False)
    return logits.argmax(axis=1)


def split_accuracy(pred: np.ndarray, node_data: NodeData, split: str) -> float:
    nodes = node_data.nodes(split)
    if len(nodes) == 0:
        return float("nan")
    return float(np.mean(pred[nodes] == node_data.labels[nodes]))


class BatchSource:
    """Owns one data shard (edges + labeled nodes) and its rng stream.

    The centralized trainer uses a single source over the whole graph; each
    parameter-server worker wraps its partition in one.
    """

    def __init__(self, edges: np.ndarray, labeled: np.ndarray, sampler: NegSampler,
                 node_data: NodeData, config: TrainConfig, rng: np.random.Generator,
                 degrees: np.ndarray, features=None, observer=None):
        self.edges = edges
        self.labeled = labeled
        self.sampler = sampler
        self.node_data = node_data
        self.config = config
        self.rng = rng
        self.degrees = degrees
        self.features = features
        self.observer = observer

    def grads(self, kind: str, params: ModelParams, size: int, denom: float):
        cfg = self.config
        if size == 0:
            return 0.0, {}
        if kind == STRUCTURE:
            if len(self.edges) == 0:
                return 0.0, {}
            batch = sample_edge_batch(self.edges, self.sampler, cfg.k, size, self.rng,
                                      undirected=cfg.undirected_sampling)
            if cfg.undirected_sampling:
                denom = 2 * denom
            return structure_batch_loss(params, batch, self.features, unit=cfg.unit,
                                        beta=cfg.beta, degrees=self.degrees, denom=denom,
                                        observe=self.observer)
        if len(self.labeled) == 0:
            return 0.0, {}
        batch = sample_label_batch(self.labeled, size, self.rng)
        return classification_batch_loss(params, batch, self.node_data, self.rng, unit=cfg.unit,
                                         dropout=cfg.dropout, denom=denom,
                                         observe=self.observer)


def regularize(params: ModelParams, grads: dict, l2: float, scope: str = "classifier"):
    """Adds ``l2 * ||W||^2`` for the in-scope weight blocks this step touched."""
    if l2 <= 0:
        return 0.0, grads
    loss, g = l2_penalty(params, l2, blocks=[k for k in grads if k in L2_SCOPES[scope]])
    return loss, add_grads(grads, g)


def guard(loss: float, params: ModelParams, touched, threshold: float):
    if not math.isfinite(loss) or abs(loss) > threshold:
        raise DivergenceError(f"loss diverged: {loss!r}")
    for name in touched:
        if not np.isfinite(getattr(params, name)).all():
            raise DivergenceError(f"non-finite values in {name}")


class EarlyStopper:
    """Tracks the best epoch; supervised runs maximize val accuracy, others minimize l_s."""

    def __init__(self, patience: int, maximize: bool):
        self.patience = patience
        self.maximize = maximize
        self.best = -math.inf if maximize else math.inf
        self.best_epoch = -1
        self.best_params = None

    def update(self, epoch: int, score: float, params: ModelParams) -> bool:
        """Returns True when training should stop."""
        better = score > self.best if self.maximize else score < self.best
        if better or self.best_epoch < 0:
            self.best, self.best_epoch = score, epoch
            self.best_params = params.copy()
        return epoch - self.best_epoch >= self.patience


# ---------------------------------------------------------------- centralized

def train(graph: Graph, node_data: NodeData, config: TrainConfig, *, observer=None,
          epoch_callback=None, init: ModelParams | None = None):
    """Centralized co-training.  Returns ``(best_params, TrainReport)``.

    ``observer(v)`` sees every representation matrix fed to a loss;
    ``epoch_callback(epoch, params)`` runs after each epoch (epoch -1 is the
    initialization).
    """
    t0 = time.perf_counter()
    features = node_data.features if uses_features(config, node_data) else None
    params = init.copy() if init is not None else init_params(graph, node_data, config)
    optimizer = make_optimizer(config.optimizer, config.learning_rate)
    edges = directed_edge_array(graph, config.undirected_sampling)
    labeled = node_data.labeled_train_nodes() if config.supervised else np.zeros(0, np.int64)
    source = BatchSource(edges, labeled, build_neg_sampler(graph), node_data, config,
                         data_rng(config.seed), graph.degrees, features, observer)
    n_steps = steps_per_epoch(config, graph.directed_edge_count, len(labeled))

    def apply(kind, step_params):
        loss, grads = source.grads(kind, step_params, config.batch_size, config.batch_size)
        reg, grads = regularize(step_params, grads, config.l2, config.l2_scope)
        guard(loss + reg, step_params, grads, config.divergence_threshold)
        optimizer.step(step_params, grads)
        guard(loss + reg, step_params, grads, config.divergence_threshold)
        return loss

    report = TrainReport(learning_rate=config.learning_rate)
    loop = EpochLoop(config, node_data, report, epoch_callback)
    loop.start(params)
    step = 0
    for epoch in range(config.max_epochs):
        kinds = schedule(config.b, n_steps, config.supervised, start=step)
        step += n_steps
        losses = {STRUCTURE: [], CLASSIFY: []}
        for kind in kinds:
            losses[kind].append(apply(kind, params))
        if loop.end_epoch(epoch, params, losses, t0):
            break
    best = loop.finish(params)
    report.wall_ms = (time.perf_counter() - t0) * 1e3
    return best, report


class EpochLoop:
    """Per-epoch bookkeeping shared by the centralized and PS trainers."""

    def __init__(self, config: TrainConfig, node_data: NodeData, report: TrainReport,
                 epoch_callback=None):
        self.config = config
        self.node_data = node_data
        self.report = report
        self.callback = epoch_callback
        self.stopper = EarlyStopper(config.patience, maximize=config.supervised)

    def start(self, params):
        if self.callback is not None:
            self.callback(-1, params)

    def end_epoch(self, epoch, params, losses, t0, rounds=0, nbytes=0) -> bool:
        cfg = self.config
        ls = float(np.mean(losses[STRUCTURE])) if losses[STRUCTURE] else float("nan")
        lc = float(np.mean(losses[CLASSIFY])) if losses[CLASSIFY] else float("nan")
        if cfg.supervised:
            pred = predict(params, self.node_data, cfg.unit)
            val = split_accuracy(pred, self.node_data, "val")
            test = split_accuracy(pred, self.node_data, "test")
        else:
            val = test = float("nan")
        self.report.epochs.append(EpochRecord(
            epoch, ls, lc, val, test, (time.perf_counter() - t0) * 1e3, rounds, nbytes))
        if self.callback is not None:
            self.callback(epoch, params)
        if cfg.supervised and len(self.node_data.nodes("val")) == 0:
            # nothing to select on: keep the latest parameters
            self.stopper.best_epoch, self.stopper.best_params = epoch, None
            return False
        return self.stopper.update(epoch, val if cfg.supervised else ls, params)

    def finish(self, params) -> ModelParams:
        best = self.stopper.best_params if self.stopper.best_params is not None else params
        self.report.best_epoch = max(self.stopper.best_epoch, 0)
        if self.report.epochs:
            rec = self.report.epochs[self.report.best_epoch]
            self.report.final = {"val_acc": rec.val_acc, "test_acc": rec.test_acc,
                                 "epochs_run": len(self.report.epochs)}
        return best


def grid_search(graph: Graph, node_data: NodeData, config: TrainConfig,
                learning_rates=LEARNING_RATE_GRID, trainer=None, **kwargs):
    """Train once per learning rate, keep the run with the best val accuracy."""
    trainer = trainer or train
    best = None
    for lr in learning_rates:
        params, report = trainer(graph, node_data, replace(config, learning_rate=lr), **kwargs)
        log.info("lr=%g best val acc %.4f", lr, report.best_val_acc)
        if best is None or report.best_val_acc > best[1].best_val_acc:
            best = (params, report)
    best[1].final["grid"] = list(learning_rates)
    return best


def fit_probe(params: ModelParams, node_data: NodeData, config: TrainConfig,
              epochs: int = 200, patience: int = 30):
    """Train only the f2 head on frozen representations (for UCMF-C reporting).

    Returns ``(params_with_head, {"val_acc", "test_acc"})``.
    """
    rng = data_rng(config.seed, worker=10_000)
    head = params.copy()
    opt = make_optimizer(config.optimizer, config.learning_rate)
    frozen = embed_all(params, node_data, config.unit)
    labeled = node_data.labeled_train_nodes()
    y = node_data.labels
    stopper = EarlyStopper(patience, maximize=True)
    for epoch in range(epochs):
        batch = sample_label_batch(labeled, config.batch_size, rng)
        logits, cache = classify_batch(head, frozen[batch], True, rng, config.dropout)
        _, dlogits = cross_entropy_grad(logits, y[batch], len(batch))
        grads, _ = classify_backward(head, cache, dlogits)
        _, grads = regularize(head, grads, config.l2, config.l2_scope)
        opt.step(head, grads)
        logits, _ = classify_batch(head, frozen, training=False)
        pred = logits.argmax(axis=1)
        val = split_accuracy(pred, node_data, "val")
        if not math.isfinite(val):
            continue  # no val nodes: run every epoch and keep the last head
        if stopper.update(epoch, val, head):
            break
    best = stopper.best_params if stopper.best_params is not None else head
    logits, _ = classify_batch(best, frozen, training=False)
    pred = logits.argmax(axis=1)
    return best, {"val_acc": split_accuracy(pred, node_data, "val"),
                  "test_acc": split_accuracy(pred, node_data, "test")}


def config_to_dict(config: TrainConfig) -> dict:
    return asdict(config)
