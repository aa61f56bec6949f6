"""Simulated parameter-server training: one server, W workers, random partition.

Server and workers are sequential actors that only talk through per-worker
FIFO channels carrying encoded ``PsMessage`` frames.  In synchronous mode
every round is: Pull -> PullReply -> PushGradients -> StepBarrier, and the
server sums the pushed gradients in worker order before one optimizer step,
so the run is deterministic whether the actors execute inline or on
threads.
"""

from __future__ import annotations

import io
import queue
import struct
import threading
import time
from collections import deque
from dataclasses import dataclass, field
from enum import IntEnum

import numpy as np

from .errors import ShapeError, StallError
from .graph import Graph, NodeData, build_neg_sampler
from .nn import ModelParams, add_grads, check_grad_shapes, make_optimizer
from .structure import directed_edge_array
from .trainer import (
    CLASSIFY,
    STRUCTURE,
    BatchSource,
    EpochLoop,
    TrainConfig,
    TrainReport,
    data_rng,
    guard,
    init_params,
    regularize,
    schedule,
    steps_per_epoch,
    uses_features,
)

WIRE_VERSION = 1
_FRAME = struct.Struct("<I")
_HEADER = struct.Struct("<BBQI")


class Kind(IntEnum):
    PULL = 1
    PULL_REPLY = 2
    PUSH_GRADIENTS = 3
    STEP_BARRIER = 4


@dataclass
class PsMessage:
    kind: Kind
    round: int
    payload: dict[str, np.ndarray] = field(default_factory=dict)


def encode_message(msg: PsMessage) -> bytes:
    """Length-prefixed frame: version, kind, round, then named f64 arrays."""
    body = io.BytesIO()
    body.write(_HEADER.pack(WIRE_VERSION, int(msg.kind), msg.round, len(msg.payload)))
    for name, arr in msg.payload.items():
        arr = np.asarray(arr, dtype="<f8")  # keeps 0-d shapes, unlike ascontiguousarray
        raw = name.encode()
        body.write(struct.pack("<B", len(raw)))
        body.write(raw)
        body.write(struct.pack("<B", arr.ndim))
        body.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        body.write(arr.tobytes())
    data = body.getvalue()
    return _FRAME.pack(len(data)) + data


def decode_message(frame: bytes) -> PsMessage:
    (length,) = _FRAME.unpack_from(frame, 0)
    if length != len(frame) - _FRAME.size:
        raise ShapeError(f"frame length {length} does not match {len(frame) - _FRAME.size}")
    version, kind, rnd, count = _HEADER.unpack_from(frame, _FRAME.size)
    if version != WIRE_VERSION:
        raise ShapeError(f"unsupported wire version {version}")
    pos = _FRAME.size + _HEADER.size
    payload = {}
    for _ in range(count):
        (nlen,) = struct.unpack_from("<B", frame, pos)
        pos += 1
        name = frame[pos:pos + nlen].decode()
        pos += nlen
        (ndim,) = struct.unpack_from("<B", frame, pos)
        pos += 1
        shape = struct.unpack_from(f"<{ndim}Q", frame, pos)
        pos += 8 * ndim
        size = int(np.prod(shape)) if ndim else 1
        arr = np.frombuffer(frame, dtype="<f8", count=size, offset=pos).reshape(shape)
        pos += 8 * size
        payload[name] = arr.astype(np.float64)
    if pos != len(frame):
        raise ShapeError("trailing bytes in frame")
    return PsMessage(Kind(kind), rnd, payload)


class Channel:
    """One-directional FIFO of encoded frames with traffic counters."""

    def __init__(self):
        self._q = queue.Queue()
        self.messages = 0
        self.bytes = 0
        self._last_round = -1

    def send(self, msg: PsMessage):
        if msg.round < self._last_round:
            raise ValueError(f"round went backwards on channel: {msg.round} < {self._last_round}")
        self._last_round = msg.round
        frame = encode_message(msg)
        self.messages += 1
        self.bytes += len(frame)
        self._q.put(frame)

    def recv(self, timeout: float | None = None) -> PsMessage:
        try:
            return decode_message(self._q.get(timeout=timeout))
        except queue.Empty:
            raise StallError("channel receive timed out") from None

    def pending(self) -> bool:
        return not self._q.empty()


@dataclass
class PartitionPlan:
    n_workers: int
    edges: list[np.ndarray]
    labeled: list[np.ndarray]
    seed: int


def partition_random(graph: Graph, node_data: NodeData, n_workers: int, seed: int,
                     undirected: bool = False) -> PartitionPlan:
    """Each directed edge and each labeled train node goes to a uniform random worker."""
    if n_workers < 1:
        raise ValueError("need at least one worker")
    rng = np.random.default_rng(seed)
    edges = directed_edge_array(graph, undirected)
    labeled = node_data.labeled_train_nodes()
    e_owner = rng.integers(n_workers, size=len(edges))
    l_owner = rng.integers(n_workers, size=len(labeled))
    return PartitionPlan(
        n_workers,
        [edges[e_owner == w] for w in range(n_workers)],
        [labeled[l_owner == w] for w in range(n_workers)],
        seed,
    )


def worker_batch_sizes(batch_size: int, n_workers: int) -> list[int]:
    return [len(p) for p in np.array_split(np.arange(batch_size), n_workers)]


def params_from_payload(payload: dict[str, np.ndarray]) -> ModelParams:
    return ModelParams(**payload)


class Worker:
    """Holds one partition; computes gradients on the snapshot it pulled."""

    def __init__(self, wid: int, source: BatchSource, config: TrainConfig, batch_size: int):
        self.wid = wid
        self.source = source
        self.config = config
        self.batch_size = batch_size
        self.up = Channel()    # worker -> server
        self.down = Channel()  # server -> worker
        self.round = 0

    def request(self):
        self.up.send(PsMessage(Kind.PULL, self.round))

    def handle_reply(self, msg: PsMessage):
        if msg.kind != Kind.PULL_REPLY:
            raise ValueError(f"worker {self.wid} expected PullReply, got {msg.kind.name}")
        params = params_from_payload(msg.payload)
        kind = schedule(self.config.b, 1, self.config.supervised, start=msg.round)[0]
        loss, grads = self.source.grads(kind, params, self.batch_size, self.config.batch_size)
        payload = dict(grads)
        payload["__loss__"] = np.array(loss)
        self.up.send(PsMessage(Kind.PUSH_GRADIENTS, msg.round, payload))

    def handle_barrier(self, msg: PsMessage) -> bool:
        """Returns False when the server asked the worker to stop."""
        if msg.kind != Kind.STEP_BARRIER:
            raise ValueError(f"worker {self.wid} expected StepBarrier, got {msg.kind.name}")
        self.round = msg.round + 1
        return "__stop__" not in msg.payload

    def serve(self, timeout: float):
        """Thread body: loop rounds until told to stop."""
        while True:
            self.request()
            self.handle_reply(self.down.recv(timeout))
            if not self.handle_barrier(self.down.recv(timeout)):
                return


class Server:
    """Owns the parameters and the only optimizer state."""

    def __init__(self, params: ModelParams, config: TrainConfig, staleness: int = 0):
        self.params = params
        self.config = config
        self.optimizer = make_optimizer(config.optimizer, config.learning_rate)
        self.round = 0
        self.staleness = staleness
        self.history = deque(maxlen=staleness + 1)

    def snapshot(self) -> dict[str, np.ndarray]:
        if self.staleness == 0:
            return self.params.named()
        return self.history[0]

    def reply(self, worker: Worker, pull: PsMessage):
        if pull.kind != Kind.PULL:
            raise ValueError(f"server expected Pull, got {pull.kind.name}")
        worker.down.send(PsMessage(Kind.PULL_REPLY, self.round, self.snapshot()))

    def aggregate(self, pushes: list[PsMessage]):
        """Sum gradients in worker order, add L2 once, take one optimizer step."""
        total, loss = {}, 0.0
        for msg in pushes:
            if msg.kind != Kind.PUSH_GRADIENTS:
                raise ValueError(f"server expected PushGradients, got {msg.kind.name}")
            grads = {k: v for k, v in msg.payload.items() if k != "__loss__"}
            check_grad_shapes(self.params, grads)
            loss += float(msg.payload.get("__loss__", 0.0))
            add_grads(total, grads)
        reg, total = regularize(self.params, total, self.config.l2, self.config.l2_scope)
        guard(loss + reg, self.params, total, self.config.divergence_threshold)
        self.optimizer.step(self.params, total)
        guard(loss + reg, self.params, total, self.config.divergence_threshold)
        return loss

    def begin_round(self):
        if self.staleness:
            self.history.append({k: v.copy() for k, v in self.params.named().items()})

    def barrier(self, workers: list[Worker], stop: bool = False):
        payload = {"__stop__": np.array(1.0)} if stop else {}
        for w in workers:
            w.down.send(PsMessage(Kind.STEP_BARRIER, self.round, payload))
        self.round += 1


def run_sync_round(server: Server, workers: list[Worker], timeout: float = 60.0,
                   threaded: bool = False, stop: bool = False) -> float:
    """One bulk-synchronous round; returns the summed worker loss.

    Inline mode drives each worker's handlers directly; threaded mode
    assumes every worker is running ``Worker.serve`` on its own thread.
    """
    server.begin_round()
    if not threaded:
        for w in workers:
            w.request()
    for w in workers:
        server.reply(w, w.up.recv(timeout))
    if not threaded:
        for w in workers:
            w.handle_reply(w.down.recv(timeout))
    pushes = []
    for w in workers:
        msg = w.up.recv(timeout)
        if msg.round != server.round:
            raise StallError(f"worker {w.wid} pushed round {msg.round}, server at {server.round}")
        pushes.append(msg)
    loss = server.aggregate(pushes)
    server.barrier(workers, stop=stop)
    if not threaded:
        for w in workers:
            w.handle_barrier(w.down.recv(timeout))
    return loss


def make_workers(graph: Graph, node_data: NodeData, config: TrainConfig, plan: PartitionPlan,
                 observer=None) -> list[Worker]:
    features = node_data.features if uses_features(config, node_data) else None
    sampler = build_neg_sampler(graph)
    sizes = worker_batch_sizes(config.batch_size, plan.n_workers)
    workers = []
    for w in range(plan.n_workers):
        labeled = plan.labeled[w] if config.supervised else np.zeros(0, np.int64)
        source = BatchSource(plan.edges[w], labeled, sampler, node_data, config,
                             data_rng(config.seed, w), graph.degrees, features, observer)
        workers.append(Worker(w, source, config, sizes[w]))
    return workers


def traffic(workers: list[Worker]) -> tuple[int, int]:
    msgs = sum(w.up.messages + w.down.messages for w in workers)
    nbytes = sum(w.up.bytes + w.down.bytes for w in workers)
    return msgs, nbytes


def train_distributed(graph: Graph, node_data: NodeData, config: TrainConfig, n_workers: int,
                      *, partition_seed: int | None = None, staleness: int = 0,
                      threaded: bool = False, timeout: float = 60.0, observer=None,
                      epoch_callback=None, init: ModelParams | None = None):
    """Parameter-server co-training with the centralized early-stopping rule.

    Returns ``(best_params, TrainReport)``; the report carries per-epoch
    round and byte counters.  ``staleness > 0`` makes every worker compute
    on the snapshot from ``staleness`` rounds back (not part of the
    synchronous protocol; experimental).
    """
    t0 = time.perf_counter()
    seed = config.seed if partition_seed is None else partition_seed
    plan = partition_random(graph, node_data, n_workers, seed, config.undirected_sampling)
    params = init.copy() if init is not None else init_params(graph, node_data, config)
    server = Server(params, config, staleness)
    workers = make_workers(graph, node_data, config, plan, observer)
    labeled_total = sum(len(x) for x in plan.labeled)
    n_steps = steps_per_epoch(config, graph.directed_edge_count, labeled_total)

    threads = []
    if threaded:
        threads = [threading.Thread(target=w.serve, args=(timeout,), daemon=True) for w in workers]
        for t in threads:
            t.start()

    report = TrainReport(learning_rate=config.learning_rate, distributed=True)
    loop = EpochLoop(config, node_data, report, epoch_callback)
    loop.start(server.params)
    try:
        for epoch in range(config.max_epochs):
            kinds = schedule(config.b, n_steps, config.supervised, start=server.round)
            losses = {STRUCTURE: [], CLASSIFY: []}
            for kind in kinds:
                losses[kind].append(run_sync_round(server, workers, timeout, threaded))
            _, nbytes = traffic(workers)
            stop = loop.end_epoch(epoch, server.params, losses, t0, server.round, nbytes)
            if stop:
                break
    except BaseException:
        if threaded:
            try:
                _shutdown(server, workers, threads, 1.0)
            except Exception:
                pass
        raise
    if threaded:
        _shutdown(server, workers, threads, timeout)
    best = loop.finish(server.params)
    msgs, nbytes = traffic(workers)
    report.final.update({"rounds": server.round, "messages": msgs, "bytes": nbytes,
                         "workers": n_workers, "staleness": staleness})
    report.wall_ms = (time.perf_counter() - t0) * 1e3
    return best, report


def _shutdown(server: Server, workers: list[Worker], threads, timeout: float):
    """Workers block on their next Pull; answer it, then send the stop barrier."""
    for w in workers:
        w.up.recv(timeout)
        w.down.send(PsMessage(Kind.PULL_REPLY, server.round, server.params.named()))
    for w in workers:
        w.up.recv(timeout)
    for w in workers:
        w.down.send(PsMessage(Kind.STEP_BARRIER, server.round, {"__stop__": np.array(1.0)}))
    for t in threads:
        t.join(timeout)
