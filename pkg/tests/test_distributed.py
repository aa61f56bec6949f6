import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import array_shapes, arrays

from ucmf.classification import classification_batch_loss
from ucmf.datasets import path_graph, planted_partition, two_cliques, two_cliques_data
from ucmf.distributed import (
    Channel,
    Kind,
    PsMessage,
    Server,
    decode_message,
    encode_message,
    make_workers,
    partition_random,
    run_sync_round,
    train_distributed,
    worker_batch_sizes,
)
from ucmf.errors import ShapeError, StallError
from ucmf.graph import Graph, NodeData, build_neg_sampler, normalize_rows
from ucmf.nn import ModelParams
from ucmf.structure import directed_edge_array, sample_edge_batch, structure_batch_loss
from ucmf.trainer import TrainConfig, init_params, train

TOY = dict(mode="featureless", dim=4, k=1, learning_rate=0.01, max_epochs=200)

payloads = st.dictionaries(
    st.text(st.characters(min_codepoint=97, max_codepoint=122), min_size=1, max_size=12),
    arrays(np.float64, array_shapes(min_dims=0, max_dims=3, max_side=4),
           elements=st.floats(allow_nan=False, width=64)),
    max_size=4)


@settings(max_examples=100, deadline=None)
@given(st.sampled_from(list(Kind)), st.integers(0, 2**40), payloads)
def test_wire_round_trip(kind, rnd, payload):
    msg = decode_message(encode_message(PsMessage(kind, rnd, payload)))
    assert msg.kind == kind and msg.round == rnd
    assert msg.payload.keys() == payload.keys()
    for k in payload:
        assert msg.payload[k].shape == payload[k].shape
        assert np.array_equal(msg.payload[k], payload[k])


def test_wire_rejects_bad_frames():
    frame = encode_message(PsMessage(Kind.PULL, 3, {"w": np.ones((2, 2))}))
    with pytest.raises(ShapeError):
        decode_message(frame[:-8])
    bad_version = bytearray(frame)
    bad_version[4] = 9
    with pytest.raises(ShapeError):
        decode_message(bytes(bad_version))


def test_channel_counts_and_round_order():
    ch = Channel()
    ch.send(PsMessage(Kind.PULL, 0))
    ch.send(PsMessage(Kind.PULL, 1))
    assert ch.messages == 2 and ch.bytes > 0
    assert ch.recv(0.1).round == 0
    with pytest.raises(ValueError):
        ch.send(PsMessage(Kind.PULL, 0))


def test_channel_timeout_is_stall():
    with pytest.raises(StallError):
        Channel().recv(0.01)


def test_partition_single_worker_gets_everything():
    g, d = two_cliques(4), two_cliques_data(4)
    plan = partition_random(g, d, 1, seed=0)
    assert len(plan.edges[0]) == g.directed_edge_count
    assert np.array_equal(plan.labeled[0], d.labeled_train_nodes())


def test_partition_deterministic_and_complete():
    g = path_graph(3)
    d = NodeData(None, [0, 1, 0], [1, 1, 3])
    a = partition_random(g, d, 2, seed=5)
    b = partition_random(g, d, 2, seed=5)
    for w in range(2):
        assert np.array_equal(a.edges[w], b.edges[w])
    allpairs = sorted(map(tuple, np.concatenate(a.edges).tolist()))
    assert allpairs == sorted(map(tuple, g.directed_edges().tolist()))
    with pytest.raises(ValueError):
        partition_random(g, d, 0, seed=0)


def test_partition_balance_binomial():
    rng = np.random.default_rng(0)
    n = 2000
    pairs = {(i, (i + 1) % n) if i + 1 < n else (0, n - 1) for i in range(n)}
    while len(pairs) < 5000:
        a, b = rng.integers(n, size=2)
        if a != b:
            pairs.add((min(a, b), max(a, b)))
    g = Graph.from_edges(sorted(pairs), n)
    assert g.directed_edge_count == 10_000
    plan = partition_random(g, NodeData(None, np.zeros(n), np.zeros(n)), 2, seed=1)
    # Binomial(10^4, 1/2): sigma = 50
    assert abs(len(plan.edges[0]) - 5000) <= 150


def test_worker_batch_sizes():
    assert worker_batch_sizes(256, 2) == [128, 128]
    assert worker_batch_sizes(5, 3) == [2, 2, 1]


def test_single_worker_bitwise_equals_centralized():
    g, d = two_cliques(4), two_cliques_data(4)
    cfg = TrainConfig(seed=3, **dict(TOY, max_epochs=60))
    p1, r1 = train(g, d, cfg)
    p2, r2 = train_distributed(g, d, cfg, 1)
    assert p1.equals(p2)
    assert r1.identical(r2)


def test_two_worker_halves_sum_to_central_gradient():
    g = two_cliques(4)
    rng = np.random.default_rng(0)
    params = ModelParams.init(4, 2, rng, n_nodes=8)
    batch = sample_edge_batch(directed_edge_array(g), build_neg_sampler(g), 3, 10, rng)
    _, central = structure_batch_loss(params, batch)
    halves = [structure_batch_loss(params, part, denom=len(batch))[1] for part in batch.split(2)]
    for name in central:
        assert np.allclose(halves[0][name] + halves[1][name], central[name], rtol=0, atol=1e-10)


def test_two_worker_halves_classification():
    d = two_cliques_data(4, labeled=(0, 5))
    rng = np.random.default_rng(1)
    params = ModelParams.init(4, 2, rng, n_nodes=8)
    batch = np.array([0, 5, 5, 0, 0, 5])
    _, central = classification_batch_loss(params, batch, d, training=False)
    parts = np.array_split(batch, 2)
    halves = [classification_batch_loss(params, p, d, training=False, denom=6)[1] for p in parts]
    for name in central:
        assert np.allclose(halves[0][name] + halves[1][name], central[name], rtol=0, atol=1e-10)


def test_server_aggregates_pushes_in_order():
    params = ModelParams.init(3, 2, np.random.default_rng(0), n_nodes=4)
    cfg = TrainConfig(optimizer="sgd", learning_rate=1.0, l2=0.0)
    server = Server(params.copy(), cfg)
    g1 = {"embeddings": np.full((4, 3), 0.25)}
    g2 = {"embeddings": np.full((4, 3), 0.5)}
    pushes = [decode_message(encode_message(PsMessage(Kind.PUSH_GRADIENTS, 0, dict(g)))) for g in (g1, g2)]
    server.aggregate(pushes)
    assert np.allclose(server.params.embeddings, params.embeddings - 0.75, atol=1e-15)


def test_malformed_push_shape_error():
    params = ModelParams.init(3, 2, np.random.default_rng(0), n_nodes=4)
    server = Server(params, TrainConfig())
    bad = PsMessage(Kind.PUSH_GRADIENTS, 0, {"embeddings": np.zeros((4, 2))})
    with pytest.raises(ShapeError):
        server.aggregate([bad])


def test_silent_worker_stalls_round():
    g, d = two_cliques(4), two_cliques_data(4)
    cfg = TrainConfig(**TOY)
    plan = partition_random(g, d, 2, seed=0)
    workers = make_workers(g, d, cfg, plan)
    server = Server(init_params(g, d, cfg), cfg)
    # threaded mode without any worker threads: nobody ever pulls
    with pytest.raises(StallError):
        run_sync_round(server, workers, timeout=0.05, threaded=True)


def test_threaded_equals_inline():
    g, d = two_cliques(4), two_cliques_data(4)
    cfg = TrainConfig(seed=2, **dict(TOY, max_epochs=20))
    p1, r1 = train_distributed(g, d, cfg, 2)
    p2, r2 = train_distributed(g, d, cfg, 2, threaded=True, timeout=10)
    assert p1.equals(p2)
    assert r1.identical(r2)


def test_two_workers_toy_perfect():
    _, report = train_distributed(two_cliques(4), two_cliques_data(4), TrainConfig(**TOY), 2)
    assert report.final["test_acc"] == 1.0
    assert report.final["rounds"] > 0 and report.final["bytes"] > 0


def test_report_has_traffic_columns(tmp_path):
    _, report = train_distributed(two_cliques(4), two_cliques_data(4),
                                  TrainConfig(**dict(TOY, max_epochs=3)), 2)
    report.to_csv(tmp_path / "r.csv")
    header = (tmp_path / "r.csv").read_text().splitlines()[0]
    assert header == "epoch,l_s,l_c,val_acc,test_acc,wall_ms,rounds,bytes"
    rounds = [r.rounds for r in report.epochs]
    assert rounds == sorted(rounds) and rounds[0] > 0


def test_async_staleness_close_to_sync():
    # tolerance of 2 points on the 3-seed mean; observed gaps were 0.7-1.3 points
    edges, x, y, split = planted_partition(600, 3, 4.0, 0.85, 90, 0.5, seed=0,
                                           n_train_per_class=10, n_val=150, n_test=300)
    g = Graph.from_edges(edges, 600)
    d = NodeData(normalize_rows(x), y, split)
    sync, stale = [], []
    for seed in range(3):
        cfg = TrainConfig(seed=seed, max_epochs=150, patience=30)
        sync.append(train_distributed(g, d, cfg, 2)[1].final["test_acc"])
        stale.append(train_distributed(g, d, cfg, 2, staleness=1)[1].final["test_acc"])
    assert abs(np.mean(sync) - np.mean(stale)) <= 0.02
