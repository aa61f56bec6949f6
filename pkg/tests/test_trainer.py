import math

import numpy as np
import pytest

from ucmf.datasets import planted_partition, two_cliques, two_cliques_data
from ucmf.errors import DivergenceError
from ucmf.graph import Graph, NodeData, normalize_rows
from ucmf.trainer import (
    CLASSIFY,
    STRUCTURE,
    TrainConfig,
    ablation_variant,
    embed_all,
    fit_probe,
    grid_search,
    regularize,
    schedule,
    steps_per_epoch,
    train,
)

S, C = STRUCTURE, CLASSIFY

# k = 1 on the toy graphs: with |G| = 26 and d ~ 3-4, the shifted target
# log(|G| / (k d_i d_j)) is already negative at k = 4, so k = 16 asks
# neighbors to be dissimilar and the toy result measures nothing useful.
TOY = dict(mode="featureless", dim=4, k=1, learning_rate=0.01, max_epochs=200)


def test_schedule_examples():
    assert schedule(2, 6) == [S, S, C, S, S, C]
    assert schedule(0, 3) == [C, C, C]
    assert schedule(15, 3, supervised=False) == [S, S, S]


def test_schedule_continues_across_epochs():
    full = schedule(3, 12)
    assert schedule(3, 5) + schedule(3, 7, start=5) == full


def test_steps_per_epoch():
    cfg = TrainConfig(b=15, batch_size=256)
    assert steps_per_epoch(cfg, 10556, 140) == 42 + 3
    assert steps_per_epoch(TrainConfig(variant="ucmf-c"), 10556, 140) == 42
    assert steps_per_epoch(TrainConfig(b=0, batch_size=64), 10556, 140) == 3


def test_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(mode="bogus")
    with pytest.raises(ValueError):
        TrainConfig(variant="x")
    with pytest.raises(ValueError):
        TrainConfig(l2_scope="encoder")
    with pytest.raises(ValueError):
        TrainConfig(batch_size=0)
    assert TrainConfig().resolve_dim(1433) == 143
    assert TrainConfig(mode="featureless").resolve_dim(0) == 128


def test_ablation_flags():
    base = TrainConfig()
    assert base.unit and base.supervised
    u = ablation_variant(base, "UCMF-U")
    assert not u.unit and u.supervised
    c = ablation_variant(base, "ucmf-c")
    assert c.unit and not c.supervised
    assert all(kind == S for kind in schedule(c.b, 50, c.supervised))


@pytest.mark.parametrize("seed", range(3))
@pytest.mark.parametrize("b", [1, 15])
def test_toy_two_cliques_perfect(seed, b):
    _, report = train(two_cliques(4), two_cliques_data(4), TrainConfig(seed=seed, b=b, **TOY))
    assert report.final["test_acc"] == 1.0
    assert len(report.epochs) <= 200


def test_same_seed_same_report():
    cfg = TrainConfig(seed=4, **dict(TOY, max_epochs=30))
    p1, r1 = train(two_cliques(4), two_cliques_data(4), cfg)
    p2, r2 = train(two_cliques(4), two_cliques_data(4), cfg)
    assert r1.identical(r2)
    assert p1.equals(p2)


def test_different_seed_different_run():
    a = train(two_cliques(4), two_cliques_data(4), TrainConfig(seed=0, **dict(TOY, max_epochs=3)))
    b = train(two_cliques(4), two_cliques_data(4), TrainConfig(seed=1, **dict(TOY, max_epochs=3)))
    assert not a[0].equals(b[0])


def test_huge_learning_rate_diverges():
    cfg = TrainConfig(**dict(TOY, learning_rate=1e3))
    with pytest.raises(DivergenceError):
        train(two_cliques(4), two_cliques_data(4), cfg)


def test_unit_norm_everywhere_during_training():
    worst = []

    def observe(v):
        worst.append(float(np.max(np.abs(np.linalg.norm(v, axis=1) - 1))))

    for variant in ("ucmf", "ucmf-c"):
        train(two_cliques(4), two_cliques_data(4),
              TrainConfig(variant=variant, **dict(TOY, max_epochs=40)), observer=observe)
    assert worst and max(worst) < 1e-6


def test_ucmf_u_representations_not_unit():
    norms = []
    train(two_cliques(4), two_cliques_data(4),
          TrainConfig(variant="ucmf-u", **dict(TOY, max_epochs=5)),
          observer=lambda v: norms.extend(np.linalg.norm(v, axis=1)))
    assert max(abs(n - 1) for n in norms) > 1e-3


def test_ucmf_c_has_no_classification_steps():
    _, report = train(two_cliques(4), two_cliques_data(4),
                      TrainConfig(variant="ucmf-c", **dict(TOY, max_epochs=5)))
    assert all(math.isnan(r.class_loss) for r in report.epochs)
    assert all(math.isnan(r.test_acc) for r in report.epochs)


def test_unsupervised_early_stops_on_structure_loss():
    _, report = train(two_cliques(4), two_cliques_data(4),
                      TrainConfig(mode="unsupervised", k=1, dim=4, patience=5, max_epochs=1000))
    best = report.epochs[report.best_epoch].structure_loss
    assert best == min(r.structure_loss for r in report.epochs)
    assert len(report.epochs) - 1 - report.best_epoch == 5


def test_probe_on_ucmf_c_embeddings():
    data = two_cliques_data(4)
    cfg = TrainConfig(variant="ucmf-c", **TOY)
    params, _ = train(two_cliques(4), data, cfg)
    _, metrics = fit_probe(params, data, cfg)
    assert metrics["test_acc"] == 1.0


def test_epoch_callback_sees_init_and_every_epoch():
    seen = []
    train(two_cliques(4), two_cliques_data(4), TrainConfig(**dict(TOY, max_epochs=4)),
          epoch_callback=lambda e, p: seen.append(e))
    assert seen == [-1, 0, 1, 2, 3]


def test_regularize_scope():
    from ucmf.nn import ModelParams
    p = ModelParams.init(3, 2, np.random.default_rng(0), n_features=4)
    grads = {"encoder_w": np.zeros_like(p.encoder_w), "out_w": np.zeros_like(p.out_w)}
    _, g = regularize(p, dict(grads), 0.1, "classifier")
    assert not np.any(g["encoder_w"]) and np.allclose(g["out_w"], 0.2 * p.out_w)
    _, g = regularize(p, dict(grads), 0.1, "all")
    assert np.allclose(g["encoder_w"], 0.2 * p.encoder_w)
    # blocks absent from the step stay absent
    _, g = regularize(p, {"encoder_b": np.zeros(3)}, 0.1, "all")
    assert set(g) == {"encoder_b"}


def _small_planted(seed=0):
    edges, x, y, split = planted_partition(300, 3, 4.0, 0.9, 60, 0.6, seed=seed,
                                           n_train_per_class=10, n_val=60, n_test=120)
    return Graph.from_edges(edges, 300), NodeData(normalize_rows(x), y, split)


def test_featureful_small_planted_beats_chance():
    g, d = _small_planted()
    _, report = train(g, d, TrainConfig(learning_rate=0.01, max_epochs=60, patience=20))
    assert report.final["test_acc"] > 0.6


def test_grid_search_keeps_best_val():
    g, d = _small_planted()
    cfg = TrainConfig(max_epochs=8, patience=8)
    _, report = grid_search(g, d, cfg, learning_rates=(0.001, 0.01))
    vals = {lr: train(g, d, TrainConfig(max_epochs=8, patience=8, learning_rate=lr))[1]
            for lr in (0.001, 0.01)}
    best_lr = max(vals, key=lambda lr: vals[lr].best_val_acc)
    assert report.learning_rate == best_lr
    assert report.final["grid"] == [0.001, 0.01]


def test_embed_all_shape():
    g, d = _small_planted()
    params, _ = train(g, d, TrainConfig(max_epochs=1))
    assert embed_all(params, d).shape == (300, 6)


def test_report_csv(tmp_path):
    _, report = train(two_cliques(4), two_cliques_data(4), TrainConfig(**dict(TOY, max_epochs=3)))
    report.to_csv(tmp_path / "r.csv")
    lines = (tmp_path / "r.csv").read_text().splitlines()
    assert lines[0] == "epoch,l_s,l_c,val_acc,test_acc,wall_ms"
    assert len(lines) == 4
