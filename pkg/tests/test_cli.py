import csv
import json
import logging

import numpy as np
import pytest

from ucmf.cli import main, read_config_file, resolve_config, build_parser
from ucmf.datasets import planted_partition, two_cliques, two_cliques_data, write_dataset

TOY_FLAGS = ["--mode", "featureless", "--dim", "4", "--k", "1", "--lr", "0.01",
             "--max-epochs", "200"]


@pytest.fixture
def toy(tmp_path):
    g, d = two_cliques(4), two_cliques_data(4)
    write_dataset(tmp_path / "toy", g.undirected_edges(), None, d.labels, d.split)
    return tmp_path / "toy"


@pytest.fixture
def featured(tmp_path):
    edges, x, y, split = planted_partition(150, 3, 4.0, 0.9, 30, 0.6, seed=0,
                                           n_train_per_class=5, n_val=30, n_test=60)
    return write_dataset(tmp_path / "feat", edges, x, y, split)


def _data_flags(root, features=False):
    flags = ["--edges", str(root / "edges.txt"), "--labels", str(root / "labels.tsv"),
             "--split", str(root / "split.tsv")]
    if features:
        flags += ["--features", str(root / "features.tsv")]
    return flags


def _rows(path):
    with open(path) as fh:
        return list(csv.DictReader(fh))


def test_train_writes_artifacts(toy, tmp_path):
    out = tmp_path / "run"
    assert main(["train", *_data_flags(toy), *TOY_FLAGS, "--seed", "0", "--out", str(out)]) == 0
    assert (out / "model.npz").is_file()
    report = _rows(out / "report.csv")
    assert len(report) >= 1
    assert list(report[0]) == ["epoch", "l_s", "l_c", "val_acc", "test_acc", "wall_ms"]
    manifest = json.loads((out / "manifest.json").read_text())
    assert manifest["seed"] == 0 and manifest["config"]["k"] == 1
    assert len(manifest["data"]["edges"]["sha256"]) == 64


def test_featureful_train(featured, tmp_path):
    out = tmp_path / "run"
    rc = main(["train", *_data_flags(featured, True), "--seed", "1", "--max-epochs", "3",
               "--out", str(out)])
    assert rc == 0
    assert len(_rows(out / "report.csv")) == 3


def test_missing_edges_is_usage_error(toy, tmp_path, capsys):
    rc = main(["train", "--labels", str(toy / "labels.tsv"), "--seed", "0",
               "--out", str(tmp_path / "x")])
    assert rc == 2
    assert "usage" in capsys.readouterr().err


def test_seed_is_mandatory(toy, tmp_path):
    assert main(["train", *_data_flags(toy), "--out", str(tmp_path / "x")]) == 2


def test_featureful_without_features_is_usage_error(toy, tmp_path):
    assert main(["train", *_data_flags(toy), "--seed", "0", "--out", str(tmp_path / "x")]) == 2


def test_module_error_exit_one(tmp_path):
    bad = tmp_path / "edges.txt"
    bad.write_text("0 0\n")
    rc = main(["train", "--edges", str(bad), "--mode", "unsupervised", "--seed", "0",
               "--out", str(tmp_path / "x")])
    assert rc == 1


def test_ucmf_c_with_split_warns(toy, tmp_path, caplog):
    with caplog.at_level(logging.WARNING):
        rc = main(["train", *_data_flags(toy), *TOY_FLAGS, "--variant", "ucmf-c",
                   "--seed", "0", "--out", str(tmp_path / "c")])
    assert rc == 0
    assert "only for reporting" in caplog.text
    rows = _rows(tmp_path / "c" / "report.csv")
    assert all(r["l_c"] == "nan" for r in rows)


def test_workers_zero_is_usage_error(toy, tmp_path):
    rc = main(["train-dist", *_data_flags(toy), *TOY_FLAGS, "--workers", "0", "--seed", "0",
               "--out", str(tmp_path / "d")])
    assert rc == 2


def test_single_worker_matches_train(toy, tmp_path):
    args = [*_data_flags(toy), *TOY_FLAGS, "--seed", "5"]
    assert main(["train", *args, "--out", str(tmp_path / "a")]) == 0
    assert main(["train-dist", *args, "--workers", "1", "--out", str(tmp_path / "b")]) == 0
    a = {r["metric"]: r["value"] for r in _rows(tmp_path / "a" / "metrics.csv")}
    b = {r["metric"]: r["value"] for r in _rows(tmp_path / "b" / "metrics.csv")}
    for key in ("best_epoch", "val_acc", "test_acc"):
        assert a[key] == b[key]


def test_two_workers_report_traffic(toy, tmp_path):
    out = tmp_path / "d"
    assert main(["train-dist", *_data_flags(toy), *TOY_FLAGS, "--workers", "2", "--seed", "0",
                 "--max-epochs", "4", "--out", str(out)]) == 0
    row = _rows(out / "report.csv")[0]
    assert "rounds" in row and "bytes" in row and int(row["bytes"]) > 0


def test_eval_perfect_toy(toy, tmp_path):
    out = tmp_path / "run"
    main(["train", *_data_flags(toy), *TOY_FLAGS, "--seed", "0", "--out", str(out)])
    assert main(["eval", *_data_flags(toy), "--checkpoint", str(out / "model.npz"),
                 "--out", str(out / "acc.csv")]) == 0
    rows = {r["split"]: float(r["accuracy"]) for r in _rows(out / "acc.csv")}
    assert rows["test"] == 1.0


def test_eval_missing_checkpoint(toy, tmp_path):
    assert main(["eval", *_data_flags(toy), "--checkpoint", str(tmp_path / "no.npz"),
                 "--out", str(tmp_path / "a.csv")]) == 1


def test_communities_and_diagnose(toy, tmp_path):
    out = tmp_path / "c"
    assert main(["train", *_data_flags(toy), *TOY_FLAGS, "--variant", "ucmf-c", "--seed", "0",
                 "--save-epochs", "--out", str(out)]) == 0
    assert main(["communities", "--edges", str(toy / "edges.txt"), "--checkpoint",
                 str(out / "model.npz"), "--clusters", "2", "--out", str(out / "comm")]) == 0
    tsv = (out / "comm" / "communities.tsv").read_text().splitlines()
    assert len(tsv) == 8
    summary = _rows(out / "comm" / "summary.csv")
    assert [r["partition"] for r in summary] == ["kmeans", "random_balanced"]
    assert list(_rows(out / "comm" / "conductance.csv")[0]) == [
        "community", "leaving", "within", "conductance"]

    assert main(["diagnose", "--edges", str(toy / "edges.txt"), "--run", str(out),
                 "--out", str(out / "diag.csv")]) == 0
    diag = _rows(out / "diag.csv")
    assert list(diag[0]) == ["epoch", "avg_neighbor_cosine", "val_acc"]
    assert float(diag[-1]["avg_neighbor_cosine"]) < float(diag[0]["avg_neighbor_cosine"])


def test_diagnose_without_epochs_fails(toy, tmp_path):
    assert main(["diagnose", "--edges", str(toy / "edges.txt"), "--run", str(tmp_path),
                 "--out", str(tmp_path / "d.csv")]) == 1


def test_config_precedence(tmp_path):
    conf = tmp_path / "c.conf"
    conf.write_text("# comment\nk = 4\nb = 7\nlearning_rate = 0.005\nbeta = none\n")
    assert read_config_file(conf) == {"k": 4, "b": 7, "learning_rate": 0.005, "beta": None}
    parser = build_parser()
    args = parser.parse_args(["train", "--edges", "e", "--seed", "3", "--out", "o",
                              "--config", str(conf), "--k", "2"])
    cfg = resolve_config(args)
    assert (cfg.k, cfg.b, cfg.learning_rate, cfg.seed) == (2, 7, 0.005, 3)
    assert cfg.batch_size == 256


def test_bad_config_key_is_usage_error(toy, tmp_path):
    conf = tmp_path / "c.conf"
    conf.write_text("nonsense = 1\n")
    rc = main(["train", *_data_flags(toy), "--config", str(conf), "--seed", "0",
               "--out", str(tmp_path / "x")])
    assert rc == 2


def test_replay_reproduces_metrics(toy, tmp_path):
    out = tmp_path / "run"
    assert main(["train", *_data_flags(toy), *TOY_FLAGS, "--seed", "2", "--out", str(out)]) == 0
    again = tmp_path / "again"
    assert main(["replay", "--manifest", str(out / "manifest.json"), "--out", str(again)]) == 0
    assert (out / "metrics.csv").read_text() == (again / "metrics.csv").read_text()
    strip = lambda rows: [{k: v for k, v in r.items() if k != "wall_ms"} for r in rows]
    assert strip(_rows(out / "report.csv")) == strip(_rows(again / "report.csv"))
    ckpt_a = np.load(out / "model.npz")
    ckpt_b = np.load(again / "model.npz")
    assert all(np.array_equal(ckpt_a[k], ckpt_b[k]) for k in ckpt_a.files if k != "__header__")


def test_replay_detects_changed_data(toy, tmp_path):
    out = tmp_path / "run"
    main(["train", *_data_flags(toy), *TOY_FLAGS, "--max-epochs", "2", "--seed", "2",
          "--out", str(out)])
    with open(toy / "labels.tsv", "a") as fh:
        fh.write("\n")
    assert main(["replay", "--manifest", str(out / "manifest.json"),
                 "--out", str(tmp_path / "x")]) == 1


def test_prepare_synthetic(tmp_path):
    out = tmp_path / "syn"
    assert main(["prepare", "synthetic", "--nodes", "120", "--classes", "3", "--n-features",
                 "20", "--seed", "0", "--out", str(out)]) == 0
    assert (out / "features.tsv").is_file() and (out / "edges.txt").is_file()
