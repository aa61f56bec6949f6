"""Command-line entry point: ``ucmf <command> ...``.

Exit codes: 0 success, 1 runtime/module error, 2 bad flags.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import platform
import sys
from dataclasses import fields
from pathlib import Path

import numpy as np
import scipy

from . import __version__
from .analysis import avg_neighbor_cosine
from .datasets import convert_planetoid, planted_partition, write_dataset
from .distributed import train_distributed
from .errors import UCMFError
from .evaluation import conductance, kmeans, random_balanced_partition, write_metrics_csv
from .graph import count_nodes, load_graph, load_node_data
from .nn import load_checkpoint, save_checkpoint
from .trainer import (
    LEARNING_RATE_GRID,
    TrainConfig,
    config_to_dict,
    embed_all,
    fit_probe,
    grid_search,
    predict,
    split_accuracy,
    train,
)

log = logging.getLogger("ucmf")

MANIFEST_NAME = "manifest.json"
CHECKPOINT_NAME = "model.npz"
REPORT_NAME = "report.csv"
METRICS_NAME = "metrics.csv"
EPOCH_DIR = "epochs"

# flag name -> TrainConfig field
FLAG_FIELDS = {
    "mode": "mode", "variant": "variant", "k": "k", "b": "b", "lr": "learning_rate",
    "seed": "seed", "batch_size": "batch_size", "l2": "l2", "dropout": "dropout",
    "dim": "dim", "dim_ratio": "dim_ratio", "max_epochs": "max_epochs",
    "patience": "patience", "beta": "beta", "optimizer": "optimizer",
    "l2_scope": "l2_scope",
}


class UsageError(Exception):
    """Bad flag values detected after argparse (mapped to exit code 2)."""


# ---------------------------------------------------------------- config


def _coerce(name: str, raw: str):
    types = {f.name: f.type for f in fields(TrainConfig)}
    if name not in types:
        raise UsageError(f"unknown config key {name!r}")
    kind = str(types[name])
    raw = raw.strip()
    if raw.lower() in ("none", "null", ""):
        return None
    if kind.startswith("bool"):
        if raw.lower() not in ("true", "false", "1", "0"):
            raise UsageError(f"{name}: expected a boolean, got {raw!r}")
        return raw.lower() in ("true", "1")
    if kind.startswith("int"):
        return int(raw)
    if kind.startswith("float"):
        return float(raw)
    return raw


def read_config_file(path) -> dict:
    """Parse ``key = value`` lines; ``#`` starts a comment."""
    out = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise UsageError(f"{path}:{lineno}: expected 'key = value'")
            key, value = (s.strip() for s in line.split("=", 1))
            try:
                out[key] = _coerce(key, value)
            except ValueError as exc:
                raise UsageError(f"{path}:{lineno}: {exc}") from None
    return out


def resolve_config(args) -> TrainConfig:
    """Flags override the config file, which overrides the defaults."""
    values = read_config_file(args.config) if args.config else {}
    for flag, name in FLAG_FIELDS.items():
        value = getattr(args, flag, None)
        if value is not None:
            values[name] = value
    if getattr(args, "undirected_sampling", False):
        values["undirected_sampling"] = True
    try:
        return TrainConfig(**values)
    except (TypeError, ValueError) as exc:
        raise UsageError(str(exc)) from None


# ---------------------------------------------------------------- data + manifest


def sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def data_paths(args) -> dict:
    return {k: getattr(args, k, None) for k in ("edges", "features", "labels", "split")}


def load_data(paths: dict, normalize: bool = True):
    edges = paths["edges"]
    graph = load_graph(edges, count_nodes(edges))
    node_data = load_node_data(paths.get("features"), paths.get("labels"), paths.get("split"),
                               graph, normalize_features=normalize)
    return graph, node_data


def build_manifest(args, config: TrainConfig, command: str, out: Path, extra=None) -> dict:
    paths = data_paths(args)
    return {
        "command": command,
        "argv": list(getattr(args, "argv", []) or []),
        "seed": config.seed,
        "config": config_to_dict(config),
        "data": {k: ({"path": str(Path(v).resolve()), "sha256": sha256(v)} if v else None)
                 for k, v in paths.items()},
        "normalize_features": not args.raw_features,
        "grid": bool(args.grid),
        "outputs": {"checkpoint": str(out / CHECKPOINT_NAME), "report": str(out / REPORT_NAME),
                    "metrics": str(out / METRICS_NAME)},
        "extra": extra or {},
        "versions": {"ucmf": __version__, "python": platform.python_version(),
                     "numpy": np.__version__, "scipy": scipy.__version__},
    }


def write_json(path, obj):
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True, default=str)
        fh.write("\n")


def final_metrics_rows(params, node_data, config, report) -> list[dict]:
    rows = [{"metric": "best_epoch", "value": report.best_epoch},
            {"metric": "epochs_run", "value": len(report.epochs)},
            {"metric": "learning_rate", "value": repr(report.learning_rate)}]
    for key in ("val_acc", "test_acc", "probe_val_acc", "probe_test_acc",
                "rounds", "messages", "bytes"):
        if key in report.final:
            rows.append({"metric": key, "value": repr(report.final[key])})
    return rows


# ---------------------------------------------------------------- commands


def _run_training(args, distributed: bool) -> int:
    config = resolve_config(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    if config.variant == "ucmf-c" and args.split:
        log.warning("ucmf-c trains without labels; --split is used only for reporting")
    if config.mode == "featureful" and not args.features:
        raise UsageError("--mode featureful needs --features")

    extra = {}
    if distributed:
        extra = {"workers": args.workers, "partition_seed": args.partition_seed,
                 "async_staleness": args.async_staleness, "threaded": bool(args.threaded)}
    manifest = build_manifest(args, config, "train-dist" if distributed else "train", out, extra)
    write_json(out / MANIFEST_NAME, manifest)

    graph, node_data = load_data(data_paths(args), normalize=not args.raw_features)
    callback = None
    if args.save_epochs:
        epoch_dir = out / EPOCH_DIR
        epoch_dir.mkdir(exist_ok=True)

        def callback(epoch, params):
            save_checkpoint(epoch_dir / f"epoch_{epoch + 1:05d}.npz", params, {"epoch": epoch})

    if distributed:
        def trainer(g, d, cfg, **kw):
            return train_distributed(g, d, cfg, args.workers, partition_seed=args.partition_seed,
                                     staleness=args.async_staleness,
                                     threaded=bool(args.threaded), **kw)
    else:
        trainer = train

    if args.grid:
        params, report = grid_search(graph, node_data, config, LEARNING_RATE_GRID,
                                     trainer=trainer, epoch_callback=callback)
    else:
        params, report = trainer(graph, node_data, config, epoch_callback=callback)

    if not config.supervised and len(node_data.labeled_train_nodes()):
        params, probe = fit_probe(params, node_data, config)
        report.final.update({f"probe_{k}": v for k, v in probe.items()})

    save_checkpoint(out / CHECKPOINT_NAME, params,
                    {"config": config_to_dict(config), "best_epoch": report.best_epoch})
    report.to_csv(out / REPORT_NAME)
    write_metrics_csv(out / METRICS_NAME, final_metrics_rows(params, node_data, config, report))
    summary = ", ".join(f"{k}={v:.4f}" if isinstance(v, float) else f"{k}={v}"
                        for k, v in report.final.items() if not isinstance(v, list))
    print(f"done: {summary}")
    return 0


def cmd_train(args) -> int:
    return _run_training(args, distributed=False)


def cmd_train_dist(args) -> int:
    if args.workers < 1:
        raise UsageError("--workers must be at least 1")
    if args.async_staleness < 0:
        raise UsageError("--async-staleness must be non-negative")
    return _run_training(args, distributed=True)


def _load_model(args):
    ckpt = Path(args.checkpoint)
    if not ckpt.is_file():
        raise FileNotFoundError(f"checkpoint not found: {ckpt}")
    params, meta = load_checkpoint(ckpt)
    unit = meta.get("config", {}).get("variant", "ucmf") != "ucmf-u"
    return params, meta, unit


def cmd_eval(args) -> int:
    params, _, unit = _load_model(args)
    graph, node_data = load_data(data_paths(args), normalize=not args.raw_features)
    pred = predict(params, node_data, unit)
    rows = []
    for split in ("train", "val", "test"):
        if len(node_data.nodes(split)):
            acc = split_accuracy(pred, node_data, split)
            rows.append({"split": split, "n_nodes": len(node_data.nodes(split)),
                         "accuracy": repr(acc)})
            print(f"{split}: {acc:.4f}")
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    write_metrics_csv(args.out, rows)
    return 0


def cmd_communities(args) -> int:
    params, _, unit = _load_model(args)
    graph, node_data = load_data(data_paths(args), normalize=not args.raw_features)
    emb = embed_all(params, node_data, unit)
    assignment = kmeans(emb, args.clusters, seed=args.seed, max_iter=args.max_iter)
    result = conductance(assignment, graph, textbook=args.textbook)
    rng = np.random.default_rng(args.seed)
    baseline = conductance(random_balanced_partition(graph.n_nodes, args.clusters, rng), graph,
                           textbook=args.textbook)

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    assignment.to_tsv(out / "communities.tsv")
    write_metrics_csv(out / "conductance.csv", [
        {"community": c, "leaving": int(result.leaving[c]), "within": int(result.within[c]),
         "conductance": repr(float(result.per_community[c]))}
        for c in range(len(result.per_community))])
    write_metrics_csv(out / "summary.csv", [
        {"partition": "kmeans", "communities": assignment.n_communities,
         "mean_conductance": repr(result.mean)},
        {"partition": "random_balanced", "communities": args.clusters,
         "mean_conductance": repr(baseline.mean)}])
    print(f"mean conductance {result.mean:.4f} (random balanced {baseline.mean:.4f})")
    return 0


def cmd_diagnose(args) -> int:
    epoch_dir = Path(args.run) / EPOCH_DIR
    ckpts = sorted(epoch_dir.glob("epoch_*.npz"))
    if not ckpts:
        raise FileNotFoundError(f"no per-epoch checkpoints under {epoch_dir} "
                                "(train with --save-epochs)")
    graph, node_data = load_data(data_paths(args), normalize=not args.raw_features)
    rows = []
    for path in ckpts:
        params, meta = load_checkpoint(path)
        emb = embed_all(params, node_data, unit=args.unit)
        cos = avg_neighbor_cosine(emb, graph, args.operator)
        val = float("nan")
        if len(node_data.nodes("val")):
            val = split_accuracy(predict(params, node_data, args.unit), node_data, "val")
        rows.append({"epoch": meta["epoch"], "avg_neighbor_cosine": repr(cos),
                     "val_acc": repr(val)})
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    write_metrics_csv(args.out, rows)
    print(f"{len(rows)} checkpoints: cosine {rows[0]['avg_neighbor_cosine']} -> "
          f"{rows[-1]['avg_neighbor_cosine']}")
    return 0


def cmd_prepare(args) -> int:
    if args.source == "planetoid":
        out = convert_planetoid(args.raw, args.name, args.out)
    else:
        edges, x, y, split = planted_partition(args.nodes, args.classes, args.avg_degree,
                                               args.p_in, args.n_features, args.signal,
                                               seed=args.seed)
        out = write_dataset(args.out, edges, x, y, split)
    print(f"wrote {out}")
    return 0


def cmd_replay(args) -> int:
    """Re-run a training command from its manifest into a new output dir."""
    with open(args.manifest, encoding="utf-8") as fh:
        manifest = json.load(fh)
    data = manifest["data"]
    for key, entry in data.items():
        if entry and sha256(entry["path"]) != entry["sha256"]:
            raise UCMFError(f"{key} file changed since the run: {entry['path']}")
    config_file = Path(args.out) / "replay.conf"
    Path(args.out).mkdir(parents=True, exist_ok=True)
    with open(config_file, "w", encoding="utf-8") as fh:
        for key, value in manifest["config"].items():
            fh.write(f"{key} = {value}\n")
    argv = [manifest["command"], "--config", str(config_file), "--out", args.out,
            "--seed", str(manifest["seed"])]
    for key, entry in data.items():
        if entry:
            argv += [f"--{key}", entry["path"]]
    if not manifest.get("normalize_features", True):
        argv.append("--raw-features")
    if manifest.get("grid"):
        argv.append("--grid")
    extra = manifest.get("extra", {})
    if manifest["command"] == "train-dist":
        argv += ["--workers", str(extra["workers"]),
                 "--async-staleness", str(extra["async_staleness"])]
        if extra.get("partition_seed") is not None:
            argv += ["--partition-seed", str(extra["partition_seed"])]
        if extra.get("threaded"):
            argv.append("--threaded")
    return main(argv)


# ---------------------------------------------------------------- parser


def _data_flags(p, features=True, need_labels=True):
    p.add_argument("--edges", required=True, help="edge list, one 'u v' per line")
    if features:
        p.add_argument("--features", help="dense feature TSV, one row per node")
    p.add_argument("--labels", required=need_labels, help="'node_id<TAB>class' TSV")
    p.add_argument("--split", help="'node_id<TAB>train|val|test' TSV")
    p.add_argument("--raw-features", action="store_true", help="skip row normalization")


def _train_flags(p):
    _data_flags(p, need_labels=False)
    p.add_argument("--mode", choices=["featureful", "featureless", "unsupervised"])
    p.add_argument("--variant", choices=["ucmf", "ucmf-u", "ucmf-c"])
    p.add_argument("--k", type=int, help="negatives per edge")
    p.add_argument("--b", type=int, help="structure steps per classification step")
    p.add_argument("--lr", type=float)
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--config", help="'key = value' file (flags win over it)")
    p.add_argument("--batch-size", type=int)
    p.add_argument("--l2", type=float)
    p.add_argument("--l2-scope", choices=["classifier", "all"],
                   help="weight matrices that carry the L2 term")
    p.add_argument("--dropout", type=float)
    p.add_argument("--dim", type=int)
    p.add_argument("--dim-ratio", type=float)
    p.add_argument("--max-epochs", type=int)
    p.add_argument("--patience", type=int)
    p.add_argument("--beta", choices=["standard", "alternative"])
    p.add_argument("--optimizer", choices=["adam", "sgd"])
    p.add_argument("--undirected-sampling", action="store_true")
    p.add_argument("--grid", action="store_true", help="search lr over 0.001/0.005/0.01")
    p.add_argument("--save-epochs", action="store_true",
                   help="keep one checkpoint per epoch (needed by diagnose)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="ucmf", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=__version__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="centralized co-training")
    _train_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("train-dist", help="parameter-server co-training")
    _train_flags(p)
    p.add_argument("--workers", type=int, default=2)
    p.add_argument("--partition-seed", type=int)
    p.add_argument("--async-staleness", type=int, default=0)
    p.add_argument("--threaded", action="store_true", help="run each worker in a thread")
    p.set_defaults(func=cmd_train_dist)

    p = sub.add_parser("eval", help="accuracy of a checkpoint per split")
    _data_flags(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", required=True, help="accuracy CSV path")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("communities", help="k-means communities and conductance")
    _data_flags(p, need_labels=False)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--clusters", type=int, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--max-iter", type=int, default=300)
    p.add_argument("--textbook", action="store_true", help="cut/min-volume conductance")
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_communities)

    p = sub.add_parser("diagnose", help="neighbor cosine distance per saved epoch")
    _data_flags(p, need_labels=False)
    p.add_argument("--run", required=True, help="training output dir with epochs/")
    p.add_argument("--operator", choices=["standard", "alternative"], default="standard")
    p.add_argument("--no-unit", dest="unit", action="store_false")
    p.add_argument("--out", required=True, help="CSV path")
    p.set_defaults(func=cmd_diagnose)

    p = sub.add_parser("prepare", help="write a dataset in the text layout")
    psub = p.add_subparsers(dest="source", required=True)
    q = psub.add_parser("planetoid", help="convert ind.<name>.* files")
    q.add_argument("--raw", required=True)
    q.add_argument("--name", default="cora")
    q.add_argument("--out", required=True)
    q = psub.add_parser("synthetic", help="planted-partition graph with noisy features")
    q.add_argument("--nodes", type=int, default=2708)
    q.add_argument("--classes", type=int, default=7)
    q.add_argument("--avg-degree", type=float, default=3.9)
    q.add_argument("--p-in", type=float, default=0.8)
    q.add_argument("--n-features", type=int, default=1433)
    q.add_argument("--signal", type=float, default=0.25)
    q.add_argument("--seed", type=int, required=True)
    q.add_argument("--out", required=True)
    p.set_defaults(func=cmd_prepare)

    p = sub.add_parser("replay", help="re-run a training from its manifest")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_replay)
    return parser


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    args.argv = argv
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"ucmf: error: {exc}", file=sys.stderr)
        return 2
    except (UCMFError, OSError, ValueError, KeyError) as exc:
        print(f"ucmf: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
