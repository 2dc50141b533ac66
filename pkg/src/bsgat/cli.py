"""Command-line front end.

Exit status: 0 success, 1 internal or numerical failure, 2 user/config error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import asdict, replace
from pathlib import Path

import numpy as np

from . import __version__
from .config import CONFIG_ENV, CONFIG_KEYS, RunConfig, load_config, with_seed
from .engine import init_params, load_checkpoint, predict, save_checkpoint, train
from .engine.training import format_log_record
from .errors import BsgatError, ConfigError, DataError, NumericalError, UserError
from .eval_metrics import evaluate, export_embeddings, gini_coefficient
from .flow_model import LabelSpace, NormalizationStats, fit_normalizer, normalize
from .graph_builder import (
    build_graph,
    build_graph_bruteforce,
    degree_histogram,
    load_graph,
    save_graph,
)
from .ingestion import (
    SYNTH_FEATURES,
    class_counts,
    generate_synthetic,
    read_flow_csv,
    sample_by_class,
    split_indices,
    write_flow_csv,
)

log = logging.getLogger("bsgat")


def _keys_help(*sections: str) -> str:
    lines = ["config keys consumed (JSON file via --config or $%s):" % CONFIG_ENV]
    for s in sections:
        keys = ", ".join(CONFIG_KEYS[s])
        lines.append(f"  {s + '.' if s else 'top-level '}{{{keys}}}")
    return "\n".join(lines)


def _require(path: str | None, what: str) -> Path:
    if not path:
        raise ConfigError(f"no {what} path given (flag or paths.* config key)")
    return Path(path)


def _existing(path: str | None, what: str) -> Path:
    p = _require(path, what)
    if not p.is_file():
        raise UserError(f"{what} not found: {p}")
    return p


def _report_dir(path: str | None) -> Path | None:
    if not path:
        return None
    p = Path(path)
    p.mkdir(parents=True, exist_ok=True)
    return p


def _load_flows(cfg: RunConfig):
    return read_flow_csv(_existing(cfg.paths.input, "input CSV"), cfg.schema)


def _load_graph_for(cfg: RunConfig, n: int):
    graph = load_graph(_existing(cfg.paths.graph, "graph file"))
    if graph.n != n:
        raise DataError(f"graph has {graph.n} nodes but the dataset has {n} flows")
    return graph


# --------------------------------------------------------------------------
# subcommands


def cmd_synth(cfg: RunConfig, args) -> int:
    out = _require(cfg.paths.output, "output CSV")
    flows = generate_synthetic(cfg.synth)  # validates before anything is written
    write_flow_csv(out, flows, SYNTH_FEATURES)
    counts = class_counts(flows)
    print(f"wrote {len(flows)} flows to {out}")
    for name, c in counts.items():
        print(f"  {name}: {c}")
    return 0


def cmd_sample(cfg: RunConfig, args) -> int:
    out = _require(cfg.paths.output, "output CSV")
    flows, names = _load_flows(cfg)
    kept = sample_by_class(flows, cfg.sampling)
    write_flow_csv(out, kept, names)
    print(f"kept {len(kept)} of {len(flows)} flows -> {out}")
    for name, c in class_counts(kept).items():
        print(f"  {name}: {c}")
    return 0


def _degree_summary(graph) -> list[str]:
    deg = degree_histogram(graph)
    q = np.quantile(deg, [0.0, 0.1, 0.25, 0.5, 0.75, 0.9, 1.0])
    counts = graph.counts_by_class()
    lines = [
        f"nodes={graph.n}",
        f"edges={graph.num_edges} S={counts['S']} M={counts['M']} O={counts['O']}",
        "degree quantiles (0,10,25,50,75,90,100%): " + " ".join(f"{v:g}" for v in q),
    ]
    try:
        lines.append(f"gini={gini_coefficient(deg):.6f}")
    except DataError:
        lines.append("gini=undefined (no edges)")
    return lines


def _write_degree_report(graph, report_dir: Path) -> None:
    from .plotting import plot_lorenz

    deg = degree_histogram(graph)
    with open(report_dir / "degrees.csv", "w", encoding="utf-8") as fh:
        fh.write("rank,degree\n")
        for r, d in enumerate(deg):
            fh.write(f"{r},{d}\n")
    if deg.sum() > 0:
        plot_lorenz({"behavior graph": deg}, report_dir / "lorenz.png")


def cmd_build_graph(cfg: RunConfig, args) -> int:
    flows, _ = _load_flows(cfg)
    out = _require(cfg.paths.graph, "graph output")
    builder = build_graph_bruteforce if args.oracle else build_graph
    graph = builder(flows, cfg.graph)
    save_graph(graph, out)
    print(f"graph written to {out}")
    print("\n".join(_degree_summary(graph)))
    rd = _report_dir(cfg.paths.report_dir)
    if rd:
        _write_degree_report(graph, rd)
    return 0


def cmd_gini(cfg: RunConfig, args) -> int:
    graph = load_graph(_existing(cfg.paths.graph, "graph file"))
    print("\n".join(_degree_summary(graph)))
    rd = _report_dir(cfg.paths.report_dir)
    if rd:
        _write_degree_report(graph, rd)
    return 0


def _prepare(cfg: RunConfig):
    flows, _ = _load_flows(cfg)
    graph = _load_graph_for(cfg, len(flows))
    return flows, graph


def cmd_train(cfg: RunConfig, args) -> int:
    flows, graph = _prepare(cfg)
    ckpt = _require(cfg.paths.checkpoint, "checkpoint")
    tr, va, te = split_indices(flows, cfg.split)
    stats = fit_normalizer([flows[i] for i in tr], cfg.include_ports)
    X = normalize(flows, stats)
    space = LabelSpace.from_flows(flows, cfg.label_mode)
    y = space.encode(flows)
    model = init_params(X.shape[1], space.C, cfg.train)

    log_path = Path(cfg.paths.log) if cfg.paths.log else ckpt.with_suffix(".log.jsonl")
    with open(log_path, "w", encoding="utf-8") as fh:
        def on_epoch(rec):
            fh.write(format_log_record(rec) + "\n")
            if not args.quiet:
                print(format_log_record(rec), flush=True)

        result = train(model, graph, X, y, tr, va, cfg.train, on_epoch=on_epoch)

    best = result.best
    best.meta = {"best_epoch": result.best_epoch, "best_val_weighted_f1": result.best_val_f1}
    extra = {
        "classes": list(space.classes),
        "label_mode": space.mode,
        "include_ports": stats.include_ports,
        "normalizer": {"min": stats.minimum.tolist(), "max": stats.maximum.tolist()},
        "split": asdict(cfg.split),
        "split_sizes": [int(tr.size), int(va.size), int(te.size)],
        "train_config": asdict(cfg.train),
        "graph": {"nodes": graph.n, "lambda": graph.config.lam, "mu": graph.config.mu,
                  "prefix": graph.config.prefix_length},
        "seed": cfg.train.seed,
    }
    save_checkpoint(best, ckpt, extra)
    print(f"checkpoint written to {ckpt} (best epoch {result.best_epoch}, "
          f"val weighted F1 {result.best_val_f1:.4f}); log {log_path}")
    rd = _report_dir(cfg.paths.report_dir)
    if rd:
        from .plotting import plot_training

        plot_training(result.history, rd / "training.png")
    return 0


def _restore(cfg: RunConfig):
    ckpt = _existing(cfg.paths.checkpoint, "checkpoint")
    model, header = load_checkpoint(ckpt)
    extra = header.get("extra", {})
    try:
        space = LabelSpace(extra["label_mode"], tuple(extra["classes"]))
        stats = NormalizationStats(np.array(extra["normalizer"]["min"], dtype=np.float64),
                                   np.array(extra["normalizer"]["max"], dtype=np.float64),
                                   include_ports=extra["include_ports"])
    except KeyError as exc:
        raise DataError(f"{ckpt}: checkpoint lacks {exc}") from None
    flows, graph = _prepare(cfg)
    X = normalize(flows, stats)
    if X.shape[1] != model.in_dim:
        raise DataError(f"checkpoint expects {model.in_dim} features, dataset gives {X.shape[1]}")
    if space.C != model.num_classes:
        raise DataError("checkpoint class count does not match its label space")
    y = space.encode(flows)
    split = cfg.split
    if "split" in extra:
        s = extra["split"]
        split = replace(split, train=s["train"], val=s["val"], test=s["test"], seed=s["seed"])
    return model, space, flows, graph, X, y, split


def cmd_eval(cfg: RunConfig, args) -> int:
    from .plotting import plot_confusion

    model, space, flows, graph, X, y, split = _restore(cfg)
    parts = dict(zip(("train", "val", "test"), split_indices(flows, split)))
    pred, _ = predict(model, graph, X)
    nodes = parts[args.split]
    if nodes.size == 0:
        raise DataError(f"{args.split} split is empty")
    report = evaluate(pred[nodes], y[nodes], space.classes)
    deg = graph.degrees()
    report.gini = gini_coefficient(deg) if deg.sum() > 0 else None
    report.extra = {"split": args.split, "label_mode": space.mode}
    if args.split != "train" and parts["train"].size:
        train_f1 = evaluate(pred[parts["train"]], y[parts["train"]], space.classes).weighted_f1
        report.extra["train_weighted_f1"] = train_f1
        if train_f1 < report.weighted_f1:
            log.warning("training-split weighted F1 %.4f is below %s-split %.4f",
                        train_f1, args.split, report.weighted_f1)
    print(report.to_table(), end="")
    rd = _report_dir(cfg.paths.report_dir)
    if rd:
        (rd / "report.json").write_text(report.to_json(), encoding="utf-8")
        (rd / "report.txt").write_text(report.to_table(), encoding="utf-8")
        with open(rd / "per_class.csv", "w", encoding="utf-8", newline="") as fh:
            report.write_csv(fh)
        plot_confusion(report.confusion, space.classes, rd / "confusion.png",
                       title=f"Confusion matrix ({args.split})")
        print(f"report written to {rd}")
    return 0


def cmd_export_embeddings(cfg: RunConfig, args) -> int:
    out = _require(cfg.paths.embeddings, "embeddings output")
    model, space, flows, graph, X, y, _ = _restore(cfg)
    export_embeddings(model, graph, X, out, space, truth=y)
    print(f"wrote {graph.n} embeddings to {out}")
    return 0


# --------------------------------------------------------------------------
# argument parsing


def _common(p: argparse.ArgumentParser):
    p.add_argument("--config", help=f"JSON run config (default: ${CONFIG_ENV})")
    p.add_argument("--seed", type=int, help="global seed; overrides every seeded section")
    p.add_argument("--threads", type=int, help="BLAS thread count")
    p.add_argument("-v", "--verbose", action="store_true")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="bsgat", description=__doc__,
                                     formatter_class=argparse.RawDescriptionHelpFormatter)
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, func, help_, sections):
        p = sub.add_parser(name, help=help_, description=help_, epilog=_keys_help(*sections),
                           formatter_class=argparse.RawDescriptionHelpFormatter)
        _common(p)
        p.set_defaults(func=func)
        return p

    p = add("synth", cmd_synth, "generate a synthetic NF-v2 style CSV", ("paths", "synth", ""))
    p.add_argument("-o", "--output", help="paths.output")
    p.add_argument("--flows-per-class", type=int, help="synth.flows_per_class (default profiles)")

    p = add("sample", cmd_sample, "per-class subsampling of a flow CSV", ("paths", "schema", "sampling", ""))
    p.add_argument("-i", "--input", help="paths.input")
    p.add_argument("-o", "--output", help="paths.output")
    p.add_argument("--fraction", type=float, help="sampling.fraction")
    p.add_argument("--keep", action="append", metavar="CLASS", help="sampling.full_retention (repeatable)")

    p = add("build-graph", cmd_build_graph, "build the behavior-similarity graph",
            ("paths", "schema", "graph"))
    p.add_argument("-i", "--input", help="paths.input")
    p.add_argument("-g", "--graph", help="paths.graph (edge-list output)")
    p.add_argument("--report-dir", help="paths.report_dir (degrees.csv, lorenz.png)")
    p.add_argument("--prefix", type=int, help="graph.prefix_length")
    p.add_argument("--lambda", dest="lam", type=float, help="graph.lambda")
    p.add_argument("--mu", type=float, help="graph.mu")
    p.add_argument("--oracle", action="store_true", help="use the O(n^2) pairwise construction")

    p = add("gini", cmd_gini, "degree summary and Gini coefficient of a graph file", ("paths",))
    p.add_argument("-g", "--graph", help="paths.graph")
    p.add_argument("--report-dir", help="paths.report_dir (degrees.csv, lorenz.png)")

    def model_flags(p):
        p.add_argument("-i", "--input", help="paths.input")
        p.add_argument("-g", "--graph", help="paths.graph")
        p.add_argument("-c", "--checkpoint", help="paths.checkpoint")

    p = add("train", cmd_train, "train the attention network",
            ("paths", "schema", "split", "train", ""))
    model_flags(p)
    p.add_argument("--log", help="paths.log (JSON lines, one per epoch)")
    p.add_argument("--report-dir", help="paths.report_dir (training.png)")
    p.add_argument("--epochs", type=int, help="train.epochs")
    p.add_argument("--mode", choices=("eq5", "eq6", "plain"), help="train.mode")
    p.add_argument("--lr", type=float, help="train.learning_rate")
    p.add_argument("--hidden", type=int, help="train.hidden")
    p.add_argument("--layers", type=int, help="train.layers (0 = no-graph dense baseline)")
    p.add_argument("--heads", type=int, help="train.heads")
    p.add_argument("--dropout", type=float, help="train.dropout")
    p.add_argument("--batch-size", type=int, help="train.batch_size")
    p.add_argument("--label-mode", choices=("binary", "multiclass"), help="label_mode")
    p.add_argument("-q", "--quiet", action="store_true", help="do not echo the epoch log")

    p = add("eval", cmd_eval, "evaluate a checkpoint on one split", ("paths", "schema", ""))
    model_flags(p)
    p.add_argument("--report-dir", help="paths.report_dir (report.json/.txt, per_class.csv, confusion.png)")
    p.add_argument("--split", choices=("train", "val", "test"), default="test")

    p = add("export-embeddings", cmd_export_embeddings, "write final hidden-layer vectors to CSV",
            ("paths", "schema", ""))
    model_flags(p)
    p.add_argument("-o", "--output", dest="embeddings", help="paths.embeddings")
    return parser


_PATH_FLAGS = ("input", "output", "graph", "checkpoint", "log", "report_dir", "embeddings")
_TRAIN_FLAGS = {"epochs": "epochs", "mode": "mode", "lr": "learning_rate", "hidden": "hidden",
                "layers": "layers", "heads": "heads", "dropout": "dropout", "batch_size": "batch_size"}


def apply_overrides(cfg: RunConfig, args) -> RunConfig:
    """Flags win over the config file."""
    if args.seed is not None:
        cfg = with_seed(cfg, args.seed)
    paths = {k: getattr(args, k) for k in _PATH_FLAGS if getattr(args, k, None) is not None}
    if paths:
        cfg = replace(cfg, paths=replace(cfg.paths, **paths))
    g = {}
    if getattr(args, "prefix", None) is not None:
        g["prefix_length"] = args.prefix
    if getattr(args, "lam", None) is not None:
        g["lam"] = args.lam
    if getattr(args, "mu", None) is not None:
        g["mu"] = args.mu
    if g:
        cfg = replace(cfg, graph=replace(cfg.graph, **g))
    t = {dst: getattr(args, src) for src, dst in _TRAIN_FLAGS.items() if getattr(args, src, None) is not None}
    if t:
        cfg = replace(cfg, train=replace(cfg.train, **t))
    if getattr(args, "label_mode", None):
        cfg = replace(cfg, label_mode=args.label_mode)
    if getattr(args, "fraction", None) is not None:
        cfg = replace(cfg, sampling=replace(cfg.sampling, fraction=args.fraction))
    if getattr(args, "keep", None):
        cfg = replace(cfg, sampling=replace(cfg.sampling, full_retention=frozenset(args.keep)))
    if getattr(args, "flows_per_class", None) is not None:
        from .ingestion import default_profiles

        cfg = replace(cfg, synth=replace(cfg.synth, profiles=default_profiles(args.flows_per_class)))
    return cfg


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s: %(message)s")
    try:
        cfg = apply_overrides(load_config(args.config), args)
        if args.threads is not None:
            if args.threads <= 0:
                raise ConfigError("--threads must be positive")
            from threadpoolctl import threadpool_limits

            with threadpool_limits(limits=args.threads):
                return args.func(cfg, args)
        return args.func(cfg, args)
    except UserError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except NumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return 1
    except BsgatError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
