"""Command-line interface.

Subcommands: search, derive, retrain, eval, space-size, render.  Artifacts
are written atomically into the out directory; every run also appends
human-oriented progress lines to run.log, the one artifact allowed to carry
timestamps.  Exit codes: 0 success, 1 numerical failure, 2 configuration or
usage errors.
"""

import argparse
import datetime
import json
import os
import sys

import numpy as np

from . import rng as rngmod
from .checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from .config import (build_datasets, parse_config, resolve_out_dir,
                     resolved_text, to_search_config, to_space_config,
                     to_train_config)
from .datasets import ChannelStats, apply_stats, compute_stats
from .errors import (ConfigError, FactnasError, FormatError, NumericalError,
                     UsageError, ValidationError)
from .evaluator import DiscreteNetwork, TrainConfig, evaluate, metrics_csv, retrain
from .genotype import (derive_genotype, export_dot, genotype_digest,
                       parse_genotype, serialize_genotype)
from .ioutil import atomic_write_text, ensure_dir
from .search import SearchEngine, history_csv, space_from_dict
from .space import arch_param_counts, cell_cardinality, edge_count, space_cardinality, super_operator_count


def _read_text(path: str) -> str:
    try:
        with open(path, "r", encoding="utf8") as fh:
            return fh.read()
    except OSError as exc:
        raise ConfigError(f"cannot read {path}: {exc}") from exc


def _make_logger(out_dir: str):
    path = os.path.join(ensure_dir(out_dir), "run.log")
    fh = open(path, "a", encoding="utf8")

    def log(msg: str) -> None:
        stamp = datetime.datetime.now().isoformat(timespec="seconds")
        fh.write(f"[{stamp}] {msg}\n")
        fh.flush()

    return log, fh


def _load_config(args):
    resolved = parse_config(_read_text(args.config))
    if getattr(args, "seed", None) is not None:
        resolved["run.seed"] = args.seed
    if getattr(args, "mode", None):
        resolved["search.mode"] = args.mode
        to_search_config(resolved)  # re-validate the override
    return resolved


def _beta_snapshot(resolved) -> dict:
    path = resolved["search.beta_from"]
    if not path:
        raise ConfigError("frozen-beta mode needs search.beta_from = <checkpoint>")
    cp = load_checkpoint(path)
    snap = {k.split("arch.", 1)[1]: v for k, v in cp.arrays.items()
            if k.startswith("arch.beta_")}
    if not snap:
        raise ConfigError(f"{path} holds no beta banks to freeze")
    return snap


def cmd_search(args) -> int:
    resolved = _load_config(args)
    out = ensure_dir(resolve_out_dir(resolved, args.out))
    log, fh = _make_logger(out)
    try:
        space = to_space_config(resolved)
        cfg = to_search_config(resolved)
        pool, _ = build_datasets(resolved)
        stats = compute_stats(pool)
        pool = apply_stats(pool, stats)
        snapshot = _beta_snapshot(resolved) if cfg.mode == "frozen-beta" else None
        log(f"search start: mode={cfg.mode} seed={cfg.seed} "
            f"data={pool.name} n={len(pool)}")
        engine = SearchEngine(space, cfg, pool, beta_snapshot=snapshot,
                              config_text=resolved_text(resolved))
        result = engine.run(checkpoint_path=os.path.join(out, "checkpoint.fnas"),
                            log=log)
        text = serialize_genotype(result.genotype)
        atomic_write_text(os.path.join(out, "genotype.txt"), text)
        atomic_write_text(os.path.join(out, "history.csv"),
                          history_csv(result.history))
        atomic_write_text(os.path.join(out, "cells.dot"), export_dot(result.genotype))
        atomic_write_text(os.path.join(out, "config.resolved"),
                          resolved_text(resolved))
        log(f"search done: genotype={genotype_digest(result.genotype)}")
        print(f"genotype {genotype_digest(result.genotype)}")
        print(text, end="")
        print(f"artifacts in {out}")
        return 0
    finally:
        fh.close()


def cmd_derive(args) -> int:
    cp = load_checkpoint(args.checkpoint)
    if cp.meta.get("kind") != "search":
        raise ConfigError(f"{args.checkpoint} is not a search checkpoint")
    space = space_from_dict(cp.meta["space"])
    arrays = {k.split("arch.", 1)[1]: v for k, v in cp.arrays.items()
              if k.startswith("arch.")}
    fixed = cp.meta.get("search_config", {}).get("fixed_activation")
    g = derive_genotype(arrays, space, fixed_activation=fixed)
    text = serialize_genotype(g)
    out = ensure_dir(args.out or os.path.dirname(os.path.abspath(args.checkpoint)))
    atomic_write_text(os.path.join(out, "genotype.txt"), text)
    print(text, end="")
    return 0


def _model_checkpoint(net, stats, resolved, genotype_text, cfg, classes,
                      in_channels, image_size) -> Checkpoint:
    arrays = {}
    for name, p in net.named_parameters():
        arrays[f"net.{name}"] = p.data
    for name, buf in net.named_buffers():
        arrays[f"buf.{name}"] = buf
    arrays["stats.mean"] = stats.mean
    arrays["stats.std"] = stats.std
    meta = {
        "kind": "model",
        "genotype_text": genotype_text,
        "train_config": {k: (list(v) if isinstance(v, tuple) else v)
                         for k, v in vars(cfg).items()},
        "classes": classes,
        "in_channels": in_channels,
        "image_size": image_size,
    }
    return Checkpoint(config_text=resolved_text(resolved), epoch=cfg.epochs,
                      arrays=arrays, meta=meta)


def cmd_retrain(args) -> int:
    resolved = _load_config(args)
    out = ensure_dir(resolve_out_dir(resolved, args.out))
    log, fh = _make_logger(out)
    try:
        space = to_space_config(resolved)
        genotype_text = _read_text(args.genotype)
        g = parse_genotype(genotype_text, space)
        cfg = to_train_config(resolved)
        train, test = build_datasets(resolved)
        stats = compute_stats(train)
        train = apply_stats(train, stats)
        test = apply_stats(test, stats)
        log(f"retrain start: genotype={genotype_digest(g)} seed={cfg.seed} "
            f"train={len(train)} test={len(test)}")
        result = retrain(g, train, test, cfg, log=log)
        atomic_write_text(os.path.join(out, "metrics.csv"), metrics_csv(result.rows))
        summary = {
            "final_test_error": result.final_test_error,
            "param_count": result.param_count,
            "macs_per_image": result.macs,
            "epochs": cfg.epochs,
            "seed": cfg.seed,
            "genotype_digest": genotype_digest(g),
        }
        atomic_write_text(os.path.join(out, "summary.json"),
                          json.dumps(summary, sort_keys=True, indent=2) + "\n")
        cp = _model_checkpoint(result.net, stats, resolved,
                               serialize_genotype(g), cfg, train.classes,
                               train.images.shape[1], train.images.shape[2])
        save_checkpoint(os.path.join(out, "model.fnas"), cp)
        atomic_write_text(os.path.join(out, "config.resolved"),
                          resolved_text(resolved))
        log(f"retrain done: test_error={result.final_test_error:.4f}")
        print(f"test_error = {result.final_test_error:.4f}")
        print(f"param_count = {result.param_count}")
        print(f"artifacts in {out}")
        return 0
    finally:
        fh.close()


def cmd_eval(args) -> int:
    resolved = _load_config(args)
    cp = load_checkpoint(args.model)
    if cp.meta.get("kind") != "model":
        raise ConfigError(f"{args.model} is not a model checkpoint")
    meta = cp.meta
    tc = dict(meta["train_config"])
    tc["seed"] = int(tc.get("seed", 0))
    cfg = TrainConfig(**{k: (tuple(v) if isinstance(v, list) else v)
                         for k, v in tc.items()})
    g = parse_genotype(meta["genotype_text"])
    net = DiscreteNetwork(
        g, in_channels=int(meta["in_channels"]), classes=int(meta["classes"]),
        channels=cfg.channels, cells=cfg.cells,
        stem_multiplier=cfg.stem_multiplier, auxiliary=cfg.auxiliary,
        rng=rngmod.substream(cfg.seed, "init"))
    for name, p in net.named_parameters():
        p.data[...] = cp.arrays[f"net.{name}"]
    for name, buf in net.named_buffers():
        buf[...] = cp.arrays[f"buf.{name}"]
    stats = ChannelStats(mean=cp.arrays["stats.mean"], std=cp.arrays["stats.std"])
    _, test = build_datasets(resolved)
    test = apply_stats(test, stats)
    loss, err = evaluate(net, test, batch_size=cfg.batch_size)
    print(f"test_loss = {loss:.6f}")
    print(f"test_error = {err:.4f}")
    return 0


def cmd_space_size(args) -> int:
    resolved = _load_config(args)
    space = to_space_config(resolved)
    counts = arch_param_counts(space)
    per_cell = cell_cardinality(space)
    total = space_cardinality(space)
    print(f"edges_per_cell = {edge_count(space.nodes)}")
    print(f"super_operators_per_edge = {super_operator_count(space)}")
    print(f"alpha_params_total = {counts['alpha_total']}")
    print(f"beta_params_total = {counts['beta_total']}")
    print(f"factorized_params_total = {counts['factorized_total']}")
    print(f"flat_params_total = {counts['flat_total']}")
    print(f"cell_cardinality = {per_cell}")
    print(f"space_cardinality = {total}")
    print(f"space_cardinality_sci = {float(total):.3e}")
    return 0


def cmd_render(args) -> int:
    g = parse_genotype(_read_text(args.genotype))
    out = ensure_dir(args.out or os.path.dirname(os.path.abspath(args.genotype)) or ".")
    path = os.path.join(out, "cells.dot")
    atomic_write_text(path, export_dot(g))
    print(path)
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="factnas",
        description="Differentiable architecture search over a factorized "
                    "operator space (regular ops x activations).")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("search", help="run tri-level architecture search")
    p.add_argument("--config", required=True, help="config file")
    p.add_argument("--seed", type=int, default=None, help="override run.seed")
    p.add_argument("--mode", default=None,
                   help="override search.mode (factorized, fixed-activation, "
                        "frozen-beta, non-factorized)")
    p.add_argument("--out", default=None, help="override the out directory")
    p.set_defaults(func=cmd_search)

    p = sub.add_parser("derive", help="derive a genotype from a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_derive)

    p = sub.add_parser("retrain", help="train a genotype from scratch")
    p.add_argument("--config", required=True)
    p.add_argument("--genotype", required=True, help="genotype.txt path")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_retrain)

    p = sub.add_parser("eval", help="evaluate a trained model on the test set")
    p.add_argument("--config", required=True)
    p.add_argument("--model", required=True, help="model.fnas path")
    p.add_argument("--seed", type=int, default=None)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("space-size", help="print exact search-space counts")
    p.add_argument("--config", required=True)
    p.set_defaults(func=cmd_space_size)

    p = sub.add_parser("render", help="export genotype cells as Graphviz")
    p.add_argument("--genotype", required=True)
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_render)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, UsageError, FormatError, ValidationError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except NumericalError as exc:
        print(f"numerical error: {exc}", file=sys.stderr)
        return 1
    except FactnasError as exc:  # pragma: no cover - future subclasses
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
