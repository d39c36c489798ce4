"""Run configuration: a flat key = value text format with a strict schema.

Unknown keys, duplicate keys, and malformed values are errors with line
numbers; every key has a default, and the fully resolved mapping serializes
back to canonical text (sorted keys, shortest round-trip floats) so a run
can be reproduced from its emitted config.resolved file alone.
"""

import os
from dataclasses import asdict

from .datasets import Dataset, load_cifar_binary, load_idx, synth_generate
from .errors import ConfigError
from .evaluator import TrainConfig
from .search import SearchConfig
from .space import SpaceConfig

OUT_ROOT_ENV = "FACTNAS_OUT_ROOT"

_SEARCH = asdict(SearchConfig())
_RETRAIN = asdict(TrainConfig())
_SPACE = SpaceConfig()


def _conv_int(s):
    return int(s, 10)


def _conv_float(s):
    return float(s)


def _conv_bool(s):
    low = s.lower()
    if low in ("true", "1", "yes"):
        return True
    if low in ("false", "0", "no"):
        return False
    raise ValueError(f"expected a boolean, got {s!r}")


def _conv_str(s):
    return s


def _conv_optstr(s):
    return s or None


def _conv_floats(s):
    return tuple(float(part) for part in s.split(",") if part.strip() != "")


def _conv_strs(s):
    return tuple(part.strip() for part in s.split(",") if part.strip() != "")


_CONVERTERS = {
    "int": _conv_int,
    "float": _conv_float,
    "bool": _conv_bool,
    "str": _conv_str,
    "optstr": _conv_optstr,
    "floats": _conv_floats,
    "strs": _conv_strs,
}

# key -> (type name, default)
SCHEMA = {
    "schema": ("int", 1),
    "run.seed": ("int", 0),
    "run.out": ("str", "runs/out"),

    "data.kind": ("str", "synth"),  # synth | idx | cifar10
    "data.n": ("int", 2000),
    "data.test_n": ("int", 500),
    "data.image_size": ("int", 16),
    "data.classes": ("int", 4),
    "data.channels": ("int", 3),
    "data.noise": ("float", 0.3),
    "data.dir": ("optstr", None),
    "data.images": ("optstr", None),
    "data.labels": ("optstr", None),
    "data.test_images": ("optstr", None),
    "data.test_labels": ("optstr", None),

    "space.regular_ops": ("strs", _SPACE.regular_ops),
    "space.activation_ops": ("strs", _SPACE.activation_ops),
    "space.nodes": ("int", _SPACE.nodes),
    "space.edge_inputs": ("int", _SPACE.edge_inputs),
    "space.cell_types": ("int", _SPACE.cell_types),

    "search.epochs": ("int", _SEARCH["epochs"]),
    "search.batch_size": ("int", _SEARCH["batch_size"]),
    "search.channels": ("int", _SEARCH["channels"]),
    "search.cells": ("int", _SEARCH["cells"]),
    "search.stem_multiplier": ("int", _SEARCH["stem_multiplier"]),
    "search.mode": ("str", _SEARCH["mode"]),
    "search.fixed_activation": ("optstr", None),
    "search.beta_from": ("optstr", None),
    "search.split": ("floats", _SEARCH["split"]),
    "search.w_lr": ("float", _SEARCH["w_lr"]),
    "search.w_lr_min": ("float", _SEARCH["w_lr_min"]),
    "search.w_momentum": ("float", _SEARCH["w_momentum"]),
    "search.w_weight_decay": ("float", _SEARCH["w_weight_decay"]),
    "search.arch_lr": ("float", _SEARCH["arch_lr"]),
    "search.arch_betas": ("floats", _SEARCH["arch_betas"]),
    "search.arch_weight_decay": ("float", _SEARCH["arch_weight_decay"]),
    "search.arch_init_scale": ("float", _SEARCH["arch_init_scale"]),
    "search.grad_clip": ("float", _SEARCH["grad_clip"]),
    "search.warmup_epochs": ("int", _SEARCH["warmup_epochs"]),
    "search.fresh_val_batch": ("bool", _SEARCH["fresh_val_batch"]),
    "search.pad_crop": ("int", _SEARCH["pad_crop"]),
    "search.hflip": ("bool", _SEARCH["hflip"]),

    "retrain.epochs": ("int", _RETRAIN["epochs"]),
    "retrain.batch_size": ("int", _RETRAIN["batch_size"]),
    "retrain.channels": ("int", _RETRAIN["channels"]),
    "retrain.cells": ("int", _RETRAIN["cells"]),
    "retrain.stem_multiplier": ("int", _RETRAIN["stem_multiplier"]),
    "retrain.lr": ("float", _RETRAIN["lr"]),
    "retrain.lr_min": ("float", _RETRAIN["lr_min"]),
    "retrain.momentum": ("float", _RETRAIN["momentum"]),
    "retrain.weight_decay": ("float", _RETRAIN["weight_decay"]),
    "retrain.grad_clip": ("float", _RETRAIN["grad_clip"]),
    "retrain.droppath": ("float", _RETRAIN["droppath"]),
    "retrain.cutout_length": ("int", _RETRAIN["cutout_length"]),
    "retrain.label_smoothing": ("float", _RETRAIN["label_smoothing"]),
    "retrain.auxiliary": ("bool", _RETRAIN["auxiliary"]),
    "retrain.aux_weight": ("float", _RETRAIN["aux_weight"]),
    "retrain.pad_crop": ("int", _RETRAIN["pad_crop"]),
    "retrain.hflip": ("bool", _RETRAIN["hflip"]),
}


def parse_config(text: str) -> dict:
    """Parse config text into the fully resolved key -> value mapping."""
    resolved = {k: default for k, (_, default) in SCHEMA.items()}
    seen = set()
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {raw!r}")
        key, _, value = line.partition("=")
        key = key.strip()
        value = value.strip()
        if key not in SCHEMA:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        if key in seen:
            raise ConfigError(f"line {lineno}: duplicate key {key!r}")
        seen.add(key)
        typename, _ = SCHEMA[key]
        try:
            resolved[key] = _CONVERTERS[typename](value)
        except ValueError as exc:
            raise ConfigError(f"line {lineno}: bad {typename} for {key}: {exc}") from exc
    if resolved["schema"] != 1:
        raise ConfigError(f"unsupported schema version {resolved['schema']}")
    validate_config(resolved)
    return resolved


def _fmt_value(typename: str, value) -> str:
    if value is None:
        return ""
    if typename == "bool":
        return "true" if value else "false"
    if typename == "float":
        return repr(float(value))
    if typename == "floats":
        return ",".join(repr(float(v)) for v in value)
    if typename == "strs":
        return ",".join(value)
    return str(value)


def resolved_text(resolved: dict) -> str:
    lines = []
    for key in sorted(SCHEMA):
        typename, _ = SCHEMA[key]
        lines.append(f"{key} = {_fmt_value(typename, resolved[key])}")
    return "\n".join(lines) + "\n"


def validate_config(resolved: dict) -> None:
    kind = resolved["data.kind"]
    if kind not in ("synth", "idx", "cifar10"):
        raise ConfigError(f"data.kind must be synth, idx, or cifar10, got {kind!r}")
    if kind == "idx":
        for k in ("data.images", "data.labels", "data.test_images", "data.test_labels"):
            if not resolved[k]:
                raise ConfigError(f"data.kind=idx requires {k}")
    if kind == "cifar10" and not resolved["data.dir"]:
        raise ConfigError("data.kind=cifar10 requires data.dir")
    # constructing the typed views runs their own validators
    to_space_config(resolved)
    to_search_config(resolved)
    to_train_config(resolved)


def to_space_config(resolved: dict) -> SpaceConfig:
    return SpaceConfig(
        regular_ops=tuple(resolved["space.regular_ops"]),
        activation_ops=tuple(resolved["space.activation_ops"]),
        nodes=resolved["space.nodes"],
        edge_inputs=resolved["space.edge_inputs"],
        cell_types=resolved["space.cell_types"],
    )


def to_search_config(resolved: dict, seed: int = None, mode: str = None) -> SearchConfig:
    mode = mode or resolved["search.mode"]
    fixed = resolved["search.fixed_activation"]
    return SearchConfig(
        epochs=resolved["search.epochs"],
        batch_size=resolved["search.batch_size"],
        channels=resolved["search.channels"],
        cells=resolved["search.cells"],
        stem_multiplier=resolved["search.stem_multiplier"],
        mode=mode,
        fixed_activation=fixed if mode == "fixed-activation" else None,
        split=tuple(resolved["search.split"]),
        w_lr=resolved["search.w_lr"],
        w_lr_min=resolved["search.w_lr_min"],
        w_momentum=resolved["search.w_momentum"],
        w_weight_decay=resolved["search.w_weight_decay"],
        arch_lr=resolved["search.arch_lr"],
        arch_betas=tuple(resolved["search.arch_betas"]),
        arch_weight_decay=resolved["search.arch_weight_decay"],
        arch_init_scale=resolved["search.arch_init_scale"],
        grad_clip=resolved["search.grad_clip"],
        warmup_epochs=resolved["search.warmup_epochs"],
        fresh_val_batch=resolved["search.fresh_val_batch"],
        pad_crop=resolved["search.pad_crop"],
        hflip=resolved["search.hflip"],
        seed=resolved["run.seed"] if seed is None else seed,
    ).validate()


def to_train_config(resolved: dict, seed: int = None) -> TrainConfig:
    return TrainConfig(
        epochs=resolved["retrain.epochs"],
        batch_size=resolved["retrain.batch_size"],
        channels=resolved["retrain.channels"],
        cells=resolved["retrain.cells"],
        stem_multiplier=resolved["retrain.stem_multiplier"],
        lr=resolved["retrain.lr"],
        lr_min=resolved["retrain.lr_min"],
        momentum=resolved["retrain.momentum"],
        weight_decay=resolved["retrain.weight_decay"],
        grad_clip=resolved["retrain.grad_clip"],
        droppath=resolved["retrain.droppath"],
        cutout_length=resolved["retrain.cutout_length"],
        label_smoothing=resolved["retrain.label_smoothing"],
        auxiliary=resolved["retrain.auxiliary"],
        aux_weight=resolved["retrain.aux_weight"],
        pad_crop=resolved["retrain.pad_crop"],
        hflip=resolved["retrain.hflip"],
        seed=resolved["run.seed"] if seed is None else seed,
    ).validate()


def build_datasets(resolved: dict) -> tuple:
    """(training pool, test set) per the data binding."""
    kind = resolved["data.kind"]
    seed = resolved["run.seed"]
    if kind == "synth":
        train = synth_generate(
            resolved["data.n"], image_size=resolved["data.image_size"],
            classes=resolved["data.classes"], channels=resolved["data.channels"],
            noise=resolved["data.noise"], seed=seed, name="synth-train")
        test = synth_generate(
            resolved["data.test_n"], image_size=resolved["data.image_size"],
            classes=resolved["data.classes"], channels=resolved["data.channels"],
            noise=resolved["data.noise"], seed=seed, stream="synth-test",
            name="synth-test")
        return train, test
    if kind == "idx":
        train = load_idx(resolved["data.images"], resolved["data.labels"], name="idx-train")
        test = load_idx(resolved["data.test_images"], resolved["data.test_labels"],
                        classes=train.classes, name="idx-test")
        return train, test
    train = load_cifar_binary(resolved["data.dir"], "train")
    test = load_cifar_binary(resolved["data.dir"], "test")
    return train, test


def resolve_out_dir(resolved: dict, override: str = None) -> str:
    """--out wins; else run.out, joined under $FACTNAS_OUT_ROOT if relative."""
    out = override or resolved["run.out"]
    root = os.environ.get(OUT_ROOT_ENV)
    if root and not os.path.isabs(out):
        return os.path.join(root, out)
    return out
