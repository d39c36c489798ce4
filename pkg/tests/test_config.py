"""Config parsing, canonical serialization, and typed views."""

import os

import numpy as np
import pytest

from factnas.config import (OUT_ROOT_ENV, build_datasets, parse_config,
                            resolve_out_dir, resolved_text, to_search_config,
                            to_space_config, to_train_config)
from factnas.errors import ConfigError


def test_empty_text_resolves_to_defaults():
    r = parse_config("")
    assert r["run.seed"] == 0
    assert r["data.kind"] == "synth"
    assert r["search.epochs"] == 25
    assert r["search.batch_size"] == 64
    assert r["search.arch_betas"] == (0.5, 0.999)
    assert r["retrain.auxiliary"] is True
    assert r["space.nodes"] == 4


def test_comments_and_blank_lines():
    r = parse_config("""
# a full-line comment
run.seed = 7   # trailing comment
search.epochs = 3

""")
    assert r["run.seed"] == 7
    assert r["search.epochs"] == 3


@pytest.mark.parametrize("text,fragment", [
    ("run.seed", "line 1: expected 'key = value'"),
    ("nope.key = 1", "unknown key 'nope.key'"),
    ("run.seed = 1\nrun.seed = 2", "line 2: duplicate key"),
    ("run.seed = seven", "bad int for run.seed"),
    ("search.hflip = maybe", "bad bool"),
    ("schema = 2", "unsupported schema version 2"),
    ("search.mode = magic", "unknown search mode"),
    ("data.kind = png", "data.kind must be"),
])
def test_parse_rejections(text, fragment):
    with pytest.raises(ConfigError, match=fragment):
        parse_config(text)


def test_resolved_text_is_canonical_and_round_trips():
    r1 = parse_config("run.seed = 3\nsearch.w_lr = 0.1\nspace.nodes = 2\n")
    text = resolved_text(r1)
    keys = [line.split(" = ")[0] for line in text.strip().split("\n")]
    assert keys == sorted(keys)
    r2 = parse_config(text)
    assert r1 == r2
    assert resolved_text(r2) == text  # serialization is a fixed point


def test_data_binding_requirements():
    with pytest.raises(ConfigError, match="requires data.images"):
        parse_config("data.kind = idx")
    with pytest.raises(ConfigError, match="requires data.dir"):
        parse_config("data.kind = cifar10")


def test_typed_views_carry_values_and_overrides():
    r = parse_config("run.seed = 5\nsearch.epochs = 9\nsearch.mode = factorized\n"
                     "search.fixed_activation = selu\nretrain.droppath = 0.1\n"
                     "space.activation_ops = relu,selu\n")
    space = to_space_config(r)
    assert space.activation_ops == ("relu", "selu")
    sc = to_search_config(r)
    assert sc.epochs == 9 and sc.seed == 5
    assert sc.fixed_activation is None  # only honored in fixed-activation mode
    sc2 = to_search_config(r, seed=11, mode="fixed-activation")
    assert sc2.seed == 11 and sc2.fixed_activation == "selu"
    tc = to_train_config(r)
    assert tc.droppath == 0.1 and tc.seed == 5


def test_build_datasets_synth():
    r = parse_config("data.n = 40\ndata.test_n = 12\ndata.image_size = 8\n"
                     "data.classes = 2\n")
    train, test = build_datasets(r)
    assert len(train) == 40 and len(test) == 12
    assert train.name == "synth-train" and test.name == "synth-test"
    assert train.images.shape[1:] == (3, 8, 8)
    assert not np.array_equal(train.images[:12], test.images)


def test_resolve_out_dir(monkeypatch):
    r = parse_config("run.out = runs/a\n")
    monkeypatch.delenv(OUT_ROOT_ENV, raising=False)
    assert resolve_out_dir(r) == "runs/a"
    assert resolve_out_dir(r, "explicit") == "explicit"
    monkeypatch.setenv(OUT_ROOT_ENV, "/data/root")
    assert resolve_out_dir(r) == os.path.join("/data/root", "runs/a")
    assert resolve_out_dir(r, "/abs/path") == "/abs/path"
    assert resolve_out_dir(r, "rel") == os.path.join("/data/root", "rel")
