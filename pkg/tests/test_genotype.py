"""Genotype derivation, serialization round-trips, and DOT export.

The derivation oracle below reimplements the discretization rule with plain
Python loops and math.exp so the vectorized implementation has something
independent to disagree with.
"""

import math
import re

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from factnas.errors import ConfigError, FormatError
from factnas.genotype import (
    Genotype, Selection, derive_genotype, export_dot, genotype_digest,
    parse_genotype, random_genotype, serialize_genotype, with_fixed_activation,
)
from factnas.space import SpaceConfig, edge_count

DEFAULT = SpaceConfig()


# ---------------------------------------------------------------------------
# scoring oracle
# ---------------------------------------------------------------------------


def oracle_softmax(row):
    m = max(row)
    e = [math.exp(v - m) for v in row]
    s = sum(e)
    return [v / s for v in e]


def oracle_derive_cell(alpha, beta, space, fixed=None):
    """Exhaustive scoring with explicit comparisons, first maximum wins."""
    ops = space.regular_ops
    sels = []
    e = 0
    edge_of = {}
    for j in range(space.nodes):
        for i in range(j + 2):
            edge_of[(j, i)] = e
            e += 1
    for j in range(space.nodes):
        ranked = []
        for i in range(j + 2):
            w = oracle_softmax(list(alpha[edge_of[(j, i)]]))
            best_k, best_v = None, -1.0
            for k, op in enumerate(ops):
                if op == "none":
                    continue
                if w[k] > best_v:
                    best_k, best_v = k, w[k]
            ranked.append((best_v, i, best_k))
        # strongest first; equal strengths fall back to the lower predecessor
        ranked.sort(key=lambda t: (-t[0], t[1]))
        for _, i, k in ranked[: space.edge_inputs]:
            op = ops[k]
            act = None
            if op in space.parameterized_ops:
                if beta is not None:
                    wb = oracle_softmax(list(beta[edge_of[(j, i)]]))
                    best_a, best_v = None, -1.0
                    for a, v in enumerate(wb):
                        if v > best_v:
                            best_a, best_v = a, v
                    act = space.activation_ops[best_a]
                else:
                    act = fixed
            sels.append((j, i, op, act))
    sels.sort()
    return sels


def as_tuples(sels):
    return sorted((s.node, s.pred, s.op, s.activation) for s in sels)


@pytest.mark.parametrize("space", [
    DEFAULT,
    SpaceConfig(activation_ops=("relu", "selu", "swish")),
    SpaceConfig(regular_ops=("sep_conv_3x3", "max_pool_3x3", "none"),
                activation_ops=("relu", "elu"), nodes=3),
], ids=["default", "three-acts", "mini"])
def test_derive_matches_scoring_oracle(space):
    rng = np.random.default_rng(7)
    e = edge_count(space.nodes)
    for _ in range(30):
        arrays = {}
        for name in space.cell_names:
            arrays[f"alpha_{name}"] = rng.normal(size=(e, len(space.regular_ops)))
            arrays[f"beta_{name}"] = rng.normal(size=(e, len(space.activation_ops)))
        g = derive_genotype(arrays, space)
        for name in space.cell_names:
            want = oracle_derive_cell(arrays[f"alpha_{name}"],
                                      arrays[f"beta_{name}"], space)
            assert as_tuples(g.cells[name]) == want


def test_derive_fixed_activation_banks():
    space = DEFAULT
    rng = np.random.default_rng(8)
    e = edge_count(space.nodes)
    arrays = {f"alpha_{n}": rng.normal(size=(e, 8)) for n in space.cell_names}
    g = derive_genotype(arrays, space, fixed_activation="selu")
    for sels in g.cells.values():
        for s in sels:
            assert (s.activation == "selu") == (s.op in space.parameterized_ops)
    oracle = oracle_derive_cell(arrays["alpha_normal"], None, space, fixed="selu")
    assert as_tuples(g.cells["normal"]) == oracle


def test_derive_requires_activation_source():
    e = edge_count(4)
    arrays = {f"alpha_{n}": np.zeros((e, 8)) for n in ("normal", "reduce")}
    with pytest.raises(ConfigError):
        derive_genotype(arrays, DEFAULT)  # no beta, no fixed kind


def test_derive_tie_prefers_first_op_and_lower_pred():
    # all-equal logits: every op ties, so op index 0 and predecessors 0,1 win
    space = SpaceConfig(regular_ops=("sep_conv_3x3", "skip_connect", "none"),
                        activation_ops=("relu", "selu"), nodes=2, cell_types=1)
    e = edge_count(2)
    arrays = {"alpha_normal": np.zeros((e, 3)), "beta_normal": np.zeros((e, 2))}
    g = derive_genotype(arrays, space)
    got = as_tuples(g.cells["normal"])
    assert got == [(0, 0, "sep_conv_3x3", "relu"), (0, 1, "sep_conv_3x3", "relu"),
                   (1, 0, "sep_conv_3x3", "relu"), (1, 1, "sep_conv_3x3", "relu")]


# ---------------------------------------------------------------------------
# random draws, transforms, validation
# ---------------------------------------------------------------------------


def test_random_genotype_valid_and_seeded():
    a = random_genotype(DEFAULT, np.random.default_rng(3))
    b = random_genotype(DEFAULT, np.random.default_rng(3))
    c = random_genotype(DEFAULT, np.random.default_rng(4))
    a.validate(DEFAULT)
    assert serialize_genotype(a) == serialize_genotype(b)
    assert serialize_genotype(a) != serialize_genotype(c)


def test_with_fixed_activation_rewrites_only_parameterized():
    g = random_genotype(DEFAULT, np.random.default_rng(5))
    h = with_fixed_activation(g, "relu6")
    h.validate(DEFAULT)
    for name in g.cells:
        for s_old, s_new in zip(g.cells[name], h.cells[name]):
            assert (s_old.node, s_old.pred, s_old.op) == (s_new.node, s_new.pred, s_new.op)
            if s_new.op in DEFAULT.parameterized_ops:
                assert s_new.activation == "relu6"
            else:
                assert s_new.activation is None
    with pytest.raises(ConfigError):
        with_fixed_activation(g, "softplus")


def invalid_cases():
    base = random_genotype(DEFAULT, np.random.default_rng(6))
    ok = base.cells["normal"]

    dup = {n: list(s) for n, s in base.cells.items()}
    dup["normal"] = [Selection(0, 0, "skip_connect"), Selection(0, 0, "skip_connect")] + \
        [s for s in ok if s.node != 0]

    missing = {n: list(s) for n, s in base.cells.items()}
    missing["normal"] = [s for s in ok if s.node != 2]

    out_of_range = {n: list(s) for n, s in base.cells.items()}
    out_of_range["normal"] = [Selection(0, 3, "skip_connect"),
                              Selection(0, 1, "skip_connect")] + \
        [s for s in ok if s.node != 0]

    none_op = {n: list(s) for n, s in base.cells.items()}
    none_op["normal"] = [Selection(0, 0, "none"), Selection(0, 1, "skip_connect")] + \
        [s for s in ok if s.node != 0]

    bad_act = {n: list(s) for n, s in base.cells.items()}
    bad_act["normal"] = [Selection(0, 0, "max_pool_3x3", "relu"),
                         Selection(0, 1, "skip_connect")] + \
        [s for s in ok if s.node != 0]

    missing_act = {n: list(s) for n, s in base.cells.items()}
    missing_act["normal"] = [Selection(0, 0, "sep_conv_3x3"),
                             Selection(0, 1, "skip_connect")] + \
        [s for s in ok if s.node != 0]

    return [dup, missing, out_of_range, none_op, bad_act, missing_act]


@pytest.mark.parametrize("cells", invalid_cases(),
                         ids=["dup-pred", "missing-node", "pred-range",
                              "none-op", "act-on-pool", "conv-missing-act"])
def test_validate_rejects_bad_genotypes(cells):
    with pytest.raises(ConfigError):
        Genotype(cells=cells).validate(DEFAULT)


# ---------------------------------------------------------------------------
# text format
# ---------------------------------------------------------------------------


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(min_value=0, max_value=10 ** 9))
def test_serialize_parse_round_trip(seed):
    g = random_genotype(DEFAULT, np.random.default_rng(seed))
    text = serialize_genotype(g)
    back = parse_genotype(text, DEFAULT)
    assert as_tuples(back.cells["normal"]) == as_tuples(g.cells["normal"])
    assert as_tuples(back.cells["reduce"]) == as_tuples(g.cells["reduce"])
    assert genotype_digest(back) == genotype_digest(g)


def test_parse_skips_comments_and_blanks():
    g = random_genotype(DEFAULT, np.random.default_rng(9))
    text = "# header\n\n" + serialize_genotype(g) + "\n# trailing\n"
    assert genotype_digest(parse_genotype(text, DEFAULT)) == genotype_digest(g)


@pytest.mark.parametrize("line", [
    "normal x <- 0 skip_connect",
    "normal 2 <- 0 none",
    "normal 2 <- 0 sep_conv_3x3",           # conv without activation
    "normal 2 <- 0 max_pool_3x3 @relu",     # pool with activation
    "normal 2 <- 0 sep_conv_3x3 @gelu",
    "normal 1 <- 0 skip_connect",           # node label 1 is a cell input
    "normal 2 -> 0 skip_connect",
])
def test_parse_rejects_malformed_lines(line):
    with pytest.raises(FormatError):
        parse_genotype(line + "\n")


def test_parse_empty_text():
    with pytest.raises(FormatError):
        parse_genotype("# nothing here\n")


def test_digest_is_stable_and_short():
    g = random_genotype(DEFAULT, np.random.default_rng(10))
    d = genotype_digest(g)
    assert re.fullmatch(r"[0-9a-f]{12}", d)
    assert genotype_digest(g) == d


# ---------------------------------------------------------------------------
# DOT export
# ---------------------------------------------------------------------------


def test_export_dot_grammar():
    g = random_genotype(DEFAULT, np.random.default_rng(11))
    dot = export_dot(g)
    assert dot.count("digraph") == 2
    assert dot.count("{") == dot.count("}")
    assert "digraph normal {" in dot and "digraph reduce {" in dot
    # every selection appears as an edge with its op in the label
    for name, sels in g.cells.items():
        for s in sels:
            assert f'-> "{s.node}"' in dot
            assert s.op in dot
            if s.activation:
                assert f"[{s.activation}]" in dot
    # all intermediate nodes feed the concatenated cell output
    for j in range(4):
        assert f'"{j}" -> "c_k";' in dot


def test_export_dot_quotes_input_states():
    g = random_genotype(DEFAULT, np.random.default_rng(12))
    dot = export_dot(g)
    assert '"c_{k-2}"' in dot and '"c_{k-1}"' in dot
