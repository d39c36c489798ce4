"""Release gate: ten numbered end-to-end checks.

Each check prints exactly one `criterion N: PASS` line straight to the
terminal when it holds; if it does not, the pytest FAILED line for that
test is the fail line.  Criterion 8 runs the full desk-scale search and
takes on the order of two hours on one CPU core; everything else finishes
in seconds to minutes.
"""

import math
import re
import time
from itertools import combinations, product
from pathlib import Path

import numpy as np

from factnas.activations import ACTIVATION_KINDS, Activation
from factnas.autodiff import MacCounter, Tensor, add, mul, softmax, sub, sum_all, take_row
from factnas.cli import main
from factnas.config import (build_datasets, parse_config, to_search_config,
                            to_space_config)
from factnas.datasets import apply_stats, compute_stats, synth_generate
from factnas.evaluator import TrainConfig, retrain
from factnas.genotype import (derive_genotype, genotype_digest, parse_genotype,
                              random_genotype, serialize_genotype,
                              with_fixed_activation)
from factnas.optim import Adam, SGDMomentum
from factnas.rng import substream
from factnas.search import SearchConfig, SearchEngine, TriLevelStepper
from factnas.space import (ReLUConvBN, SpaceConfig, arch_param_counts,
                           cell_cardinality, regular_op_factory,
                           space_cardinality, super_operator_count,
                           super_operator_labels)
from factnas.supernet import FlatEdge, MixedEdge

from _oracles import fd_assert, ref_adam, ref_sgd_momentum

REPO = Path(__file__).resolve().parent.parent

TINY_CFG = """\
run.seed = 0
data.kind = synth
data.n = 96
data.test_n = 32
data.image_size = 8
data.classes = 2
space.regular_ops = sep_conv_3x3,max_pool_3x3,skip_connect,none
space.activation_ops = relu,swish
space.nodes = 2
space.cell_types = 1
search.epochs = 1
search.batch_size = 16
search.channels = 4
search.cells = 2
search.stem_multiplier = 1
retrain.epochs = 1
retrain.batch_size = 16
retrain.channels = 4
retrain.cells = 2
retrain.stem_multiplier = 1
retrain.pad_crop = 1
retrain.cutout_length = 2
"""


def report(capsys, n: int, detail: str):
    with capsys.disabled():
        print(f"\ncriterion {n}: PASS ({detail})")


# ---------------------------------------------------------------------------
# 1. cardinality anchors
# ---------------------------------------------------------------------------


def _space_size_stdout(capsys, cfg_path) -> dict:
    assert main(["space-size", "--config", str(cfg_path)]) == 0
    out = capsys.readouterr().out
    pairs = dict(re.findall(r"^(\w+) = (.+)$", out, flags=re.M))
    return pairs


def test_criterion_01_cardinality_anchors(capsys, tmp_path):
    degenerate = tmp_path / "degenerate.cfg"
    degenerate.write_text("space.activation_ops = relu\n")
    default = tmp_path / "default.cfg"
    default.write_text("run.seed = 0\n")

    t0 = time.monotonic()
    deg = _space_size_stdout(capsys, degenerate)
    ful = _space_size_stdout(capsys, default)
    elapsed = time.monotonic() - t0

    assert int(deg["space_cardinality"]) == 1_037_664_180 ** 2
    assert int(ful["space_cardinality"]) == (39 ** 8 * 180) ** 2
    # two-significant-digit cross-checks of both anchors
    assert f"{int(deg['space_cardinality']):.1e}" == "1.1e+18"
    assert f"{int(ful['space_cardinality']):.1e}" == "9.3e+29"
    assert deg["space_cardinality_sci"].startswith("1.077e")
    assert ful["space_cardinality_sci"].startswith("9.28")
    assert elapsed < 1.0
    report(capsys, 1, f"1.077e18 and 9.28e29 exact, {elapsed * 1000:.0f} ms")


# ---------------------------------------------------------------------------
# 2. super-operator counts
# ---------------------------------------------------------------------------


def test_criterion_02_super_operator_counts(capsys):
    space = SpaceConfig()
    flat_pool = super_operator_count(space)
    per_edge_factorized = len(space.regular_ops) + len(space.activation_ops)
    counts = arch_param_counts(space)

    assert flat_pool == 40
    assert per_edge_factorized == 8 + 9 == 17
    assert per_edge_factorized < flat_pool
    assert counts["factorized_total"] == 476
    assert counts["flat_total"] == 1120
    # the flat edge really instantiates one branch per super-operator
    edge = FlatEdge(space, 8, 1, substream(0, "init"))
    assert len(edge.branches) == 40
    report(capsys, 2, "40 flat vs 17 factorized per edge; totals 1120 vs 476")


# ---------------------------------------------------------------------------
# 3. brute-force oracle equivalence on miniature spaces
# ---------------------------------------------------------------------------

MINI_SPACES = (
    SpaceConfig(regular_ops=("sep_conv_3x3", "max_pool_3x3", "none"),
                activation_ops=("relu", "elu"), nodes=2, cell_types=1),
    SpaceConfig(regular_ops=("sep_conv_3x3", "dil_conv_3x3", "skip_connect", "none"),
                activation_ops=("relu", "swish", "selu"), nodes=2, cell_types=1),
    SpaceConfig(regular_ops=("sep_conv_3x3", "max_pool_3x3", "none"),
                activation_ops=("relu", "elu"), nodes=2, cell_types=2),
    SpaceConfig(regular_ops=("sep_conv_3x3", "avg_pool_3x3", "none"),
                activation_ops=("relu",), nodes=3, cell_types=1),
)


def enumerate_cells(space) -> set:
    """Every discrete cell of one type, materialized as a tuple set."""
    choices = [lab for lab in super_operator_labels(space) if lab[0] != "none"]
    node_opts = []
    for j in range(space.nodes):
        opts = []
        for preds in combinations(range(j + 2), space.edge_inputs):
            for assign in product(choices, repeat=space.edge_inputs):
                opts.append(tuple((j, p, op, act)
                                  for p, (op, act) in zip(preds, assign)))
        node_opts.append(opts)
    cells = set()
    for combo in product(*node_opts):
        cells.add(tuple(t for node in combo for t in node))
    return cells


def oracle_softmax(row):
    m = max(row)
    e = [math.exp(v - m) for v in row]
    s = sum(e)
    return [v / s for v in e]


def oracle_derive_cell(alpha, beta, space):
    """Scores every predecessor pair per node with explicit loops.

    Edge strength is the best non-none operator weight; the retained pair
    maximizes summed strength (lexicographically first pair on exact ties,
    matching keep-strongest-then-lower-predecessor).  Operator and
    activation picks are exhaustive first-max scans.
    """
    edge_of, e = {}, 0
    for j in range(space.nodes):
        for i in range(j + 2):
            edge_of[(j, i)] = e
            e += 1
    sels = []
    for j in range(space.nodes):
        strength, best_op = {}, {}
        for i in range(j + 2):
            w = oracle_softmax(list(alpha[edge_of[(j, i)]]))
            bk, bv = None, None
            for k, op in enumerate(space.regular_ops):
                if op == "none":
                    continue
                if bv is None or w[k] > bv:
                    bk, bv = k, w[k]
            strength[i], best_op[i] = bv, bk
        best_pair, best_score = None, None
        for pair in combinations(range(j + 2), space.edge_inputs):
            score = sum(strength[i] for i in pair)
            if best_score is None or score > best_score:
                best_pair, best_score = pair, score
        for i in best_pair:
            op = space.regular_ops[best_op[i]]
            act = None
            if op in space.parameterized_ops:
                wb = oracle_softmax(list(beta[edge_of[(j, i)]]))
                ba, bv = None, None
                for a, v in enumerate(wb):
                    if bv is None or v > bv:
                        ba, bv = a, v
                act = space.activation_ops[ba]
            sels.append((j, i, op, act))
    sels.sort()
    return sels


def test_criterion_03_exhaustive_oracles(capsys):
    total_genotypes = 0
    for space in MINI_SPACES:
        cells = enumerate_cells(space)
        assert len(cells) == cell_cardinality(space)
        if space.cell_types == 1:
            space_total = len(cells)
        else:
            space_total = sum(1 for _ in product(cells, repeat=space.cell_types))
        assert space_total == space_cardinality(space)
        assert space_total <= 10 ** 5
        total_genotypes += space_total

    draws = 0
    rng = np.random.default_rng(42)
    for space in MINI_SPACES:
        cells = enumerate_cells(space)
        e = sum(j + 2 for j in range(space.nodes))
        for _ in range(30):
            arrays = {}
            for name in space.cell_names:
                arrays[f"alpha_{name}"] = rng.normal(size=(e, len(space.regular_ops)))
                arrays[f"beta_{name}"] = rng.normal(size=(e, len(space.activation_ops)))
            g = derive_genotype(arrays, space)
            for name in space.cell_names:
                got = sorted((s.node, s.pred, s.op, s.activation)
                             for s in g.cells[name])
                want = oracle_derive_cell(arrays[f"alpha_{name}"],
                                          arrays[f"beta_{name}"], space)
                assert got == want
                # derivation lands inside the enumerated discrete space
                assert tuple(want) in cells
            draws += 1
    assert draws >= 100
    report(capsys, 3, f"{total_genotypes} genotypes enumerated, {draws} oracle draws")

# ---------------------------------------------------------------------------
# 4. gradient suite
# ---------------------------------------------------------------------------


def lattice(rng, shape):
    """Inputs with well-separated values so max-pool picks are FD-stable."""
    n = int(np.prod(shape))
    return rng.permutation(np.linspace(-2.0, 2.0, n)).reshape(shape)


def kink_free(rng, shape):
    """Magnitudes in [0.2, 4.5] keep clear of the piecewise joins at 0 and 6."""
    mag = rng.uniform(0.2, 4.5, size=shape)
    return mag * np.where(rng.random(shape) < 0.5, -1.0, 1.0)


def test_criterion_04_gradient_suite(capsys):
    t0 = time.monotonic()
    rng = np.random.default_rng(17)
    trials = 20
    worst = 0.0

    for kind in ACTIVATION_KINDS:
        act = Activation(kind)  # called with training=False: rrelu is fixed
        for _ in range(trials):
            x = Tensor(kink_free(rng, (4, 5)), requires_grad=True)
            params = [x] + ([act.param] if act.param is not None else [])
            make = lambda: sum_all(mul(act(x), act(x)))
            worst = max(worst, fd_assert(make, params, rng, probes=4))

    block_kinds = ("sep_conv_3x3", "sep_conv_5x5", "dil_conv_3x3",
                   "dil_conv_5x5", "max_pool_3x3", "avg_pool_3x3",
                   "skip_connect")
    for kind in block_kinds:
        for t in range(trials):
            block = regular_op_factory(kind, 4, 1, True, substream(t, "init"))
            x = Tensor(lattice(rng, (2, 4, 6, 6)), requires_grad=True)
            params = [x] + [p for _, p in block.named_parameters()]
            make = lambda: sum_all(mul(block(x), block(x)))
            worst = max(worst, fd_assert(make, params, rng, probes=4))

    # the stride-2 skip and the 1x1 preprocessing block
    reducers = [lambda t: regular_op_factory("skip_connect", 4, 2, True,
                                             substream(t, "init")),
                lambda t: ReLUConvBN(4, 4, True, substream(t, "init"))]
    for builder in reducers:
        for t in range(trials):
            block = builder(t)
            x = Tensor(lattice(rng, (2, 4, 6, 6)), requires_grad=True)
            params = [x] + [p for _, p in block.named_parameters()]
            make = lambda: sum_all(mul(block(x), block(x)))
            worst = max(worst, fd_assert(make, params, rng, probes=4))

    # full factorized edge: activation mixture into the parameterized ops,
    # all branches combined under the alpha weights, softmaxes on the tape
    space = SpaceConfig()
    for t in range(trials):
        edge = MixedEdge(space, 4, 1, substream(100 + t, "init")).eval()
        x = Tensor(lattice(rng, (2, 4, 6, 6)), requires_grad=True)
        a = Tensor(rng.normal(size=(1, 8)), requires_grad=True)
        b = Tensor(rng.normal(size=(1, 9)), requires_grad=True)

        def make():
            out = edge(x, take_row(softmax(a, axis=-1), 0),
                       take_row(softmax(b, axis=-1), 0))
            assert out.data.dtype == np.float64
            return sum_all(mul(out, out))

        conv_w = next(p for n, p in edge.named_parameters() if n.endswith("dw1.weight"))
        act_ps = [p for _, p in edge.mixed_act.named_parameters()]
        worst = max(worst, fd_assert(make, [x, a, b, conv_w] + act_ps,
                                     rng, probes=3))

    elapsed = time.monotonic() - t0
    assert elapsed < 300.0
    report(capsys, 4, f"worst relative error {worst:.2e}, {elapsed:.0f} s")


# ---------------------------------------------------------------------------
# 5. tri-level step order and one-step hand computation
# ---------------------------------------------------------------------------


def test_criterion_05_step_order_and_hand_computation(capsys):
    probes = []
    w = Tensor(np.array(0.0), requires_grad=True)
    a = Tensor(np.array(0.2), requires_grad=True)
    b = Tensor(np.array(0.1), requires_grad=True)

    def train_loss(batch):
        d = sub(w, add(a, b))
        return mul(d, d)

    def val_loss(batch):
        dw = sub(w, Tensor(np.array(1.0)))
        da = sub(a, b)
        return add(mul(dw, dw), mul(da, da))

    stepper = TriLevelStepper(
        [w], SGDMomentum([w], 0.1, momentum=0.0, weight_decay=0.0),
        {"alpha": ([a], Adam([a], 0.01, betas=(0.5, 0.999), weight_decay=0.0)),
         "beta": ([b], Adam([b], 0.01, betas=(0.5, 0.999), weight_decay=0.0))},
        train_loss, val_loss,
        probe=lambda ph, fam, ver, loss: probes.append((ph, fam, ver, loss)))
    t_loss, v_first = stepper.step(None, [None])

    # evaluation order and the parameter versions each loss saw
    assert [(p[0], p[1]) for p in probes] == [
        ("train", None), ("val", "alpha"), ("val", "beta")]
    assert probes[0][2] == {"w": 0, "alpha": 0, "beta": 0}
    assert probes[1][2] == {"w": 1, "alpha": 0, "beta": 0}
    assert probes[2][2] == {"w": 1, "alpha": 1, "beta": 0}

    # exact one-step values via independent reference optimizers
    w0, a0, b0 = 0.0, 0.2, 0.1
    d0 = w0 - (a0 + b0)
    w1 = float(ref_sgd_momentum(np.array(w0), np.array(d0 + d0),
                                np.zeros(()), 0.1, 0.0, 0.0)[0])
    a1 = float(ref_adam(np.array(a0), np.array(2 * (a0 - b0)), np.zeros(()),
                        np.zeros(()), 1, 0.01, 0.5, 0.999, 1e-8, 0.0)[0])
    b1 = float(ref_adam(np.array(b0), np.array(-2 * (a1 - b0)), np.zeros(()),
                        np.zeros(()), 1, 0.01, 0.5, 0.999, 1e-8, 0.0)[0])

    assert w.data.item() == w1
    assert a.data.item() == a1
    assert b.data.item() == b1
    assert t_loss == d0 * d0
    assert probes[1][3] == (w1 - 1.0) ** 2 + (a0 - b0) ** 2
    assert probes[2][3] == (w1 - 1.0) ** 2 + (a1 - b0) ** 2
    assert v_first == probes[1][3]
    report(capsys, 5, "loss order and one-step values match exactly")


# ---------------------------------------------------------------------------
# 6. single-activation pool reduces to the plain alpha-only path
# ---------------------------------------------------------------------------


def test_criterion_06_degenerate_factorization(capsys):
    space = SpaceConfig(
        regular_ops=("sep_conv_3x3", "max_pool_3x3", "skip_connect", "none"),
        activation_ops=("relu",), nodes=2, cell_types=1)
    cfg = dict(epochs=2, batch_size=16, channels=4, cells=2,
               stem_multiplier=1, split=(0.5, 0.5), seed=0)
    data = synth_generate(128, image_size=8, classes=2, channels=3, seed=9)

    fact = SearchEngine(space, SearchConfig(**cfg), data)
    fixed = SearchEngine(space, SearchConfig(mode="fixed-activation",
                                             fixed_activation="relu", **cfg),
                         data)
    for _ in range(2):
        fact.run_epoch()
        fixed.run_epoch()

    for ra, rb in zip(fact.history, fixed.history):
        assert ra["train_loss"] == rb["train_loss"]
        assert ra["val_loss"] == rb["val_loss"]
        assert ra["genotype_digest"] == rb["genotype_digest"]
    assert np.array_equal(fact.arch.arrays()["alpha_normal"],
                          fixed.arch.arrays()["alpha_normal"])
    for (na, pa), (nb, pb) in zip(fact.net.named_parameters(),
                                  fixed.net.named_parameters()):
        assert np.array_equal(pa.data, pb.data), (na, nb)
    assert serialize_genotype(fact.derived_genotype()) == \
        serialize_genotype(fixed.derived_genotype())
    report(capsys, 6, "trajectory, weights, and genotype bitwise identical")


# ---------------------------------------------------------------------------
# 7. flat-pool compute blow-up
# ---------------------------------------------------------------------------


def test_criterion_07_cost_separation(capsys):
    space = SpaceConfig()
    channels = 16
    flat = FlatEdge(space, channels, 1, substream(0, "init")).eval()
    mixed = MixedEdge(space, channels, 1, substream(0, "init")).eval()
    x = Tensor(np.random.default_rng(1).normal(size=(1, channels, 8, 8)))
    with MacCounter() as mc_flat:
        flat(x, Tensor(np.full(40, 1.0 / 40)))
    with MacCounter() as mc_mixed:
        mixed(x, Tensor(np.full(8, 1.0 / 8)), Tensor(np.full(9, 1.0 / 9)))
    ratio = mc_flat.total / mc_mixed.total
    assert ratio >= 3.0
    report(capsys, 7, f"flat/factorized forward MACs = {ratio:.2f}x at 16 channels")


# ---------------------------------------------------------------------------
# 8. desk-scale search end to end
# ---------------------------------------------------------------------------

LIGHT_RETRAIN = dict(epochs=4, batch_size=64, channels=8, cells=5,
                     stem_multiplier=3, droppath=0.1, cutout_length=0,
                     auxiliary=False, pad_crop=2, hflip=False)


def test_criterion_08_desk_scale_search(capsys):
    resolved = parse_config((REPO / "configs" / "desk.cfg").read_text())
    space = to_space_config(resolved)
    cfg = to_search_config(resolved)
    assert (cfg.epochs, cfg.batch_size, cfg.channels, cfg.cells) == (15, 32, 8, 8)
    assert (resolved["data.n"], resolved["data.classes"],
            resolved["data.image_size"]) == (2000, 4, 16)

    pool, test = build_datasets(resolved)
    stats = compute_stats(pool)
    pool, test = apply_stats(pool, stats), apply_stats(test, stats)

    def progress(msg):
        with capsys.disabled():
            print(f"  [desk search] {msg}", flush=True)

    t0 = time.monotonic()
    engine = SearchEngine(space, cfg, pool)
    result = engine.run(log=progress)
    search_secs = time.monotonic() - t0
    assert search_secs < 7200.0

    g = result.genotype
    g.validate(space)
    round_trip = parse_genotype(serialize_genotype(g), space)
    assert serialize_genotype(round_trip) == serialize_genotype(g)
    assert len(genotype_digest(g)) == 12
    assert all(math.isfinite(r["train_loss"]) and math.isfinite(r["val_loss"])
               for r in result.history[cfg.warmup_epochs:])
    del engine

    searched, baseline = [], []
    for k in range(3):
        r = retrain(g, pool, test, TrainConfig(seed=k, **LIGHT_RETRAIN))
        searched.append(r.final_test_error)
        progress(f"searched retrain seed {k}: error {r.final_test_error:.4f}")
    for k in range(3):
        rg = random_genotype(space, np.random.default_rng(100 + k))
        r = retrain(rg, pool, test, TrainConfig(seed=k, **LIGHT_RETRAIN))
        baseline.append(r.final_test_error)
        progress(f"random retrain seed {k}: error {r.final_test_error:.4f}")

    assert float(np.mean(searched)) <= float(np.mean(baseline))
    report(capsys, 8,
           f"search {search_secs / 60:.0f} min; searched mean error "
           f"{np.mean(searched):.4f} <= random mean {np.mean(baseline):.4f}")


# ---------------------------------------------------------------------------
# 9. mode coverage
# ---------------------------------------------------------------------------


def test_criterion_09_mode_coverage(capsys):
    space = SpaceConfig(
        regular_ops=("sep_conv_3x3", "max_pool_3x3", "skip_connect", "none"),
        nodes=2, cell_types=1)  # full nine-activation pool
    data = synth_generate(96, image_size=8, classes=2, channels=3, seed=9)
    base = dict(epochs=1, batch_size=16, channels=4, cells=2,
                stem_multiplier=1, seed=0)

    for kind in ACTIVATION_KINDS:
        eng = SearchEngine(space, SearchConfig(mode="fixed-activation",
                                               fixed_activation=kind, **base),
                           data)
        eng.run_epoch()
        g = eng.derived_genotype()
        g.validate(space)
        tags = [s.activation for sels in g.cells.values() for s in sels
                if s.activation is not None]
        assert all(t == kind for t in tags)

    donor = SearchEngine(space, SearchConfig(**base), data)
    donor.run_epoch()
    snap = {k: v.copy() for k, v in donor.arch.arrays().items()
            if k.startswith("beta")}
    frozen = SearchEngine(space, SearchConfig(mode="frozen-beta", **base),
                          data, beta_snapshot=snap)
    alpha_before = frozen.arch.arrays()["alpha_normal"].copy()
    frozen.run_epoch()
    assert np.array_equal(frozen.arch.arrays()["beta_normal"],
                          snap["beta_normal"])
    assert not np.array_equal(frozen.arch.arrays()["alpha_normal"], alpha_before)
    frozen.derived_genotype().validate(space)

    source = donor.derived_genotype()
    for kind in ("relu", "selu"):
        moved = with_fixed_activation(source, kind)
        moved.validate(space)
        again = parse_genotype(serialize_genotype(moved), space)
        assert serialize_genotype(again) == serialize_genotype(moved)
        assert all(s.activation == kind for sels in moved.cells.values()
                   for s in sels if s.activation is not None)

    report(capsys, 9, "nine pinned kinds, frozen betas bitwise, transforms valid")


# ---------------------------------------------------------------------------
# 10. byte-identical artifacts for every subcommand
# ---------------------------------------------------------------------------


def test_criterion_10_determinism_all_subcommands(capsys, tmp_path):
    cfg = tmp_path / "tiny.cfg"
    cfg.write_text(TINY_CFG)
    checked = []

    def run_twice(argv_of, files, stdout_matters=False):
        payloads = []
        for tag in ("a", "b"):
            out = tmp_path / tag / argv_of.__name__
            assert main(argv_of(out)) == 0
            stdout = capsys.readouterr().out
            blob = {name: (out / name).read_bytes() for name in files}
            if stdout_matters:
                blob["stdout"] = stdout.encode()
            payloads.append(blob)
        assert payloads[0] == payloads[1], argv_of.__name__
        checked.append(argv_of.__name__)
        return tmp_path / "a" / argv_of.__name__

    def search(out):
        return ["search", "--config", str(cfg), "--out", str(out)]

    sdir = run_twice(search, ("checkpoint.fnas", "genotype.txt", "history.csv",
                              "cells.dot", "config.resolved"))

    def derive(out):
        return ["derive", "--checkpoint", str(sdir / "checkpoint.fnas"),
                "--out", str(out)]

    run_twice(derive, ("genotype.txt",))

    def retrain_cmd(out):
        return ["retrain", "--config", str(cfg),
                "--genotype", str(sdir / "genotype.txt"), "--out", str(out)]

    rdir = run_twice(retrain_cmd, ("metrics.csv", "summary.json", "model.fnas",
                                   "config.resolved"))

    def eval_cmd(out):
        return ["eval", "--config", str(cfg), "--model", str(rdir / "model.fnas")]

    run_twice(eval_cmd, (), stdout_matters=True)

    def space_size(out):
        return ["space-size", "--config", str(cfg)]

    run_twice(space_size, (), stdout_matters=True)

    def render(out):
        return ["render", "--genotype", str(sdir / "genotype.txt"),
                "--out", str(out)]

    run_twice(render, ("cells.dot",))

    assert len(checked) == 6
    report(capsys, 10, "six subcommands reproduce byte-identically")
