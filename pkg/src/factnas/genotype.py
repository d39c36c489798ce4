"""Discrete architectures: derivation from continuous weights, text and DOT
serialization, random sampling, and activation transforms.

Derivation scoring, per cell type: softmax each bank row, score each edge by
its best non-none operator weight, keep the two strongest incoming edges per
node, then select that best operator on each kept edge; parameterized
selections take the activation with the largest beta weight on their edge.
All ties break toward the lower index (predecessor, operator, activation),
so derivation is a pure function of the weight arrays.
"""

import hashlib
import re
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, FormatError
from .space import (ACTIVATION_KINDS, REGULAR_OPS, SpaceConfig, is_parameterized,
                    super_operator_labels)


@dataclass(frozen=True)
class Selection:
    """One retained edge: intermediate node, predecessor state, operator."""

    node: int            # intermediate node index, 0-based
    pred: int            # predecessor state index: 0,1 are the cell inputs
    op: str
    activation: str = None  # required iff the op is parameterized


@dataclass
class Genotype:
    cells: dict  # cell name -> list[Selection]

    def cell(self, name: str):
        return self.cells[name]

    def validate(self, space: SpaceConfig) -> None:
        if tuple(self.cells.keys()) != space.cell_names:
            raise ConfigError(
                f"genotype has cells {tuple(self.cells)}, space expects {space.cell_names}")
        for name, sels in self.cells.items():
            per_node = {}
            for s in sels:
                per_node.setdefault(s.node, []).append(s)
            if sorted(per_node) != list(range(space.nodes)):
                raise ConfigError(f"{name}: selections must cover nodes 0..{space.nodes - 1}")
            for node, group in per_node.items():
                if len(group) != space.edge_inputs:
                    raise ConfigError(
                        f"{name} node {node}: expected {space.edge_inputs} selections")
                preds = [s.pred for s in group]
                if len(set(preds)) != len(preds):
                    raise ConfigError(f"{name} node {node}: duplicate predecessor")
                for s in group:
                    if not 0 <= s.pred < node + 2:
                        raise ConfigError(
                            f"{name} node {node}: predecessor {s.pred} out of range")
                    if s.op not in space.regular_ops or s.op == "none":
                        raise ConfigError(f"{name}: invalid op {s.op!r}")
                    if is_parameterized(s.op):
                        if s.activation not in space.activation_ops:
                            raise ConfigError(
                                f"{name}: op {s.op} needs an activation from the pool")
                    elif s.activation is not None:
                        raise ConfigError(
                            f"{name}: op {s.op} must not carry an activation")


def _softmax_rows(a: np.ndarray) -> np.ndarray:
    z = a - a.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def _edge_index_table(nodes: int):
    table = {}
    e = 0
    for j in range(nodes):
        for i in range(j + 2):
            table[(j, i)] = e
            e += 1
    return table


def _derive_cell_factorized(alpha: np.ndarray, beta, space: SpaceConfig,
                            fixed_activation):
    wa = _softmax_rows(alpha)
    wb = _softmax_rows(beta) if beta is not None else None
    ops = space.regular_ops
    op_ids = [k for k, op in enumerate(ops) if op != "none"]
    table = _edge_index_table(space.nodes)
    sels = []
    for j in range(space.nodes):
        scored = []
        for i in range(j + 2):
            e = table[(j, i)]
            strengths = wa[e, op_ids]
            best = int(np.argmax(strengths))  # first max wins ties
            scored.append((-strengths[best], i, op_ids[best], e))
        scored.sort()  # descending score, then lower predecessor
        for _, i, k, e in scored[: space.edge_inputs]:
            op = ops[k]
            act = None
            if is_parameterized(op):
                if wb is not None:
                    act = space.activation_ops[int(np.argmax(wb[e]))]
                else:
                    act = fixed_activation
            sels.append(Selection(node=j, pred=i, op=op, activation=act))
    sels.sort(key=lambda s: (s.node, s.pred))
    return sels


def _derive_cell_flat(flat: np.ndarray, space: SpaceConfig):
    w = _softmax_rows(flat)
    labels = super_operator_labels(space)
    keep = [k for k, (op, _) in enumerate(labels) if op != "none"]
    table = _edge_index_table(space.nodes)
    sels = []
    for j in range(space.nodes):
        scored = []
        for i in range(j + 2):
            e = table[(j, i)]
            strengths = w[e, keep]
            best = int(np.argmax(strengths))
            scored.append((-strengths[best], i, keep[best]))
        scored.sort()
        for _, i, k in scored[: space.edge_inputs]:
            op, act = labels[k]
            sels.append(Selection(node=j, pred=i, op=op, activation=act))
    sels.sort(key=lambda s: (s.node, s.pred))
    return sels


def derive_genotype(arrays: dict, space: SpaceConfig,
                    fixed_activation: str = None) -> Genotype:
    """Discretize architecture weight banks into a genotype.

    arrays holds the raw (pre-softmax) banks keyed like ArchParams.arrays().
    For alpha-only banks (fixed-activation searches) pass the pinned kind.
    """
    cells = {}
    for name in space.cell_names:
        if f"flat_{name}" in arrays:
            cells[name] = _derive_cell_flat(np.asarray(arrays[f"flat_{name}"]), space)
            continue
        if f"alpha_{name}" not in arrays:
            raise ConfigError(f"no architecture bank for cell type {name!r}")
        alpha = np.asarray(arrays[f"alpha_{name}"])
        beta = arrays.get(f"beta_{name}")
        beta = None if beta is None else np.asarray(beta)
        if beta is None and fixed_activation is None:
            raise ConfigError(
                "alpha-only banks need fixed_activation to label parameterized ops")
        cells[name] = _derive_cell_factorized(alpha, beta, space, fixed_activation)
    g = Genotype(cells=cells)
    g.validate(space)
    return g


def random_genotype(space: SpaceConfig, rng: np.random.Generator) -> Genotype:
    """Uniform draw over the discrete space (the baseline sampler)."""
    choices = [(op, act) for op, act in super_operator_labels(space) if op != "none"]
    cells = {}
    for name in space.cell_names:
        sels = []
        for j in range(space.nodes):
            preds = sorted(rng.choice(j + 2, size=space.edge_inputs, replace=False).tolist())
            for i in preds:
                op, act = choices[int(rng.integers(len(choices)))]
                sels.append(Selection(node=j, pred=int(i), op=op, activation=act))
        cells[name] = sels
    g = Genotype(cells=cells)
    g.validate(space)
    return g


def with_fixed_activation(g: Genotype, kind: str) -> Genotype:
    """Copy of g with every parameterized selection's activation replaced."""
    if kind not in ACTIVATION_KINDS:
        raise ConfigError(f"unknown activation kind {kind!r}")
    cells = {}
    for name, sels in g.cells.items():
        cells[name] = [
            Selection(s.node, s.pred, s.op, kind if is_parameterized(s.op) else None)
            for s in sels
        ]
    return Genotype(cells=cells)


# ---------------------------------------------------------------------------
# text format
# ---------------------------------------------------------------------------
#
# One line per retained edge:
#
#   <cell> <node+2> <- <pred> <op> [@<activation>]
#
# Node labels use state indexing (2 is the first intermediate node; 0 and 1
# are the cell inputs), matching the predecessor numbering.

_LINE_RE = re.compile(
    r"^(\w+)\s+(\d+)\s+<-\s+(\d+)\s+([a-z0-9_]+)(?:\s+@([a-z0-9_]+))?$")


def serialize_genotype(g: Genotype) -> str:
    lines = []
    for name, sels in g.cells.items():
        for s in sorted(sels, key=lambda s: (s.node, s.pred)):
            suffix = f" @{s.activation}" if s.activation is not None else ""
            lines.append(f"{name} {s.node + 2} <- {s.pred} {s.op}{suffix}")
    return "\n".join(lines) + "\n"


def parse_genotype(text: str, space: SpaceConfig = None) -> Genotype:
    """Inverse of serialize_genotype.  Blank lines and #-comments are skipped.

    Validates against `space` when given, else against the full known pools.
    """
    cells = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        m = _LINE_RE.match(line)
        if not m:
            raise FormatError(f"line {lineno}: unrecognized genotype line {raw!r}")
        name, node_s, pred_s, op, act = m.groups()
        node = int(node_s) - 2
        if node < 0:
            raise FormatError(
                f"line {lineno}: node label {node_s} is a cell input, not a node")
        if op not in REGULAR_OPS:
            raise FormatError(f"line {lineno}: unknown op {op!r}")
        if op == "none":
            raise FormatError(f"line {lineno}: 'none' cannot appear in a genotype")
        if is_parameterized(op):
            if act is None:
                raise FormatError(f"line {lineno}: op {op} needs an @activation")
            if act not in ACTIVATION_KINDS:
                raise FormatError(f"line {lineno}: unknown activation {act!r}")
        elif act is not None:
            raise FormatError(f"line {lineno}: op {op} must not carry an activation")
        cells.setdefault(name, []).append(
            Selection(node=node, pred=int(pred_s), op=op, activation=act))
    if not cells:
        raise FormatError("no genotype lines found")
    g = Genotype(cells=cells)
    if space is not None:
        g.validate(space)
    else:
        nodes = max(s.node for sels in cells.values() for s in sels) + 1
        inputs = len(next(iter(cells.values()))) // nodes
        try:
            g.validate(SpaceConfig(nodes=nodes, edge_inputs=inputs,
                                   cell_types=len(cells)))
        except ConfigError as exc:
            raise FormatError(str(exc)) from exc
    return g


def genotype_digest(g: Genotype) -> str:
    return hashlib.sha256(serialize_genotype(g).encode("utf8")).hexdigest()[:12]


def export_dot(g: Genotype) -> str:
    """Graphviz rendering: one digraph per cell type.

    Inputs c_{k-2}/c_{k-1}, intermediate nodes by index, output c_k collecting
    the concatenation.  Edge labels name the op, plus [activation] when the
    op is parameterized.
    """
    chunks = []
    for name, sels in g.cells.items():
        nodes = max(s.node for s in sels) + 1
        lines = [f"digraph {name} {{", "  rankdir=LR;",
                 '  node [shape=box, style=rounded];',
                 '  "c_{k-2}" [style=solid];', '  "c_{k-1}" [style=solid];',
                 '  "c_k" [style=solid];']

        def state_name(idx: int) -> str:
            if idx == 0:
                return "c_{k-2}"
            if idx == 1:
                return "c_{k-1}"
            return str(idx - 2)

        for s in sorted(sels, key=lambda s: (s.node, s.pred)):
            label = s.op if s.activation is None else f"{s.op} [{s.activation}]"
            lines.append(
                f'  "{state_name(s.pred)}" -> "{s.node}" [label="{label}"];')
        for j in range(nodes):
            lines.append(f'  "{j}" -> "c_k";')
        lines.append("}")
        chunks.append("\n".join(lines))
    return "\n\n".join(chunks) + "\n"
