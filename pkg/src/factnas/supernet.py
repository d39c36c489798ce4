"""Continuous-relaxation supernetwork.

Every edge of every cell evaluates a softmax-weighted mixture over operator
candidates.  In the factorized parameterization an edge carries two banks:
alpha weights over regular operators and beta weights over activations; the
activation mixture is computed once per edge and feeds only the
parameterized (convolutional) candidates, while pooling/skip/none see the
raw edge input.  The non-factorized parameterization materializes every
(operator, activation) pair as its own branch with its own weights under a
single flat softmax.

Architecture parameters live outside the Module tree (ArchParams), so
``SuperNetwork.parameters()`` yields only network weights; the two tensor
families can then be handed to different optimizers.
"""

import numpy as np

from .activations import Activation, mixed_activation
from .autodiff import Tensor, add, concat_channels, global_avg_pool, softmax, take_row, weighted_sum
from .errors import ConfigError, DimensionError, NumericalError
from .nn import BatchNorm2d, Conv2d, Linear, Module
from .space import (FactorizedReduce, ReLUConvBN, SpaceConfig, edge_count,
                    is_parameterized, regular_op_factory, super_operator_labels)

MODES = ("factorized", "fixed-activation", "frozen-beta", "non-factorized")


def reduction_cell_indices(cells: int) -> set:
    """Cells that halve the spatial extent: one and two thirds of the depth."""
    if cells < 3:
        return set()
    return {cells // 3, 2 * cells // 3}


class ArchParams:
    """The continuous architecture parameter banks for one supernetwork.

    Keys are "alpha_normal", "beta_reduce", ... or "flat_normal"/"flat_reduce"
    in the non-factorized mode.  Banks are drawn as small uniform noise in
    [-init_scale, init_scale]; the draw order (all alpha banks, then all beta
    banks) is fixed so that modes omitting beta still draw identical alphas
    from the same stream.
    """

    def __init__(self, space: SpaceConfig, mode: str, rng: np.random.Generator,
                 fixed_activation: str = None, init_scale: float = 1e-3):
        if mode not in MODES:
            raise ConfigError(f"unknown mode {mode!r}")
        if mode == "fixed-activation":
            if fixed_activation is None:
                raise ConfigError("fixed-activation mode needs an activation kind")
            if fixed_activation not in space.activation_ops:
                raise ConfigError(
                    f"fixed activation {fixed_activation!r} not in the activation pool")
        self.space = space
        self.mode = mode
        self.fixed_activation = fixed_activation
        e = edge_count(space.nodes)
        self.tensors = {}

        def draw(shape):
            return Tensor(rng.uniform(-init_scale, init_scale, size=shape),
                          requires_grad=True)

        if mode == "non-factorized":
            k = len(super_operator_labels(space))
            for name in space.cell_names:
                self.tensors[f"flat_{name}"] = draw((e, k))
        else:
            for name in space.cell_names:
                self.tensors[f"alpha_{name}"] = draw((e, len(space.regular_ops)))
            if mode != "fixed-activation":
                for name in space.cell_names:
                    self.tensors[f"beta_{name}"] = draw((e, len(space.activation_ops)))

    def freeze_beta(self, snapshot: dict) -> None:
        """Overwrite beta banks with a snapshot and stop updating them."""
        if self.mode != "frozen-beta":
            raise ConfigError("freeze_beta applies to frozen-beta mode")
        for name in self.space.cell_names:
            key = f"beta_{name}"
            src = np.asarray(snapshot[key], dtype=np.float64)
            if src.shape != self.tensors[key].data.shape:
                raise DimensionError(f"beta snapshot shape mismatch for {key}")
            self.tensors[key].data[...] = src
            self.tensors[key].requires_grad = False

    def param_groups(self) -> dict:
        """Trainable tensor groups in their update order."""
        if self.mode == "non-factorized":
            return {"flat": [self.tensors[f"flat_{n}"] for n in self.space.cell_names]}
        groups = {"alpha": [self.tensors[f"alpha_{n}"] for n in self.space.cell_names]}
        if self.mode == "factorized":
            groups["beta"] = [self.tensors[f"beta_{n}"] for n in self.space.cell_names]
        return groups

    def arrays(self) -> dict:
        return {name: t.data for name, t in self.tensors.items()}

    def forward_weights(self) -> dict:
        """Softmax each bank along its candidate axis (records on the tape)."""
        return {name: softmax(t, axis=-1) for name, t in self.tensors.items()}

    def entropy_summary(self) -> dict:
        """Mean per-edge softmax entropy per family, for the history log."""
        sums = {"alpha": [], "beta": [], "flat": []}
        for name, t in self.tensors.items():
            z = t.data - t.data.max(axis=-1, keepdims=True)
            e = np.exp(z)
            p = e / e.sum(axis=-1, keepdims=True)
            ent = -(p * np.log(np.maximum(p, 1e-300))).sum(axis=-1)
            sums[name.split("_")[0]].append(ent.mean())
        return {fam: (float(np.mean(v)) if v else float("nan"))
                for fam, v in sums.items()}


class MixedActivation(Module):
    """Softmax-weighted sum of every activation in the pool.

    Owns one instance of each activation, so the learnable prelu/swish
    scalars are per-site parameters trained with the network weights.
    """

    def __init__(self, kinds):
        super().__init__()
        self.insts = [Activation(k) for k in kinds]
        for inst in self.insts:
            if inst.param is not None:
                setattr(self, f"{inst.kind}_param", inst.param)

    def forward(self, x, weight_row, rrelu_rng=None):
        return mixed_activation(x, weight_row, self.insts,
                                training=self.training, rng=rrelu_rng)


class MixedEdge(Module):
    """Factorized edge: one activation mixture feeding the parameterized
    candidates, raw input to the rest, combined under the alpha softmax."""

    def __init__(self, space: SpaceConfig, channels: int, stride: int,
                 rng: np.random.Generator):
        super().__init__()
        self.kinds = space.regular_ops
        self.mixed_act = MixedActivation(space.activation_ops)
        self.ops = [regular_op_factory(k, channels, stride, False, rng)
                    for k in self.kinds]

    def forward(self, x, alpha_row, beta_row, rrelu_rng=None):
        xa = self.mixed_act(x, beta_row, rrelu_rng=rrelu_rng)
        branches = [op(xa if is_parameterized(kind) else x)
                    for kind, op in zip(self.kinds, self.ops)]
        return weighted_sum(alpha_row, branches)


class FixedActEdge(Module):
    """Edge with the activation choice pinned to a single kind."""

    def __init__(self, space: SpaceConfig, act_kind: str, channels: int,
                 stride: int, rng: np.random.Generator):
        super().__init__()
        self.kinds = space.regular_ops
        self.act = Activation(act_kind)
        if self.act.param is not None:
            setattr(self, f"{act_kind}_param", self.act.param)
        self.ops = [regular_op_factory(k, channels, stride, False, rng)
                    for k in self.kinds]

    def forward(self, x, alpha_row, rrelu_rng=None):
        xa = self.act(x, training=self.training, rng=rrelu_rng)
        branches = [op(xa if is_parameterized(kind) else x)
                    for kind, op in zip(self.kinds, self.ops)]
        return weighted_sum(alpha_row, branches)


class SuperOp(Module):
    """One (regular op, activation) pair with its own weights."""

    def __init__(self, op_kind: str, act_kind, channels: int, stride: int,
                 rng: np.random.Generator):
        super().__init__()
        self.act = Activation(act_kind) if act_kind is not None else None
        if self.act is not None and self.act.param is not None:
            setattr(self, f"{act_kind}_param", self.act.param)
        self.op = regular_op_factory(op_kind, channels, stride, False, rng)

    def forward(self, x, rrelu_rng=None):
        if self.act is not None:
            x = self.act(x, training=self.training, rng=rrelu_rng)
        return self.op(x)


class FlatEdge(Module):
    """Non-factorized edge: every super-operator materialized separately."""

    def __init__(self, space: SpaceConfig, channels: int, stride: int,
                 rng: np.random.Generator):
        super().__init__()
        self.labels = super_operator_labels(space)
        self.branches = [SuperOp(op, act, channels, stride, rng)
                         for op, act in self.labels]

    def forward(self, x, flat_row, rrelu_rng=None):
        outs = [b(x, rrelu_rng=rrelu_rng) for b in self.branches]
        return weighted_sum(flat_row, outs)


class Cell(Module):
    """One cell: two preprocessed inputs, `nodes` intermediate nodes fully
    connected to all predecessors, output = channel concat of the nodes."""

    def __init__(self, space: SpaceConfig, mode: str, c_pp: int, c_p: int,
                 c: int, reduction: bool, reduction_prev: bool,
                 rng: np.random.Generator, fixed_activation: str = None):
        super().__init__()
        self.reduction = reduction
        self.node_count = space.nodes
        if reduction_prev:
            self.pre0 = FactorizedReduce(c_pp, c, False, rng)
        else:
            self.pre0 = ReLUConvBN(c_pp, c, False, rng)
        self.pre1 = ReLUConvBN(c_p, c, False, rng)
        edges = []
        for j in range(space.nodes):
            for i in range(j + 2):
                stride = 2 if reduction and i < 2 else 1
                if mode == "non-factorized":
                    edges.append(FlatEdge(space, c, stride, rng))
                elif mode == "fixed-activation":
                    edges.append(FixedActEdge(space, fixed_activation, c, stride, rng))
                else:
                    edges.append(MixedEdge(space, c, stride, rng))
        self.edges = edges
        self.mode = mode

    def forward(self, s0, s1, weights: dict, cell_index: int, rrelu_rng=None):
        states = [self.pre0(s0), self.pre1(s1)]
        bank = "reduce" if self.reduction else "normal"
        if self.mode == "non-factorized":
            w_flat = weights[f"flat_{bank}"]
            w_alpha = w_beta = None
        else:
            w_alpha = weights[f"alpha_{bank}"]
            w_beta = weights.get(f"beta_{bank}")
        e = 0
        for j in range(self.node_count):
            acc = None
            for i in range(j + 2):
                edge = self.edges[e]
                if self.mode == "non-factorized":
                    y = edge(states[i], take_row(w_flat, e), rrelu_rng=rrelu_rng)
                elif self.mode == "fixed-activation":
                    y = edge(states[i], take_row(w_alpha, e), rrelu_rng=rrelu_rng)
                else:
                    y = edge(states[i], take_row(w_alpha, e),
                             take_row(w_beta, e), rrelu_rng=rrelu_rng)
                if not np.isfinite(y.data.sum()):
                    raise NumericalError(
                        f"non-finite edge output: cell {cell_index} ({bank}) "
                        f"edge {e} (node {j}, input {i})")
                acc = y if acc is None else add(acc, y)
                e += 1
            states.append(acc)
        return concat_channels(states[2:])


class SuperNetwork(Module):
    """Stem, a stack of cells (reductions at one and two thirds), global
    average pooling, linear classifier."""

    def __init__(self, space: SpaceConfig, mode: str, in_channels: int,
                 classes: int, channels: int = 16, cells: int = 8,
                 stem_multiplier: int = 3, rng: np.random.Generator = None,
                 fixed_activation: str = None):
        super().__init__()
        if rng is None:
            raise ConfigError("SuperNetwork requires an init rng")
        if classes < 2:
            raise ConfigError("need at least two classes")
        red = reduction_cell_indices(cells)
        if red and space.cell_types == 1:
            raise ConfigError(
                "a single-cell-type space cannot build reduction cells; use cells <= 2")
        self.space = space
        self.mode = mode
        c_curr = stem_multiplier * channels
        self.stem_conv = Conv2d(in_channels, c_curr, 3, padding=1, rng=rng)
        self.stem_bn = BatchNorm2d(c_curr, affine=True)
        c_pp, c_p, c = c_curr, c_curr, channels
        cells_list = []
        reduction_prev = False
        for ci in range(cells):
            reduction = ci in red
            if reduction:
                c *= 2
            cell = Cell(space, mode, c_pp, c_p, c, reduction, reduction_prev,
                        rng, fixed_activation)
            cells_list.append(cell)
            reduction_prev = reduction
            c_pp, c_p = c_p, space.nodes * c
        self.cells = cells_list
        self.classifier = Linear(c_p, classes, rng=rng)

    def forward(self, images, arch: ArchParams, rrelu_rng=None):
        x = images if isinstance(images, Tensor) else Tensor(images)
        if x.data.ndim != 4:
            raise DimensionError("network input must be (N, C, H, W)")
        weights = arch.forward_weights()
        s = self.stem_bn(self.stem_conv(x))
        s0 = s1 = s
        for ci, cell in enumerate(self.cells):
            s0, s1 = s1, cell(s0, s1, weights, ci, rrelu_rng=rrelu_rng)
        return self.classifier(global_avg_pool(s1))
