"""The factorized operator space and its combinatorics.

A cell edge carries one regular operator from O1 and, when that operator is
parameterized (the convolutions), one activation from O2 applied to the
edge input first.  Non-parameterized operators (pooling, skip, none) act on
the raw input, so they contribute a single choice each.  All counting here
is exact integer arithmetic.
"""

import math
from dataclasses import dataclass

import numpy as np

from . import convops
from .activations import ACTIVATION_KINDS
from .autodiff import Tensor
from .errors import ConfigError
from .nn import BatchNorm2d, Conv2d, Module

REGULAR_OPS = (
    "sep_conv_3x3", "sep_conv_5x5", "dil_conv_3x3", "dil_conv_5x5",
    "max_pool_3x3", "avg_pool_3x3", "skip_connect", "none",
)

PARAMETERIZED_OPS = frozenset(
    ("sep_conv_3x3", "sep_conv_5x5", "dil_conv_3x3", "dil_conv_5x5"))


def is_parameterized(kind: str) -> bool:
    return kind in PARAMETERIZED_OPS


@dataclass(frozen=True)
class SpaceConfig:
    """Search-space shape: operator pools and cell topology."""

    regular_ops: tuple = REGULAR_OPS
    activation_ops: tuple = ACTIVATION_KINDS
    nodes: int = 4
    edge_inputs: int = 2  # retained predecessors per node after derivation
    cell_types: int = 2   # normal + reduction

    def __post_init__(self):
        if len(set(self.regular_ops)) != len(self.regular_ops):
            raise ConfigError("duplicate regular op")
        for op in self.regular_ops:
            if op not in REGULAR_OPS:
                raise ConfigError(f"unknown regular op {op!r}")
        if len(set(self.activation_ops)) != len(self.activation_ops):
            raise ConfigError("duplicate activation op")
        for a in self.activation_ops:
            if a not in ACTIVATION_KINDS:
                raise ConfigError(f"unknown activation {a!r}")
        if not self.activation_ops:
            raise ConfigError("activation pool must not be empty")
        if not any(is_parameterized(op) for op in self.regular_ops):
            raise ConfigError("need at least one parameterized regular op")
        if self.nodes < 1:
            raise ConfigError("nodes must be >= 1")
        if self.edge_inputs < 1 or self.edge_inputs > 2:
            raise ConfigError("edge_inputs must be 1 or 2")
        if self.cell_types not in (1, 2):
            raise ConfigError("cell_types must be 1 or 2")

    @property
    def cell_names(self) -> tuple:
        return ("normal",) if self.cell_types == 1 else ("normal", "reduce")

    @property
    def parameterized_ops(self) -> tuple:
        return tuple(op for op in self.regular_ops if is_parameterized(op))

    @property
    def nonparameterized_ops(self) -> tuple:
        return tuple(op for op in self.regular_ops if not is_parameterized(op))


def edge_count(nodes: int) -> int:
    """Edges in one cell: node j sees 2 cell inputs plus nodes 0..j-1."""
    return sum(j + 2 for j in range(nodes))


def super_operator_labels(space: SpaceConfig) -> tuple:
    """Canonical (regular op, activation-or-None) per super-operator.

    Parameterized ops pair with every activation; the rest stand alone.
    Order: regular ops in pool order, activations in pool order within each.
    """
    labels = []
    for op in space.regular_ops:
        if is_parameterized(op):
            labels.extend((op, act) for act in space.activation_ops)
        else:
            labels.append((op, None))
    return tuple(labels)


def super_operator_count(space: SpaceConfig) -> int:
    """Distinct (regular op, activation) super-operators on one edge."""
    return len(super_operator_labels(space))


def arch_param_counts(space: SpaceConfig) -> dict:
    """Continuous architecture parameter counts for both parameterizations."""
    e = edge_count(space.nodes)
    t = space.cell_types
    alpha = e * len(space.regular_ops)
    beta = e * len(space.activation_ops)
    flat = e * super_operator_count(space)
    return {
        "alpha_per_cell_type": alpha,
        "beta_per_cell_type": beta,
        "alpha_total": alpha * t,
        "beta_total": beta * t,
        "factorized_total": (alpha + beta) * t,
        "flat_total": flat * t,
    }


def _edge_choices(space: SpaceConfig) -> int:
    """Distinct super-operators a retained edge can take, excluding none."""
    p = len(space.parameterized_ops)
    non_none = sum(1 for op in space.nonparameterized_ops if op != "none")
    return p * len(space.activation_ops) + non_none


def cell_cardinality(space: SpaceConfig) -> int:
    """Exact count of discrete cells of one type."""
    topo = 1
    for j in range(space.nodes):
        topo *= math.comb(j + 2, space.edge_inputs)
    return topo * _edge_choices(space) ** (space.edge_inputs * space.nodes)


def space_cardinality(space: SpaceConfig) -> int:
    """Exact count of discrete architectures (all cell types jointly)."""
    return cell_cardinality(space) ** space.cell_types


# ---------------------------------------------------------------------------
# regular operator blocks
# ---------------------------------------------------------------------------
#
# Parameterized blocks expect input that the caller has already activated
# (the mixture or the chosen discrete activation).  Their interior
# activation between the two separable stages stays a plain relu.


def _relu(x):
    from .activations import apply_activation
    return apply_activation("relu", x)


class SepConv(Module):
    """Two stacked depthwise-separable stages: (dw k x k, pw 1x1, bn) x 2
    with a relu between the stages.  Stride applies in the first stage."""

    def __init__(self, channels: int, kernel: int, stride: int, affine: bool,
                 rng: np.random.Generator):
        super().__init__()
        pad = kernel // 2
        self.dw1 = Conv2d(channels, channels, kernel, stride=stride, padding=pad,
                          groups=channels, rng=rng)
        self.pw1 = Conv2d(channels, channels, 1, rng=rng)
        self.bn1 = BatchNorm2d(channels, affine=affine)
        self.dw2 = Conv2d(channels, channels, kernel, stride=1, padding=pad,
                          groups=channels, rng=rng)
        self.pw2 = Conv2d(channels, channels, 1, rng=rng)
        self.bn2 = BatchNorm2d(channels, affine=affine)

    def forward(self, x):
        y = self.bn1(self.pw1(self.dw1(x)))
        y = _relu(y)
        return self.bn2(self.pw2(self.dw2(y)))


class DilConv(Module):
    """Dilated depthwise conv then pointwise, then bn.  Dilation fixed at 2;
    padding keeps the stride-1 spatial size."""

    def __init__(self, channels: int, kernel: int, stride: int, affine: bool,
                 rng: np.random.Generator):
        super().__init__()
        pad = kernel // 2 * 2
        self.dw = Conv2d(channels, channels, kernel, stride=stride, padding=pad,
                         dilation=2, groups=channels, rng=rng)
        self.pw = Conv2d(channels, channels, 1, rng=rng)
        self.bn = BatchNorm2d(channels, affine=affine)

    def forward(self, x):
        return self.bn(self.pw(self.dw(x)))


class PoolBN(Module):
    def __init__(self, mode: str, channels: int, kernel: int, stride: int,
                 affine: bool):
        super().__init__()
        if mode not in ("max", "avg"):
            raise ConfigError(f"unknown pool mode {mode!r}")
        self.mode = mode
        self.kernel = kernel
        self.stride = stride
        self.bn = BatchNorm2d(channels, affine=affine)

    def forward(self, x):
        if self.mode == "max":
            y = convops.max_pool2d(x, self.kernel, stride=self.stride, padding=1)
        else:
            y = convops.avg_pool2d(x, self.kernel, stride=self.stride, padding=1)
        return self.bn(y)


class Identity(Module):
    def forward(self, x):
        return x


class Zero(Module):
    """The none operator: a zero map, spatially strided when reducing."""

    def __init__(self, stride: int):
        super().__init__()
        self.stride = stride

    def forward(self, x):
        d = x.data
        if self.stride == 1:
            return Tensor(np.zeros_like(d))
        s = self.stride
        return Tensor(np.zeros_like(d[:, :, ::s, ::s]))


class FactorizedReduce(Module):
    """Halve the spatial extent without losing pixels: two 1x1 stride-2 convs,
    the second on a one-pixel-shifted view, concatenated then normalized."""

    def __init__(self, in_channels: int, out_channels: int, affine: bool,
                 rng: np.random.Generator):
        super().__init__()
        if out_channels % 2:
            raise ConfigError("FactorizedReduce needs an even channel count")
        self.conv1 = Conv2d(in_channels, out_channels // 2, 1, stride=2, rng=rng)
        self.conv2 = Conv2d(in_channels, out_channels // 2, 1, stride=2, rng=rng)
        self.bn = BatchNorm2d(out_channels, affine=affine)

    def forward(self, x):
        from .autodiff import concat_channels
        x = _relu(x)
        y = concat_channels([self.conv1(x), self.conv2(convops.offset_crop(x))])
        return self.bn(y)


class ReLUConvBN(Module):
    """relu -> 1x1 conv -> bn; the cell preprocessing block."""

    def __init__(self, in_channels: int, out_channels: int, affine: bool,
                 rng: np.random.Generator):
        super().__init__()
        self.conv = Conv2d(in_channels, out_channels, 1, rng=rng)
        self.bn = BatchNorm2d(out_channels, affine=affine)

    def forward(self, x):
        return self.bn(self.conv(_relu(x)))


def regular_op_factory(kind: str, channels: int, stride: int, affine: bool,
                       rng: np.random.Generator) -> Module:
    """Build the module for one regular operator at one edge.

    Parameterized kinds return blocks that expect pre-activated input.
    """
    if kind == "sep_conv_3x3":
        return SepConv(channels, 3, stride, affine, rng)
    if kind == "sep_conv_5x5":
        return SepConv(channels, 5, stride, affine, rng)
    if kind == "dil_conv_3x3":
        return DilConv(channels, 3, stride, affine, rng)
    if kind == "dil_conv_5x5":
        return DilConv(channels, 5, stride, affine, rng)
    if kind == "max_pool_3x3":
        return PoolBN("max", channels, 3, stride, affine)
    if kind == "avg_pool_3x3":
        return PoolBN("avg", channels, 3, stride, affine)
    if kind == "skip_connect":
        if stride == 1:
            return Identity()
        return FactorizedReduce(channels, channels, affine, rng)
    if kind == "none":
        return Zero(stride)
    raise ConfigError(f"unknown regular op {kind!r}")
