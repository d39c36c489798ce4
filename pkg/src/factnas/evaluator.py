"""Discrete-architecture training and evaluation.

A genotype lowers to a fixed network: each selection becomes its chosen
activation (for parameterized ops) feeding its operator block, nodes sum
their two retained edges, cells concatenate their nodes.  Retraining adds
the usual small-image regularizers: stochastic branch dropping with a
linear schedule, cutout, label smoothing, an auxiliary classifier after the
second reduction cell, gradient-norm clipping, and cosine learning-rate
decay to zero.
"""

from dataclasses import dataclass, field

import numpy as np

from . import rng as rngmod
from .activations import Activation
from .autodiff import (Graph, MacCounter, Tensor, add, backward, concat_channels,
                       cross_entropy, global_avg_pool, mul, predictions,
                       scale_samples)
from .datasets import Dataset, augment_batch
from .errors import ConfigError, NumericalError
from .genotype import Genotype
from .nn import BatchNorm2d, Conv2d, Linear, Module
from .optim import SGDMomentum, clip_grad_norm, cosine_lr, zero_grads
from .space import FactorizedReduce, Identity, ReLUConvBN, is_parameterized, regular_op_factory
from .supernet import reduction_cell_indices


def droppath(x: Tensor, p: float, training: bool,
             rng: np.random.Generator = None) -> Tensor:
    """Zero each sample's branch with probability p; survivors scale 1/(1-p).

    Identity branches are exempt by convention at the call site, not here.
    """
    if not 0.0 <= p < 1.0:
        raise ConfigError(f"droppath probability {p} outside [0, 1)")
    if not training or p == 0.0:
        return x
    if rng is None:
        raise ConfigError("droppath needs an rng in training mode")
    n = x.data.shape[0]
    keep = (rng.random(n) >= p).astype(np.float64) / (1.0 - p)
    return scale_samples(x, keep)


class DiscreteOp(Module):
    """One retained edge: optional activation, operator block, branch drop."""

    def __init__(self, selection, channels: int, stride: int,
                 rng: np.random.Generator):
        super().__init__()
        self.act = None
        if is_parameterized(selection.op):
            self.act = Activation(selection.activation)
            if self.act.param is not None:
                setattr(self, f"{selection.activation}_param", self.act.param)
        self.op = regular_op_factory(selection.op, channels, stride, True, rng)
        self.skip = isinstance(self.op, Identity)

    def forward(self, x, drop_p: float = 0.0, drop_rng=None, rrelu_rng=None):
        y = x if self.act is None else self.act(x, training=self.training, rng=rrelu_rng)
        y = self.op(y)
        if self.training and drop_p > 0.0 and not self.skip:
            y = droppath(y, drop_p, True, drop_rng)
        return y


class DiscreteCell(Module):
    def __init__(self, selections, c_pp: int, c_p: int, c: int, reduction: bool,
                 reduction_prev: bool, nodes: int, rng: np.random.Generator):
        super().__init__()
        self.reduction = reduction
        self.nodes = nodes
        if reduction_prev:
            self.pre0 = FactorizedReduce(c_pp, c, True, rng)
        else:
            self.pre0 = ReLUConvBN(c_pp, c, True, rng)
        self.pre1 = ReLUConvBN(c_p, c, True, rng)
        ordered = sorted(selections, key=lambda s: (s.node, s.pred))
        self.preds = [s.pred for s in ordered]
        self.node_of = [s.node for s in ordered]
        self.ops = [
            DiscreteOp(s, c, 2 if reduction and s.pred < 2 else 1, rng)
            for s in ordered
        ]

    def forward(self, s0, s1, drop_p=0.0, drop_rng=None, rrelu_rng=None):
        states = [self.pre0(s0), self.pre1(s1)]
        for j in range(self.nodes):
            acc = None
            for k, op in enumerate(self.ops):
                if self.node_of[k] != j:
                    continue
                y = op(states[self.preds[k]], drop_p, drop_rng, rrelu_rng)
                acc = y if acc is None else add(acc, y)
            states.append(acc)
        return concat_channels(states[2:])


class AuxiliaryHead(Module):
    """Small classifier tapped after the second reduction: works at any
    spatial size (1x1 conv then global pooling)."""

    def __init__(self, channels: int, classes: int, rng: np.random.Generator):
        super().__init__()
        self.conv = Conv2d(channels, 128, 1, rng=rng)
        self.bn = BatchNorm2d(128, affine=True)
        self.fc = Linear(128, classes, rng=rng)

    def forward(self, x):
        from .activations import apply_activation
        y = apply_activation("relu", x)
        y = apply_activation("relu", self.bn(self.conv(y)))
        return self.fc(global_avg_pool(y))


class DiscreteNetwork(Module):
    """Stem, genotype cells with reductions at thirds, optional aux head."""

    def __init__(self, genotype: Genotype, in_channels: int, classes: int,
                 channels: int = 16, cells: int = 8, stem_multiplier: int = 3,
                 auxiliary: bool = False, rng: np.random.Generator = None):
        super().__init__()
        if rng is None:
            raise ConfigError("DiscreteNetwork requires an init rng")
        red = reduction_cell_indices(cells)
        if red and "reduce" not in genotype.cells:
            raise ConfigError("genotype lacks a reduce cell but the network reduces")
        nodes = max(s.node for s in genotype.cells["normal"]) + 1
        c_curr = stem_multiplier * channels
        self.stem_conv = Conv2d(in_channels, c_curr, 3, padding=1, rng=rng)
        self.stem_bn = BatchNorm2d(c_curr, affine=True)
        c_pp, c_p, c = c_curr, c_curr, channels
        cells_list = []
        reduction_prev = False
        self.aux_index = (2 * cells) // 3 if (auxiliary and red) else None
        aux_channels = None
        for ci in range(cells):
            reduction = ci in red
            if reduction:
                c *= 2
            sels = genotype.cells["reduce" if reduction else "normal"]
            cell = DiscreteCell(sels, c_pp, c_p, c, reduction, reduction_prev,
                                nodes, rng)
            cells_list.append(cell)
            reduction_prev = reduction
            c_pp, c_p = c_p, nodes * c
            if self.aux_index is not None and ci == self.aux_index:
                aux_channels = c_p
        self.cells = cells_list
        self.aux_head = None
        if self.aux_index is not None:
            self.aux_head = AuxiliaryHead(aux_channels, classes, rng)
        self.classifier = Linear(c_p, classes, rng=rng)

    def forward(self, images, drop_p: float = 0.0, drop_rng=None, rrelu_rng=None):
        x = images if isinstance(images, Tensor) else Tensor(images)
        s = self.stem_bn(self.stem_conv(x))
        s0 = s1 = s
        aux_logits = None
        for ci, cell in enumerate(self.cells):
            s0, s1 = s1, cell(s0, s1, drop_p, drop_rng, rrelu_rng)
            if self.aux_index is not None and ci == self.aux_index and self.training:
                aux_logits = self.aux_head(s1)
        return self.classifier(global_avg_pool(s1)), aux_logits


def parameter_count(net: Module) -> int:
    return sum(p.data.size for p in net.parameters())


def macs_per_image(net: Module, in_channels: int, image_size: int) -> int:
    """Forward multiply-accumulates for a single image in eval mode."""
    was_training = net.training
    net.eval()
    x = np.zeros((1, in_channels, image_size, image_size))
    with MacCounter() as mc:
        net.forward(x)
    net.train(was_training)
    return mc.total


@dataclass
class TrainConfig:
    epochs: int = 20
    batch_size: int = 64
    channels: int = 16
    cells: int = 8
    stem_multiplier: int = 3
    lr: float = 0.03
    lr_min: float = 0.0
    momentum: float = 0.9
    weight_decay: float = 3e-4
    grad_clip: float = 5.0
    droppath: float = 0.2
    cutout_length: int = 0
    label_smoothing: float = 0.0
    auxiliary: bool = True
    aux_weight: float = 0.4
    pad_crop: int = 4
    hflip: bool = False
    seed: int = 0

    def validate(self):
        if self.epochs < 1:
            raise ConfigError("epochs must be >= 1")
        if self.batch_size < 2:
            raise ConfigError("batch_size must be >= 2 for batch statistics")
        if not 0.0 <= self.droppath < 1.0:
            raise ConfigError("droppath must lie in [0, 1)")
        if not 0.0 <= self.label_smoothing < 1.0:
            raise ConfigError("label_smoothing must lie in [0, 1)")
        if self.aux_weight < 0:
            raise ConfigError("aux_weight must be non-negative")
        return self


@dataclass
class RetrainResult:
    rows: list
    final_test_error: float
    param_count: int
    macs: int
    net: DiscreteNetwork = field(repr=False, default=None)


def evaluate(net: DiscreteNetwork, ds: Dataset, batch_size: int = 128) -> tuple:
    """Mean loss and error rate over a dataset in evaluation mode."""
    was_training = net.training
    net.eval()
    losses, wrong, seen = [], 0, 0
    for start in range(0, len(ds), batch_size):
        x = ds.images[start : start + batch_size]
        y = ds.labels[start : start + batch_size]
        logits, _ = net.forward(x)
        losses.append(cross_entropy(logits, y).item() * len(y))
        wrong += int((predictions(logits) != y).sum())
        seen += len(y)
    net.train(was_training)
    return float(np.sum(losses) / seen), wrong / seen


def droppath_schedule(cfg_rate: float, epoch: int, total: int) -> float:
    """Linear ramp from 0 to the configured rate across retraining."""
    if total <= 1:
        return cfg_rate
    return cfg_rate * epoch / (total - 1)


def retrain(genotype: Genotype, train_ds: Dataset, test_ds: Dataset,
            cfg: TrainConfig, log=None) -> RetrainResult:
    """Train a derived architecture from scratch and track test error.

    test_ds may be None to skip per-epoch evaluation (metrics carry nan).
    """
    cfg.validate()
    if test_ds is not None and train_ds.classes != test_ds.classes:
        raise ConfigError("train/test class counts differ")
    init_rng = rngmod.substream(cfg.seed, "init")
    data_rng = rngmod.substream(cfg.seed, "data")
    drop_rng = rngmod.substream(cfg.seed, "droppath")
    rrelu_rng = rngmod.substream(cfg.seed, "rrelu")
    aug_rng = rngmod.substream(cfg.seed, "augment")

    net = DiscreteNetwork(
        genotype, in_channels=train_ds.images.shape[1], classes=train_ds.classes,
        channels=cfg.channels, cells=cfg.cells, stem_multiplier=cfg.stem_multiplier,
        auxiliary=cfg.auxiliary, rng=init_rng)
    params = net.parameters()
    opt = SGDMomentum(params, cfg.lr, momentum=cfg.momentum,
                      weight_decay=cfg.weight_decay)
    n = len(train_ds)
    if n < cfg.batch_size:
        raise ConfigError("training set smaller than one batch")
    rows = []
    for epoch in range(cfg.epochs):
        opt.lr = cosine_lr(epoch, cfg.epochs, cfg.lr, cfg.lr_min)
        drop_p = droppath_schedule(cfg.droppath, epoch, cfg.epochs)
        perm = data_rng.permutation(n)
        losses = []
        net.train()
        for s in range(n // cfg.batch_size):
            idx = perm[s * cfg.batch_size : (s + 1) * cfg.batch_size]
            x = augment_batch(train_ds.images[idx], aug_rng,
                              pad_crop=cfg.pad_crop, hflip=cfg.hflip,
                              cutout_length=cfg.cutout_length)
            y = train_ds.labels[idx]
            zero_grads(params)
            with Graph():
                logits, aux = net.forward(x, drop_p=drop_p, drop_rng=drop_rng,
                                          rrelu_rng=rrelu_rng)
                loss = cross_entropy(logits, y, label_smoothing=cfg.label_smoothing)
                if aux is not None and cfg.aux_weight > 0:
                    aux_loss = cross_entropy(aux, y, label_smoothing=cfg.label_smoothing)
                    loss = add(loss, mul(aux_loss, cfg.aux_weight))
            value = loss.item()
            if not np.isfinite(value):
                raise NumericalError(f"non-finite training loss in epoch {epoch}")
            backward(loss)
            clip_grad_norm(params, cfg.grad_clip)
            opt.step()
            losses.append(value)
        if test_ds is not None:
            test_loss, test_err = evaluate(net, test_ds, batch_size=cfg.batch_size)
        else:
            test_loss = test_err = float("nan")
        row = {
            "epoch": epoch,
            "train_loss": float(np.mean(losses)),
            "test_loss": test_loss,
            "test_error": test_err,
        }
        rows.append(row)
        if log is not None:
            log(f"epoch {epoch}: train_loss={row['train_loss']:.4f} "
                f"test_error={test_err:.4f}")
    return RetrainResult(
        rows=rows,
        final_test_error=rows[-1]["test_error"],
        param_count=parameter_count(net),
        macs=macs_per_image(net, train_ds.images.shape[1], train_ds.images.shape[2]),
        net=net,
    )


METRICS_HEADER = "epoch,train_loss,test_loss,test_error"


def metrics_csv(rows) -> str:
    from .ioutil import fmt_float

    lines = [METRICS_HEADER]
    for r in rows:
        lines.append(",".join([
            str(r["epoch"]),
            fmt_float(r["train_loss"]),
            fmt_float(r["test_loss"]),
            fmt_float(r["test_error"]),
        ]))
    return "\n".join(lines) + "\n"
