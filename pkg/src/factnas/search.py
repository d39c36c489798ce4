"""Tri-level architecture search.

One step performs three first-order updates in a fixed order, each on a
freshly evaluated loss:

    1. network weights        on a training batch
    2. regular-op weights     on a validation batch (sees the new weights)
    3. activation weights     on a validation batch (sees the new alphas)

``TriLevelStepper`` implements that ordering generically over parameter
groups, so degenerate modes (no beta family, or a single flat family) reuse
the same machinery, and an optional probe can observe exactly which
parameter versions each loss was evaluated at.  ``SearchEngine`` wires the
stepper to a supernetwork, a dataset split, schedules, history logging, and
checkpointing.
"""

import math
from dataclasses import asdict, dataclass, field

import numpy as np

from . import rng as rngmod
from .autodiff import Graph, Tensor, backward, cross_entropy
from .checkpoint import Checkpoint, config_digest
from .datasets import Dataset, augment_batch
from .errors import ConfigError, NumericalError, UsageError
from .genotype import derive_genotype, genotype_digest
from .optim import Adam, SGDMomentum, clip_grad_norm, cosine_lr, zero_grads
from .space import SpaceConfig
from .supernet import MODES, ArchParams, SuperNetwork


def split_dataset(ds: Dataset, fractions, seed: int):
    """Stratified split into len(fractions) disjoint parts.

    Part sizes are floor(frac * N) exactly; within a part, per-class counts
    follow largest-remainder allocation (ties to the lower class index), so
    balanced data stays balanced.  Samples are drawn from per-class pools
    shuffled once by the split stream of `seed`.
    """
    fracs = [float(f) for f in fractions]
    if any(f <= 0 for f in fracs):
        raise ConfigError("split fractions must be positive")
    if sum(fracs) > 1.0 + 1e-12:
        raise ConfigError(f"split fractions sum to {sum(fracs)}, more than 1")
    n = len(ds)
    gen = rngmod.substream(seed, "split")
    pools = []
    for k in range(ds.classes):
        idx = np.nonzero(ds.labels == k)[0]
        pools.append(idx[gen.permutation(len(idx))])
    cursors = [0] * ds.classes
    class_n = np.array([len(p) for p in pools])
    parts = []
    for frac in fracs:
        total = int(math.floor(frac * n))
        if total < 1:
            raise ConfigError(f"split fraction {frac} selects no samples")
        base = (total * class_n) // n
        rem = total - int(base.sum())
        remainders = (total * class_n) % n
        order = sorted(range(ds.classes), key=lambda k: (-remainders[k], k))
        take = base.copy()
        for k in order[:rem]:
            take[k] += 1
        chosen = []
        for k in range(ds.classes):
            c = int(take[k])
            if cursors[k] + c > len(pools[k]):
                raise ConfigError("split fractions exceed available class samples")
            chosen.append(pools[k][cursors[k] : cursors[k] + c])
            cursors[k] += c
        idx = np.sort(np.concatenate(chosen))
        parts.append(ds.subset(idx))
    return tuple(parts)


class TriLevelStepper:
    """Sequenced first-order updates: weights, then each architecture family.

    arch_groups maps family name -> (params, optimizer) in update order.
    probe, when set, is called as probe(phase, family, versions, loss) right
    after each loss evaluation, where versions is a snapshot of the update
    counters the loss was computed under.
    """

    def __init__(self, weight_params, weight_opt, arch_groups: dict,
                 train_loss_fn, val_loss_fn, grad_clip: float = 0.0,
                 probe=None):
        self.weight_params = list(weight_params)
        self.weight_opt = weight_opt
        self.arch_groups = dict(arch_groups)
        self.train_loss_fn = train_loss_fn
        self.val_loss_fn = val_loss_fn
        self.grad_clip = grad_clip
        self.probe = probe
        self.versions = {"w": 0}
        for fam in self.arch_groups:
            self.versions[fam] = 0
        self._all_params = list(self.weight_params)
        for params, _ in self.arch_groups.values():
            self._all_params.extend(params)

    def _loss(self, fn, batch, phase: str, family):
        zero_grads(self._all_params)
        with Graph():
            loss = fn(batch)
        value = loss.item()
        if not np.isfinite(value):
            raise NumericalError(f"non-finite {phase} loss at versions {self.versions}")
        if self.probe is not None:
            self.probe(phase, family, dict(self.versions), value)
        backward(loss)
        return value

    def step(self, train_batch, val_batches, arch_updates: bool = True):
        """Run one tri-level step; returns (train_loss, first_val_loss or None).

        val_batches is a sequence; families consume it in order, reusing the
        last entry when it runs short (a single shared batch is the common
        case).
        """
        t_loss = self._loss(self.train_loss_fn, train_batch, "train", None)
        if self.grad_clip:
            clip_grad_norm(self.weight_params, self.grad_clip)
        self.weight_opt.step()
        self.versions["w"] += 1
        v_first = None
        if arch_updates:
            if not val_batches:
                raise UsageError("arch updates need at least one validation batch")
            for k, (fam, (params, opt)) in enumerate(self.arch_groups.items()):
                vb = val_batches[min(k, len(val_batches) - 1)]
                v = self._loss(self.val_loss_fn, vb, "val", fam)
                if v_first is None:
                    v_first = v
                opt.step()
                self.versions[fam] += 1
        return t_loss, v_first


@dataclass
class SearchConfig:
    """Hyperparameters of one search run (desk-scale defaults)."""

    epochs: int = 25
    batch_size: int = 64
    channels: int = 16
    cells: int = 8
    stem_multiplier: int = 3
    mode: str = "factorized"
    fixed_activation: str = None
    split: tuple = (0.5, 0.5)
    w_lr: float = 0.05
    w_lr_min: float = 0.001
    w_momentum: float = 0.9
    w_weight_decay: float = 3e-4
    arch_lr: float = 6e-4
    arch_betas: tuple = (0.5, 0.999)
    arch_weight_decay: float = 1e-3
    arch_init_scale: float = 1e-3
    grad_clip: float = 5.0
    warmup_epochs: int = 0
    fresh_val_batch: bool = False
    pad_crop: int = 0
    hflip: bool = False
    seed: int = 0

    def validate(self):
        if self.mode not in MODES:
            raise ConfigError(f"unknown search mode {self.mode!r}")
        if self.mode == "fixed-activation" and not self.fixed_activation:
            raise ConfigError("fixed-activation mode needs fixed_activation")
        if self.mode != "fixed-activation" and self.fixed_activation:
            raise ConfigError("fixed_activation is only valid in fixed-activation mode")
        if self.epochs < 1:
            raise ConfigError("epochs must be >= 1")
        if not 0 <= self.warmup_epochs < self.epochs:
            raise ConfigError("warmup_epochs must lie inside [0, epochs)")
        if self.batch_size < 2:
            raise ConfigError("batch_size must be >= 2 for batch statistics")
        if len(self.split) != 2:
            raise ConfigError("split needs (train_fraction, val_fraction)")
        for lr in (self.w_lr, self.w_lr_min, self.arch_lr):
            if lr < 0:
                raise ConfigError("learning rates must be non-negative")
        if self.cells < 1:
            raise ConfigError("cells must be >= 1")
        if self.channels < 1:
            raise ConfigError("channels must be >= 1")
        return self


@dataclass
class SearchResult:
    genotype: object
    history: list
    arch_arrays: dict
    checkpoint_path: str = None


HISTORY_HEADER = "epoch,train_loss,val_loss,alpha_entropy_mean,beta_entropy_mean,genotype_digest"


def history_csv(rows) -> str:
    from .ioutil import fmt_float

    lines = [HISTORY_HEADER]
    for r in rows:
        lines.append(",".join([
            str(r["epoch"]),
            fmt_float(r["train_loss"]),
            fmt_float(r["val_loss"]),
            fmt_float(r["alpha_entropy_mean"]),
            fmt_float(r["beta_entropy_mean"]),
            r["genotype_digest"],
        ]))
    return "\n".join(lines) + "\n"


class SearchEngine:
    """Owns one search run: supernetwork, arch banks, optimizers, data order."""

    def __init__(self, space: SpaceConfig, cfg: SearchConfig, dataset: Dataset,
                 beta_snapshot: dict = None, config_text: str = None):
        cfg.validate()
        self.space = space
        self.cfg = cfg
        self.config_text = config_text if config_text is not None else self._canonical_config()
        if cfg.mode == "frozen-beta" and beta_snapshot is None:
            raise ConfigError("frozen-beta mode needs a beta snapshot")

        self.train_ds, self.val_ds = split_dataset(dataset, cfg.split, cfg.seed)
        if len(self.train_ds) < cfg.batch_size or len(self.val_ds) < cfg.batch_size:
            raise ConfigError("split smaller than one batch")

        init_rng = rngmod.substream(cfg.seed, "init")
        arch_rng = rngmod.substream(cfg.seed, "arch")
        self.data_rng = rngmod.substream(cfg.seed, "data")
        self.rrelu_rng = rngmod.substream(cfg.seed, "rrelu")
        self.augment_rng = rngmod.substream(cfg.seed, "augment")

        self.net = SuperNetwork(
            space, cfg.mode, in_channels=dataset.images.shape[1],
            classes=dataset.classes, channels=cfg.channels, cells=cfg.cells,
            stem_multiplier=cfg.stem_multiplier, rng=init_rng,
            fixed_activation=cfg.fixed_activation)
        self.arch = ArchParams(space, cfg.mode, arch_rng,
                               fixed_activation=cfg.fixed_activation,
                               init_scale=cfg.arch_init_scale)
        if cfg.mode == "frozen-beta":
            self.arch.freeze_beta(beta_snapshot)

        self.w_params = self.net.parameters()
        self.w_opt = SGDMomentum(self.w_params, cfg.w_lr,
                                 momentum=cfg.w_momentum,
                                 weight_decay=cfg.w_weight_decay)
        self.arch_opts = {}
        groups = {}
        for fam, params in self.arch.param_groups().items():
            opt = Adam(params, cfg.arch_lr, betas=cfg.arch_betas,
                       weight_decay=cfg.arch_weight_decay)
            self.arch_opts[fam] = opt
            groups[fam] = (params, opt)
        self.stepper = TriLevelStepper(
            self.w_params, self.w_opt, groups,
            self._train_loss, self._val_loss, grad_clip=cfg.grad_clip)

        self.epoch = 0
        self.history = []
        self._val_perm = None
        self._val_pos = 0

    # -- loss closures -----------------------------------------------------

    def _forward_loss(self, batch):
        x, y = batch
        logits = self.net.forward(Tensor(x), self.arch, rrelu_rng=self.rrelu_rng)
        return cross_entropy(logits, y)

    def _train_loss(self, batch):
        return self._forward_loss(batch)

    def _val_loss(self, batch):
        # architecture losses use training-mode forwards (batch statistics),
        # mirroring the weight phase
        return self._forward_loss(batch)

    # -- data order ---------------------------------------------------------

    def _augment(self, images):
        if self.cfg.pad_crop or self.cfg.hflip:
            return augment_batch(images, self.augment_rng,
                                 pad_crop=self.cfg.pad_crop, hflip=self.cfg.hflip)
        return images.copy()

    def _next_val_batch(self):
        b = self.cfg.batch_size
        nval = len(self.val_ds)
        if self._val_perm is None or self._val_pos + b > nval:
            self._val_perm = self.data_rng.permutation(nval)
            self._val_pos = 0
        idx = self._val_perm[self._val_pos : self._val_pos + b]
        self._val_pos += b
        return (self._augment(self.val_ds.images[idx]), self.val_ds.labels[idx])

    # -- run ----------------------------------------------------------------

    def run_epoch(self) -> dict:
        cfg = self.cfg
        if self.epoch >= cfg.epochs:
            raise UsageError("search already ran its configured epochs")
        self.w_opt.lr = cosine_lr(self.epoch, cfg.epochs, cfg.w_lr, cfg.w_lr_min)
        ntr = len(self.train_ds)
        steps = ntr // cfg.batch_size
        perm = self.data_rng.permutation(ntr)
        arch_updates = self.epoch >= cfg.warmup_epochs
        n_val = (len(self.arch_opts) if cfg.fresh_val_batch else 1) if arch_updates else 0
        t_losses, v_losses = [], []
        for s in range(steps):
            idx = perm[s * cfg.batch_size : (s + 1) * cfg.batch_size]
            tb = (self._augment(self.train_ds.images[idx]), self.train_ds.labels[idx])
            vbs = [self._next_val_batch() for _ in range(n_val)]
            t, v = self.stepper.step(tb, vbs, arch_updates=arch_updates)
            t_losses.append(t)
            if v is not None:
                v_losses.append(v)
        ent = self.arch.entropy_summary()
        if self.cfg.mode == "non-factorized":
            alpha_ent, beta_ent = ent["flat"], float("nan")
        else:
            alpha_ent, beta_ent = ent["alpha"], ent["beta"]
        row = {
            "epoch": self.epoch,
            "train_loss": float(np.mean(t_losses)) if t_losses else float("nan"),
            "val_loss": float(np.mean(v_losses)) if v_losses else float("nan"),
            "alpha_entropy_mean": alpha_ent,
            "beta_entropy_mean": beta_ent,
            "genotype_digest": genotype_digest(self.derived_genotype()),
        }
        self.history.append(row)
        self.epoch += 1
        return row

    def run(self, checkpoint_path: str = None, log=None) -> SearchResult:
        from .checkpoint import save_checkpoint

        while self.epoch < self.cfg.epochs:
            row = self.run_epoch()
            if checkpoint_path:
                save_checkpoint(checkpoint_path, self.to_checkpoint())
            if log is not None:
                log(f"epoch {row['epoch']}: train_loss={row['train_loss']:.4f} "
                    f"val_loss={row['val_loss']:.4f} genotype={row['genotype_digest']}")
        return SearchResult(
            genotype=self.derived_genotype(),
            history=self.history,
            arch_arrays={k: v.copy() for k, v in self.arch.arrays().items()},
            checkpoint_path=checkpoint_path,
        )

    def derived_genotype(self):
        return derive_genotype(self.arch.arrays(), self.space,
                               fixed_activation=self.cfg.fixed_activation)

    # -- state --------------------------------------------------------------

    def _canonical_config(self) -> str:
        d = asdict(self.cfg)
        lines = [f"search.{k} = {d[k]}" for k in sorted(d)]
        return "\n".join(lines) + "\n"

    def to_checkpoint(self) -> Checkpoint:
        arrays = {}
        for name, p in self.net.named_parameters():
            arrays[f"net.{name}"] = p.data
        for name, buf in self.net.named_buffers():
            arrays[f"buf.{name}"] = buf
        for name, arr in self.arch.arrays().items():
            arrays[f"arch.{name}"] = arr
        for k, arr in self.w_opt.state_arrays().items():
            arrays[f"opt.w.{k}"] = arr
        for fam, opt in self.arch_opts.items():
            for k, arr in opt.state_arrays().items():
                arrays[f"opt.arch.{fam}.{k}"] = arr
        meta = {
            "kind": "search",
            "mode": self.cfg.mode,
            "search_config": _jsonable(asdict(self.cfg)),
            "space": _space_dict(self.space),
            "classes": self.train_ds.classes,
            "in_channels": int(self.train_ds.images.shape[1]),
        }
        rng_states = {
            "data": rngmod.generator_state(self.data_rng),
            "rrelu": rngmod.generator_state(self.rrelu_rng),
            "augment": rngmod.generator_state(self.augment_rng),
            "val_perm": None if self._val_perm is None else self._val_perm.tolist(),
            "val_pos": self._val_pos,
        }
        return Checkpoint(config_text=self.config_text, epoch=self.epoch,
                          arrays=arrays, rng_states=rng_states,
                          history=self.history, meta=meta)

    def load_checkpoint(self, cp: Checkpoint) -> None:
        """Restore engine state saved by to_checkpoint (same config required)."""
        if config_digest(self.config_text) != config_digest(cp.config_text):
            raise ConfigError("checkpoint was produced by a different config")
        own = self.to_checkpoint().arrays
        for name, arr in cp.arrays.items():
            if name not in own:
                raise ConfigError(f"checkpoint array {name} has no destination")
            if own[name].shape != arr.shape:
                raise ConfigError(f"checkpoint array {name} shape mismatch")
        for name, p in self.net.named_parameters():
            p.data[...] = cp.arrays[f"net.{name}"]
        for name, buf in self.net.named_buffers():
            buf[...] = cp.arrays[f"buf.{name}"]
        for name, t in self.arch.tensors.items():
            t.data[...] = cp.arrays[f"arch.{name}"]
        self.w_opt.load_state_arrays(
            {k.split("opt.w.", 1)[1]: v for k, v in cp.arrays.items()
             if k.startswith("opt.w.")})
        for fam, opt in self.arch_opts.items():
            prefix = f"opt.arch.{fam}."
            opt.load_state_arrays(
                {k.split(prefix, 1)[1]: v for k, v in cp.arrays.items()
                 if k.startswith(prefix)})
        self.data_rng = rngmod.restore_generator(cp.rng_states["data"])
        self.rrelu_rng = rngmod.restore_generator(cp.rng_states["rrelu"])
        self.augment_rng = rngmod.restore_generator(cp.rng_states["augment"])
        vp = cp.rng_states.get("val_perm")
        self._val_perm = None if vp is None else np.asarray(vp)
        self._val_pos = int(cp.rng_states.get("val_pos", 0))
        self.epoch = cp.epoch
        self.history = list(cp.history)


def _jsonable(d: dict) -> dict:
    out = {}
    for k, v in d.items():
        out[k] = list(v) if isinstance(v, tuple) else v
    return out


def _space_dict(space: SpaceConfig) -> dict:
    return {
        "regular_ops": list(space.regular_ops),
        "activation_ops": list(space.activation_ops),
        "nodes": space.nodes,
        "edge_inputs": space.edge_inputs,
        "cell_types": space.cell_types,
    }


def space_from_dict(d: dict) -> SpaceConfig:
    return SpaceConfig(
        regular_ops=tuple(d["regular_ops"]),
        activation_ops=tuple(d["activation_ops"]),
        nodes=int(d["nodes"]),
        edge_inputs=int(d["edge_inputs"]),
        cell_types=int(d["cell_types"]),
    )
