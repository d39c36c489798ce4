"""Optimizers and learning-rate schedule.

Both optimizers keep their state in lists aligned with the parameter list
they were constructed with, exposed via state_arrays() for checkpointing.
A parameter whose grad is None is treated as zero gradient (weight decay
still applies).
"""

import math

import numpy as np

from .autodiff import Tensor
from .errors import ConfigError, DimensionError


def zero_grads(params) -> None:
    for p in params:
        p.grad = None


def clip_grad_norm(params, max_norm: float) -> float:
    """Scale all gradients so their global L2 norm is at most max_norm.

    Returns the pre-clip norm.
    """
    if max_norm <= 0:
        raise ConfigError(f"clip_grad_norm: max_norm must be positive, got {max_norm}")
    total = 0.0
    for p in params:
        if p.grad is not None:
            total += float(np.dot(p.grad.ravel(), p.grad.ravel()))
    norm = math.sqrt(total)
    if norm > max_norm:
        scale = max_norm / norm
        for p in params:
            if p.grad is not None:
                p.grad *= scale
    return norm


def cosine_lr(epoch: int, total_epochs: int, lr_max: float, lr_min: float) -> float:
    """Half-cosine decay from lr_max at epoch 0 toward lr_min at the final epoch."""
    if total_epochs < 1:
        raise ConfigError("cosine_lr: total_epochs must be >= 1")
    if not 0 <= epoch < total_epochs:
        raise ConfigError(f"cosine_lr: epoch {epoch} outside [0, {total_epochs})")
    if total_epochs == 1:
        return lr_max
    frac = epoch / (total_epochs - 1)
    return lr_min + 0.5 * (lr_max - lr_min) * (1.0 + math.cos(math.pi * frac))


class SGDMomentum:
    """SGD with classical momentum: buf = mu*buf + g; p -= lr*buf."""

    def __init__(self, params, lr: float, momentum: float = 0.9,
                 weight_decay: float = 0.0):
        self.params = list(params)
        for p in self.params:
            if not isinstance(p, Tensor):
                raise ConfigError("optimizer parameters must be Tensors")
        self.lr = float(lr)
        self.momentum = float(momentum)
        self.weight_decay = float(weight_decay)
        self.bufs = [np.zeros_like(p.data) for p in self.params]
        self.steps = 0

    def step(self) -> None:
        for p, buf in zip(self.params, self.bufs):
            if buf.shape != p.data.shape:
                raise DimensionError("momentum buffer shape drifted from parameter")
            g = p.grad
            if self.weight_decay:
                g = (g if g is not None else 0.0) + self.weight_decay * p.data
            elif g is None:
                g = np.zeros_like(p.data)
            buf *= self.momentum
            buf += g
            p.data -= self.lr * buf
        self.steps += 1

    def state_arrays(self) -> dict:
        out = {f"momentum.{i}": buf for i, buf in enumerate(self.bufs)}
        out["steps"] = np.asarray(float(self.steps))
        return out

    def load_state_arrays(self, arrays: dict) -> None:
        for i, buf in enumerate(self.bufs):
            src = arrays[f"momentum.{i}"]
            if src.shape != buf.shape:
                raise DimensionError("checkpointed momentum buffer shape mismatch")
            buf[...] = src
        self.steps = int(arrays["steps"])


class Adam:
    """Adam with decoupled-free (L2-coupled) weight decay, bias correction on."""

    def __init__(self, params, lr: float, betas=(0.9, 0.999), eps: float = 1e-8,
                 weight_decay: float = 0.0):
        self.params = list(params)
        for p in self.params:
            if not isinstance(p, Tensor):
                raise ConfigError("optimizer parameters must be Tensors")
        self.lr = float(lr)
        self.beta1, self.beta2 = float(betas[0]), float(betas[1])
        self.eps = float(eps)
        self.weight_decay = float(weight_decay)
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]
        self.steps = 0

    def step(self) -> None:
        self.steps += 1
        t = self.steps
        bc1 = 1.0 - self.beta1 ** t
        bc2 = 1.0 - self.beta2 ** t
        for p, m, v in zip(self.params, self.m, self.v):
            g = p.grad
            if g is None:
                g = np.zeros_like(p.data)
            if self.weight_decay:
                g = g + self.weight_decay * p.data
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * (g * g)
            mhat = m / bc1
            vhat = v / bc2
            p.data -= self.lr * mhat / (np.sqrt(vhat) + self.eps)

    def state_arrays(self) -> dict:
        out = {}
        for i, (m, v) in enumerate(zip(self.m, self.v)):
            out[f"m.{i}"] = m
            out[f"v.{i}"] = v
        out["steps"] = np.asarray(float(self.steps))
        return out

    def load_state_arrays(self, arrays: dict) -> None:
        for i in range(len(self.m)):
            for name, dst in ((f"m.{i}", self.m[i]), (f"v.{i}", self.v[i])):
                src = arrays[name]
                if src.shape != dst.shape:
                    raise DimensionError("checkpointed Adam buffer shape mismatch")
                dst[...] = src
        self.steps = int(arrays["steps"])
