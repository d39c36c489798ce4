"""Minimal layer/module system on top of the autodiff tensors.

A Module's parameters are discovered by walking instance attributes in
definition order: Tensor attributes with requires_grad are parameters,
Module attributes and lists/tuples of Modules recurse.  Name paths follow
attribute names and list indices ("cells.3.edges.7.weight"), which gives a
stable ordering for optimizers and checkpoints.
"""

import numpy as np

from . import convops
from .autodiff import Tensor, affine
from .errors import ConfigError


class Module:
    def __init__(self):
        self.training = True
        self._buffers = {}

    def register_buffer(self, name: str, array: np.ndarray) -> None:
        self._buffers[name] = array

    def _children(self):
        for name, value in vars(self).items():
            if name.startswith("_") or name == "training":
                continue
            if isinstance(value, Module):
                yield name, value
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield f"{name}.{i}", item

    def named_parameters(self, prefix: str = ""):
        for name, value in vars(self).items():
            if name.startswith("_"):
                continue
            if isinstance(value, Tensor) and value.requires_grad:
                yield (prefix + name, value)
        for name, child in self._children():
            yield from child.named_parameters(prefix + name + ".")

    def parameters(self):
        return [p for _, p in self.named_parameters()]

    def named_buffers(self, prefix: str = ""):
        for name, arr in self._buffers.items():
            yield (prefix + name, arr)
        for name, child in self._children():
            yield from child.named_buffers(prefix + name + ".")

    def train(self, flag: bool = True):
        self.training = flag
        for _, child in self._children():
            child.train(flag)
        return self

    def eval(self):
        return self.train(False)

    def forward(self, *args, **kwargs):
        raise NotImplementedError

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)


def conv_init(rng: np.random.Generator, co: int, cg: int, k: int) -> Tensor:
    """Kaiming-style normal init: std = sqrt(2 / fan_in), fan_in = cg*k*k."""
    std = np.sqrt(2.0 / (cg * k * k))
    return Tensor(rng.normal(0.0, std, size=(co, cg, k, k)), requires_grad=True)


class Conv2d(Module):
    def __init__(self, in_channels: int, out_channels: int, kernel: int,
                 stride: int = 1, padding: int = 0, dilation: int = 1,
                 groups: int = 1, rng: np.random.Generator = None):
        super().__init__()
        if in_channels % groups:
            raise ConfigError("Conv2d: in_channels must divide groups")
        if rng is None:
            raise ConfigError("Conv2d requires an init rng")
        self.stride = stride
        self.padding = padding
        self.dilation = dilation
        self.groups = groups
        self.weight = conv_init(rng, out_channels, in_channels // groups, kernel)

    def forward(self, x):
        return convops.conv2d(x, self.weight, stride=self.stride,
                              padding=self.padding, dilation=self.dilation,
                              groups=self.groups)


class BatchNorm2d(Module):
    def __init__(self, channels: int, affine: bool = True,
                 momentum: float = 0.9, eps: float = 1e-5):
        super().__init__()
        self.momentum = momentum
        self.eps = eps
        self.affine = affine
        if affine:
            self.gamma = Tensor(np.ones(channels), requires_grad=True)
            self.beta = Tensor(np.zeros(channels), requires_grad=True)
        else:
            self.gamma = None
            self.beta = None
        self.register_buffer("running_mean", np.zeros(channels))
        self.register_buffer("running_var", np.ones(channels))

    def forward(self, x):
        return convops.batch_norm(
            x, self.gamma, self.beta,
            self._buffers["running_mean"], self._buffers["running_var"],
            training=self.training, momentum=self.momentum, eps=self.eps)


class Linear(Module):
    def __init__(self, in_features: int, out_features: int,
                 rng: np.random.Generator = None):
        super().__init__()
        if rng is None:
            raise ConfigError("Linear requires an init rng")
        bound = 1.0 / np.sqrt(in_features)
        self.weight = Tensor(rng.uniform(-bound, bound, size=(out_features, in_features)),
                             requires_grad=True)
        self.bias = Tensor(rng.uniform(-bound, bound, size=out_features),
                           requires_grad=True)

    def forward(self, x):
        return affine(x, self.weight, self.bias)
