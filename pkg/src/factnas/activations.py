"""The activation operator pool.

Nine elementwise nonlinearities in a fixed canonical order.  Two of them own
a learnable scalar (the prelu negative slope and the swish gate coefficient);
each Activation instance gets a fresh copy of that scalar, so every mixture
site in a network trains its own.  rrelu draws its negative slope uniformly
per element during training and uses the interval midpoint for evaluation.
"""

import numpy as np

from .autodiff import Tensor, add_macs, record
from .errors import ConfigError, UsageError

ACTIVATION_KINDS = (
    "relu", "relu6", "leaky_relu", "prelu", "rrelu",
    "elu", "celu", "selu", "swish",
)

LEAKY_SLOPE = 0.01
ELU_ALPHA = 1.0
CELU_ALPHA = 1.0
SELU_LAMBDA = 1.0507009873554805
SELU_ALPHA = 1.6732632423543772
RRELU_LO = 1.0 / 8.0
RRELU_HI = 1.0 / 3.0

# kinds that carry a learnable scalar, with its initial value
LEARNABLE_INIT = {"prelu": 0.25, "swish": 1.0}


def _sigmoid(z: np.ndarray) -> np.ndarray:
    # overflow-safe without boolean-index gathers: exp of -|z| never blows up
    ez = np.exp(-np.abs(z))
    return np.where(z >= 0.0, 1.0 / (1.0 + ez), ez / (1.0 + ez))


def apply_activation(kind: str, x: Tensor, param: Tensor = None,
                     training: bool = False, rng: np.random.Generator = None) -> Tensor:
    """Apply one activation kind elementwise.

    param is required for prelu/swish and must be a scalar tensor.
    rng is required for rrelu in training mode.
    """
    xd = x.data
    add_macs(xd.size)

    if kind == "relu":
        out = np.maximum(xd, 0.0)

        def fn(gout):
            return (gout * (xd > 0.0),)

        return record(out, (x,), fn)

    if kind == "relu6":
        out = np.minimum(np.maximum(xd, 0.0), 6.0)

        def fn(gout):
            return (gout * ((xd > 0.0) & (xd < 6.0)),)

        return record(out, (x,), fn)

    if kind == "leaky_relu":
        out = np.where(xd > 0.0, xd, LEAKY_SLOPE * xd)

        def fn(gout):
            return (np.where(xd > 0.0, gout, LEAKY_SLOPE * gout),)

        return record(out, (x,), fn)

    if kind == "prelu":
        if param is None:
            raise UsageError("prelu needs its slope parameter")
        a = float(param.data)
        out = np.where(xd > 0.0, xd, a * xd)

        def fn(gout):
            da = np.asarray(np.where(xd > 0.0, 0.0, gout * xd).sum())
            return np.where(xd > 0.0, gout, a * gout), da

        return record(out, (x, param), fn)

    if kind == "rrelu":
        if training:
            if rng is None:
                raise UsageError("rrelu needs an rng in training mode")
            slope = rng.uniform(RRELU_LO, RRELU_HI, size=xd.shape)
        else:
            slope = (RRELU_LO + RRELU_HI) / 2.0
        out = np.where(xd >= 0.0, xd, slope * xd)

        def fn(gout):
            return (np.where(xd >= 0.0, gout, slope * gout),)

        return record(out, (x,), fn)

    if kind == "elu":
        neg = xd < 0.0
        out = np.where(neg, ELU_ALPHA * np.expm1(xd), xd)

        def fn(gout):
            # on the negative side d/dx = alpha*exp(x) = out + alpha
            return (np.where(neg, gout * (out + ELU_ALPHA), gout),)

        return record(out, (x,), fn)

    if kind == "celu":
        neg = xd < 0.0
        out = np.where(neg, CELU_ALPHA * np.expm1(xd / CELU_ALPHA), xd)

        def fn(gout):
            return (np.where(neg, gout * (out / CELU_ALPHA + 1.0), gout),)

        return record(out, (x,), fn)

    if kind == "selu":
        neg = xd < 0.0
        out = SELU_LAMBDA * np.where(neg, SELU_ALPHA * np.expm1(xd), xd)

        def fn(gout):
            return (np.where(neg, gout * (out + SELU_LAMBDA * SELU_ALPHA),
                             gout * SELU_LAMBDA),)

        return record(out, (x,), fn)

    if kind == "swish":
        if param is None:
            raise UsageError("swish needs its gate coefficient")
        b = float(param.data)
        s = _sigmoid(b * xd)
        out = xd * s

        def fn(gout):
            sp = s * (1.0 - s)
            dx = gout * (s + b * xd * sp)
            db = np.asarray((gout * xd * xd * sp).sum())
            return dx, db

        return record(out, (x, param), fn)

    raise ConfigError(f"unknown activation kind {kind!r}")


def mixed_activation(x: Tensor, weights: Tensor, insts, training: bool = False,
                     rng: np.random.Generator = None) -> Tensor:
    """sum_k weights[k] * act_k(x) as one tape node.

    Equivalent to applying every Activation in `insts` and weighted-summing
    the branches, but records once: the branch stack is kept for the weight
    gradient and the elementwise derivative factors are rebuilt from the
    saved input.  weights is 1-D with one entry per activation instance.
    """
    k = len(insts)
    if weights.data.shape != (k,):
        raise UsageError(
            f"mixed_activation: {k} activations but weight shape {weights.data.shape}"
        )
    xd = x.data
    stack = np.empty((k,) + xd.shape)
    rrelu_slope = None
    swish_s = {}
    pos = neg = em = None
    for i, inst in enumerate(insts):
        kind = inst.kind
        if kind in ("leaky_relu", "prelu"):
            if pos is None:
                pos = xd > 0.0
        elif kind in ("elu", "celu", "selu"):
            # alpha = 1 for both elu and celu, so one expm1 serves all three
            if neg is None:
                neg = xd < 0.0
                em = np.expm1(xd)
        if kind == "relu":
            np.maximum(xd, 0.0, out=stack[i])
        elif kind == "relu6":
            np.minimum(np.maximum(xd, 0.0), 6.0, out=stack[i])
        elif kind == "leaky_relu":
            stack[i] = np.where(pos, xd, LEAKY_SLOPE * xd)
        elif kind == "prelu":
            stack[i] = np.where(pos, xd, float(inst.param.data) * xd)
        elif kind == "rrelu":
            if training:
                if rng is None:
                    raise UsageError("rrelu needs an rng in training mode")
                rrelu_slope = rng.uniform(RRELU_LO, RRELU_HI, size=xd.shape)
            else:
                rrelu_slope = (RRELU_LO + RRELU_HI) / 2.0
            stack[i] = np.where(xd >= 0.0, xd, rrelu_slope * xd)
        elif kind == "elu":
            stack[i] = np.where(neg, ELU_ALPHA * em, xd)
        elif kind == "celu":
            stack[i] = np.where(neg, CELU_ALPHA * em, xd)
        elif kind == "selu":
            stack[i] = SELU_LAMBDA * np.where(neg, SELU_ALPHA * em, xd)
        elif kind == "swish":
            s = _sigmoid(float(inst.param.data) * xd)
            swish_s[i] = s
            stack[i] = xd * s
        else:
            raise ConfigError(f"unknown activation kind {kind!r}")
    wd = weights.data
    out = wd[0] * stack[0]
    for i in range(1, k):
        out += wd[i] * stack[i]
    add_macs(2 * k * xd.size)

    learnable = [(i, inst) for i, inst in enumerate(insts) if inst.param is not None]

    def fn(gout):
        gflat = gout.ravel()
        gw = np.empty(k)
        for i in range(k):
            gw[i] = np.dot(gflat, stack[i].ravel())
        dsum = np.zeros_like(xd)
        pgrads = []
        pos = xd > 0.0
        neg = xd < 0.0
        for i, inst in enumerate(insts):
            kind = inst.kind
            w_i = wd[i]
            if kind == "relu":
                dsum += w_i * pos
            elif kind == "relu6":
                dsum += w_i * (pos & (xd < 6.0))
            elif kind == "leaky_relu":
                dsum += np.where(pos, w_i, w_i * LEAKY_SLOPE)
            elif kind == "prelu":
                a = float(inst.param.data)
                dsum += np.where(pos, w_i, w_i * a)
                da = w_i * np.where(pos, 0.0, gout * xd).sum()
                pgrads.append(np.asarray(da))
            elif kind == "rrelu":
                dsum += np.where(neg, w_i * rrelu_slope, w_i)
            elif kind == "elu":
                dsum += np.where(neg, w_i * (stack[i] + ELU_ALPHA), w_i)
            elif kind == "celu":
                dsum += np.where(neg, w_i * (stack[i] / CELU_ALPHA + 1.0), w_i)
            elif kind == "selu":
                dsum += np.where(neg, w_i * (stack[i] + SELU_LAMBDA * SELU_ALPHA),
                                 w_i * SELU_LAMBDA)
            else:  # swish
                b = float(inst.param.data)
                s = swish_s[i]
                sp = s * (1.0 - s)
                dsum += w_i * (s + b * xd * sp)
                db = w_i * (gout * (xd * xd * sp)).sum()
                pgrads.append(np.asarray(db))
        gx = gout * dsum
        return (gx, gw) + tuple(pgrads)

    parents = (x, weights) + tuple(inst.param for _, inst in learnable)
    return record(out, parents, fn)


class Activation:
    """One activation site: a kind plus its own learnable scalar, if any."""

    def __init__(self, kind: str):
        if kind not in ACTIVATION_KINDS:
            raise ConfigError(f"unknown activation kind {kind!r}")
        self.kind = kind
        init = LEARNABLE_INIT.get(kind)
        self.param = None if init is None else Tensor(np.asarray(init), requires_grad=True)

    def __call__(self, x: Tensor, training: bool = False,
                 rng: np.random.Generator = None) -> Tensor:
        return apply_activation(self.kind, x, param=self.param,
                                training=training, rng=rng)

    def __repr__(self):
        return f"Activation({self.kind})"
