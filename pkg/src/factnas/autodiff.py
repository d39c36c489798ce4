"""Reverse-mode automatic differentiation over float64 numpy arrays.

Design: a ``Graph`` is a tape of operation records appended in execution
order.  Each record holds the output tensor, the parent tensors, and a
closure that maps the output gradient to parent gradients.  ``backward``
walks the tape once in reverse, accumulating gradients additively into
``Tensor.grad``; gradients and closures of consumed records are released
immediately so the peak footprint stays near the forward retention.

Recording happens only while a ``Graph`` context is active and at least one
parent requires gradients, so evaluation-mode forwards keep no state.
Graphs do not nest and are consumed by a single backward pass.
"""

import threading

import numpy as np

from .errors import DimensionError, NumericalError, UsageError

_state = threading.local()

# Global switch for per-op non-finite output checks.  Off by default: the
# checks add a full reduction per primitive.
DEBUG_CHECKS = False


def set_debug_checks(flag: bool) -> None:
    global DEBUG_CHECKS
    DEBUG_CHECKS = bool(flag)


def _active_graph():
    return getattr(_state, "graph", None)


def _active_macs():
    return getattr(_state, "macs", None)


def add_macs(n: int) -> None:
    """Credit n multiply-accumulates to the enclosing MacCounter, if any."""
    counter = _active_macs()
    if counter is not None:
        counter.total += int(n)


class MacCounter:
    """Context manager that tallies multiply-accumulate counts of forward ops."""

    def __init__(self):
        self.total = 0

    def __enter__(self):
        if _active_macs() is not None:
            raise UsageError("MacCounter contexts do not nest")
        _state.macs = self
        return self

    def __exit__(self, *exc):
        _state.macs = None
        return False


class Tensor:
    """A float64 array plus an accumulated gradient of the same shape."""

    __slots__ = ("data", "grad", "requires_grad", "_node")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._node = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"


class _Node:
    __slots__ = ("graph", "out", "parents", "needs", "fn")

    def __init__(self, graph, out, parents, needs, fn):
        self.graph = graph
        self.out = out
        self.parents = parents
        self.needs = needs
        self.fn = fn


class Graph:
    """Tape of op records.  One forward/backward pair per instance."""

    def __init__(self):
        self.nodes = []
        self.consumed = False

    def __enter__(self):
        if _active_graph() is not None:
            raise UsageError("autodiff graphs do not nest")
        if self.consumed:
            raise UsageError("graph already consumed by backward")
        _state.graph = self
        return self

    def __exit__(self, *exc):
        _state.graph = None
        return False


def record(out_data: np.ndarray, parents, backward_fn) -> Tensor:
    """Create the output tensor of a primitive op, recording it if needed.

    backward_fn(gout) must return one gradient array (or None) per parent,
    in order.  Returned arrays must not alias each other except through
    ``gout`` itself or views (the accumulator copies in those cases).
    """
    if DEBUG_CHECKS and not np.isfinite(out_data.sum()):
        raise NumericalError("non-finite values in op output")
    out = Tensor(out_data)
    graph = _active_graph()
    if graph is None:
        return out
    needs = tuple(p.requires_grad for p in parents)
    if not any(needs):
        return out
    out.requires_grad = True
    node = _Node(graph, out, tuple(parents), needs, backward_fn)
    out._node = node
    graph.nodes.append(node)
    return out


def _accumulate(t: Tensor, g: np.ndarray, gout: np.ndarray) -> None:
    if t.grad is not None:
        t.grad += g
    elif g is gout or g.base is not None:
        # aliases the output gradient or another buffer: copy so later
        # in-place accumulation cannot corrupt a sibling
        t.grad = g.copy()
    else:
        t.grad = g


def backward(loss: Tensor) -> None:
    """Reverse pass from a scalar loss through its recording graph.

    Visits each record exactly once, newest first.  The graph is consumed:
    closures, parent references, and intermediate gradients are dropped as
    soon as each record has been processed.
    """
    if loss.data.size != 1:
        raise UsageError("backward requires a scalar loss")
    if loss._node is None:
        return  # loss does not depend on any tracked tensor
    graph = loss._node.graph
    if graph.consumed:
        raise UsageError("graph already consumed by backward")
    graph.consumed = True
    loss.grad = np.ones_like(loss.data)
    for node in reversed(graph.nodes):
        out = node.out
        gout = out.grad
        if gout is None:
            # no gradient flowed into this record (dead branch)
            node.fn = None
            node.parents = None
            continue
        grads = node.fn(gout)
        for parent, g, needed in zip(node.parents, grads, node.needs):
            if needed and g is not None:
                _accumulate(parent, g, gout)
        # release: the record's gradient and closure are no longer needed
        out.grad = None
        out._node = None
        node.fn = None
        node.parents = None
    graph.nodes.clear()


# ---------------------------------------------------------------------------
# elementwise and reduction primitives
# ---------------------------------------------------------------------------


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _check_same_shape(a: Tensor, b: Tensor, opname: str) -> None:
    if a.data.shape != b.data.shape:
        raise DimensionError(
            f"{opname}: operand shapes {a.data.shape} and {b.data.shape} differ"
        )


def add(a: Tensor, b) -> Tensor:
    """Elementwise a + b; b may be a tensor of the same shape or a scalar."""
    if isinstance(b, Tensor):
        _check_same_shape(a, b, "add")
        out = a.data + b.data

        def fn(gout):
            return gout, gout

        return record(out, (a, b), fn)
    out = a.data + float(b)

    def fn(gout):
        return (gout,)

    return record(out, (a,), fn)


def sub(a: Tensor, b) -> Tensor:
    if isinstance(b, Tensor):
        _check_same_shape(a, b, "sub")
        out = a.data - b.data

        def fn(gout):
            return gout, -gout

        return record(out, (a, b), fn)
    out = a.data - float(b)

    def fn(gout):
        return (gout,)

    return record(out, (a,), fn)


def mul(a: Tensor, b) -> Tensor:
    """Elementwise a * b; b may be a tensor of the same shape or a scalar."""
    if isinstance(b, Tensor):
        _check_same_shape(a, b, "mul")
        out = a.data * b.data
        add_macs(out.size)
        ad, bd = a.data, b.data

        def fn(gout):
            return gout * bd, gout * ad

        return record(out, (a, b), fn)
    c = float(b)
    out = a.data * c
    add_macs(out.size)

    def fn(gout):
        return (gout * c,)

    return record(out, (a,), fn)


def neg(a: Tensor) -> Tensor:
    def fn(gout):
        return (-gout,)

    return record(-a.data, (a,), fn)


def sum_all(a: Tensor) -> Tensor:
    shape = a.data.shape

    def fn(gout):
        return (np.broadcast_to(gout, shape).copy(),)

    return record(np.asarray(a.data.sum()), (a,), fn)


def mean_all(a: Tensor) -> Tensor:
    n = a.data.size
    if n == 0:
        raise DimensionError("mean of an empty tensor")
    shape = a.data.shape

    def fn(gout):
        return (np.broadcast_to(gout / n, shape).copy(),)

    return record(np.asarray(a.data.mean()), (a,), fn)


def scale_samples(x: Tensor, factors: np.ndarray) -> Tensor:
    """Multiply sample n of a batch tensor by factors[n].

    factors is a plain constant array of shape (N,); no gradient flows to it.
    Used by stochastic branch dropping.
    """
    if factors.shape != (x.data.shape[0],):
        raise DimensionError(
            f"scale_samples: factors shape {factors.shape} does not match batch {x.data.shape[0]}"
        )
    f = factors.reshape((-1,) + (1,) * (x.data.ndim - 1))
    out = x.data * f
    add_macs(out.size)

    def fn(gout):
        return (gout * f,)

    return record(out, (x,), fn)


def weighted_sum(weights: Tensor, branches) -> Tensor:
    """sum_k weights[k] * branches[k] for same-shaped branch tensors.

    weights is a 1-D tensor with one entry per branch.  Gradients flow to
    the weights (sum of elementwise products) and to every branch.
    """
    k = len(branches)
    if weights.data.shape != (k,):
        raise DimensionError(
            f"weighted_sum: {k} branches but weight shape {weights.data.shape}"
        )
    if k == 0:
        raise DimensionError("weighted_sum of zero branches")
    shape = branches[0].data.shape
    for b in branches:
        if b.data.shape != shape:
            raise DimensionError("weighted_sum: branch shapes differ")
    w = weights.data
    out = w[0] * branches[0].data
    for i in range(1, k):
        out += w[i] * branches[i].data
    add_macs(k * out.size)
    branch_data = [b.data for b in branches]
    need = tuple(b.requires_grad for b in branches)

    def fn(gout):
        gw = np.empty(k)
        for i in range(k):
            gw[i] = np.dot(gout.ravel(), branch_data[i].ravel())
        return (gw,) + tuple(gout * w[i] if need[i] else None for i in range(k))

    return record(out, (weights, *branches), fn)


def concat_channels(tensors) -> Tensor:
    """Concatenate 4-D tensors along the channel axis."""
    if not tensors:
        raise DimensionError("concat of zero tensors")
    n, _, h, w = tensors[0].data.shape
    for t in tensors:
        if t.data.ndim != 4 or t.data.shape[0] != n or t.data.shape[2:] != (h, w):
            raise DimensionError("concat_channels: incompatible shapes")
    out = np.concatenate([t.data for t in tensors], axis=1)
    sizes = [t.data.shape[1] for t in tensors]

    def fn(gout):
        grads = []
        start = 0
        for c in sizes:
            grads.append(gout[:, start : start + c])
            start += c
        return tuple(grads)

    return record(out, tuple(tensors), fn)


def global_avg_pool(x: Tensor) -> Tensor:
    """(N, C, H, W) -> (N, C) spatial mean."""
    if x.data.ndim != 4:
        raise DimensionError("global_avg_pool expects a 4-D tensor")
    n, c, h, w = x.data.shape
    if h * w == 0:
        raise DimensionError("global_avg_pool of empty spatial extent")
    out = x.data.mean(axis=(2, 3))
    m = h * w

    def fn(gout):
        return (np.broadcast_to(gout[:, :, None, None] / m, (n, c, h, w)).copy(),)

    return record(out, (x,), fn)


def affine(x: Tensor, weight: Tensor, bias=None) -> Tensor:
    """x @ weight.T + bias for 2-D x (N, F), weight (K, F), bias (K,)."""
    if x.data.ndim != 2 or weight.data.ndim != 2:
        raise DimensionError("affine expects 2-D input and weight")
    n, f = x.data.shape
    k, f2 = weight.data.shape
    if f != f2:
        raise DimensionError(f"affine: input features {f} != weight features {f2}")
    out = x.data @ weight.data.T
    add_macs(n * f * k)
    if bias is not None:
        if bias.data.shape != (k,):
            raise DimensionError("affine: bias shape mismatch")
        out += bias.data
        xd, wd = x.data, weight.data

        def fn(gout):
            return gout @ wd, gout.T @ xd, gout.sum(axis=0)

        return record(out, (x, weight, bias), fn)
    xd, wd = x.data, weight.data

    def fn(gout):
        return gout @ wd, gout.T @ xd

    return record(out, (x, weight), fn)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    """Numerically stable softmax along one axis."""
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)
    add_macs(2 * out.size)

    def fn(gout):
        # ds = s * (g - sum(g*s))
        dot = (gout * out).sum(axis=axis, keepdims=True)
        return (out * (gout - dot),)

    return record(out, (x,), fn)


def take_row(x: Tensor, index: int) -> Tensor:
    """Select row `index` of a 2-D tensor; gradient scatters back to that row."""
    if x.data.ndim != 2:
        raise DimensionError("take_row expects a 2-D tensor")
    rows, cols = x.data.shape
    if not 0 <= index < rows:
        raise DimensionError(f"take_row: index {index} out of range for {rows} rows")
    out = x.data[index].copy()

    def fn(gout):
        g = np.zeros((rows, cols))
        g[index] = gout
        return (g,)

    return record(out, (x,), fn)


def cross_entropy(logits: Tensor, labels: np.ndarray, label_smoothing: float = 0.0) -> Tensor:
    """Mean softmax cross-entropy over a batch.

    labels are integer class indices.  With label smoothing s and K classes
    the target distribution is (1-s) on the true class and s/K everywhere.
    """
    if logits.data.ndim != 2:
        raise DimensionError("cross_entropy expects 2-D logits (batch, classes)")
    n, k = logits.data.shape
    labels = np.asarray(labels)
    if labels.shape != (n,):
        raise DimensionError(f"cross_entropy: labels shape {labels.shape} != ({n},)")
    if labels.size and (labels.min() < 0 or labels.max() >= k):
        raise DimensionError("cross_entropy: label outside [0, classes)")
    if not 0.0 <= label_smoothing < 1.0:
        raise DimensionError("cross_entropy: label_smoothing outside [0, 1)")
    if n == 0:
        raise DimensionError("cross_entropy of an empty batch")
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1, keepdims=True))
    logp = z - lse
    s = float(label_smoothing)
    nll_true = -logp[np.arange(n), labels]
    if s == 0.0:
        loss = nll_true.mean()
    else:
        loss = ((1.0 - s) * nll_true - (s / k) * logp.sum(axis=1)).mean()
    add_macs(3 * n * k)

    def fn(gout):
        p = np.exp(logp)
        target = np.full((n, k), s / k)
        target[np.arange(n), labels] += 1.0 - s
        return ((p - target) * (float(gout) / n),)

    return record(np.asarray(loss), (logits,), fn)


def predictions(logits: Tensor) -> np.ndarray:
    """Argmax class per row (plain numpy, no recording)."""
    return logits.data.argmax(axis=1)
