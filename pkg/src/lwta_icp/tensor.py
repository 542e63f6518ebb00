"""Minimal reverse-mode automatic differentiation over numpy arrays.

Graph recording only happens while a :class:`GraphTape` is active.  Outside
a tape every operation returns a constant tensor, which is what prediction
and evaluation code wants.

    >>> w = Tensor([[1.0, 2.0]], requires_grad=True)
    >>> with GraphTape():
    ...     loss = (w * w).sum()
    ...     loss.backward()
    >>> w.grad
    array([[2., 4.]])
"""

import builtins
import threading
from contextlib import contextmanager

import numpy as np

from .errors import ContractError, DimensionError

_DEFAULT_DTYPE = np.float64
_local = threading.local()

# Domain-violation counters; ops propagate NaN/inf instead of raising.
diagnostics = {"log_domain": 0, "div_by_zero": 0}


def reset_diagnostics():
    for key in diagnostics:
        diagnostics[key] = 0


def nan_events():
    return builtins.sum(diagnostics.values())


def set_default_dtype(dtype):
    """Switch the dtype used for new tensors (float64 or float32)."""
    global _DEFAULT_DTYPE
    dtype = np.dtype(dtype)
    if dtype not in (np.dtype(np.float64), np.dtype(np.float32)):
        raise ContractError(f"unsupported dtype {dtype}")
    _DEFAULT_DTYPE = dtype.type


def get_default_dtype():
    return _DEFAULT_DTYPE


def _stack():
    if not hasattr(_local, "stack"):
        _local.stack = []
    return _local.stack


class GraphTape:
    """Ordered record of the nodes created during one forward pass."""

    def __init__(self):
        self.nodes = []

    def __enter__(self):
        _stack().append(self)
        return self

    def __exit__(self, *exc):
        _stack().pop()
        return False

    def __len__(self):
        return len(self.nodes)

    def record(self, node):
        self.nodes.append(node)

    def clear(self):
        for node in self.nodes:
            node._parents = ()
            node._backward = None
        self.nodes = []


def active_tape():
    stack = _stack()
    return stack[-1] if stack else None


@contextmanager
def no_grad():
    """Suspend recording inside an active tape."""
    stack = _stack()
    stack.append(None)
    try:
        yield
    finally:
        stack.pop()


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "op")
    __array_priority__ = 100

    def __init__(self, data, requires_grad=False, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(dtype, copy=False)
        elif arr.dtype.kind in "biuf" and arr.dtype != _DEFAULT_DTYPE:
            arr = arr.astype(_DEFAULT_DTYPE)
        self.data = arr
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = ()
        self._backward = None
        self.op = "leaf"

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def numpy(self):
        return self.data

    def item(self):
        return self.data.item()

    def detach(self):
        return Tensor(self.data)

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor({self.data!r}{flag})"

    def __len__(self):
        return len(self.data)

    def backward(self, grad=None):
        """Accumulate d(self)/d(leaf) into ``.grad`` of every reachable leaf."""
        if self.data.size != 1:
            raise ContractError(f"backward needs a scalar loss, got shape {self.shape}")
        if not self.requires_grad:
            raise ContractError("loss is not connected to any recorded parameter")
        order = _topological_order(self)
        seed = np.ones_like(self.data) if grad is None else np.asarray(grad, dtype=self.data.dtype)
        grads = {id(self): seed}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or parent is None:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __pow__(self, other):
        return pow(self, other)

    def __rpow__(self, other):
        return pow(other, self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    def sum(self, axis=None, keepdims=False):
        return sum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        return transpose(self, axes or None)

    def exp(self):
        return exp(self)

    def log(self):
        return log(self)


def _topological_order(root):
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if parent is not None and id(parent) not in seen:
                stack.append((parent, False))
    return order


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data, parents, backward, op):
    out = Tensor(data)
    tape = active_tape()
    if tape is not None and any(p.requires_grad for p in parents):
        out.requires_grad = True
        # parents frozen at record time stay frozen for this node
        out._parents = tuple(p if p.requires_grad else None for p in parents)
        out._backward = backward
        out.op = op
        tape.record(out)
    return out


def _unbroadcast(grad, shape):
    if grad.shape == shape:
        return grad
    lead = grad.ndim - len(shape)
    if lead > 0:
        grad = grad.sum(axis=tuple(range(lead)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


# elementwise -----------------------------------------------------------------

def add(a, b):
    a, b = as_tensor(a), as_tensor(b)

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _make(a.data + b.data, (a, b), backward, "add")


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _make(a.data - b.data, (a, b), backward, "sub")


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)

    def backward(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _make(a.data * b.data, (a, b), backward, "mul")


def div(a, b):
    a, b = as_tensor(a), as_tensor(b)
    zeros = int(np.count_nonzero(b.data == 0))
    if zeros:
        diagnostics["div_by_zero"] += zeros
    with np.errstate(divide="ignore", invalid="ignore"):
        out = a.data / b.data

    def backward(g):
        with np.errstate(divide="ignore", invalid="ignore"):
            ga = g / b.data
            gb = -g * out / b.data
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _make(out, (a, b), backward, "div")


def neg(a):
    a = as_tensor(a)
    return _make(-a.data, (a,), lambda g: (-g,), "neg")


def pow(a, b):
    """``a ** b``; ``b`` may be a python scalar or a tensor."""
    a = as_tensor(a)
    if not isinstance(b, Tensor) and np.ndim(b) == 0:
        p = float(b)
        out = a.data ** p

        def backward(g):
            return (g * p * a.data ** (p - 1),)

        return _make(out, (a,), backward, "pow")
    b = as_tensor(b)
    with np.errstate(divide="ignore", invalid="ignore"):
        out = a.data ** b.data

    def backward(g):
        with np.errstate(divide="ignore", invalid="ignore"):
            ga = g * b.data * a.data ** (b.data - 1)
            gb = g * out * np.log(np.where(a.data > 0, a.data, 1.0))
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _make(out, (a, b), backward, "pow")


def exp(a):
    a = as_tensor(a)
    out = np.exp(a.data)
    return _make(out, (a,), lambda g: (g * out,), "exp")


def expm1(a):
    a = as_tensor(a)
    out = np.expm1(a.data)
    return _make(out, (a,), lambda g: (g * (out + 1.0),), "expm1")


def log(a):
    a = as_tensor(a)
    bad = int(np.count_nonzero(~(a.data > 0)))
    if bad:
        diagnostics["log_domain"] += bad
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.log(a.data)

    def backward(g):
        with np.errstate(divide="ignore", invalid="ignore"):
            return (g / a.data,)

    return _make(out, (a,), backward, "log")


def log1p(a):
    a = as_tensor(a)
    bad = int(np.count_nonzero(~(a.data > -1)))
    if bad:
        diagnostics["log_domain"] += bad
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.log1p(a.data)

    def backward(g):
        with np.errstate(divide="ignore", invalid="ignore"):
            return (g / (1.0 + a.data),)

    return _make(out, (a,), backward, "log1p")


def sigmoid(a):
    a = as_tensor(a)
    out = _sigmoid(a.data)
    return _make(out, (a,), lambda g: (g * out * (1.0 - out),), "sigmoid")


def _sigmoid(x):
    # Branch-free stable logistic.
    e = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


def softplus(a):
    a = as_tensor(a)
    out = np.logaddexp(0.0, a.data)
    return _make(out, (a,), lambda g: (g * _sigmoid(a.data),), "softplus")


def log_sigmoid(a):
    a = as_tensor(a)
    out = -np.logaddexp(0.0, -a.data)
    return _make(out, (a,), lambda g: (g * _sigmoid(-a.data),), "log_sigmoid")


def tanh(a):
    a = as_tensor(a)
    out = np.tanh(a.data)
    return _make(out, (a,), lambda g: (g * (1.0 - out * out),), "tanh")


def relu(a):
    a = as_tensor(a)
    mask = a.data > 0
    return _make(a.data * mask, (a,), lambda g: (g * mask,), "relu")


def clip(a, lo, hi):
    """Clamp values; gradient is zero where clamping is active."""
    a = as_tensor(a)
    out = np.clip(a.data, lo, hi)
    inside = (a.data >= lo) & (a.data <= hi)
    return _make(out, (a,), lambda g: (g * inside,), "clip")


# linear algebra ----------------------------------------------------------------

def matmul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul shape mismatch: {a.shape} @ {b.shape}")

    def backward(g):
        return g @ b.data.T, a.data.T @ g

    return _make(a.data @ b.data, (a, b), backward, "matmul")


def _same_pads(k):
    before = (k - 1) // 2
    return before, k - 1 - before


def conv2d(x, w):
    """Stride-1 cross-correlation with 'same' zero padding.

    ``x`` is ``[N, H, L, C]`` (or a single ``[H, L, C]`` image) and ``w`` is
    ``[h, l, C, K]`` (or a single kernel ``[h, l, C]``).  The output keeps the
    spatial extent: ``[N, H, L, K]``, squeezed to match the inputs.
    """
    x, w = as_tensor(x), as_tensor(w)
    single_image = x.ndim == 3
    single_kernel = w.ndim == 3
    if single_image:
        x = reshape(x, (1,) + x.shape)
    if single_kernel:
        w = reshape(w, w.shape + (1,))
    if x.ndim != 4 or w.ndim != 4:
        raise DimensionError(f"conv2d expects [N,H,L,C] and [h,l,C,K], got {x.shape} and {w.shape}")
    if x.shape[3] != w.shape[2]:
        raise DimensionError(f"conv2d channel mismatch: input {x.shape} vs kernel {w.shape}")
    out = _conv2d(x, w)
    if single_kernel:
        out = reshape(out, out.shape[:3])
    if single_image:
        out = reshape(out, out.shape[1:])
    return out


def _conv2d(x, w):
    n, H, L, _ = x.shape
    kh, kl, _, k = w.shape
    pt, pb = _same_pads(kh)
    pl, pr = _same_pads(kl)
    xp = np.pad(x.data, ((0, 0), (pt, pb), (pl, pr), (0, 0)))
    out = np.zeros((n, H, L, k), dtype=np.result_type(x.data, w.data))
    for i in range(kh):
        for j in range(kl):
            out += xp[:, i:i + H, j:j + L, :] @ w.data[i, j]

    def backward(g):
        gw = np.empty_like(w.data)
        gxp = np.zeros_like(xp)
        for i in range(kh):
            for j in range(kl):
                window = xp[:, i:i + H, j:j + L, :]
                gw[i, j] = np.tensordot(window, g, axes=([0, 1, 2], [0, 1, 2]))
                gxp[:, i:i + H, j:j + L, :] += g @ w.data[i, j].T
        return gxp[:, pt:pt + H, pl:pl + L, :], gw

    return _make(out, (x, w), backward, "conv2d")


# reductions ----------------------------------------------------------------------

def _norm_axes(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(a % ndim for a in axis)


def sum(a, axis=None, keepdims=False):
    a = as_tensor(a)
    axes = _norm_axes(axis, a.ndim)
    out = a.data.sum(axis=axes, keepdims=keepdims)

    def backward(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _make(out, (a,), backward, "sum")


def mean(a, axis=None, keepdims=False):
    a = as_tensor(a)
    axes = _norm_axes(axis, a.ndim)
    count = int(np.prod([a.shape[i] for i in axes])) if axes else 1
    return mul(sum(a, axes, keepdims), 1.0 / count)


def cumsum(a, axis=0):
    a = as_tensor(a)
    out = np.cumsum(a.data, axis=axis)

    def backward(g):
        return (np.flip(np.cumsum(np.flip(g, axis), axis=axis), axis),)

    return _make(out, (a,), backward, "cumsum")


def softmax(a, axis=-1):
    """Max-shifted softmax.  NaN inputs propagate to NaN outputs."""
    a = as_tensor(a)
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _make(out, (a,), backward, "softmax")


def log_softmax(a, axis=-1):
    a = as_tensor(a)
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    out = shifted - np.log(np.exp(shifted).sum(axis=axis, keepdims=True))

    def backward(g):
        return (g - np.exp(out) * g.sum(axis=axis, keepdims=True),)

    return _make(out, (a,), backward, "log_softmax")


# structural ----------------------------------------------------------------------

def reshape(a, shape):
    a = as_tensor(a)
    try:
        out = a.data.reshape(shape)
    except ValueError as exc:
        raise DimensionError(f"cannot reshape {a.shape} to {shape}") from exc
    return _make(out, (a,), lambda g: (g.reshape(a.shape),), "reshape")


def transpose(a, axes=None):
    a = as_tensor(a)
    out = np.transpose(a.data, axes)
    inverse = None if axes is None else np.argsort(axes)
    return _make(out, (a,), lambda g: (np.transpose(g, inverse),), "transpose")


def broadcast_to(a, shape):
    a = as_tensor(a)
    try:
        out = np.broadcast_to(a.data, shape).copy()
    except ValueError as exc:
        raise DimensionError(f"cannot broadcast {a.shape} to {shape}") from exc
    return _make(out, (a,), lambda g: (_unbroadcast(g, a.shape),), "broadcast")


def concat(tensors, axis=0):
    tensors = [as_tensor(t) for t in tensors]
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError as exc:
        shapes = [t.shape for t in tensors]
        raise DimensionError(f"cannot concatenate shapes {shapes} on axis {axis}") from exc
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def backward(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _make(out, tuple(tensors), backward, "concat")


def getitem(a, index):
    a = as_tensor(a)
    out = a.data[index]

    def backward(g):
        full = np.zeros_like(a.data)
        np.add.at(full, index, g)
        return (full,)

    return _make(np.array(out, copy=True), (a,), backward, "slice")


def slice_axis(a, start, stop, axis=-1):
    index = [slice(None)] * as_tensor(a).ndim
    index[axis] = slice(start, stop)
    return getitem(a, tuple(index))


def stop_gradient(a):
    return as_tensor(a).detach()
