#!/usr/bin/env python3
"""
Reverse-mode Automatic Differentiation Core

A small dense tensor type backed by float64 numpy arrays. Every differentiable
operation records its parents and a backward rule on the output tensor; calling
``backward`` on a scalar collects the reachable graph into a Tape (ordered by
creation, which is always a valid topological order) and replays the rules in
reverse.

Conventions:
- no implicit broadcasting; binary operations need equal shapes, the only
  exceptions are scalar scaling/shifting and the explicit ``add_broadcast``
- gradients accumulate into ``.grad`` across backward calls until
  ``zero_grad`` is called
- recording can be suspended per thread with ``no_grad()``
"""

import itertools
import threading
from contextlib import contextmanager

import numpy as np

from errors import ContractError, DimensionError, DomainError, ParameterError


_creation_counter = itertools.count()
_grad_state = threading.local()


def is_grad_enabled():
    return getattr(_grad_state, "enabled", True)


@contextmanager
def no_grad():
    """Suspend graph recording for the current thread"""
    previous = is_grad_enabled()
    _grad_state.enabled = False
    try:
        yield
    finally:
        _grad_state.enabled = previous


class Tensor:
    """Dense float64 tensor with an optional gradient"""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_rule", "_op", "_seq")

    def __init__(self, data, requires_grad=False):
        arr = np.array(data, dtype=np.float64)
        if arr.size == 0:
            raise DimensionError("tensor must hold at least one element")
        self.data = arr
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = ()
        self._rule = None
        self._op = "leaf"
        self._seq = next(_creation_counter)

    @classmethod
    def _wrap(cls, arr):
        out = cls.__new__(cls)
        out.data = np.asarray(arr, dtype=np.float64)
        out.grad = None
        out.requires_grad = False
        out._parents = ()
        out._rule = None
        out._op = "leaf"
        out._seq = next(_creation_counter)
        return out

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    @property
    def op(self):
        return self._op

    @property
    def seq(self):
        return self._seq

    @property
    def parents(self):
        return self._parents

    def item(self):
        if self.size != 1:
            raise ContractError(f"item() needs a single element, shape is {self.shape}")
        return float(self.data.reshape(-1)[0])

    def numpy(self):
        return self.data.copy()

    def detach(self):
        return Tensor._wrap(self.data)

    def zero_grad(self):
        self.grad = None

    def backward(self):
        backward(self)

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, op={self._op}{flag})"

    # operator sugar; scalars are the only implicit operands
    def __add__(self, other):
        if _is_scalar(other):
            return add_scalar(self, other)
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        if _is_scalar(other):
            return add_scalar(self, -float(other))
        return sub(self, other)

    def __rsub__(self, other):
        if _is_scalar(other):
            return add_scalar(neg(self), other)
        return sub(other, self)

    def __mul__(self, other):
        if _is_scalar(other):
            return scale(self, other)
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if not _is_scalar(other):
            raise DimensionError("only division by a scalar is supported")
        return scale(self, 1.0 / float(other))

    def __neg__(self):
        return neg(self)

    def __pow__(self, exponent):
        return power(self, exponent)

    def __matmul__(self, other):
        return matmul(self, other)


def _is_scalar(value):
    return isinstance(value, (int, float, np.floating, np.integer)) and not isinstance(value, bool)


def as_tensor(value):
    """Wrap a constant (no gradient) unless it already is a Tensor"""
    if isinstance(value, Tensor):
        return value
    return Tensor(value)


def record_op(data, parents, rule, op):
    """
    Create the output of an operation.

    ``rule(g)`` receives the upstream gradient (same shape as ``data``) and
    returns one gradient array (or None) per parent. Nothing is recorded when
    grad mode is off or no parent requires a gradient.
    """
    out = Tensor._wrap(data)
    out._op = op
    if is_grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._rule = rule
    return out


class TapeEntry:
    __slots__ = ("output", "inputs", "rule", "op")

    def __init__(self, output):
        self.output = output
        self.inputs = output._parents
        self.rule = output._rule
        self.op = output._op


class Tape:
    """Recorded operations reachable from a root, in topological order"""

    def __init__(self, nodes):
        self.nodes = nodes
        self.entries = [TapeEntry(n) for n in nodes if n._rule is not None]

    @classmethod
    def from_root(cls, root):
        seen = {id(root): root}
        stack = [root]
        while stack:
            node = stack.pop()
            for parent in node._parents:
                if id(parent) not in seen:
                    seen[id(parent)] = parent
                    stack.append(parent)
        # creation order is a topological order: parents always exist first
        nodes = sorted(seen.values(), key=lambda t: t._seq)
        return cls(nodes)

    def __len__(self):
        return len(self.entries)

    def __iter__(self):
        return iter(self.entries)


def backward(root):
    """Populate ``.grad`` on every requires_grad tensor reachable from ``root``"""
    if root.size != 1:
        raise ContractError(f"backward needs a scalar root, got shape {root.shape}")
    if not root.requires_grad:
        return
    tape = Tape.from_root(root)
    grads = {id(root): np.ones_like(root.data)}
    for entry in reversed(tape.entries):
        g_out = grads.get(id(entry.output))
        if g_out is None:
            continue
        parent_grads = entry.rule(g_out)
        for parent, g in zip(entry.inputs, parent_grads):
            if g is None or not parent.requires_grad:
                continue
            if g.shape != parent.data.shape:
                raise ContractError(
                    f"backward rule of {entry.op} produced shape {g.shape} for input {parent.shape}"
                )
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + g
            else:
                grads[key] = g
    for node in tape.nodes:
        if not node.requires_grad:
            continue
        g = grads.get(id(node))
        if g is None:
            g = np.zeros_like(node.data)
        node.grad = g.copy() if node.grad is None else node.grad + g


# ---------------------------------------------------------------------------
# elementwise

def _same_shape(a, b, op):
    if a.shape != b.shape:
        raise DimensionError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _same_shape(a, b, "add")
    return record_op(a.data + b.data, (a, b), lambda g: (g, g), "add")


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _same_shape(a, b, "sub")
    return record_op(a.data - b.data, (a, b), lambda g: (g, -g), "sub")


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _same_shape(a, b, "mul")
    return record_op(a.data * b.data, (a, b), lambda g: (g * b.data, g * a.data), "mul")


def neg(a):
    return record_op(-a.data, (a,), lambda g: (-g,), "neg")


def scale(a, c):
    c = float(c)
    return record_op(a.data * c, (a,), lambda g: (g * c,), "scale")


def add_scalar(a, c):
    c = float(c)
    return record_op(a.data + c, (a,), lambda g: (g,), "add_scalar")


def sigmoid(a):
    x = a.data
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return record_op(out, (a,), lambda g: (g * out * (1.0 - out),), "sigmoid")


def relu(a):
    mask = a.data > 0
    return record_op(np.maximum(a.data, 0.0), (a,), lambda g: (g * mask,), "relu")


def exp(a):
    out = np.exp(a.data)
    return record_op(out, (a,), lambda g: (g * out,), "exp")


def log(a):
    if not np.all(a.data > 0):
        raise DomainError("log requires strictly positive inputs")
    x = a.data
    return record_op(np.log(x), (a,), lambda g: (g / x,), "log")


def power(a, exponent):
    """Elementwise ``a ** exponent`` for a scalar exponent"""
    p = float(exponent)
    x = a.data
    if p == 0.0:
        return record_op(np.ones_like(x), (a,), lambda g: (np.zeros_like(g),), "pow")

    def rule(g):
        with np.errstate(divide="ignore", invalid="ignore"):
            local = p * np.power(x, p - 1.0)
        if p < 1.0:
            local = np.where(x == 0, 0.0, local)
        return (g * local,)

    return record_op(np.power(x, p), (a,), rule, "pow")


def absolute(a):
    """|a|; the subgradient at exactly zero is 0"""
    sign = np.sign(a.data)
    return record_op(np.abs(a.data), (a,), lambda g: (g * sign,), "abs")


def clip(a, lo, hi):
    x = a.data
    inside = (x >= lo) & (x <= hi)
    return record_op(np.clip(x, lo, hi), (a,), lambda g: (g * inside,), "clip")


def square(a):
    x = a.data
    return record_op(x * x, (a,), lambda g: (2.0 * g * x,), "square")


def elementwise(op, *inputs, **kwargs):
    """Dispatch by name: add, sub, mul, sigmoid, relu, exp, log, neg, scale"""
    table = {
        "add": add, "sub": sub, "mul": mul, "sigmoid": sigmoid, "relu": relu,
        "exp": exp, "log": log, "neg": neg, "scale": scale,
        "abs": absolute, "square": square, "pow": power, "add_scalar": add_scalar,
    }
    if op not in table:
        raise ParameterError(f"unknown elementwise op '{op}'. Available: {sorted(table)}")
    return table[op](*inputs, **kwargs)


# ---------------------------------------------------------------------------
# reductions and shape

def _check_axis(t, axis):
    if axis is None:
        return None
    if not isinstance(axis, (int, np.integer)) or not -t.ndim <= axis < t.ndim:
        raise DimensionError(f"invalid axis {axis} for tensor of shape {t.shape}")
    return int(axis) % t.ndim


def reduce_sum(a, axis=None):
    axis = _check_axis(a, axis)
    shape = a.shape

    def rule(g):
        if axis is None:
            return (np.broadcast_to(g, shape).copy(),)
        return (np.broadcast_to(np.expand_dims(g, axis), shape).copy(),)

    return record_op(a.data.sum(axis=axis), (a,), rule, "sum")


def reduce_mean(a, axis=None):
    axis = _check_axis(a, axis)
    count = a.size if axis is None else a.shape[axis]
    return scale(reduce_sum(a, axis), 1.0 / count)


def reduce(op, t, axis=None):
    if op == "sum":
        return reduce_sum(t, axis)
    if op == "mean":
        return reduce_mean(t, axis)
    raise ParameterError(f"unknown reduction '{op}'. Available: ['mean', 'sum']")


def reshape(a, shape):
    shape = tuple(int(s) for s in shape)
    try:
        out = a.data.reshape(shape)
    except ValueError as exc:
        raise DimensionError(f"cannot reshape {a.shape} to {shape}") from exc
    src = a.shape
    return record_op(out, (a,), lambda g: (g.reshape(src),), "reshape")


def transpose(a, axes=None):
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    axes = tuple(axes)
    if sorted(axes) != list(range(a.ndim)):
        raise DimensionError(f"invalid permutation {axes} for shape {a.shape}")
    inverse = tuple(np.argsort(axes))
    return record_op(np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inverse),), "transpose")


def swap_last(a):
    axes = list(range(a.ndim))
    axes[-1], axes[-2] = axes[-2], axes[-1]
    return transpose(a, axes)


def concat(tensors, axis=0):
    tensors = [as_tensor(t) for t in tensors]
    if not tensors:
        raise DimensionError("concat needs at least one tensor")
    axis = _check_axis(tensors[0], axis)
    ref = tensors[0].shape
    for t in tensors[1:]:
        if t.ndim != len(ref) or any(t.shape[i] != ref[i] for i in range(len(ref)) if i != axis):
            raise DimensionError(f"concat: incompatible shapes {ref} and {t.shape}")
    sizes = [t.shape[axis] for t in tensors]
    bounds = np.cumsum([0] + sizes)

    def rule(g):
        return tuple(
            np.take(g, np.arange(bounds[i], bounds[i + 1]), axis=axis) for i in range(len(tensors))
        )

    return record_op(np.concatenate([t.data for t in tensors], axis=axis), tuple(tensors), rule, "concat")


def add_broadcast(x, b):
    """x + b where b's shape equals the trailing dimensions of x"""
    x, b = as_tensor(x), as_tensor(b)
    if b.ndim > x.ndim or x.shape[x.ndim - b.ndim:] != b.shape:
        raise DimensionError(f"add_broadcast: {b.shape} does not match trailing dims of {x.shape}")
    lead = tuple(range(x.ndim - b.ndim))
    return record_op(x.data + b.data, (x, b), lambda g: (g, g.sum(axis=lead)), "add_broadcast")


# ---------------------------------------------------------------------------
# linear algebra

def matmul(a, b):
    """2-D product, or a batched product of two 3-D tensors with equal batch size"""
    a, b = as_tensor(a), as_tensor(b)
    ok = (a.ndim == b.ndim == 2) or (a.ndim == b.ndim == 3 and a.shape[0] == b.shape[0])
    if not ok or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul shape mismatch: {a.shape} @ {b.shape}")

    def rule(g):
        return (g @ np.swapaxes(b.data, -1, -2), np.swapaxes(a.data, -1, -2) @ g)

    return record_op(a.data @ b.data, (a, b), rule, "matmul")


# ---------------------------------------------------------------------------
# softmax family

def _check_temperature(temperature):
    if not temperature > 0:
        raise ParameterError(f"temperature must be positive, got {temperature}")
    return float(temperature)


def softmax(t, axis=-1, temperature=1.0):
    tau = _check_temperature(temperature)
    axis = _check_axis(t, axis)
    z = t.data / tau
    z = z - z.max(axis=axis, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=axis, keepdims=True)

    def rule(g):
        return ((s * (g - (g * s).sum(axis=axis, keepdims=True))) / tau,)

    return record_op(s, (t,), rule, "softmax")


def log_softmax(t, axis=-1, temperature=1.0):
    tau = _check_temperature(temperature)
    axis = _check_axis(t, axis)
    z = t.data / tau
    z = z - z.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    out = z - lse
    s = np.exp(out)

    def rule(g):
        return ((g - s * g.sum(axis=axis, keepdims=True)) / tau,)

    return record_op(out, (t,), rule, "log_softmax")


# ---------------------------------------------------------------------------
# spatial ops for N×C×H×W tensors

def conv2d(x, w, b=None, stride=1, padding=0):
    """Cross-correlation of x (N,C,H,W) with w (O,C,k,k)"""
    x, w = as_tensor(x), as_tensor(w)
    if x.ndim != 4 or w.ndim != 4:
        raise DimensionError(f"conv2d expects 4-D input and kernel, got {x.shape} and {w.shape}")
    if x.shape[1] != w.shape[1]:
        raise DimensionError(f"conv2d channel mismatch: input {x.shape} vs kernel {w.shape}")
    k_h, k_w = w.shape[2], w.shape[3]
    pad = ((0, 0), (0, 0), (padding, padding), (padding, padding))
    xp = np.pad(x.data, pad)
    if xp.shape[2] < k_h or xp.shape[3] < k_w:
        raise DimensionError(f"conv2d input {x.shape} smaller than kernel {w.shape}")
    windows = np.lib.stride_tricks.sliding_window_view(xp, (k_h, k_w), axis=(2, 3))
    windows = windows[:, :, ::stride, ::stride]
    out = np.einsum("nchwij,ocij->nohw", windows, w.data, optimize=True)
    parents = (x, w)
    if b is not None:
        b = as_tensor(b)
        if b.shape != (w.shape[0],):
            raise DimensionError(f"conv2d bias {b.shape} does not match {w.shape[0]} output channels")
        out = out + b.data[None, :, None, None]
        parents = (x, w, b)
    out_h, out_w = out.shape[2], out.shape[3]

    def rule(g):
        gw = np.einsum("nohw,nchwij->ocij", g, windows, optimize=True)
        gxp = np.zeros_like(xp)
        for i in range(k_h):
            for j in range(k_w):
                contrib = np.einsum("nohw,oc->nchw", g, w.data[:, :, i, j], optimize=True)
                gxp[:, :, i:i + stride * out_h:stride, j:j + stride * out_w:stride] += contrib
        gx = gxp[:, :, padding:padding + x.shape[2], padding:padding + x.shape[3]]
        grads = [gx, gw]
        if b is not None:
            grads.append(g.sum(axis=(0, 2, 3)))
        return tuple(grads)

    return record_op(out, parents, rule, "conv2d")


def avg_pool2d(x, k):
    """Non-overlapping k×k average pooling; trailing rows/cols that do not fill a window are dropped"""
    if x.ndim != 4:
        raise DimensionError(f"avg_pool2d expects N×C×H×W, got {x.shape}")
    n, c, h, w = x.shape
    oh, ow = h // k, w // k
    if oh < 1 or ow < 1:
        raise DimensionError(f"avg_pool2d window {k} larger than input {x.shape}")
    cropped = x.data[:, :, :oh * k, :ow * k]
    out = cropped.reshape(n, c, oh, k, ow, k).mean(axis=(3, 5))

    def rule(g):
        gx = np.zeros_like(x.data)
        gx[:, :, :oh * k, :ow * k] = np.repeat(np.repeat(g, k, axis=2), k, axis=3) / (k * k)
        return (gx,)

    return record_op(out, (x,), rule, "avg_pool2d")


def separable_map(x, rows, cols):
    """out[n,c] = rows @ x[n,c] @ cols.T for constant interpolation matrices"""
    if x.ndim != 4 or rows.shape[1] != x.shape[2] or cols.shape[1] != x.shape[3]:
        raise DimensionError(f"separable_map: matrices {rows.shape}, {cols.shape} do not fit {x.shape}")
    out = np.einsum("oh,nchw,pw->ncop", rows, x.data, cols, optimize=True)

    def rule(g):
        return (np.einsum("oh,ncop,pw->nchw", rows, g, cols, optimize=True),)

    return record_op(out, (x,), rule, "separable_map")


# ---------------------------------------------------------------------------
# gradient checking

def _check_step(step):
    if not 0 < step <= 1e-3:
        raise ParameterError(f"finite-difference step must lie in (0, 1e-3], got {step}")


def _relative_error(analytic, numeric):
    return float(np.max(np.abs(analytic - numeric) / np.maximum(1.0, np.abs(analytic))))


def grad_check(f, point, step=1e-5):
    """
    Compare reverse-mode gradients of a scalar function with central differences.

    ``point`` is an array or a list of arrays; ``f`` receives one Tensor per
    array. Returns max |analytic - numeric| / max(1, |analytic|) over all
    coordinates.
    """
    _check_step(step)
    multi = isinstance(point, (list, tuple))
    points = [np.array(p, dtype=np.float64) for p in (point if multi else [point])]
    inputs = [Tensor(p, requires_grad=True) for p in points]
    out = f(*inputs)
    if out.size != 1:
        raise ContractError(f"grad_check needs a scalar-valued function, got shape {out.shape}")
    backward(out)
    worst = 0.0
    for k, p in enumerate(points):
        analytic = inputs[k].grad if inputs[k].grad is not None else np.zeros_like(p)
        numeric = np.zeros_like(p)
        flat = numeric.reshape(-1)
        for j in range(p.size):
            values = []
            for sign in (1.0, -1.0):
                shifted = [q.copy() for q in points]
                shifted[k].reshape(-1)[j] += sign * step
                with no_grad():
                    values.append(f(*[Tensor(q) for q in shifted]).item())
            flat[j] = (values[0] - values[1]) / (2.0 * step)
        worst = max(worst, _relative_error(analytic, numeric))
    return worst


def grad_check_parameters(loss_fn, params, step=1e-5):
    """Same oracle for parameters that ``loss_fn()`` closes over; data is restored afterwards"""
    _check_step(step)
    for p in params:
        p.zero_grad()
    out = loss_fn()
    if out.size != 1:
        raise ContractError(f"grad_check_parameters needs a scalar loss, got shape {out.shape}")
    backward(out)
    worst = 0.0
    for p in params:
        analytic = p.grad if p.grad is not None else np.zeros_like(p.data)
        numeric = np.zeros_like(p.data)
        flat_num = numeric.reshape(-1)
        flat = p.data.reshape(-1)
        for j in range(flat.size):
            original = flat[j]
            values = []
            for sign in (1.0, -1.0):
                flat[j] = original + sign * step
                with no_grad():
                    values.append(loss_fn().item())
            flat[j] = original
            flat_num[j] = (values[0] - values[1]) / (2.0 * step)
        worst = max(worst, _relative_error(analytic, numeric))
    return worst
