"""Dense tensors with define-by-run reverse-mode autodiff on top of numpy.

Model state is float32; matmul and sum reductions accumulate in float64 and are
cast back to the operand dtype. Tensors built from float64 arrays stay float64,
which is what finite-difference checks use.
"""

from __future__ import annotations

import os
import threading

import numpy as np

from .errors import ContractError, NonFiniteError, ShapeError

DEBUG = os.environ.get("DECOMPSEG_DEBUG", "0").strip().lower() in ("1", "true", "on", "yes")

_local = threading.local()


def _active_tape():
    return getattr(_local, "tape", None)


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "name", "__weakref__")

    __array_priority__ = 100

    def __init__(self, data, requires_grad=False, name=None):
        arr = np.asarray(data)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float32)
        self.data = arr
        self.requires_grad = requires_grad
        self.grad = None
        self._parents = ()
        self._backward = None
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    @property
    def dims(self):
        return list(self.data.shape)

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self):
        return self.data.size

    def numpy(self):
        return self.data

    def item(self):
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else _raise_not_scalar(self)

    def detach(self):
        return Tensor(self.data)

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    def __len__(self):
        return self.shape[0]

    # operators ---------------------------------------------------------
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

    def __pow__(self, exponent):
        return power(self, exponent)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    @property
    def T(self):
        return swapaxes(self, -1, -2)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    def backward(self, params=None):
        return backward(self, params)


def _raise_not_scalar(t):
    raise ContractError(f"expected a single-element tensor, got shape {t.shape}")


class Tape:
    """Ordered record of the tracked operations executed while the tape is active.

    Nodes are appended in execution order, so parents always precede children.
    Use as a context manager; nesting is not supported.
    """

    def __init__(self):
        self.nodes = []

    def __enter__(self):
        if _active_tape() is not None:
            raise ContractError("a tape is already recording on this thread")
        _local.tape = self
        return self

    def __exit__(self, *exc):
        _local.tape = None
        return False

    def __len__(self):
        return len(self.nodes)

    def backward(self, output, params=None):
        return backward(output, params, tape=self)

    @classmethod
    def from_output(cls, output):
        """Rebuild a tape from the graph hanging off ``output`` (iterative DFS)."""
        tape = cls()
        seen = set()
        stack = [(output, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                tape.nodes.append(node)
                continue
            if id(node) in seen or node._backward is None:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for parent in node._parents:
                if parent.requires_grad and id(parent) not in seen:
                    stack.append((parent, False))
        return tape


def as_tensor(x, like=None):
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else np.float32
    return Tensor(np.asarray(x, dtype=dtype))


def parameter(data, name=None):
    return Tensor(np.asarray(data), requires_grad=True, name=name)


def _check_finite(arr, opname):
    if not np.all(np.isfinite(arr)):
        raise NonFiniteError(f"non-finite value produced by {opname}")


def _make(data, parents, backward_fn, opname):
    if DEBUG:
        _check_finite(data, opname)
    out = Tensor(data)
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward_fn
        tape = _active_tape()
        if tape is not None:
            tape.nodes.append(out)
    return out


def _unbroadcast(grad, shape):
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _pair(a, b):
    if isinstance(a, Tensor) and not isinstance(b, Tensor):
        b = as_tensor(b, a)
    elif isinstance(b, Tensor) and not isinstance(a, Tensor):
        a = as_tensor(a, b)
    else:
        a, b = as_tensor(a), as_tensor(b)
    return a, b


def _broadcast_check(a, b, opname):
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError as exc:
        raise ShapeError(f"{opname}: cannot broadcast {a.shape} with {b.shape}") from exc


# elementwise --------------------------------------------------------------


def add(a, b):
    a, b = _pair(a, b)
    _broadcast_check(a, b, "add")
    return _make(a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)), "add")


def sub(a, b):
    a, b = _pair(a, b)
    _broadcast_check(a, b, "sub")
    return _make(a.data - b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)), "sub")


def mul(a, b):
    a, b = _pair(a, b)
    _broadcast_check(a, b, "mul")
    return _make(a.data * b.data, (a, b),
                 lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
                 "mul")


def div(a, b):
    a, b = _pair(a, b)
    _broadcast_check(a, b, "div")
    out = a.data / b.data
    return _make(out, (a, b),
                 lambda g: (_unbroadcast(g / b.data, a.shape),
                            _unbroadcast(-g * out / b.data, b.shape)), "div")


def neg(a):
    return _make(-a.data, (a,), lambda g: (-g,), "neg")


def power(a, exponent):
    exponent = float(exponent)
    out = a.data ** exponent
    return _make(out, (a,), lambda g: (g * exponent * a.data ** (exponent - 1.0),), "pow")


def exp(a):
    out = np.exp(a.data)
    return _make(out, (a,), lambda g: (g * out,), "exp")


def log(a):
    return _make(np.log(a.data), (a,), lambda g: (g / a.data,), "log")


def sqrt(a):
    out = np.sqrt(a.data)

    def bw(g):
        safe = np.where(out > 0, out, 1.0)
        return (np.where(out > 0, g / (2.0 * safe), 0.0).astype(out.dtype),)

    return _make(out, (a,), bw, "sqrt")


def tanh(a):
    out = np.tanh(a.data)
    return _make(out, (a,), lambda g: (g * (1.0 - out * out),), "tanh")


def relu(a):
    out = np.maximum(a.data, 0)
    return _make(out, (a,), lambda g: (g * (a.data > 0),), "relu")


_GELU_C = np.sqrt(2.0 / np.pi)


def gelu(a):
    """tanh-approximated GELU."""
    x = a.data
    inner = _GELU_C * (x + 0.044715 * x ** 3)
    t = np.tanh(inner)
    out = 0.5 * x * (1.0 + t)

    def bw(g):
        dinner = _GELU_C * (1.0 + 3 * 0.044715 * x * x)
        return ((g * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * dinner)).astype(x.dtype),)

    return _make(out.astype(x.dtype), (a,), bw, "gelu")


def clip_min(a, floor):
    out = np.maximum(a.data, floor)
    return _make(out, (a,), lambda g: (g * (a.data >= floor),), "clip_min")


# reductions and linear algebra -------------------------------------------


def matmul(a, b):
    """Batched matrix product with numpy broadcasting over leading axes."""
    a, b = _pair(a, b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs rank >= 2 operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner extents differ: {a.shape} @ {b.shape}")
    dtype = np.result_type(a.dtype, b.dtype)
    a64 = a.data.astype(np.float64, copy=False)
    b64 = b.data.astype(np.float64, copy=False)
    out = np.matmul(a64, b64).astype(dtype)

    def bw(g):
        g64 = g.astype(np.float64, copy=False)
        ga = np.matmul(g64, np.swapaxes(b64, -1, -2)).astype(a.dtype)
        gb = np.matmul(np.swapaxes(a64, -1, -2), g64).astype(b.dtype)
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    try:
        np.broadcast_shapes(a.shape[:-2], b.shape[:-2])
    except ValueError as exc:
        raise ShapeError(f"matmul batch extents differ: {a.shape} @ {b.shape}") from exc
    return _make(out, (a, b), bw, "matmul")


def _norm_axis(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(ax % ndim for ax in axis)


def tsum(a, axis=None, keepdims=False):
    axes = _norm_axis(axis, a.ndim)
    out = a.data.sum(axis=axes, keepdims=keepdims, dtype=np.float64).astype(a.dtype)

    def bw(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, a.shape).astype(a.dtype),)

    return _make(np.asarray(out), (a,), bw, "sum")


def mean(a, axis=None, keepdims=False):
    axes = _norm_axis(axis, a.ndim)
    count = int(np.prod([a.shape[ax] for ax in axes])) if axes else 1
    return tsum(a, axes, keepdims) * (1.0 / count)


def softmax(x, axis=-1):
    x = as_tensor(x)
    if not -x.ndim <= axis < x.ndim:
        raise ShapeError(f"softmax axis {axis} out of range for rank {x.ndim}")
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True, dtype=np.float64).astype(x.dtype)

    def bw(g):
        inner = (g * out).sum(axis=axis, keepdims=True, dtype=np.float64).astype(x.dtype)
        return (out * (g - inner),)

    return _make(out, (x,), bw, "softmax")


# shape manipulation ------------------------------------------------------


def reshape(a, shape):
    try:
        out = a.data.reshape(shape)
    except ValueError as exc:
        raise ShapeError(f"cannot reshape {a.shape} to {shape}") from exc
    return _make(out, (a,), lambda g: (g.reshape(a.shape),), "reshape")


def transpose(a, axes=None):
    out = np.transpose(a.data, axes)
    inverse = None if axes is None else tuple(np.argsort(axes))
    return _make(out, (a,), lambda g: (np.transpose(g, inverse),), "transpose")


def swapaxes(a, ax1, ax2):
    return _make(np.swapaxes(a.data, ax1, ax2), (a,), lambda g: (np.swapaxes(g, ax1, ax2),),
                 "swapaxes")


def getitem(a, index):
    if isinstance(index, Tensor):
        index = index.data
    out = a.data[index]

    def bw(g):
        full = np.zeros_like(a.data)
        np.add.at(full, index, g)
        return (full,)

    return _make(np.array(out, copy=True), (a,), bw, "getitem")


def concat(tensors, axis=0):
    tensors = [as_tensor(t) for t in tensors]
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError as exc:
        raise ShapeError(f"concat: incompatible shapes {[t.shape for t in tensors]}") from exc
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def bw(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _make(out, tuple(tensors), bw, "concat")


def stack(tensors, axis=0):
    tensors = [as_tensor(t) for t in tensors]
    try:
        out = np.stack([t.data for t in tensors], axis=axis)
    except ValueError as exc:
        raise ShapeError(f"stack: incompatible shapes {[t.shape for t in tensors]}") from exc

    def bw(g):
        return tuple(np.take(g, i, axis=axis) for i in range(len(tensors)))

    return _make(out, tuple(tensors), bw, "stack")


def split(a, sections, axis=0):
    """Split into ``sections`` equal chunks along ``axis``."""
    extent = a.shape[axis]
    if extent % sections:
        raise ShapeError(f"axis extent {extent} is not divisible by {sections}")
    step = extent // sections
    out = []
    for i in range(sections):
        index = [slice(None)] * a.ndim
        index[axis] = slice(i * step, (i + 1) * step)
        out.append(getitem(a, tuple(index)))
    return out


# autodiff driver ----------------------------------------------------------


def backward(output, params=None, tape=None):
    """Reverse sweep from a scalar ``output``.

    Sets ``.grad`` on every tracked leaf reached and returns gradients aligned
    with ``params`` (zeros for parameters the output does not depend on). When
    ``params`` is None, returns a dict keyed by leaf tensor id.
    """
    if output.data.size != 1:
        raise ContractError(f"backward needs a scalar output, got shape {output.shape}")
    if tape is None:
        tape = Tape.from_output(output)
    grads = {id(output): np.ones_like(output.data)}
    leaves = {}
    for node in reversed(tape.nodes):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        parent_grads = node._backward(g)
        for parent, pg in zip(node._parents, parent_grads):
            if not parent.requires_grad or pg is None:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg
            if parent._backward is None:
                leaves[key] = parent
    if output._backward is None and output.requires_grad:
        leaves[id(output)] = output
    for key, leaf in leaves.items():
        g = np.asarray(grads[key], dtype=leaf.dtype).reshape(leaf.shape)
        leaf.grad = g if leaf.grad is None else leaf.grad + g
    if params is None:
        return {key: leaf.grad for key, leaf in leaves.items()}
    result = []
    for p in params:
        if id(p) in leaves:
            result.append(np.asarray(grads[id(p)], dtype=p.dtype).reshape(p.shape))
        else:
            result.append(np.zeros_like(p.data))
    return result


def zero_grad(params):
    for p in params:
        p.grad = None


def grad_check(f, x, step=1e-3):
    """Max relative error between autodiff and central differences of scalar ``f`` at ``x``.

    ``x`` is copied to float64 so the difference quotient is not swamped by
    float32 rounding. Error per coordinate is
    ``|auto - fd| / max(|fd|, 1e-8)``.
    """
    if step <= 0:
        raise ContractError("step must be positive")
    base = np.array(x.data if isinstance(x, Tensor) else x, dtype=np.float64)
    xt = Tensor(base.copy(), requires_grad=True)
    (auto,) = backward(f(xt), [xt])
    fd = np.zeros_like(base)
    flat = base.reshape(-1)
    fd_flat = fd.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        hi = float(f(Tensor(base.copy())).data)
        flat[i] = orig - step
        lo = float(f(Tensor(base.copy())).data)
        flat[i] = orig
        fd_flat[i] = (hi - lo) / (2.0 * step)
    err = np.abs(auto - fd) / np.maximum(np.abs(fd), 1e-8)
    return float(err.max()) if err.size else 0.0
