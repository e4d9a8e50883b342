"""Dense tensors with reverse-mode automatic differentiation.

Eager numpy-backed execution. Every operation appends its adjoint
closure to the graph (an implicit tape ordered by creation id);
`backward()` replays the reachable closures in reverse creation order,
which is a valid topological order because inputs always predate
outputs. Graphs are one-shot: a second backward through the same nodes
raises TapeConsumed.

Contracts kept by every operation:
  * outputs are finite (NaN/Inf raises NonFiniteValue immediately);
  * operands are shape-checked before compute; elementwise binaries
    broadcast by numpy rules (equal shapes, size-1 axes, or scalars)
    and nothing else;
  * tensors are immutable once produced by an operation (leaf .data
    may be updated between graphs, e.g. by an optimizer).

float64 is the default and the precision all verification runs at;
float32 exists for the benchmark harness.
"""

from __future__ import annotations

import itertools
from contextlib import contextmanager
from dataclasses import dataclass

import numpy as np

from himat import kernels
from himat.errors import (
    NonDeterministicFunction,
    NonFiniteValue,
    NonScalarLoss,
    ShapeMismatch,
    TapeConsumed,
)

_ids = itertools.count()
_grad_enabled = True
_alloc_log: list | None = None


@contextmanager
def no_grad():
    """Disable taping (sampling, benchmarking, oracle evaluations)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


@contextmanager
def allocation_log():
    """Record the element count of every tensor allocated in the block."""
    global _alloc_log
    prev = _alloc_log
    _alloc_log = []
    try:
        yield _alloc_log
    finally:
        _alloc_log = prev


def _check_finite(data):
    # a float64 sum is NaN/Inf iff the array holds any NaN/Inf (values
    # large enough to overflow the f64 accumulator would already be Inf)
    if not np.isfinite(np.sum(data, dtype=np.float64)):
        raise NonFiniteValue("operation produced NaN or Inf")


def _record(data):
    if _alloc_log is not None:
        _alloc_log.append(int(data.size))


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_bw", "_nid", "_consumed")

    def __init__(self, data, requires_grad=False, dtype=None):
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(dtype, copy=False)
        elif arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float64)
        _check_finite(arr)
        _record(arr)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._parents = ()
        self._bw = None
        self._nid = next(_ids)
        self._consumed = False

    # -- construction of op results ------------------------------------
    @staticmethod
    def _from_op(data, parents, bw):
        _check_finite(data)
        _record(data)
        t = Tensor.__new__(Tensor)
        t.data = data
        t.grad = None
        t._nid = next(_ids)
        t._consumed = False
        if _grad_enabled and any(p.requires_grad for p in parents):
            t.requires_grad = True
            t._parents = tuple(parents)
            t._bw = bw
        else:
            t.requires_grad = False
            t._parents = ()
            t._bw = None
        return t

    # -- conveniences ----------------------------------------------------
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
    def dtype(self):
        return self.data.dtype

    def item(self):
        return float(self.data.reshape(()))

    def detach(self):
        return Tensor(self.data, requires_grad=False)

    def copy(self):
        return Tensor(self.data.copy(), requires_grad=self.requires_grad)

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}{flag})"

    # -- autodiff ---------------------------------------------------------
    def backward(self):
        """Populate .grad on every reachable requires_grad tensor.

        The loss must be scalar; the reachable part of the tape is
        consumed (closures are dropped so memory is released and a
        repeated call fails loudly).
        """
        if self.data.size != 1:
            raise NonScalarLoss(f"loss has shape {self.data.shape}, expected scalar")
        if self._consumed:
            raise TapeConsumed("backward() already ran through this graph")
        nodes = {}
        stack = [self]
        while stack:
            t = stack.pop()
            if id(t) in nodes:
                continue
            nodes[id(t)] = t
            if t._consumed:
                raise TapeConsumed("graph shares nodes with an already-consumed tape")
            stack.extend(t._parents)
        self.grad = np.ones_like(self.data)
        for t in sorted(nodes.values(), key=lambda n: n._nid, reverse=True):
            if t._bw is not None and t.grad is not None:
                t._bw(t.grad)
            if t._parents:
                t._consumed = True
                t._bw = None
                t._parents = ()

    def _accum(self, g):
        self.grad = g if self.grad is None else self.grad + g

    # -- operator sugar ----------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(_coerce(other, self), self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(_coerce(other, self), self)

    def __neg__(self):
        return neg(self)

    def __pow__(self, p):
        return power(self, p)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        return reshape(self, shape[0] if len(shape) == 1 and isinstance(shape[0], (tuple, list)) else shape)

    def transpose(self, axes=None):
        return permute(self, axes)


def _coerce(x, like):
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=like.data.dtype))


def _broadcast_check(a, b):
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeMismatch(f"cannot broadcast {a.shape} with {b.shape}") from None


def _unbroadcast(g, shape):
    """Sum `g` down to `shape` (reverse of numpy broadcasting)."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, s in enumerate(shape):
        if s == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


def _same_dtype(a, b):
    if a.data.dtype != b.data.dtype:
        raise TypeError(f"mixed dtypes {a.data.dtype} and {b.data.dtype}")


# -- elementwise binaries --------------------------------------------------

def add(a, b):
    a = a if isinstance(a, Tensor) else Tensor(a)
    b = _coerce(b, a)
    _same_dtype(a, b)
    _broadcast_check(a, b)

    def bw(g):
        if a.requires_grad:
            a._accum(_unbroadcast(g, a.shape))
        if b.requires_grad:
            b._accum(_unbroadcast(g, b.shape))

    return Tensor._from_op(a.data + b.data, (a, b), bw)


def sub(a, b):
    a = a if isinstance(a, Tensor) else Tensor(a)
    b = _coerce(b, a)
    _same_dtype(a, b)
    _broadcast_check(a, b)

    def bw(g):
        if a.requires_grad:
            a._accum(_unbroadcast(g, a.shape))
        if b.requires_grad:
            b._accum(_unbroadcast(-g, b.shape))

    return Tensor._from_op(a.data - b.data, (a, b), bw)


def mul(a, b):
    a = a if isinstance(a, Tensor) else Tensor(a)
    b = _coerce(b, a)
    _same_dtype(a, b)
    _broadcast_check(a, b)

    def bw(g):
        if a.requires_grad:
            a._accum(_unbroadcast(g * b.data, a.shape))
        if b.requires_grad:
            b._accum(_unbroadcast(g * a.data, b.shape))

    return Tensor._from_op(a.data * b.data, (a, b), bw)


def div(a, b):
    a = a if isinstance(a, Tensor) else Tensor(a)
    b = _coerce(b, a)
    _same_dtype(a, b)
    _broadcast_check(a, b)

    def bw(g):
        if a.requires_grad:
            a._accum(_unbroadcast(g / b.data, a.shape))
        if b.requires_grad:
            b._accum(_unbroadcast(-g * a.data / (b.data * b.data), b.shape))

    return Tensor._from_op(a.data / b.data, (a, b), bw)


# -- elementwise unaries ----------------------------------------------------

def neg(a):
    def bw(g):
        a._accum(-g)

    return Tensor._from_op(-a.data, (a,), bw)


def power(a, p):
    p = float(p)

    def bw(g):
        a._accum(g * p * np.power(a.data, p - 1.0))

    return Tensor._from_op(np.power(a.data, p), (a,), bw)


def exp(a):
    out_data = np.exp(a.data)

    def bw(g):
        a._accum(g * out_data)

    return Tensor._from_op(out_data, (a,), bw)


def log(a):
    def bw(g):
        a._accum(g / a.data)

    return Tensor._from_op(np.log(a.data), (a,), bw)


def sqrt(a):
    out_data = np.sqrt(a.data)

    def bw(g):
        a._accum(g * 0.5 / out_data)

    return Tensor._from_op(out_data, (a,), bw)


def tanh(a):
    out_data = np.tanh(a.data)

    def bw(g):
        a._accum(g * (1.0 - out_data * out_data))

    return Tensor._from_op(out_data, (a,), bw)


def relu(a):
    def bw(g):
        a._accum(g * (a.data > 0))

    return Tensor._from_op(np.maximum(a.data, 0), (a,), bw)


_GELU_A = 0.7978845608028654  # sqrt(2/pi)
_GELU_B = 0.044715


def gelu(a):
    """tanh-form GELU as one fused node (smooth; cheap adjoint)."""
    x = a.data
    th = np.tanh(_GELU_A * (x + _GELU_B * x**3))

    def bw(g):
        sech2 = 1.0 - th * th
        a._accum(g * (0.5 * (1.0 + th) + 0.5 * x * sech2 * _GELU_A * (1.0 + 3.0 * _GELU_B * x * x)))

    return Tensor._from_op(0.5 * x * (1.0 + th), (a,), bw)


def layernorm(a, scale, shift, eps=1e-6):
    """Normalize the last axis to zero mean / unit variance, then apply
    the learned per-channel affine. Fused node with the standard adjoint."""
    x = a.data
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xn = xc * inv

    def bw(g):
        if scale.requires_grad:
            red = tuple(range(x.ndim - 1))
            scale._accum((g * xn).sum(axis=red))
        if shift.requires_grad:
            red = tuple(range(x.ndim - 1))
            shift._accum(g.sum(axis=red))
        if a.requires_grad:
            gn = g * scale.data
            a._accum(
                inv
                * (
                    gn
                    - gn.mean(axis=-1, keepdims=True)
                    - xn * (gn * xn).mean(axis=-1, keepdims=True)
                )
            )

    return Tensor._from_op(xn * scale.data + shift.data, (a, scale, shift), bw)


# -- linear algebra -----------------------------------------------------------

def matmul(a, b):
    """Matrix product a[..., m, k] @ b[..., k, n].

    Leading axes broadcast by numpy rules; the contraction dims must
    agree exactly.
    """
    a = a if isinstance(a, Tensor) else Tensor(a)
    b = _coerce(b, a)
    _same_dtype(a, b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeMismatch(f"matmul needs >=2-d operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeMismatch(f"inner dims disagree: {a.shape} @ {b.shape}")
    try:
        np.broadcast_shapes(a.shape[:-2], b.shape[:-2])
    except ValueError:
        raise ShapeMismatch(f"batch dims incompatible: {a.shape} @ {b.shape}") from None

    def bw(g):
        if a.requires_grad:
            a._accum(_unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape))
        if b.requires_grad:
            b._accum(_unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape))

    return Tensor._from_op(a.data @ b.data, (a, b), bw)


def permute(a, axes=None):
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    axes = tuple(ax % a.ndim for ax in axes)
    inv = np.argsort(axes)

    def bw(g):
        a._accum(np.transpose(g, inv))

    return Tensor._from_op(np.transpose(a.data, axes), (a,), bw)


def swap_last(a):
    """Transpose the last two axes (matrix transpose with batching)."""
    return permute(a, tuple(range(a.ndim - 2)) + (a.ndim - 1, a.ndim - 2))


def reshape(a, shape):
    shape = tuple(shape)
    old = a.shape

    def bw(g):
        a._accum(g.reshape(old))

    return Tensor._from_op(a.data.reshape(shape), (a,), bw)


# -- reductions -----------------------------------------------------------------

def tsum(a, axis=None, keepdims=False):
    out_data = a.data.sum(axis=axis, keepdims=keepdims)

    def bw(g):
        if axis is None:
            a._accum(np.broadcast_to(g, a.shape).copy() if np.ndim(g) else np.full(a.shape, g, dtype=a.data.dtype))
        else:
            gg = g if keepdims else np.expand_dims(g, axis)
            a._accum(np.broadcast_to(gg, a.shape) + np.zeros(a.shape, dtype=a.data.dtype))

    return Tensor._from_op(np.asarray(out_data), (a,), bw)


def tmean(a, axis=None, keepdims=False):
    n = a.size if axis is None else np.prod([a.shape[ax] for ax in np.atleast_1d(axis)])
    return mul(tsum(a, axis=axis, keepdims=keepdims), 1.0 / float(n))


# -- shape surgery -----------------------------------------------------------------

def slice_axis(a, axis, start, stop):
    axis = axis % a.ndim
    idx = tuple(slice(None) if i != axis else slice(start, stop) for i in range(a.ndim))

    def bw(g):
        buf = np.zeros(a.shape, dtype=a.data.dtype)
        buf[idx] = g
        a._accum(buf)

    return Tensor._from_op(a.data[idx].copy(), (a,), bw)


def pad_axis(a, axis, before, after):
    """Zero-pad one axis."""
    axis = axis % a.ndim
    widths = [(0, 0)] * a.ndim
    widths[axis] = (before, after)
    n = a.shape[axis]
    idx = tuple(slice(None) if i != axis else slice(before, before + n) for i in range(a.ndim))

    def bw(g):
        a._accum(g[idx])

    return Tensor._from_op(np.pad(a.data, widths), (a,), bw)


def roll(a, shift, axis):
    def bw(g):
        neg_shift = tuple(-s for s in shift) if isinstance(shift, tuple) else -shift
        a._accum(np.roll(g, neg_shift, axis))

    return Tensor._from_op(np.roll(a.data, shift, axis), (a,), bw)


def concat(parts, axis):
    parts = tuple(parts)
    axis = axis % parts[0].ndim
    sizes = [p.shape[axis] for p in parts]
    offsets = np.cumsum([0] + sizes)

    def bw(g):
        for p, lo, hi in zip(parts, offsets[:-1], offsets[1:]):
            if p.requires_grad:
                idx = tuple(slice(None) if i != axis else slice(lo, hi) for i in range(p.ndim))
                p._accum(g[idx])

    return Tensor._from_op(np.concatenate([p.data for p in parts], axis=axis), parts, bw)


def stack(parts, axis=0):
    parts = tuple(parts)

    def bw(g):
        for i, p in enumerate(parts):
            if p.requires_grad:
                p._accum(np.take(g, i, axis=axis))

    return Tensor._from_op(np.stack([p.data for p in parts], axis=axis), parts, bw)


def embedding(table, ids):
    """Rows of a [vocab, dim] table; adjoint scatter-adds into the table."""
    ids = np.asarray(ids, dtype=np.int64)

    def bw(g):
        buf = np.zeros(table.shape, dtype=table.data.dtype)
        np.add.at(buf, ids, g)
        table._accum(buf)

    return Tensor._from_op(table.data[ids].copy(), (table,), bw)


# -- filtering -----------------------------------------------------------------

def circ_filter(a, taps, dilation=1, axis=-1, adjoint=False):
    """Differentiable periodic correlation along one axis.

    The adjoint of the forward pass is the same filter run in the
    opposite direction, so backward reuses the kernel.
    """
    taps = np.asarray(taps, dtype=np.float64)

    def bw(g):
        a._accum(
            kernels.filter_periodic(g, taps, dilation=dilation, axis=axis, adjoint=not adjoint)
        )

    out = kernels.filter_periodic(a.data, taps, dilation=dilation, axis=axis, adjoint=adjoint)
    return Tensor._from_op(out, (a,), bw)


def dyadic_down(a, axis):
    """Keep even-indexed samples along an axis."""
    axis = axis % a.ndim
    idx = tuple(slice(None) if i != axis else slice(0, None, 2) for i in range(a.ndim))

    def bw(g):
        buf = np.zeros(a.shape, dtype=a.data.dtype)
        buf[idx] = g
        a._accum(buf)

    return Tensor._from_op(a.data[idx].copy(), (a,), bw)


def dyadic_up(a, axis):
    """Insert zeros after every sample along an axis (length doubles)."""
    axis = axis % a.ndim
    shape = list(a.shape)
    shape[axis] *= 2
    idx = tuple(slice(None) if i != axis else slice(0, None, 2) for i in range(a.ndim))

    def bw(g):
        a._accum(g[idx])

    buf = np.zeros(shape, dtype=a.data.dtype)
    buf[idx] = a.data
    return Tensor._from_op(buf, (a,), bw)


# -- softmax ------------------------------------------------------------------

def softmax_rows(x):
    """Row-stable softmax along the last axis.

    The per-row max is subtracted as a constant; softmax is invariant
    to per-row shifts, so values and gradients are both exact.
    """
    m = Tensor(np.max(x.data, axis=-1, keepdims=True))
    e = exp(sub(x, m))
    return div(e, tsum(e, axis=-1, keepdims=True))


# -- gradient verification ------------------------------------------------------

@dataclass
class FDReport:
    max_rel_err: float
    passed: bool
    n_checked: int


def finite_difference_check(f, x, h=1e-5, rel_tol=1e-4):
    """Compare backward() gradients against central differences.

    f maps a Tensor to a scalar Tensor and must be deterministic
    (verified by evaluating it twice). Relative error per element is
    |a - b| / max(1, |a|, |b|).
    """
    with no_grad():
        y1 = f(Tensor(x.data.copy()))
        y2 = f(Tensor(x.data.copy()))
    if not np.array_equal(y1.data, y2.data):
        raise NonDeterministicFunction("two forward passes disagreed")

    leaf = Tensor(x.data.copy(), requires_grad=True)
    out = f(leaf)
    out.backward()
    auto = leaf.grad if leaf.grad is not None else np.zeros_like(leaf.data)

    base = x.data.copy()
    num = np.zeros_like(base)
    flat = base.reshape(-1)
    nflat = num.reshape(-1)
    with no_grad():
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            up = f(Tensor(base.copy())).item()
            flat[i] = orig - h
            down = f(Tensor(base.copy())).item()
            flat[i] = orig
            nflat[i] = (up - down) / (2.0 * h)

    denom = np.maximum(1.0, np.maximum(np.abs(auto), np.abs(num)))
    err = float(np.max(np.abs(auto - num) / denom)) if auto.size else 0.0
    return FDReport(max_rel_err=err, passed=err < rel_tol, n_checked=int(auto.size))
