"""Dense tensors with reverse-mode automatic differentiation.

A :class:`Tensor` wraps a numpy array. Operations on tensors that require
gradients record a backward closure and their parents; :func:`backward`
walks that graph in reverse topological order. Gradients accumulate into
leaf ``.grad`` buffers until :meth:`Tensor.zero_grad` is called, which is
what makes gradient accumulation over micro-batches work.

Only the operations the model needs are provided. Row-wise kernels
(softmax, layer norm, GELU) dispatch to :mod:`nanotfm._backend`.
"""
from __future__ import annotations

import contextlib
import os

import numpy as np

from . import _backend


class DimensionError(ValueError):
    """Operand shapes are incompatible."""


class ContractError(RuntimeError):
    """An operation was used outside its contract (e.g. non-scalar backward)."""


_DTYPES = {"float32": np.float32, "float64": np.float64}
_state = {"dtype": np.float32, "grad": True, "deterministic": False}
_thread_limiter = None


def get_default_dtype():
    return _state["dtype"]


def set_default_dtype(dtype):
    if isinstance(dtype, str):
        if dtype not in _DTYPES:
            raise ValueError(f"unknown precision {dtype!r}; choose from {sorted(_DTYPES)}")
        dtype = _DTYPES[dtype]
    dtype = np.dtype(dtype).type
    if dtype not in (np.float32, np.float64):
        raise ValueError(f"unsupported dtype {dtype}")
    _state["dtype"] = dtype


@contextlib.contextmanager
def precision(dtype):
    """Temporarily switch the default floating dtype ("float32"/"float64")."""
    old = _state["dtype"]
    set_default_dtype(dtype)
    try:
        yield
    finally:
        _state["dtype"] = old


@contextlib.contextmanager
def no_grad():
    old = _state["grad"]
    _state["grad"] = False
    try:
        yield
    finally:
        _state["grad"] = old


def is_grad_enabled():
    return _state["grad"]


def limit_threads(n):
    """Cap BLAS threads for the whole process (``None`` lifts the cap)."""
    global _thread_limiter
    from threadpoolctl import threadpool_limits

    if _thread_limiter is not None:
        _thread_limiter.restore_original_limits()
        _thread_limiter = None
    if n is not None:
        _thread_limiter = threadpool_limits(limits=int(n))


def set_deterministic(flag=True):
    """Force single-threaded BLAS so every reduction runs in a fixed order.

    The compiled and numpy kernels are already serial; BLAS is the only
    component whose summation order can depend on thread scheduling.
    """
    _state["deterministic"] = bool(flag)
    if flag:
        limit_threads(1)
    else:
        env = os.environ.get("NANOTFM_THREADS")
        limit_threads(int(env) if env else None)


def is_deterministic():
    return _state["deterministic"]


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward")

    def __init__(self, data, requires_grad=False, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data)
        if dtype is not None or not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(dtype or _state["dtype"])
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = np.zeros_like(arr) if requires_grad else None
        self._parents = ()
        self._backward = None

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

    @property
    def is_leaf(self):
        return self._backward is None

    def numpy(self):
        return self.data

    def item(self):
        return self.data.item()

    def zero_grad(self):
        if self.requires_grad:
            self.grad = np.zeros_like(self.data)

    def detach(self):
        return Tensor(self.data)

    def backward(self):
        backward(self)

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    def __len__(self):
        return len(self.data)

    # operators
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis, keepdims)

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


class Parameter(Tensor):
    """A named leaf tensor that always requires gradients."""

    __slots__ = ("name",)

    def __init__(self, data, name, dtype=None):
        super().__init__(data, requires_grad=True, dtype=dtype)
        self.name = name

    def __repr__(self):
        return f"Parameter({self.name!r}, shape={self.shape}, dtype={self.dtype})"


def as_tensor(x):
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=_state["dtype"]) if np.isscalar(x) else x)


def _make(data, parents, backward_fn):
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    if _state["grad"] and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward_fn
    else:
        out.requires_grad = False
        out._parents = ()
        out._backward = None
    return out


def _unbroadcast(g, shape):
    if g.shape == tuple(shape):
        return g
    lead = g.ndim - len(shape)
    if lead:
        g = g.sum(axis=tuple(range(lead)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


# --- graph traversal ---------------------------------------------------------

def _toposort(root):
    order = []
    seen = set()
    stack = [(root, False)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(root):
    """Accumulate d(root)/d(leaf) into every reachable leaf's ``grad``.

    ``root`` must hold a single element. Intermediate gradients live only for
    the duration of the call, so calling twice on the same graph adds the
    gradient into the leaves twice.
    """
    if root.data.size != 1:
        raise ContractError(f"backward needs a scalar root, got shape {root.shape}")
    if not root.requires_grad:
        raise ContractError("backward root does not depend on any tensor requiring grad")
    order = _toposort(root)
    seed = np.ones_like(root.data)
    grads = {id(root): seed}
    if not root.is_leaf:
        root.grad = seed.copy()
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            if node.grad is None:
                node.grad = np.zeros_like(node.data)
            node.grad += g
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            prev = grads.get(key)
            grads[key] = pg if prev is None else prev + pg


# --- elementwise ---------------------------------------------------------------

def add(a, b):
    a, b = as_tensor(a), as_tensor(b)

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _make(a.data + b.data, (a, b), bw)


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _make(a.data - b.data, (a, b), bw)


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)

    def bw(g):
        ga = _unbroadcast(g * b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(g * a.data, b.shape) if b.requires_grad else None
        return ga, gb

    return _make(a.data * b.data, (a, b), bw)


def div(a, b):
    a, b = as_tensor(a), as_tensor(b)
    out = a.data / b.data

    def bw(g):
        ga = _unbroadcast(g / b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(-g * out / b.data, b.shape) if b.requires_grad else None
        return ga, gb

    return _make(out, (a, b), bw)


def exp(x):
    out = np.exp(x.data)
    return _make(out, (x,), lambda g: (g * out,))


def log(x):
    return _make(np.log(x.data), (x,), lambda g: (g / x.data,))


def sqrt(x):
    out = np.sqrt(x.data)
    return _make(out, (x,), lambda g: (g * 0.5 / out,))


def maximum(x, floor):
    """Elementwise ``max(x, floor)`` against a constant; gradient flows where x wins."""
    out = np.maximum(x.data, floor)
    return _make(out, (x,), lambda g: (g * (x.data >= floor),))


def clip(x, lo, hi):
    out = np.clip(x.data, lo, hi)
    return _make(out, (x,), lambda g: (g * ((x.data >= lo) & (x.data <= hi)),))


def relu(x):
    out = np.maximum(x.data, 0)
    return _make(out, (x,), lambda g: (g * (x.data > 0),))


def _rows(a):
    return np.ascontiguousarray(a.reshape(-1, a.shape[-1]))


def gelu(x):
    """GELU, tanh approximation: 0.5 x (1 + tanh(sqrt(2/pi) (x + 0.044715 x^3)))."""
    if x.size == 0:
        return _make(x.data.copy(), (x,), lambda g: (g,))
    x2 = _rows(x.data)
    out = _backend.K.gelu_fwd(x2).reshape(x.shape)

    def bw(g):
        return (_backend.K.gelu_bwd(x2, _rows(g)).reshape(x.shape),)

    return _make(out, (x,), bw)


def softmax(x, axis=-1):
    """Softmax along ``axis`` with max subtraction."""
    axis = axis % x.ndim if x.ndim else 0
    if x.ndim == 0 or axis >= x.ndim:
        raise DimensionError(f"softmax axis {axis} out of range for shape {x.shape}")
    if x.size == 0:
        return _make(x.data.copy(), (x,), lambda g: (g,))
    if not np.isfinite(x.data.sum()):
        raise FloatingPointError("softmax received non-finite input")
    moved = axis != x.ndim - 1
    xd = np.moveaxis(x.data, axis, -1) if moved else x.data
    inner_shape = xd.shape
    y2 = _backend.K.softmax_fwd(_rows(xd))
    out = y2.reshape(inner_shape)
    if moved:
        out = np.moveaxis(out, -1, axis)

    def bw(g):
        gd = np.moveaxis(g, axis, -1) if moved else g
        gx = _backend.K.softmax_bwd(y2, _rows(gd)).reshape(inner_shape)
        return (np.moveaxis(gx, -1, axis) if moved else gx,)

    return _make(out, (x,), bw)


def layer_norm(x, gain, bias, eps=1e-5):
    """Normalize over the last axis, then scale by ``gain`` and shift by ``bias``."""
    d = x.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise DimensionError(
            f"layer_norm gain/bias must have shape ({d},), got {gain.shape} and {bias.shape}"
        )
    if x.size == 0:
        return _make(x.data.copy(), (x, gain, bias), lambda g: (g, None, None))
    y2, xhat, rstd = _backend.K.layer_norm_fwd(
        _rows(x.data), np.ascontiguousarray(gain.data), np.ascontiguousarray(bias.data), float(eps)
    )

    def bw(g):
        gx, dgain, dbias = _backend.K.layer_norm_bwd(_rows(g), xhat, rstd, np.ascontiguousarray(gain.data))
        return gx.reshape(x.shape), dgain, dbias

    return _make(y2.reshape(x.shape), (x, gain, bias), bw)


# --- linear algebra -----------------------------------------------------------

def matmul(a, b):
    """Batched matrix product over the trailing two axes; leading axes broadcast."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    try:
        np.broadcast_shapes(a.shape[:-2], b.shape[:-2])
    except ValueError:
        raise DimensionError(
            f"matmul: batch dims of {a.shape} and {b.shape} do not broadcast"
        ) from None
    out = np.matmul(a.data, b.data)

    def bw(g):
        ga = gb = None
        if a.requires_grad:
            ga = _unbroadcast(np.matmul(g, np.swapaxes(b.data, -1, -2)), a.shape)
        if b.requires_grad:
            gb = _unbroadcast(np.matmul(np.swapaxes(a.data, -1, -2), g), b.shape)
        return ga, gb

    return _make(out, (a, b), bw)


def linear(x, weight, bias=None):
    """``x @ weight + bias`` over the last axis of ``x``.

    Leading axes are flattened into one GEMM rather than broadcast, which is
    much faster than numpy's stacked matmul for many small matrices.
    """
    if x.shape[-1] != weight.shape[0]:
        raise DimensionError(f"linear: input {x.shape} incompatible with weight {weight.shape}")
    lead = x.shape[:-1]
    x2 = x.data.reshape(-1, x.shape[-1])
    out = x2 @ weight.data
    if bias is not None:
        out += bias.data
    out = out.reshape(lead + (weight.shape[1],))
    parents = (x, weight) if bias is None else (x, weight, bias)

    def bw(g):
        g2 = g.reshape(-1, weight.shape[1])
        gx = (g2 @ weight.data.T).reshape(x.shape) if x.requires_grad else None
        gw = x2.T @ g2 if weight.requires_grad else None
        if bias is None:
            return gx, gw
        return gx, gw, g2.sum(axis=0)

    return _make(out, parents, bw)


# --- reductions and shape ops ---------------------------------------------------

def sum_(x, axis=None, keepdims=False):
    out = x.data.sum(axis=axis, keepdims=keepdims)

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)

    return _make(np.asarray(out), (x,), bw)


def mean(x, axis=None, keepdims=False):
    n = x.size if axis is None else int(np.prod([x.shape[a] for a in np.atleast_1d(axis)]))
    return mul(sum_(x, axis, keepdims), 1.0 / max(n, 1))


def reshape(x, shape):
    return _make(x.data.reshape(shape), (x,), lambda g: (g.reshape(x.shape),))


def transpose(x, axes=None):
    axes = tuple(reversed(range(x.ndim))) if axes is None else tuple(axes)
    inverse = tuple(np.argsort(axes))
    return _make(x.data.transpose(axes), (x,), lambda g: (g.transpose(inverse),))


def concat(tensors, axis=0):
    tensors = [as_tensor(t) for t in tensors]
    out = np.concatenate([t.data for t in tensors], axis=axis)
    bounds = np.cumsum([0] + [t.shape[axis] for t in tensors])

    def bw(g):
        idx = [slice(None)] * g.ndim
        parts = []
        for lo, hi in zip(bounds[:-1], bounds[1:]):
            idx[axis] = slice(lo, hi)
            parts.append(g[tuple(idx)])
        return tuple(parts)

    return _make(out, tuple(tensors), bw)


def _is_basic(index):
    items = index if isinstance(index, tuple) else (index,)
    return all(isinstance(i, (int, slice, type(None), type(Ellipsis))) for i in items)


def getitem(x, index):
    out = x.data[index]
    basic = _is_basic(index)

    def bw(g):
        full = np.zeros_like(x.data)
        if basic:
            full[index] += g
        else:
            np.add.at(full, index, g)
        return (full,)

    return _make(np.array(out, copy=not basic) if basic else out, (x,), bw)


# --- loss -----------------------------------------------------------------------

def cross_entropy(logits, labels):
    """Mean negative log-likelihood of integer ``labels`` under softmax(``logits``).

    ``logits`` is ``N x K`` (leading axes are flattened); ``labels`` has the
    matching leading shape.
    """
    k = logits.shape[-1]
    z = logits.data.reshape(-1, k)
    lab = np.asarray(labels).reshape(-1).astype(np.int64)
    if lab.shape[0] != z.shape[0]:
        raise DimensionError(f"cross_entropy: {z.shape[0]} logit rows but {lab.shape[0]} labels")
    if z.shape[0] == 0:
        raise ContractError("cross_entropy over zero rows is undefined")
    if lab.min() < 0 or lab.max() >= k:
        raise IndexError(f"cross_entropy: label {int(lab.max() if lab.max() >= k else lab.min())} outside [0, {k})")
    m = z.max(axis=1, keepdims=True)
    shifted = z - m
    lse = np.log(np.exp(shifted).sum(axis=1))
    rows = np.arange(z.shape[0])
    nll = lse - shifted[rows, lab]
    n = z.shape[0]
    out = np.asarray(nll.mean(), dtype=z.dtype)

    def bw(g):
        p = np.exp(shifted - lse[:, None])
        p[rows, lab] -= 1.0
        return ((p * (g / n)).astype(z.dtype, copy=False).reshape(logits.shape),)

    return _make(out, (logits,), bw)

