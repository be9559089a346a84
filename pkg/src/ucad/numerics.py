"""Dense float64 tensors with a small reverse-mode differentiation tape.

Only the primitives needed to push gradients from a contrastive loss back
through a frozen transformer into additive prompt vectors are provided:
broadcasting add/sub/mul, matmul, sum/mean, reshape/transpose/concat/slicing,
softmax, layer norm, GELU, tanh and pairwise cosine similarity.

Usage::

    grads = grad(lambda p: (p * p).sum(), [np.array([1.0, -2.0])])
"""

from __future__ import annotations

import threading

import numpy as np

__all__ = [
    "Tensor",
    "GradTape",
    "NonFiniteError",
    "UnsupportedOperationError",
    "as_tensor",
    "grad",
    "value_and_grad",
    "finite_diff_grad",
    "matmul",
    "softmax",
    "layer_norm",
    "gelu",
    "tanh",
    "cosine_matrix",
    "concat",
]

COSINE_EPS = 1e-8
_GELU_C = np.sqrt(2.0 / np.pi)


class NonFiniteError(ArithmeticError):
    """Raised when an operation produces NaN or Inf."""

    def __init__(self, op):
        super().__init__(f"non-finite value produced by op '{op}'")
        self.op = op


class UnsupportedOperationError(TypeError):
    """Raised when a Tensor is handed to an operation the tape cannot differentiate."""


_state = threading.local()


def _active_tape():
    stack = getattr(_state, "stack", None)
    return stack[-1] if stack else None


class GradTape:
    """Records differentiable ops executed inside a ``with`` block.

    Only ops with at least one tracked input are recorded. ``backward`` walks
    the record in reverse, visiting each op once.
    """

    def __init__(self):
        self.ops = []
        self.visited = 0

    def __enter__(self):
        if not hasattr(_state, "stack"):
            _state.stack = []
        _state.stack.append(self)
        return self

    def __exit__(self, *exc):
        _state.stack.pop()
        return False

    def record(self, out):
        self.ops.append(out)

    def gradient(self, target, sources):
        """Return d(target)/d(source) for each source, as float64 arrays."""
        grads = {}
        if isinstance(target, Tensor) and target.requires_grad:
            if target.data.size != 1:
                raise ValueError("gradient target must be a scalar")
            grads[id(target)] = np.ones_like(target.data)
            self.visited = 0
            for node in reversed(self.ops):
                self.visited += 1
                g = grads.pop(id(node), None)
                if g is None:
                    continue
                for parent, pg in zip(node._parents, node._backward(g)):
                    if pg is None or not parent.requires_grad:
                        continue
                    if not np.all(np.isfinite(pg)):
                        raise NonFiniteError(f"{node._op} (backward)")
                    key = id(parent)
                    if key in grads:
                        grads[key] = grads[key] + pg
                    else:
                        grads[key] = pg
        return [
            np.array(grads.get(id(s), np.zeros_like(s.data)), dtype=np.float64)
            for s in sources
        ]


def _unbroadcast(g, shape):
    # sum out axes that were broadcast to reach g.shape
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


class Tensor:
    """Immutable float64 array node.

    Arithmetic on Tensors is recorded on the active :class:`GradTape` when
    any input is tracked.
    """

    __slots__ = ("data", "requires_grad", "_parents", "_backward", "_op", "__weakref__")

    def __init__(self, data, requires_grad=False):
        arr = np.array(data, dtype=np.float64)
        if not np.all(np.isfinite(arr)):
            raise NonFiniteError("tensor")
        arr.flags.writeable = False
        self.data = arr
        self.requires_grad = requires_grad
        self._parents = ()
        self._backward = None
        self._op = "leaf"

    @classmethod
    def _make(cls, data, parents, backward, op):
        data = np.asarray(data, dtype=np.float64)
        if not np.all(np.isfinite(data)):
            raise NonFiniteError(op)
        out = cls.__new__(cls)
        data.flags.writeable = False
        out.data = data
        out._op = op
        tape = _active_tape()
        if tape is not None and any(p.requires_grad for p in parents):
            out.requires_grad = True
            out._parents = parents
            out._backward = backward
            tape.record(out)
        else:
            out.requires_grad = False
            out._parents = ()
            out._backward = None
        return out

    # numpy interop: only the arithmetic we can differentiate is allowed through
    def __array_ufunc__(self, ufunc, method, *inputs, **kwargs):
        if method == "__call__" and not kwargs:
            a, b = (inputs + (None,))[:2]
            if ufunc is np.add:
                return add(a, b)
            if ufunc is np.subtract:
                return sub(a, b)
            if ufunc is np.multiply:
                return mul(a, b)
            if ufunc is np.matmul:
                return matmul(a, b)
        raise UnsupportedOperationError(f"unsupported primitive on Tensor: {ufunc.__name__}.{method}")

    def __array_function__(self, func, types, args, kwargs):
        raise UnsupportedOperationError(f"unsupported primitive on Tensor: {func.__name__}")

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    def numpy(self):
        return self.data

    def item(self):
        return float(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, op={self._op!r}, requires_grad={self.requires_grad})"

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

    def __neg__(self):
        return mul(self, -1.0)

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise UnsupportedOperationError("division by a Tensor is not supported")
        return mul(self, 1.0 / np.asarray(other, dtype=np.float64))

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __getitem__(self, idx):
        data = self.data[idx]
        shape = self.data.shape

        def backward(g):
            out = np.zeros(shape)
            out[idx] = g
            return (out,)

        return Tensor._make(data, (self,), backward, "getitem")

    def sum(self, axis=None, keepdims=False):
        shape = self.data.shape
        data = self.data.sum(axis=axis, keepdims=keepdims)

        def backward(g):
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            return (np.broadcast_to(g, shape).copy(),)

        return Tensor._make(data, (self,), backward, "sum")

    def mean(self, axis=None, keepdims=False):
        n = self.data.size if axis is None else np.prod([self.data.shape[a] for a in np.atleast_1d(axis)])
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / n)

    def reshape(self, *shape):
        old = self.data.shape
        data = self.data.reshape(*shape)
        return Tensor._make(data, (self,), lambda g: (g.reshape(old),), "reshape")

    def transpose(self, *axes):
        axes = axes[0] if len(axes) == 1 and isinstance(axes[0], (tuple, list)) else axes
        axes = tuple(axes) if axes else tuple(reversed(range(self.ndim)))
        inv = tuple(np.argsort(axes))
        data = self.data.transpose(axes)
        return Tensor._make(data, (self,), lambda g: (g.transpose(inv),), "transpose")

    def swapaxes(self, a, b):
        axes = list(range(self.ndim))
        axes[a], axes[b] = axes[b], axes[a]
        return self.transpose(axes)


def as_tensor(x):
    if isinstance(x, Tensor):
        return x
    if isinstance(x, (np.ndarray, float, int, np.floating, np.integer, list, tuple)):
        return Tensor(x)
    raise UnsupportedOperationError(f"cannot use {type(x).__name__} as a Tensor operand")


def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape
    return Tensor._make(
        a.data + b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)), "add"
    )


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape
    return Tensor._make(
        a.data - b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)), "sub"
    )


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data

    def backward(g):
        return _unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)

    return Tensor._make(ad * bd, (a, b), backward, "mul")


def matmul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data
    if ad.ndim < 2 or bd.ndim < 2:
        raise UnsupportedOperationError("matmul requires operands with ndim >= 2")

    def backward(g):
        ga = g @ np.swapaxes(bd, -1, -2)
        gb = np.swapaxes(ad, -1, -2) @ g
        return _unbroadcast(ga, ad.shape), _unbroadcast(gb, bd.shape)

    return Tensor._make(ad @ bd, (a, b), backward, "matmul")


def concat(tensors, axis=0):
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]
    data = np.concatenate([t.data for t in tensors], axis=axis)
    return Tensor._make(
        data, tuple(tensors), lambda g: tuple(np.split(g, splits, axis=axis)), "concat"
    )


def softmax(x, axis=-1):
    x = as_tensor(x)
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return Tensor._make(y, (x,), backward, "softmax")


def layer_norm(x, eps=1e-5):
    """Normalize over the last axis (no affine parameters)."""
    x = as_tensor(x)
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    y = xc * inv

    def backward(g):
        gm = g.mean(axis=-1, keepdims=True)
        gy = (g * y).mean(axis=-1, keepdims=True)
        return (inv * (g - gm - y * gy),)

    return Tensor._make(y, (x,), backward, "layer_norm")


def gelu(x):
    """GELU, tanh approximation."""
    x = as_tensor(x)
    xd = x.data
    u = _GELU_C * (xd + 0.044715 * xd**3)
    t = np.tanh(u)
    y = 0.5 * xd * (1.0 + t)

    def backward(g):
        du = _GELU_C * (1.0 + 3 * 0.044715 * xd**2)
        return (g * (0.5 * (1.0 + t) + 0.5 * xd * (1.0 - t * t) * du),)

    return Tensor._make(y, (x,), backward, "gelu")


def tanh(x):
    x = as_tensor(x)
    y = np.tanh(x.data)
    return Tensor._make(y, (x,), lambda g: (g * (1.0 - y * y),), "tanh")


def cosine_matrix(a, b=None, eps=COSINE_EPS):
    """Pairwise cosine similarity between rows: ``(..., n, c) x (..., m, c) -> (..., n, m)``.

    ``eps`` is added to each norm, so a zero row has similarity 0 with everything.
    """
    a = as_tensor(a)
    same = b is None
    b = a if same else as_tensor(b)

    def unit(v):
        r = np.sqrt((v * v).sum(axis=-1, keepdims=True))
        return v / (r + eps), r

    ah, ra = unit(a.data)
    bh, rb = (ah, ra) if same else unit(b.data)
    s = ah @ np.swapaxes(bh, -1, -2)

    def unit_back(v, r, gh):
        # d(v / (|v| + eps)) applied to gh; the radial term vanishes at v = 0
        rs = np.where(r > 0, r, 1.0)
        proj = (gh * v).sum(axis=-1, keepdims=True)
        return gh / (r + eps) - v * proj / (rs * (r + eps) ** 2)

    def backward(g):
        gah = g @ bh
        gbh = np.swapaxes(g, -1, -2) @ ah
        if same:
            return (unit_back(a.data, ra, gah + gbh),)
        return unit_back(a.data, ra, gah), unit_back(b.data, rb, gbh)

    parents = (a,) if same else (a, b)
    return Tensor._make(s, parents, backward, "cosine")


def value_and_grad(loss_fn, params):
    """Evaluate ``loss_fn(*params)`` and its gradient w.r.t. every parameter."""
    leaves = [Tensor(p, requires_grad=True) for p in params]
    with GradTape() as tape:
        loss = loss_fn(*leaves)
    if isinstance(loss, Tensor):
        if loss.data.size != 1:
            raise ValueError("loss_fn must return a scalar")
        value = float(loss.data.reshape(()))
    else:
        value = float(loss)
    return value, tape.gradient(loss, leaves)


def grad(loss_fn, params):
    """Reverse-mode gradient of a scalar function; returns arrays shaped like ``params``."""
    return value_and_grad(loss_fn, params)[1]


def finite_diff_grad(loss_fn, params, h=1e-5):
    """Central-difference gradient, one coordinate at a time."""
    if h <= 0:
        raise ValueError("h must be positive")
    params = [np.array(p, dtype=np.float64) for p in params]

    def evaluate(ps):
        out = loss_fn(*[Tensor(p) for p in ps])
        return float(out.data.reshape(())) if isinstance(out, Tensor) else float(out)

    grads = []
    for i, p in enumerate(params):
        g = np.zeros_like(p)
        for idx in np.ndindex(p.shape):
            plus = [q.copy() for q in params]
            minus = [q.copy() for q in params]
            plus[i][idx] += h
            minus[i][idx] -= h
            g[idx] = (evaluate(plus) - evaluate(minus)) / (2 * h)
        grads.append(g)
    return grads
