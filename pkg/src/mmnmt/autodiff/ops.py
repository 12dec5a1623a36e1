"""Differentiable tensor operations.

Every op takes Tensors (python scalars and ndarrays are wrapped as constants
of the other operand's dtype), computes its value with numpy and records a
backward closure on the active tape.
"""
from __future__ import annotations

from typing import Optional, Sequence

import numpy as np
from scipy.special import expit

from .core import Parameter, ShapeError, Tensor, record


def as_tensor(x, like: Optional[Tensor] = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(np.asarray(x, dtype=dtype) if dtype is not None else x, dtype=dtype)


def constant(x, dtype=None) -> Tensor:
    return Tensor(x, dtype=dtype)


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    if g.shape == tuple(shape):
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _binary(op, fn, a, b):
    try:
        return fn(a.data, b.data)
    except ValueError:
        raise ShapeError(op, a.shape, b.shape) from None


def _pair(a, b):
    if not isinstance(a, Tensor):
        a = as_tensor(a, like=b)
    if not isinstance(b, Tensor):
        b = as_tensor(b, like=a)
    return a, b


# ---------------------------------------------------------------- elementwise

def add(a, b) -> Tensor:
    a, b = _pair(a, b)
    out = Tensor(_binary("add", np.add, a, b))
    sa, sb = a.shape, b.shape
    return record("add", out, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a, b = _pair(a, b)
    out = Tensor(_binary("sub", np.subtract, a, b))
    sa, sb = a.shape, b.shape
    return record("sub", out, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def mul(a, b) -> Tensor:
    a, b = _pair(a, b)
    ad, bd = a.data, b.data
    out = Tensor(_binary("mul", np.multiply, a, b))
    return record(
        "mul", out, (a, b),
        lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)),
    )


def div(a, b) -> Tensor:
    a, b = _pair(a, b)
    ad, bd = a.data, b.data
    out = Tensor(_binary("div", np.divide, a, b))
    return record(
        "div", out, (a, b),
        lambda g: (_unbroadcast(g / bd, ad.shape), _unbroadcast(-g * ad / (bd * bd), bd.shape)),
    )


def neg(a: Tensor) -> Tensor:
    out = Tensor(-a.data)
    return record("neg", out, (a,), lambda g: (-g,))


def tanh(a: Tensor) -> Tensor:
    y = np.tanh(a.data)
    return record("tanh", Tensor(y), (a,), lambda g: (g * (1.0 - y * y),))


def sigmoid(a: Tensor) -> Tensor:
    y = expit(a.data)
    return record("sigmoid", Tensor(y), (a,), lambda g: (g * y * (1.0 - y),))


def exp(a: Tensor) -> Tensor:
    y = np.exp(a.data)
    return record("exp", Tensor(y), (a,), lambda g: (g * y,))


def log(a: Tensor) -> Tensor:
    x = a.data
    return record("log", Tensor(np.log(x)), (a,), lambda g: (g / x,))


def square(a: Tensor) -> Tensor:
    x = a.data
    return record("square", Tensor(x * x), (a,), lambda g: (2.0 * g * x,))


def scale(a: Tensor, c: float) -> Tensor:
    """Multiply by a python scalar (broadcast constant)."""
    c = a.dtype.type(c)
    return record("scale", Tensor(a.data * c), (a,), lambda g: (g * c,))


def stop_gradient(a: Tensor) -> Tensor:
    return Tensor(a.data.copy())


# ------------------------------------------------------------------ products

def matmul(a, b) -> Tensor:
    """``a @ b`` with numpy broadcasting over leading dims.

    1-d right operands are treated as column vectors (the result drops that axis).
    """
    a, b = _pair(a, b)
    ad, bd = a.data, b.data
    if ad.ndim == 0 or bd.ndim == 0:
        raise ShapeError("matmul", a.shape, b.shape)
    k_b = bd.shape[0] if bd.ndim == 1 else bd.shape[-2]
    if ad.shape[-1] != k_b:
        raise ShapeError("matmul", a.shape, b.shape)
    out = Tensor(np.matmul(ad, bd))

    def backward(g):
        if bd.ndim == 1:
            ga = g[..., None] * bd
            gb = np.tensordot(g, ad, axes=(tuple(range(g.ndim)), tuple(range(g.ndim)))) \
                if ad.ndim > 1 else g * ad
            return _unbroadcast(ga, ad.shape), gb.reshape(bd.shape)
        if ad.ndim == 1:
            ga = np.matmul(bd, g[..., None])[..., 0] if g.ndim >= 1 else None
            gb = ad[:, None] * g[..., None, :]
            return _unbroadcast(ga, ad.shape), _unbroadcast(gb, bd.shape)
        ga = np.matmul(g, np.swapaxes(bd, -1, -2))
        if ad.ndim == 2 and g.ndim == 2:
            gb = ad.T @ g
        else:
            gb = np.matmul(np.swapaxes(ad, -1, -2), g)
        return _unbroadcast(ga, ad.shape), _unbroadcast(gb, bd.shape)

    return record("matmul", out, (a, b), backward)


def linear(x: Tensor, w: Tensor, b: Optional[Tensor] = None) -> Tensor:
    """``x @ w (+ b)`` over the last axis of x."""
    y = matmul(x, w)
    return y if b is None else add(y, b)


# --------------------------------------------------------------- reductions

def sum(a: Tensor, axis=None, keepdims=False) -> Tensor:  # noqa: A001
    x = a.data
    out = Tensor(np.asarray(x.sum(axis=axis, keepdims=keepdims)))

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)

    return record("sum", out, (a,), backward)


def mean(a: Tensor, axis=None) -> Tensor:
    n = a.data.size if axis is None else a.data.shape[axis]
    return scale(sum(a, axis=axis), 1.0 / n)


# ----------------------------------------------------------- normalizations

def _masked(x, mask):
    if mask is None:
        return x
    return np.where(mask, x, -np.inf)


def softmax(a: Tensor, axis: int = -1, mask: Optional[np.ndarray] = None) -> Tensor:
    """Numerically stable softmax; positions where ``mask`` is False get weight 0."""
    x = _masked(a.data, mask)
    m = np.max(x, axis=axis, keepdims=True)
    e = np.exp(x - m)
    y = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return record("softmax", Tensor(y), (a,), backward)


def log_softmax(a: Tensor, axis: int = -1, mask: Optional[np.ndarray] = None) -> Tensor:
    """Log-softmax via log-sum-exp; masked positions hold -inf."""
    x = _masked(a.data, mask)
    m = np.max(x, axis=axis, keepdims=True)
    shifted = x - m
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    y = shifted - lse
    p = np.exp(y)

    def backward(g):
        g = np.where(np.isfinite(y), g, 0.0).astype(y.dtype)
        return (g - p * g.sum(axis=axis, keepdims=True),)

    return record("log_softmax", Tensor(y), (a,), backward)


def l2_normalize(a: Tensor, axis: int = -1, eps: float = 1e-12) -> Tensor:
    x = a.data
    n = np.sqrt((x * x).sum(axis=axis, keepdims=True) + eps)
    y = x / n

    def backward(g):
        return ((g - y * (g * y).sum(axis=axis, keepdims=True)) / n,)

    return record("l2_normalize", Tensor(y), (a,), backward)


# ------------------------------------------------------------ shape & index

def reshape(a: Tensor, shape) -> Tensor:
    src = a.shape
    try:
        y = a.data.reshape(shape)
    except ValueError:
        raise ShapeError("reshape", src, shape) from None
    return record("reshape", Tensor(y), (a,), lambda g: (g.reshape(src),))


def expand_dims(a: Tensor, axis: int) -> Tensor:
    return reshape(a, np.expand_dims(a.data, axis).shape)


def swapaxes(a: Tensor, ax1: int, ax2: int) -> Tensor:
    y = np.swapaxes(a.data, ax1, ax2)
    return record("swapaxes", Tensor(y), (a,), lambda g: (np.swapaxes(g, ax1, ax2),))


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    try:
        y = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError:
        raise ShapeError("concat", *[t.shape for t in tensors]) from None
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def backward(g):
        return tuple(np.split(g, bounds, axis=axis))

    return record("concat", Tensor(y), tensors, backward)


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    return concat([expand_dims(t, axis) for t in tensors], axis=axis)


def getitem(a: Tensor, index) -> Tensor:
    """Basic slicing / window extraction."""
    shape = a.shape
    y = a.data[index]

    def backward(g):
        full = np.zeros(shape, dtype=g.dtype)
        np.add.at(full, index, g) if _is_advanced(index) else full.__setitem__(index, g)
        return (full,)

    return record("getitem", Tensor(np.array(y)), (a,), backward)


def _is_advanced(index) -> bool:
    items = index if isinstance(index, tuple) else (index,)
    return any(isinstance(i, (list, np.ndarray)) for i in items)


def embedding(table: Tensor, indices: np.ndarray) -> Tensor:
    """Row lookup ``table[indices]``; indices may have any shape."""
    indices = np.asarray(indices)
    vocab = table.shape[0]
    if indices.size and (indices.min() < 0 or indices.max() >= vocab):
        raise IndexError(f"embedding: index out of range for table of {vocab} rows")
    y = table.data[indices]
    dim = table.shape[1:]

    def backward(g):
        full = np.zeros(table.shape, dtype=g.dtype)
        np.add.at(full, indices.reshape(-1), g.reshape((-1,) + dim))
        return (full,)

    return record("embedding", Tensor(y), (table,), backward)


def take_along(a: Tensor, indices: np.ndarray, axis: int = -1) -> Tensor:
    """Gather one entry per slice: ``take_along_axis(a, indices[..., None], axis)`` squeezed."""
    idx = np.expand_dims(np.asarray(indices), axis)
    y = np.take_along_axis(a.data, idx, axis=axis)
    y = np.squeeze(y, axis=axis)
    shape = a.shape

    def backward(g):
        full = np.zeros(shape, dtype=g.dtype)
        np.put_along_axis(full, idx, np.expand_dims(g, axis), axis=axis)
        return (full,)

    return record("take_along", Tensor(y), (a,), backward)


def select_rows(a: Tensor, indices: np.ndarray) -> Tensor:
    """For a (B, L, D) tensor pick row ``indices[b]`` of each batch entry -> (B, D)."""
    idx = np.asarray(indices)
    b = np.arange(a.shape[0])
    y = a.data[b, idx]
    shape = a.shape

    def backward(g):
        full = np.zeros(shape, dtype=g.dtype)
        full[b, idx] = g
        return (full,)

    return record("select_rows", Tensor(y), (a,), backward)


def where_const(mask: np.ndarray, a: Tensor, fill: float) -> Tensor:
    """``a`` where mask else constant ``fill``; gradient only flows through ``a``."""
    y = np.where(mask, a.data, a.dtype.type(fill))
    return record("where_const", Tensor(y), (a,), lambda g: (np.where(mask, g, 0).astype(g.dtype),))


Tensor.__add__ = Tensor.__radd__ = add
Tensor.__sub__ = sub
Tensor.__rsub__ = lambda self, other: sub(other, self)
Tensor.__mul__ = Tensor.__rmul__ = mul
Tensor.__truediv__ = div
Tensor.__neg__ = neg
Tensor.__matmul__ = matmul
Tensor.__getitem__ = getitem

__all__ = [
    "Parameter", "Tensor", "add", "as_tensor", "concat", "constant", "div", "embedding",
    "exp", "expand_dims", "getitem", "l2_normalize", "linear", "log", "log_softmax",
    "matmul", "mean", "mul", "neg", "reshape", "scale", "select_rows", "sigmoid",
    "softmax", "square", "stack", "stop_gradient", "sub", "sum", "swapaxes", "take_along",
    "tanh", "where_const",
]
