"""Tensors, the recording tape and reverse-mode backpropagation."""
from __future__ import annotations

import contextvars
from typing import Callable, Optional, Sequence

import numpy as np

DEFAULT_DTYPE = np.float32

_ACTIVE_TAPE: contextvars.ContextVar[Optional["Tape"]] = contextvars.ContextVar(
    "active_tape", default=None
)


class ShapeError(ValueError):
    """Raised when an op receives operands of incompatible shapes."""

    def __init__(self, op: str, *shapes):
        shown = " vs ".join(str(tuple(s)) for s in shapes)
        super().__init__(f"{op}: incompatible shapes {shown}")
        self.op = op
        self.shapes = shapes


class Tensor:
    """A dense n-d array that may be a node on the active tape."""

    __slots__ = ("data", "_tape", "_index")
    __array_ufunc__ = None

    def __init__(self, data, dtype=None):
        if dtype is None and type(data) is np.ndarray and data.dtype.kind == "f":
            self.data = data
            self._tape = None
            self._index = -1
            return
        if dtype is None:
            dtype = data.dtype if isinstance(data, (np.ndarray, np.generic)) and data.dtype.kind == "f" else DEFAULT_DTYPE
        self.data = np.asarray(data, dtype=dtype)
        self._tape: Optional[Tape] = None
        self._index = -1

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def requires_grad(self) -> bool:
        return self._tape is not None

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.dtype})"

    # operator overloads (+, -, *, /, @, unary -, []) are attached by the ops module


class Parameter(Tensor):
    """A named trainable leaf with a gradient buffer of the same shape."""

    __slots__ = ("name", "grad")

    def __init__(self, name: str, data, dtype=None):
        super().__init__(data, dtype=dtype)
        self.name = name
        self.grad = np.zeros_like(self.data)

    @property
    def value(self) -> np.ndarray:
        return self.data

    @property
    def requires_grad(self) -> bool:
        return True

    def zero_grad(self):
        self.grad = np.zeros_like(self.data)

    def astype(self, dtype):
        self.data = self.data.astype(dtype)
        self.grad = self.grad.astype(dtype)
        return self

    def __repr__(self):
        return f"Parameter({self.name!r}, shape={self.shape}, dtype={self.dtype})"


class _Record:
    __slots__ = ("op", "out", "parents", "backward")

    def __init__(self, op, out, parents, backward):
        self.op = op
        self.out = out
        self.parents = parents
        self.backward = backward


class Tape:
    """Ordered record of differentiable ops.

    Use as a context manager; ops executed inside the block are recorded when
    at least one input is a Parameter or an already recorded node. Records are
    appended in execution order, so parents always precede children.
    """

    def __init__(self):
        self.records: list[_Record] = []
        self._token = None

    def __enter__(self):
        if self._token is not None:
            raise RuntimeError("tape is already active")
        self._token = _ACTIVE_TAPE.set(self)
        return self

    def __exit__(self, *exc):
        _ACTIVE_TAPE.reset(self._token)
        self._token = None
        return False

    def __len__(self):
        return len(self.records)


def active_tape() -> Optional[Tape]:
    return _ACTIVE_TAPE.get()


class no_record:
    """Suspend recording inside a block (e.g. for decoding or finite differences)."""

    def __enter__(self):
        self._token = _ACTIVE_TAPE.set(None)
        return self

    def __exit__(self, *exc):
        _ACTIVE_TAPE.reset(self._token)
        return False


def record(op: str, out: Tensor, parents: Sequence[Tensor], backward: Callable) -> Tensor:
    """Attach ``out`` to the active tape if any parent needs a gradient.

    ``backward(g)`` must return one gradient (or None) per parent.
    """
    tape = _ACTIVE_TAPE.get()
    if tape is None:
        return out
    if not any(isinstance(p, Parameter) or p._tape is tape for p in parents):
        return out
    out._tape = tape
    out._index = len(tape.records)
    tape.records.append(_Record(op, out, tuple(parents), backward))
    return out


def backward(tape: Tape, root: Tensor, seed: Optional[np.ndarray] = None) -> None:
    """Accumulate d(root)/d(param) into ``param.grad`` for every reached Parameter."""
    if root.data.size != 1 and seed is None:
        raise ValueError(f"backward: root must be scalar, got shape {root.shape}")
    if root._tape is not tape:
        raise ValueError("backward: root is not a node of this tape")
    grads: dict[int, np.ndarray] = {
        root._index: np.ones_like(root.data) if seed is None else np.asarray(seed, root.dtype)
    }
    for i in range(root._index, -1, -1):
        g = grads.pop(i, None)
        if g is None:
            continue
        rec = tape.records[i]
        pgrads = rec.backward(g)
        for parent, pg in zip(rec.parents, pgrads):
            if pg is None:
                continue
            if isinstance(parent, Parameter):
                parent.grad += pg
            elif parent._tape is tape:
                j = parent._index
                if j in grads:
                    grads[j] = grads[j] + pg
                else:
                    grads[j] = pg
