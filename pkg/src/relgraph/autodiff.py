"""Minimal reverse-mode automatic differentiation over dense float64 arrays.

Operations executed while a :class:`Tape` is active are appended to it in
execution order.  :func:`grad` walks the tape backwards, so every record is
visited exactly once and after all of its consumers.

    >>> x = Tensor(3.0, requires_grad=True)
    >>> with Tape() as tape:
    ...     y = x * x
    >>> grad(tape, y, [x])[0]
    array(6.)
"""
from __future__ import annotations

import threading
from typing import Callable, Iterable, Sequence

import numpy as np

_state = threading.local()


class Tensor:
    """An immutable array value, optionally tracked for differentiation."""

    __slots__ = ("value", "requires_grad", "name")
    __array_priority__ = 100

    def __init__(self, value, requires_grad: bool = False, name: str | None = None):
        self.value = np.asarray(value, dtype=np.float64)
        self.requires_grad = requires_grad
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    @property
    def ndim(self) -> int:
        return self.value.ndim

    def __len__(self) -> int:
        return len(self.value)

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{label})"

    def numpy(self) -> np.ndarray:
        return self.value.copy()

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

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    @property
    def T(self):
        return transpose(self)


class _Record:
    __slots__ = ("output", "inputs", "backward")

    def __init__(self, output: Tensor, inputs: tuple[Tensor, ...], backward: Callable):
        self.output = output
        self.inputs = inputs
        self.backward = backward


class Tape:
    """Ordered record of differentiable operations (one per thread)."""

    def __init__(self):
        self.records: list[_Record] = []
        self._previous = None

    def __enter__(self) -> "Tape":
        self._previous = getattr(_state, "tape", None)
        _state.tape = self
        return self

    def __exit__(self, *exc) -> None:
        _state.tape = self._previous
        self._previous = None

    def __len__(self) -> int:
        return len(self.records)


def active_tape() -> Tape | None:
    return getattr(_state, "tape", None)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def record(value: np.ndarray, inputs: Sequence[Tensor], backward: Callable) -> Tensor:
    """Wrap ``value`` as the output of a primitive with the given inputs.

    ``backward(g)`` maps the output adjoint to one adjoint (or None) per input.
    """
    tape = active_tape()
    tracked = tape is not None and any(t.requires_grad for t in inputs)
    out = Tensor(value, requires_grad=tracked)
    if tracked:
        tape.records.append(_Record(out, tuple(inputs), backward))
    # a single reduction is enough to catch nan/inf anywhere in the array
    if not np.isfinite(out.value.sum()):
        raise FloatingPointError("non-finite value produced")
    return out


_emit = record


def scatter_rows(count: int, rows: np.ndarray, values: np.ndarray) -> np.ndarray:
    """out[rows[i]] += values[i], accumulated sequentially in i order."""
    if values.ndim == 1:
        return np.bincount(rows, weights=values, minlength=count)
    width = int(np.prod(values.shape[1:]))
    flat = values.reshape(len(rows), width)
    keys = (rows[:, None] * width + np.arange(width)).ravel()
    out = np.bincount(keys, weights=flat.ravel(), minlength=count * width)
    return out.reshape((count,) + values.shape[1:])


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def grad(tape: Tape, output: Tensor, params: Iterable[Tensor]) -> list[np.ndarray]:
    """Gradients of scalar ``output`` with respect to each of ``params``.

    Parameters that do not influence ``output`` get an all-zero gradient.
    """
    params = list(params)
    if output.value.size != 1:
        raise ValueError(f"grad needs a scalar output, got shape {output.shape}")
    adjoint: dict[int, np.ndarray] = {id(output): np.ones_like(output.value)}
    for rec in reversed(tape.records):
        g = adjoint.pop(id(rec.output), None)
        if g is None:
            continue
        for t, gi in zip(rec.inputs, rec.backward(g)):
            if gi is None or not t.requires_grad:
                continue
            key = id(t)
            if key in adjoint:
                adjoint[key] = adjoint[key] + gi
            else:
                adjoint[key] = gi
    return [adjoint.get(id(p), np.zeros_like(p.value)).reshape(p.shape) for p in params]


# -- elementwise -------------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _emit(a.value + b.value, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _emit(a.value - b.value, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    av, bv = a.value, b.value
    return _emit(av * bv, (a, b),
                 lambda g: (_unbroadcast(g * bv, a.shape), _unbroadcast(g * av, b.shape)))


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    av, bv = a.value, b.value
    return _emit(av / bv, (a, b),
                 lambda g: (_unbroadcast(g / bv, a.shape),
                            _unbroadcast(-g * av / (bv * bv), b.shape)))


def neg(a) -> Tensor:
    a = as_tensor(a)
    return _emit(-a.value, (a,), lambda g: (-g,))


def power(a, exponent: float) -> Tensor:
    a = as_tensor(a)
    av = a.value
    return _emit(av ** exponent, (a,), lambda g: (g * exponent * av ** (exponent - 1),))


def exp(a) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.value)
    return _emit(out, (a,), lambda g: (g * out,))


def log(a) -> Tensor:
    a = as_tensor(a)
    av = a.value
    return _emit(np.log(av), (a,), lambda g: (g / av,))


def relu(a) -> Tensor:
    a = as_tensor(a)
    mask = a.value > 0
    return _emit(np.where(mask, a.value, 0.0), (a,), lambda g: (g * mask,))


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    out = _stable_sigmoid(a.value)
    return _emit(out, (a,), lambda g: (g * out * (1.0 - out),))


def tanh(a) -> Tensor:
    a = as_tensor(a)
    out = np.tanh(a.value)
    return _emit(out, (a,), lambda g: (g * (1.0 - out * out),))


def softplus(a) -> Tensor:
    a = as_tensor(a)
    av = a.value
    out = np.maximum(av, 0.0) + np.log1p(np.exp(-np.abs(av)))
    return _emit(out, (a,), lambda g: (g * _stable_sigmoid(av),))


def _stable_sigmoid(x: np.ndarray) -> np.ndarray:
    e = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


# -- reductions and shape ----------------------------------------------------


def sum(a, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    a = as_tensor(a)
    shape = a.shape

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _emit(a.value.sum(axis=axis, keepdims=keepdims), (a,), backward)


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    count = a.value.size if axis is None else a.shape[axis]
    return sum(a, axis=axis, keepdims=keepdims) * (1.0 / count)


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    av, bv = a.value, b.value
    if av.ndim != 2 or bv.ndim != 2:
        raise ValueError(f"matmul expects 2-D operands, got {av.shape} and {bv.shape}")
    return _emit(av @ bv, (a, b), lambda g: (g @ bv.T, av.T @ g))


def transpose(a) -> Tensor:
    a = as_tensor(a)
    return _emit(a.value.T, (a,), lambda g: (g.T,))


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    old = a.shape
    return _emit(a.value.reshape(shape), (a,), lambda g: (g.reshape(old),))


def concat(tensors: Sequence, axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    cuts = np.cumsum(sizes)[:-1]

    def backward(g):
        return tuple(np.split(g, cuts, axis=axis))

    return _emit(np.concatenate([t.value for t in tensors], axis=axis), tensors, backward)


def getitem(a, index) -> Tensor:
    a = as_tensor(a)
    shape = a.shape
    parts = index if isinstance(index, tuple) else (index,)
    basic = all(isinstance(i, (slice, int)) or i is None or i is Ellipsis for i in parts)

    rows = index if isinstance(index, np.ndarray) and index.dtype.kind == "i" else None

    def backward(g):
        if rows is not None and rows.ndim == 1:
            return (scatter_rows(shape[0], rows, g),)
        out = np.zeros(shape)
        if basic:
            out[index] = g
        else:
            np.add.at(out, index, g)
        return (out,)

    return _emit(a.value[index], (a,), backward)


def take(a, rows) -> Tensor:
    """Gather rows of ``a`` by integer index (duplicates allowed)."""
    rows = np.asarray(rows, dtype=np.int64)
    return getitem(a, rows)


def segment_sum(a, segments, count: int) -> Tensor:
    """Sum rows of ``a`` into ``count`` buckets; bucket ``segments[i]`` gets row i.

    Accumulation is sequential in row order, so results are reproducible.
    """
    a = as_tensor(a)
    segments = np.asarray(segments, dtype=np.int64)
    out = scatter_rows(count, segments, a.value)
    return _emit(out, (a,), lambda g: (g[segments],))


def segment_softmax(logits, segments, count: int) -> Tensor:
    """Softmax of a 1-D logit vector within each group of equal segment id."""
    logits = as_tensor(logits)
    segments = np.asarray(segments, dtype=np.int64)
    if logits.value.size == 0:
        return _emit(np.zeros(0), (logits,), lambda g: (np.zeros(0),))
    top = np.full(count, -np.inf)
    np.maximum.at(top, segments, logits.value)
    e = np.exp(logits.value - top[segments])
    total = scatter_rows(count, segments, e)
    out = e / total[segments]

    def backward(g):
        dot = scatter_rows(count, segments, g * out)
        return (out * (g - dot[segments]),)

    return _emit(out, (logits,), backward)


def softmax_rows(a) -> Tensor:
    a = as_tensor(a)
    z = a.value - a.value.max(axis=-1, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=-1, keepdims=True)

    def backward(g):
        return (out * (g - (g * out).sum(axis=-1, keepdims=True)),)

    return _emit(out, (a,), backward)


def softmax(logits, group=None) -> np.ndarray:
    """Stable softmax of a real vector over the index subset ``group``.

    Entries outside ``group`` get weight zero.  Plain numpy; see
    :func:`segment_softmax` for the differentiable grouped version.
    """
    logits = np.asarray(logits, dtype=np.float64)
    idx = np.arange(logits.size) if group is None else np.asarray(group, dtype=np.int64)
    if idx.size == 0:
        raise ValueError("empty normalization set")
    sel = logits[idx]
    e = np.exp(sel - sel.max())
    out = np.zeros_like(logits)
    out[idx] = e / e.sum()
    return out
