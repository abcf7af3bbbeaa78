"""Reverse-mode differentiation over numpy arrays.

A ``Tape`` is a Wengert list: every primitive appends one record
``(op, input node ids, output node id, vjp)`` in execution order, and
``Tape.backward`` walks the records in exact reverse order, pushing output
cotangents through each record's vector-Jacobian product.

Tensors belong to exactly one tape. Plain ndarrays and Python numbers mixed
into an expression are treated as constants. Parameters enter a tape through
``Tape.param``; their gradients are added into the owning ``ParamStore``.

Every primitive checks its output for NaN/Inf and raises ``NonFiniteError``
naming the op.
"""

from __future__ import annotations

from collections.abc import Callable, Sequence
from dataclasses import dataclass
from typing import TYPE_CHECKING, Any, Union

import numpy as np

from bondedit.errors import NonFiniteError, ShapeError, TapeError

if TYPE_CHECKING:
    from bondedit.params import ParamStore

Operand = Union["Tensor", np.ndarray, float, int]
Vjp = Callable[[np.ndarray], Sequence[np.ndarray | None]]


@dataclass(frozen=True, slots=True)
class _Record:
    op: str
    inputs: tuple[int | None, ...]
    output: int
    vjp: Vjp


class Tensor:
    """A value on a tape. ``node`` is ``None`` for untracked constants."""

    __slots__ = ("node", "tape", "value")

    def __init__(self, value: np.ndarray, tape: Tape, node: int | None) -> None:
        self.value = value
        self.tape = tape
        self.node = node

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, node={self.node})"

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    @property
    def ndim(self) -> int:
        return self.value.ndim

    def __len__(self) -> int:
        return len(self.value)

    def item(self) -> float:
        if self.value.size != 1:
            msg = f"item() needs a single value, got shape {self.shape}"
            raise ShapeError(msg)
        return float(self.value.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        return self.value.copy()

    # operators -------------------------------------------------------------

    def __add__(self, other: Operand) -> Tensor:
        return add(self, other)

    def __radd__(self, other: Operand) -> Tensor:
        return add(other, self)

    def __sub__(self, other: Operand) -> Tensor:
        return sub(self, other)

    def __rsub__(self, other: Operand) -> Tensor:
        return sub(other, self)

    def __mul__(self, other: Operand) -> Tensor:
        return mul(self, other)

    def __rmul__(self, other: Operand) -> Tensor:
        return mul(other, self)

    def __neg__(self) -> Tensor:
        return scale(self, -1.0)

    def __matmul__(self, other: Operand) -> Tensor:
        return matmul(self, other)

    def __rmatmul__(self, other: Operand) -> Tensor:
        return matmul(other, self)

    def __getitem__(self, index: Any) -> Tensor:
        return slice_(self, index)

    def sum(self, axis: int | None = None) -> Tensor:
        return sum_(self, axis)

    def mean(self, axis: int | None = None) -> Tensor:
        return mean(self, axis)

    def reshape(self, *shape: int) -> Tensor:
        return reshape(self, shape)


class Tape:
    """Records primitives for one forward pass.

    With ``record=False`` values are computed but nothing is recorded; such a
    tape is for inference and refuses ``backward``.
    """

    def __init__(self, dtype: np.dtype | type | str = np.float64, record: bool = True) -> None:
        self.dtype = np.dtype(dtype)
        self.record = record
        self.records: list[_Record] = []
        self._next_node = 0
        self._leaves: dict[int, str | None] = {}
        self._params: dict[str, Tensor] = {}
        self._store: ParamStore | None = None

    def __len__(self) -> int:
        return len(self.records)

    def _new_node(self) -> int:
        node = self._next_node
        self._next_node += 1
        return node

    # leaves ----------------------------------------------------------------

    def constant(self, value: Any) -> Tensor:
        return Tensor(np.asarray(value, dtype=self.dtype), self, None)

    def variable(self, value: Any) -> Tensor:
        """Tracked leaf that is not a parameter (its gradient is returned by ``backward``)."""
        node = self._new_node()
        self._leaves[node] = None
        return Tensor(np.array(value, dtype=self.dtype), self, node)

    def param(self, store: ParamStore, name: str) -> Tensor:
        """Bind parameter ``name``; repeated calls return the same leaf."""
        if self._store is None:
            self._store = store
        elif self._store is not store:
            msg = "a tape can only bind parameters from one ParamStore"
            raise TapeError(msg)
        bound = self._params.get(name)
        if bound is None:
            node = self._new_node()
            self._leaves[node] = name
            bound = Tensor(store.value(name), self, node)
            self._params[name] = bound
        return bound

    def lift(self, x: Operand) -> Tensor:
        if isinstance(x, Tensor):
            if x.tape is not self:
                msg = "tensor belongs to a different tape"
                raise TapeError(msg)
            return x
        return self.constant(x)

    # recording -------------------------------------------------------------

    def emit(self, op: str, inputs: Sequence[Tensor], value: np.ndarray, vjp: Vjp) -> Tensor:
        value = np.asarray(value, dtype=self.dtype)
        if not np.all(np.isfinite(value)):
            raise NonFiniteError(op)
        tracked = tuple(t.node for t in inputs)
        if not self.record or all(n is None for n in tracked):
            return Tensor(value, self, None)
        out = self._new_node()
        self.records.append(_Record(op, tracked, out, vjp))
        return Tensor(value, self, out)

    # backward --------------------------------------------------------------

    def backward(self, loss: Tensor, store: ParamStore | None = None) -> dict[int, np.ndarray]:
        """Accumulate d(loss)/d(param) into ``store``; return leaf gradients by node id."""
        if not self.record:
            msg = "backward on a tape created with record=False"
            raise TapeError(msg)
        if loss.tape is not self:
            msg = "loss belongs to a different tape"
            raise TapeError(msg)
        if loss.value.size != 1:
            msg = f"backward needs a scalar loss, got shape {loss.shape}"
            raise TapeError(msg)
        if store is not None and self._store is not None and store is not self._store:
            msg = "backward store differs from the store the parameters were bound from"
            raise TapeError(msg)

        cotangents: dict[int, np.ndarray] = {}
        if loss.node is not None:
            cotangents[loss.node] = np.ones_like(loss.value)
        for rec in reversed(self.records):
            g = cotangents.pop(rec.output, None)
            if g is None:
                continue
            for node, gi in zip(rec.inputs, rec.vjp(g), strict=True):
                if node is None or gi is None:
                    continue
                prev = cotangents.get(node)
                cotangents[node] = gi if prev is None else prev + gi

        leaf_grads = {node: g for node, g in cotangents.items() if node in self._leaves}
        target = store if store is not None else self._store
        if target is not None:
            for node, g in leaf_grads.items():
                name = self._leaves[node]
                if name is not None:
                    target.accumulate(name, g)
        return leaf_grads


# ---------------------------------------------------------------------------
# Helpers
# ---------------------------------------------------------------------------


def _tape_of(*xs: Operand) -> Tape:
    for x in xs:
        if isinstance(x, Tensor):
            return x.tape
    msg = "primitive called without any Tensor operand"
    raise TapeError(msg)


def _lift_all(*xs: Operand) -> tuple[Tape, list[Tensor]]:
    tape = _tape_of(*xs)
    return tape, [tape.lift(x) for x in xs]


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``g`` down to ``shape`` after numpy broadcasting."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def _shape_guard(op: str, fn: Callable[[], np.ndarray]) -> np.ndarray:
    try:
        return fn()
    except ValueError as exc:
        msg = f"{op}: {exc}"
        raise ShapeError(msg) from exc


# ---------------------------------------------------------------------------
# Linear algebra
# ---------------------------------------------------------------------------


def matmul(a: Operand, b: Operand) -> Tensor:
    """Matrix product of 1-D or 2-D operands."""
    tape, (ta, tb) = _lift_all(a, b)
    av, bv = ta.value, tb.value
    if av.ndim not in (1, 2) or bv.ndim not in (1, 2):
        msg = f"matmul supports 1-D and 2-D operands, got {av.shape} @ {bv.shape}"
        raise ShapeError(msg)
    out = _shape_guard("matmul", lambda: av @ bv)

    def vjp(g: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        a2 = av if av.ndim == 2 else av[None, :]
        b2 = bv if bv.ndim == 2 else bv[:, None]
        g2 = g.reshape(a2.shape[0], b2.shape[1])
        return (g2 @ b2.T).reshape(av.shape), (a2.T @ g2).reshape(bv.shape)

    return tape.emit("matmul", (ta, tb), out, vjp)


def add(a: Operand, b: Operand) -> Tensor:
    tape, (ta, tb) = _lift_all(a, b)
    out = _shape_guard("add", lambda: ta.value + tb.value)
    sa, sb = ta.shape, tb.shape
    return tape.emit("add", (ta, tb), out, lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a: Operand, b: Operand) -> Tensor:
    tape, (ta, tb) = _lift_all(a, b)
    out = _shape_guard("sub", lambda: ta.value - tb.value)
    sa, sb = ta.shape, tb.shape
    return tape.emit("sub", (ta, tb), out, lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def mul(a: Operand, b: Operand) -> Tensor:
    """Elementwise product with broadcasting."""
    tape, (ta, tb) = _lift_all(a, b)
    av, bv = ta.value, tb.value
    out = _shape_guard("mul", lambda: av * bv)
    return tape.emit(
        "mul",
        (ta, tb),
        out,
        lambda g: (_unbroadcast(g * bv, av.shape), _unbroadcast(g * av, bv.shape)),
    )


def scale(a: Tensor, c: float) -> Tensor:
    """Multiply by a Python scalar."""
    c = float(c)
    return a.tape.emit("scale", (a,), a.value * c, lambda g: (g * c,))


def concat(xs: Sequence[Operand], axis: int = -1) -> Tensor:
    tape, ts = _lift_all(*xs)
    out = _shape_guard("concat", lambda: np.concatenate([t.value for t in ts], axis=axis))
    bounds = np.cumsum([t.shape[axis] for t in ts])[:-1]

    def vjp(g: np.ndarray) -> list[np.ndarray]:
        return np.split(g, bounds, axis=axis)

    return tape.emit("concat", ts, out, vjp)


def stack(xs: Sequence[Operand]) -> Tensor:
    """Stack equal-shaped tensors along a new leading axis."""
    tape, ts = _lift_all(*xs)
    out = _shape_guard("stack", lambda: np.stack([t.value for t in ts]))
    return tape.emit("stack", ts, out, lambda g: list(g))


def slice_(a: Tensor, index: Any) -> Tensor:
    """Basic or integer-array indexing; repeated indices accumulate."""
    try:
        out = a.value[index]
    except IndexError as exc:
        msg = f"slice: {exc}"
        raise ShapeError(msg) from exc
    shape = a.shape

    def vjp(g: np.ndarray) -> tuple[np.ndarray]:
        full = np.zeros(shape, dtype=g.dtype)
        np.add.at(full, index, g)
        return (full,)

    return a.tape.emit("slice", (a,), np.array(out), vjp)


def take(table: Tensor, indices: Sequence[int] | np.ndarray) -> Tensor:
    """Row gather, used as embedding lookup."""
    idx = np.asarray(indices, dtype=np.intp)
    if idx.size and (idx.min() < 0 or idx.max() >= table.shape[0]):
        msg = f"take: index out of range for table with {table.shape[0]} rows"
        raise ShapeError(msg)
    shape = table.shape

    def vjp(g: np.ndarray) -> tuple[np.ndarray]:
        full = np.zeros(shape, dtype=g.dtype)
        np.add.at(full, idx, g)
        return (full,)

    return table.tape.emit("take", (table,), table.value[idx], vjp)


embedding_lookup = take


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    old = a.shape
    out = _shape_guard("reshape", lambda: a.value.reshape(tuple(shape)))
    return a.tape.emit("reshape", (a,), out, lambda g: (g.reshape(old),))


def transpose(a: Tensor) -> Tensor:
    return a.tape.emit("transpose", (a,), a.value.T, lambda g: (g.T,))


def sum_(a: Tensor, axis: int | None = None) -> Tensor:
    shape = a.shape

    def vjp(g: np.ndarray) -> tuple[np.ndarray]:
        if axis is None:
            return (np.broadcast_to(g, shape).copy(),)
        return (np.broadcast_to(np.expand_dims(g, axis), shape).copy(),)

    return a.tape.emit("sum", (a,), np.sum(a.value, axis=axis), vjp)


def mean(a: Tensor, axis: int | None = None) -> Tensor:
    shape = a.shape
    count = a.value.size if axis is None else shape[axis]
    if count == 0:
        msg = "mean over an empty axis"
        raise ShapeError(msg)

    def vjp(g: np.ndarray) -> tuple[np.ndarray]:
        if axis is None:
            return (np.broadcast_to(g / count, shape).copy(),)
        return (np.broadcast_to(np.expand_dims(g / count, axis), shape).copy(),)

    return a.tape.emit("mean", (a,), np.mean(a.value, axis=axis), vjp)


# ---------------------------------------------------------------------------
# Elementwise
# ---------------------------------------------------------------------------


def relu(a: Tensor) -> Tensor:
    mask = a.value > 0
    return a.tape.emit("relu", (a,), np.where(mask, a.value, 0.0), lambda g: (g * mask,))


def _sigmoid(x: np.ndarray) -> np.ndarray:
    # exp of a non-positive argument only
    e = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


def sigmoid(a: Tensor) -> Tensor:
    s = _sigmoid(a.value)
    return a.tape.emit("sigmoid", (a,), s, lambda g: (g * s * (1.0 - s),))


def tanh(a: Tensor) -> Tensor:
    t = np.tanh(a.value)
    return a.tape.emit("tanh", (a,), t, lambda g: (g * (1.0 - t * t),))


def exp(a: Tensor) -> Tensor:
    with np.errstate(over="ignore"):
        e = np.exp(a.value)
    return a.tape.emit("exp", (a,), e, lambda g: (g * e,))


def log(a: Tensor) -> Tensor:
    x = a.value
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.log(x)
    return a.tape.emit("log", (a,), out, lambda g: (g / x,))


def softplus(a: Tensor) -> Tensor:
    """log(1 + exp(x)), computed stably."""
    x = a.value
    return a.tape.emit("softplus", (a,), np.logaddexp(0.0, x), lambda g: (g * _sigmoid(x),))


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    x = a.value
    z = np.exp(x - np.max(x, axis=axis, keepdims=True))
    p = z / np.sum(z, axis=axis, keepdims=True)

    def vjp(g: np.ndarray) -> tuple[np.ndarray]:
        return (p * (g - np.sum(g * p, axis=axis, keepdims=True)),)

    return a.tape.emit("softmax", (a,), p, vjp)


def log_softmax(a: Tensor, axis: int = -1) -> Tensor:
    x = a.value
    shifted = x - np.max(x, axis=axis, keepdims=True)
    out = shifted - np.log(np.sum(np.exp(shifted), axis=axis, keepdims=True))
    p = np.exp(out)

    def vjp(g: np.ndarray) -> tuple[np.ndarray]:
        return (g - p * np.sum(g, axis=axis, keepdims=True),)

    return a.tape.emit("log_softmax", (a,), out, vjp)


def logsumexp(a: Tensor) -> Tensor:
    """Log of the sum of exponentials over all entries."""
    x = a.value
    m = np.max(x)
    s = np.sum(np.exp(x - m))
    p = np.exp(x - m) / s
    return a.tape.emit("logsumexp", (a,), np.asarray(m + np.log(s)), lambda g: (g * p,))


PRIMITIVES: dict[str, Callable[..., Tensor]] = {
    "matmul": matmul,
    "add": add,
    "sub": sub,
    "mul": mul,
    "scale": scale,
    "concat": concat,
    "stack": stack,
    "slice": slice_,
    "take": take,
    "reshape": reshape,
    "transpose": transpose,
    "sum": sum_,
    "mean": mean,
    "relu": relu,
    "sigmoid": sigmoid,
    "tanh": tanh,
    "exp": exp,
    "log": log,
    "softplus": softplus,
    "softmax": softmax,
    "log_softmax": log_softmax,
    "logsumexp": logsumexp,
}
