"""Minimal reverse-mode differentiation over float64 numpy arrays.

Operations on :class:`Tensor` values are recorded on the innermost active
:class:`GradientTape` whenever at least one input is tracked by that tape.
:func:`backward` walks the recorded operations in exact reverse order and
accumulates vector-Jacobian products into the watched leaves.
"""

from __future__ import annotations

import threading
from typing import Callable, Iterable, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "GradientTape",
    "DimensionError",
    "ContractError",
    "NonFiniteError",
    "tensor",
    "backward",
    "matmul",
    "add",
    "sub",
    "mul",
    "div",
    "neg",
    "exp",
    "log",
    "tanh",
    "relu",
    "sqrt",
    "square",
    "clamp_min",
    "tsum",
    "tmean",
    "reshape",
    "log_softmax",
    "concat",
]


class DimensionError(ValueError):
    """Operand shapes are incompatible."""


class ContractError(ValueError):
    """A caller broke an operation's precondition."""


class NonFiniteError(FloatingPointError):
    """An operation produced NaN or Inf."""


class Tensor:
    """Immutable float64 array that can take part in a gradient tape."""

    __slots__ = ("data", "__weakref__")
    __array_priority__ = 100

    def __init__(self, data):
        arr = np.array(data, dtype=np.float64)
        arr.flags.writeable = False
        self.data = arr

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data.copy()

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, data={np.array2string(self.data, precision=4)})"

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

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self, axis=None, keepdims=False) -> "Tensor":
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False) -> "Tensor":
        return tmean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def __getitem__(self, idx) -> "Tensor":
        return _getitem(self, idx)


def tensor(data) -> Tensor:
    return data if isinstance(data, Tensor) else Tensor(data)


class _Op:
    __slots__ = ("out", "inputs", "vjp")

    def __init__(self, out: Tensor, inputs: tuple[Tensor, ...], vjp: Callable):
        self.out = out
        self.inputs = inputs
        self.vjp = vjp


_local = threading.local()


def _tape_stack() -> list["GradientTape"]:
    stack = getattr(_local, "stack", None)
    if stack is None:
        stack = _local.stack = []
    return stack


class GradientTape:
    """Records differentiable operations performed while it is active.

    Usage::

        with GradientTape() as tape:
            w = tape.watch(Tensor(w0))
            loss = tsum(square(w))
        grads = backward(tape, loss)   # {w: 2*w0}

    Tapes are thread-local; independent tapes may be used concurrently from
    different threads.
    """

    def __init__(self):
        self.ops: list[_Op] = []
        self.leaves: list[Tensor] = []
        self._tracked: set[int] = set()

    def watch(self, t) -> Tensor:
        t = tensor(t)
        if id(t) not in self._tracked:
            self._tracked.add(id(t))
            self.leaves.append(t)
        return t

    def is_tracked(self, t: Tensor) -> bool:
        return id(t) in self._tracked

    def _record(self, out: Tensor, inputs: tuple[Tensor, ...], vjp: Callable) -> None:
        self.ops.append(_Op(out, inputs, vjp))
        self._tracked.add(id(out))

    def __enter__(self) -> "GradientTape":
        _tape_stack().append(self)
        return self

    def __exit__(self, *exc) -> None:
        stack = _tape_stack()
        stack.remove(self)


def _active_tape() -> GradientTape | None:
    stack = _tape_stack()
    return stack[-1] if stack else None


def _wrap(value: np.ndarray) -> Tensor:
    value = np.asarray(value, dtype=np.float64)
    if not np.isfinite(value).all():
        raise NonFiniteError("operation produced a non-finite value")
    value.flags.writeable = False
    out = Tensor.__new__(Tensor)
    out.data = value
    return out


def _emit(value: np.ndarray, inputs: tuple[Tensor, ...], vjp: Callable) -> Tensor:
    out = _wrap(value)
    tape = _active_tape()
    if tape is not None and any(tape.is_tracked(t) for t in inputs):
        tape._record(out, inputs, vjp)
    return out


def backward(tape: GradientTape, scalar_output: Tensor) -> dict[Tensor, np.ndarray]:
    """Gradients of ``scalar_output`` with respect to every watched leaf.

    Leaves that do not influence the output get a zero array.
    """
    if scalar_output.size != 1:
        raise ContractError(
            f"backward needs a scalar output, got shape {scalar_output.shape}"
        )
    grads: dict[int, np.ndarray] = {id(scalar_output): np.ones_like(scalar_output.data)}
    for op in reversed(tape.ops):
        g = grads.pop(id(op.out), None)
        if g is None:
            continue
        in_grads = op.vjp(g)
        for t, gi in zip(op.inputs, in_grads):
            if gi is None or not tape.is_tracked(t):
                continue
            key = id(t)
            if key in grads:
                grads[key] = grads[key] + gi
            else:
                grads[key] = gi
    out = {}
    for leaf in tape.leaves:
        g = grads.get(id(leaf))
        out[leaf] = np.zeros_like(leaf.data) if g is None else np.asarray(g, dtype=np.float64)
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def _check_broadcast(a: Tensor, b: Tensor, name: str) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError as exc:
        raise DimensionError(f"{name}: cannot broadcast {a.shape} with {b.shape}") from exc


# -- elementwise binary -----------------------------------------------------

def add(a, b) -> Tensor:
    a, b = tensor(a), tensor(b)
    _check_broadcast(a, b, "add")
    return _emit(
        a.data + b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
    )


def sub(a, b) -> Tensor:
    a, b = tensor(a), tensor(b)
    _check_broadcast(a, b, "sub")
    return _emit(
        a.data - b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)),
    )


def mul(a, b) -> Tensor:
    a, b = tensor(a), tensor(b)
    _check_broadcast(a, b, "mul")
    return _emit(
        a.data * b.data,
        (a, b),
        lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
    )


def div(a, b) -> Tensor:
    a, b = tensor(a), tensor(b)
    _check_broadcast(a, b, "div")
    q = a.data / b.data
    return _emit(
        q,
        (a, b),
        lambda g: (
            _unbroadcast(g / b.data, a.shape),
            _unbroadcast(-g * q / b.data, b.shape),
        ),
    )


def matmul(a, b) -> Tensor:
    """Rank-2 matrix product."""
    a, b = tensor(a), tensor(b)
    if a.ndim != 2 or b.ndim != 2:
        raise DimensionError(f"matmul expects rank-2 operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul inner dimensions differ: {a.shape} x {b.shape}")
    return _emit(a.data @ b.data, (a, b), lambda g: (g @ b.data.T, a.data.T @ g))


# -- elementwise unary ------------------------------------------------------

def neg(a) -> Tensor:
    a = tensor(a)
    return _emit(-a.data, (a,), lambda g: (-g,))


def exp(a) -> Tensor:
    a = tensor(a)
    y = np.exp(a.data)
    return _emit(y, (a,), lambda g: (g * y,))


def log(a) -> Tensor:
    a = tensor(a)
    return _emit(np.log(a.data), (a,), lambda g: (g / a.data,))


def tanh(a) -> Tensor:
    a = tensor(a)
    y = np.tanh(a.data)
    return _emit(y, (a,), lambda g: (g * (1.0 - y * y),))


def relu(a) -> Tensor:
    a = tensor(a)
    pos = a.data > 0
    return _emit(np.where(pos, a.data, 0.0), (a,), lambda g: (g * pos,))


def sqrt(a) -> Tensor:
    a = tensor(a)
    y = np.sqrt(a.data)
    return _emit(y, (a,), lambda g: (g * 0.5 / y,))


def square(a) -> Tensor:
    a = tensor(a)
    return _emit(a.data * a.data, (a,), lambda g: (2.0 * g * a.data,))


def clamp_min(a, lo: float) -> Tensor:
    a = tensor(a)
    keep = a.data >= lo
    return _emit(np.where(keep, a.data, lo), (a,), lambda g: (g * keep,))


# -- reductions and shape ---------------------------------------------------

def _expand(g: np.ndarray, shape, axis, keepdims) -> np.ndarray:
    if axis is not None and not keepdims:
        g = np.expand_dims(g, axis)
    return np.broadcast_to(g, shape)


def tsum(a, axis=None, keepdims=False) -> Tensor:
    a = tensor(a)
    return _emit(
        a.data.sum(axis=axis, keepdims=keepdims),
        (a,),
        lambda g: (np.array(_expand(g, a.shape, axis, keepdims)),),
    )


def tmean(a, axis=None, keepdims=False) -> Tensor:
    a = tensor(a)
    n = a.size if axis is None else np.prod([a.shape[i] for i in np.atleast_1d(axis)])
    return _emit(
        a.data.mean(axis=axis, keepdims=keepdims),
        (a,),
        lambda g: (np.array(_expand(g, a.shape, axis, keepdims)) / n,),
    )


def reshape(a, shape) -> Tensor:
    a = tensor(a)
    return _emit(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),))


def _getitem(a: Tensor, idx) -> Tensor:
    def vjp(g):
        full = np.zeros_like(a.data)
        np.add.at(full, idx, g)
        return (full,)

    return _emit(a.data[idx], (a,), vjp)


def concat(parts: Sequence[Tensor], axis: int = -1) -> Tensor:
    parts = tuple(tensor(p) for p in parts)
    sizes = [p.shape[axis] for p in parts]
    splits = np.cumsum(sizes)[:-1]
    return _emit(
        np.concatenate([p.data for p in parts], axis=axis),
        parts,
        lambda g: tuple(np.split(g, splits, axis=axis)),
    )


def log_softmax(a, axis: int = -1) -> Tensor:
    a = tensor(a)
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    y = shifted - lse
    p = np.exp(y)
    return _emit(y, (a,), lambda g: (g - p * g.sum(axis=axis, keepdims=True),))


def parameters(arrays: Iterable[np.ndarray], tape: GradientTape) -> list[Tensor]:
    """Wrap raw arrays as watched leaves on ``tape``."""
    return [tape.watch(Tensor(a)) for a in arrays]
