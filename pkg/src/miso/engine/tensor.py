"""Dense float64 tensors with a recorded tape and reverse-mode gradients.

Every differentiable operation appends a record to the active :class:`Tape`
when at least one input requires a gradient.  :func:`backward` walks the
tape in reverse and dispatches through :data:`BACKWARD_RULES`, a plain
name -> function registry (so a single rule can be inspected or swapped).
"""

from __future__ import annotations

import threading
from contextlib import contextmanager
from typing import Callable, Iterable, Sequence

import numpy as np


class EngineError(Exception):
    """Base class for tensor engine failures."""


class ShapeError(EngineError, ValueError):
    pass


class DomainError(EngineError, ValueError):
    """Input outside an op's domain (log/sqrt of non-positive, division by zero)."""


class NonFiniteError(EngineError, FloatingPointError):
    """A forward result contained NaN or Inf."""


class GradientError(EngineError, RuntimeError):
    pass


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "node", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.array(data, dtype=np.float64)
        if not np.all(np.isfinite(arr)):
            raise NonFiniteError(f"non-finite values in tensor {name or ''}".strip())
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.node: tuple[Tape, int] | None = None
        self.name = name

    @classmethod
    def _wrap(cls, arr: np.ndarray) -> "Tensor":
        t = cls.__new__(cls)
        t.data = arr
        t.requires_grad = False
        t.grad = None
        t.node = None
        t.name = None
        return t

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def is_leaf(self) -> bool:
        return self.node is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor._wrap(self.data)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor({self.data!r}{flag})"

    # operator sugar
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

    def __getitem__(self, index):
        return take(self, index)

    @property
    def T(self) -> "Tensor":
        return transpose(self)


class _Record:
    __slots__ = ("op", "inputs", "saved", "out")

    def __init__(self, op: str, inputs: tuple[Tensor, ...], saved: dict, out: Tensor):
        self.op = op
        self.inputs = inputs
        self.saved = saved
        self.out = out


class Tape:
    """Ordered log of differentiable operations for one training context.

    Use as a context manager to make it the active tape of the current thread.
    """

    def __init__(self):
        self.records: list[_Record] = []
        self.leaves: dict[int, Tensor] = {}

    def record(self, op: str, inputs: tuple[Tensor, ...], saved: dict, out: Tensor) -> None:
        for t in inputs:
            if t.requires_grad and t.node is None:
                self.leaves.setdefault(id(t), t)
        out.requires_grad = True
        out.node = (self, len(self.records))
        self.records.append(_Record(op, inputs, saved, out))

    def clear(self) -> None:
        for rec in self.records:
            rec.out.node = None
        self.records.clear()
        self.leaves.clear()

    def __len__(self) -> int:
        return len(self.records)

    def __enter__(self) -> "Tape":
        _state.stack.append(self)
        return self

    def __exit__(self, *exc) -> None:
        popped = _state.stack.pop()
        assert popped is self


class _ThreadState(threading.local):
    def __init__(self):
        self.stack: list[Tape] = [Tape()]
        self.grad_enabled = True


_state = _ThreadState()


def active_tape() -> Tape:
    return _state.stack[-1]


@contextmanager
def no_grad():
    """Run ops without recording them; results are constants."""
    prev = _state.grad_enabled
    _state.grad_enabled = False
    try:
        yield
    finally:
        _state.grad_enabled = prev


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _check_finite(op: str, arr: np.ndarray) -> None:
    if not np.isfinite(arr).all():
        raise NonFiniteError(f"{op}: non-finite forward result")


def _apply(op: str, data: np.ndarray, inputs: tuple[Tensor, ...], **saved) -> Tensor:
    _check_finite(op, data)
    out = Tensor._wrap(data)
    if _state.grad_enabled and any(t.requires_grad for t in inputs):
        active_tape().record(op, inputs, saved, out)
    return out


# ---------------------------------------------------------------------------
# broadcasting

def _broadcast_shape(a: tuple[int, ...], b: tuple[int, ...]) -> tuple[int, ...]:
    if a == b:
        return a
    if len(a) >= len(b) and a[len(a) - len(b):] == b:
        return a
    if len(b) > len(a) and b[len(b) - len(a):] == a:
        return b
    raise ShapeError(f"shapes {a} and {b} are not trailing-aligned")


def unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``g`` over the leading axes that were broadcast to reach its shape."""
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    return g


def _binary(op: str, x, y, fn) -> Tensor:
    x, y = as_tensor(x), as_tensor(y)
    _broadcast_shape(x.shape, y.shape)
    return _apply(op, fn(x.data, y.data), (x, y))


# ---------------------------------------------------------------------------
# elementwise ops

def add(x, y) -> Tensor:
    return _binary("add", x, y, np.add)


def sub(x, y) -> Tensor:
    return _binary("sub", x, y, np.subtract)


def mul(x, y) -> Tensor:
    return _binary("mul", x, y, np.multiply)


def div(x, y) -> Tensor:
    x, y = as_tensor(x), as_tensor(y)
    _broadcast_shape(x.shape, y.shape)
    if np.any(y.data == 0.0):
        raise DomainError("div: division by zero")
    return _apply("div", x.data / y.data, (x, y))


def neg(x) -> Tensor:
    x = as_tensor(x)
    return _apply("neg", -x.data, (x,))


def exp(x) -> Tensor:
    x = as_tensor(x)
    with np.errstate(over="ignore"):
        out = np.exp(x.data)
    return _apply("exp", out, (x,), out=out)


def log(x) -> Tensor:
    x = as_tensor(x)
    if np.any(x.data <= 0.0):
        raise DomainError("log: non-positive input")
    return _apply("log", np.log(x.data), (x,))


def square(x) -> Tensor:
    x = as_tensor(x)
    return _apply("square", x.data * x.data, (x,))


def sqrt(x) -> Tensor:
    x = as_tensor(x)
    if np.any(x.data <= 0.0):
        raise DomainError("sqrt: non-positive input")
    out = np.sqrt(x.data)
    return _apply("sqrt", out, (x,), out=out)


def tanh(x) -> Tensor:
    x = as_tensor(x)
    out = np.tanh(x.data)
    return _apply("tanh", out, (x,), out=out)


def atanh(x) -> Tensor:
    x = as_tensor(x)
    if np.any(np.abs(x.data) >= 1.0):
        raise DomainError("atanh: input outside (-1, 1)")
    return _apply("atanh", np.arctanh(x.data), (x,))


def sigmoid(x) -> Tensor:
    x = as_tensor(x)
    d = x.data
    # split by sign to avoid overflow in exp
    e = np.exp(-np.abs(d))
    out = np.where(d >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
    return _apply("sigmoid", out, (x,), out=out)


def leaky_relu(x, alpha: float = 0.2) -> Tensor:
    x = as_tensor(x)
    d = x.data
    return _apply("leaky_relu", np.where(d > 0, d, alpha * d), (x,), alpha=alpha)


def abs(x) -> Tensor:  # noqa: A001 - mirrors the op name
    x = as_tensor(x)
    return _apply("abs", np.abs(x.data), (x,))


def clamp(x, lo: float, hi: float) -> Tensor:
    """Clip to [lo, hi]; the gradient is zero where the input was clipped."""
    x = as_tensor(x)
    return _apply("clamp", np.clip(x.data, lo, hi), (x,), lo=lo, hi=hi)


# ---------------------------------------------------------------------------
# structural ops

def matmul(x, y) -> Tensor:
    x, y = as_tensor(x), as_tensor(y)
    if x.data.ndim != 2 or y.data.ndim != 2 or x.shape[1] != y.shape[0]:
        raise ShapeError(f"matmul: incompatible shapes {x.shape} and {y.shape}")
    return _apply("matmul", x.data @ y.data, (x, y))


def _norm_axes(ndim: int, axes) -> tuple[int, ...]:
    if axes is None:
        return tuple(range(ndim))
    if isinstance(axes, int):
        axes = (axes,)
    out = []
    for a in axes:
        if not -ndim <= a < ndim:
            raise ShapeError(f"invalid axis {a} for {ndim}-d tensor")
        out.append(a % ndim)
    if len(set(out)) != len(out):
        raise ShapeError(f"repeated axis in {axes}")
    return tuple(sorted(out))


def reduce(op_kind: str, x, axes=None) -> Tensor:
    """Sum or mean over ``axes`` (all axes when None; identity for ``()``)."""
    x = as_tensor(x)
    if op_kind not in ("sum", "mean"):
        raise ValueError(f"unknown reduction {op_kind!r}")
    ax = _norm_axes(x.data.ndim, axes)
    if not ax:
        return x
    data = x.data.sum(axis=ax)
    count = int(np.prod([x.shape[a] for a in ax]))
    if op_kind == "mean":
        data = data / count
    return _apply(op_kind, np.asarray(data, dtype=np.float64), (x,), axes=ax, count=count)


def sum(x, axes=None) -> Tensor:  # noqa: A001
    return reduce("sum", x, axes)


def mean(x, axes=None) -> Tensor:
    return reduce("mean", x, axes)


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    ts = tuple(as_tensor(t) for t in tensors)
    data = np.concatenate([t.data for t in ts], axis=axis)
    ax = axis % data.ndim
    bounds = np.cumsum([t.shape[ax] for t in ts])[:-1]
    return _apply("concat", data, ts, axis=ax, bounds=bounds)


def take(x, index) -> Tensor:
    """Basic (slice/int) indexing."""
    x = as_tensor(x)
    return _apply("take", np.array(x.data[index]), (x,), index=index)


def reshape(x, shape) -> Tensor:
    x = as_tensor(x)
    return _apply("reshape", x.data.reshape(shape), (x,))


def transpose(x) -> Tensor:
    x = as_tensor(x)
    if x.data.ndim != 2:
        raise ShapeError("transpose expects a 2-d tensor")
    return _apply("transpose", x.data.T.copy(), (x,))


def stop_gradient(x) -> Tensor:
    return as_tensor(x).detach()


# ---------------------------------------------------------------------------
# backward rules: fn(g, record) -> tuple of input gradients (None = no grad)

def _bw_add(g, r):
    return g, g


def _bw_sub(g, r):
    return g, -g


def _bw_mul(g, r):
    x, y = r.inputs
    return g * y.data, g * x.data


def _bw_div(g, r):
    x, y = r.inputs
    return g / y.data, -g * x.data / (y.data * y.data)


def _bw_neg(g, r):
    return (-g,)


def _bw_exp(g, r):
    return (g * r.saved["out"],)


def _bw_log(g, r):
    return (g / r.inputs[0].data,)


def _bw_square(g, r):
    return (2.0 * g * r.inputs[0].data,)


def _bw_sqrt(g, r):
    return (g * 0.5 / r.saved["out"],)


def _bw_tanh(g, r):
    o = r.saved["out"]
    return (g * (1.0 - o * o),)


def _bw_atanh(g, r):
    d = r.inputs[0].data
    return (g / (1.0 - d * d),)


def _bw_sigmoid(g, r):
    o = r.saved["out"]
    return (g * o * (1.0 - o),)


def _bw_leaky_relu(g, r):
    d = r.inputs[0].data
    return (np.where(d > 0, g, r.saved["alpha"] * g),)


def _bw_abs(g, r):
    return (g * np.sign(r.inputs[0].data),)


def _bw_clamp(g, r):
    d = r.inputs[0].data
    inside = (d >= r.saved["lo"]) & (d <= r.saved["hi"])
    return (np.where(inside, g, 0.0),)


def _bw_matmul(g, r):
    x, y = r.inputs
    return g @ y.data.T, x.data.T @ g


def _bw_sum(g, r):
    x = r.inputs[0]
    return (np.broadcast_to(np.expand_dims(g, r.saved["axes"]), x.shape).copy(),)


def _bw_mean(g, r):
    x = r.inputs[0]
    g = np.expand_dims(g, r.saved["axes"]) / r.saved["count"]
    return (np.broadcast_to(g, x.shape).copy(),)


def _bw_concat(g, r):
    return tuple(np.split(g, r.saved["bounds"], axis=r.saved["axis"]))


def _bw_take(g, r):
    x = r.inputs[0]
    out = np.zeros_like(x.data)
    out[r.saved["index"]] = g
    return (out,)


def _bw_reshape(g, r):
    return (g.reshape(r.inputs[0].shape),)


def _bw_transpose(g, r):
    return (g.T,)


BACKWARD_RULES: dict[str, Callable] = {
    "add": _bw_add,
    "sub": _bw_sub,
    "mul": _bw_mul,
    "div": _bw_div,
    "neg": _bw_neg,
    "exp": _bw_exp,
    "log": _bw_log,
    "square": _bw_square,
    "sqrt": _bw_sqrt,
    "tanh": _bw_tanh,
    "atanh": _bw_atanh,
    "sigmoid": _bw_sigmoid,
    "leaky_relu": _bw_leaky_relu,
    "abs": _bw_abs,
    "clamp": _bw_clamp,
    "matmul": _bw_matmul,
    "sum": _bw_sum,
    "mean": _bw_mean,
    "concat": _bw_concat,
    "take": _bw_take,
    "reshape": _bw_reshape,
    "transpose": _bw_transpose,
}


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into ``leaf.grad`` for every recorded leaf.

    Leaves seen by the tape but not reachable from ``loss`` get zero gradients.
    """
    if loss.size != 1:
        raise GradientError(f"backward needs a scalar loss, got shape {loss.shape}")
    tape = active_tape()
    if loss.node is None or loss.node[0] is not tape:
        raise GradientError("loss is not recorded on the active tape")

    for leaf in tape.leaves.values():
        if leaf.grad is None:
            leaf.grad = np.zeros_like(leaf.data)

    pending: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for rec in reversed(tape.records[: loss.node[1] + 1]):
        g = pending.pop(id(rec.out), None)
        if g is None:
            continue
        in_grads = BACKWARD_RULES[rec.op](g, rec)
        for t, gi in zip(rec.inputs, in_grads):
            if gi is None or not t.requires_grad:
                continue
            gi = unbroadcast(gi, t.shape)
            if t.node is None:
                t.grad = gi.copy() if t.grad is None else t.grad + gi
            else:
                key = id(t)
                prev = pending.get(key)
                pending[key] = gi if prev is None else prev + gi


def zero_grad(params: Iterable[Tensor]) -> None:
    for p in params:
        p.grad = None
