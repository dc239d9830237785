"""
Dense tensors with tape-based reverse-mode automatic differentiation.

A :class:`Tape` records every differentiable op executed while it is the
active tape (``with Tape() as tape: ...``). Ops run outside any tape, or on
inputs none of which require a gradient, are not recorded, so inference
code needs no special ``no_grad`` switch.

Each recorded node keeps its inputs, its output and a backward closure. The
closure captures exactly the forward values its gradient formula needs;
every op documents what it saves. :func:`backward` walks the nodes once in
reverse insertion order, which is a valid reverse topological order because
a node can only consume tensors that already exist.

Broadcasting is deliberately restricted to tensor-vs-scalar. Layers expand
per-channel parameters themselves.
"""

from __future__ import annotations

import contextlib
import itertools
import threading
from dataclasses import dataclass
from typing import Callable, Iterator, Optional, Sequence, Union

import numpy as np

from .errors import (
    DetachedTensorError,
    DomainError,
    EmptyTensorError,
    NonFiniteGradientError,
    NotScalarError,
    ShapeMismatchError,
)

ArrayLike = Union[np.ndarray, float, int, Sequence]
BackwardFn = Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]

_uid_counter = itertools.count()
_local = threading.local()
_default_dtype = np.dtype(np.float32)


def get_default_dtype() -> np.dtype:
    return _default_dtype


def set_default_dtype(dtype) -> None:
    """Set the dtype used for new tensors built from Python data (float32 or float64)."""
    global _default_dtype
    dtype = np.dtype(dtype)
    if dtype not in (np.float32, np.float64):
        raise TypeError(f"unsupported dtype {dtype}; use float32 or float64")
    _default_dtype = dtype


@contextlib.contextmanager
def default_dtype(dtype) -> Iterator[None]:
    """Temporarily switch the default dtype, e.g. to float64 for gradient checks."""
    previous = _default_dtype
    set_default_dtype(dtype)
    try:
        yield
    finally:
        set_default_dtype(previous)


class Tensor:
    """N-dimensional float array with an optional gradient slot.

    Tensors are treated as values: no op mutates its inputs. The only
    in-place writers are the optimizer (parameter updates) and batch norm
    (running statistics), both of which replace ``.data`` wholesale.
    """

    __slots__ = ("data", "requires_grad", "grad", "node_id", "name", "uid", "_tape", "__weakref__")

    def __init__(self, data: ArrayLike, requires_grad: bool = False, dtype=None, name: Optional[str] = None):
        arr = np.asarray(data)
        if dtype is None:
            dtype = arr.dtype if arr.dtype in (np.float32, np.float64) else _default_dtype
        self.data: np.ndarray = np.asarray(arr, dtype=dtype, order="C")
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self.node_id: Optional[int] = None
        self.name = name
        self.uid = next(_uid_counter)
        self._tape: Optional[Tape] = None

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def dtype(self) -> np.dtype:
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise NotScalarError(f"item() needs a single element, got shape {self.shape}")
        return float(self.data.reshape(()))

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy(), dtype=self.dtype)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    # arithmetic sugar
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return add(neg(self), other)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __neg__(self):
        return neg(self)

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            return div(self, other)
        return scale(self, 1.0 / float(other))

    def sum(self):
        return reduce_sum(self)

    def mean(self):
        return reduce_mean(self)


@dataclass
class Node:
    op: str
    inputs: tuple
    output: Tensor
    backward: BackwardFn


class Tape:
    """Append-only record of the ops of one forward pass."""

    def __init__(self) -> None:
        self.nodes: list[Node] = []
        self.consumed = False

    def __enter__(self) -> "Tape":
        stack = _tape_stack()
        stack.append(self)
        return self

    def __exit__(self, *exc) -> None:
        stack = _tape_stack()
        if stack and stack[-1] is self:
            stack.pop()

    def __len__(self) -> int:
        return len(self.nodes)

    def record(self, op: str, inputs: tuple, output: Tensor, backward_fn: BackwardFn) -> int:
        node_id = len(self.nodes)
        self.nodes.append(Node(op, inputs, output, backward_fn))
        output.node_id = node_id
        output._tape = self
        return node_id


def _tape_stack() -> list:
    stack = getattr(_local, "stack", None)
    if stack is None:
        stack = _local.stack = []
    return stack


def current_tape() -> Optional[Tape]:
    stack = _tape_stack()
    return stack[-1] if stack else None


def make_op(op: str, data: np.ndarray, inputs: tuple, backward_fn: BackwardFn) -> Tensor:
    """Wrap a forward result; record it on the active tape if any input needs a gradient."""
    out = Tensor(data, dtype=data.dtype)
    tape = current_tape()
    if tape is not None and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        tape.record(op, inputs, out, backward_fn)
    return out


def as_tensor(x: ArrayLike, dtype=None) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x, dtype=dtype)


def _is_scalar_operand(b) -> bool:
    return not isinstance(b, Tensor) and np.ndim(b) == 0


def _check_same_shape(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape and b.shape != ():
        raise ShapeMismatchError(f"{op}: shapes {a.shape} and {b.shape} differ (only scalar broadcasting is supported)")


def _sum_to(g: np.ndarray, shape: tuple) -> np.ndarray:
    # gradient of a size-1 operand broadcast across the other operand
    if g.shape == shape:
        return g
    return np.asarray(g.sum(), dtype=g.dtype).reshape(shape)


# --------------------------------------------------------------------------
# elementwise ops
# --------------------------------------------------------------------------

def add(a: Tensor, b: Union[Tensor, float]) -> Tensor:
    if _is_scalar_operand(b):
        c = a.dtype.type(b)
        return make_op("add_scalar", a.data + c, (a,), lambda g: (g,))
    _check_same_shape(a, b, "add")
    sa, sb = a.shape, b.shape
    return make_op("add", a.data + b.data, (a, b), lambda g: (g, _sum_to(g, sb)))


def sub(a: Tensor, b: Union[Tensor, float]) -> Tensor:
    if _is_scalar_operand(b):
        c = a.dtype.type(b)
        return make_op("sub_scalar", a.data - c, (a,), lambda g: (g,))
    _check_same_shape(a, b, "sub")
    sb = b.shape
    return make_op("sub", a.data - b.data, (a, b), lambda g: (g, -_sum_to(g, sb)))


def mul(a: Tensor, b: Union[Tensor, float]) -> Tensor:
    """Elementwise product. Saves both operands."""
    if _is_scalar_operand(b):
        return scale(a, b)
    _check_same_shape(a, b, "mul")
    ad, bd, sb = a.data, b.data, b.shape
    return make_op("mul", ad * bd, (a, b), lambda g: (g * bd, _sum_to(g * ad, sb)))


def div(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise quotient. Saves the divisor and the output."""
    _check_same_shape(a, b, "div")
    if np.any(b.data == 0):
        raise DomainError("div: division by zero")
    bd, sb = b.data, b.shape
    out = a.data / bd

    def backward(g):
        return g / bd, _sum_to(-g * out / bd, sb)

    return make_op("div", out, (a, b), backward)


def neg(a: Tensor) -> Tensor:
    return make_op("neg", -a.data, (a,), lambda g: (-g,))


def scale(a: Tensor, c: float) -> Tensor:
    """Multiply by a Python constant. Saves only the constant."""
    c = a.dtype.type(c)
    return make_op("scale", a.data * c, (a,), lambda g: (g * c,))


def log(a: Tensor) -> Tensor:
    """Natural log; rejects non-positive input. Saves the input."""
    if np.any(a.data <= 0):
        raise DomainError("log: input must be strictly positive")
    ad = a.data
    return make_op("log", np.log(ad), (a,), lambda g: (g / ad,))


# --------------------------------------------------------------------------
# reductions
# --------------------------------------------------------------------------

def reduce_sum(a: Tensor) -> Tensor:
    if a.size == 0:
        raise EmptyTensorError("sum of an empty tensor")
    shape, dt = a.shape, a.dtype
    return make_op("sum", np.asarray(a.data.sum(), dtype=dt), (a,), lambda g: (np.full(shape, g, dtype=dt),))


def reduce_mean(a: Tensor) -> Tensor:
    if a.size == 0:
        raise EmptyTensorError("mean of an empty tensor")
    shape, dt, n = a.shape, a.dtype, a.size
    return make_op("mean", np.asarray(a.data.mean(), dtype=dt), (a,),
                   lambda g: (np.full(shape, g / n, dtype=dt),))


# --------------------------------------------------------------------------
# backward pass
# --------------------------------------------------------------------------

def backward(loss: Tensor, tape: Optional[Tape] = None) -> dict:
    """Back-propagate from a scalar ``loss``.

    Returns a map from every reachable ``requires_grad`` tensor to its
    gradient, and also stores each gradient in ``tensor.grad`` (overwriting,
    one backward per tape). A tensor consumed by several ops receives the
    sum of its branch gradients. The tape is consumed afterwards.
    """
    if loss.size != 1:
        raise NotScalarError(f"loss must have exactly one element, got shape {loss.shape}")
    if tape is None:
        tape = loss._tape
    if tape is None or loss.node_id is None or loss._tape is not tape or tape.consumed:
        raise DetachedTensorError("loss was not produced on this (live) tape")

    grads: dict[int, np.ndarray] = {loss.uid: np.ones(loss.shape, dtype=loss.dtype)}
    owners: dict[int, Tensor] = {loss.uid: loss}
    for node in reversed(tape.nodes[: loss.node_id + 1]):
        g_out = grads.get(node.output.uid)
        if g_out is None:
            continue  # not an ancestor of loss
        g_inputs = node.backward(g_out)
        for inp, g in zip(node.inputs, g_inputs):
            if g is None or not inp.requires_grad:
                continue
            if g.shape != inp.shape:
                raise ShapeMismatchError(f"{node.op}: gradient shape {g.shape} != input shape {inp.shape}")
            prev = grads.get(inp.uid)
            grads[inp.uid] = g if prev is None else prev + g
            owners[inp.uid] = inp

    tape.consumed = True
    tape.nodes = []
    result = {}
    for uid, t in owners.items():
        t.grad = grads[uid]
        result[t] = grads[uid]
    return result


def grad_check(f: Callable[[Tensor], Tensor], x: Tensor, eps: float = 1e-3) -> float:
    """Compare the tape gradient of scalar ``f`` at ``x`` with central differences.

    Returns max |analytic - numeric| / max(|analytic|, |numeric|, 1e-8).
    Run in float64 for tight tolerances.
    """
    if not np.all(np.isfinite(x.data)):
        raise NonFiniteGradientError("grad_check input contains non-finite values")
    base = x.data.copy()
    probe = Tensor(base.copy(), requires_grad=True, dtype=x.dtype)
    with Tape() as tape:
        out = f(probe)
    if out.size != 1:
        raise NotScalarError("grad_check needs a scalar-valued function")
    if out.node_id is None:
        analytic = np.zeros_like(base)
    else:
        analytic = backward(out, tape).get(probe, np.zeros_like(base))

    numeric = np.zeros_like(base)
    flat = numeric.reshape(-1)
    for i in range(base.size):
        xp = base.copy().reshape(-1)
        xp[i] += eps
        fp = f(Tensor(xp.reshape(base.shape), dtype=x.dtype)).item()
        xm = base.copy().reshape(-1)
        xm[i] -= eps
        fm = f(Tensor(xm.reshape(base.shape), dtype=x.dtype)).item()
        flat[i] = (fp - fm) / (2.0 * eps)

    if not (np.all(np.isfinite(analytic)) and np.all(np.isfinite(numeric))):
        raise NonFiniteGradientError("non-finite gradient encountered in grad_check")
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-8)
    return float(np.max(np.abs(analytic - numeric) / denom)) if base.size else 0.0
