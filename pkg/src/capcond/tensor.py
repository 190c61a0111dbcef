"""Small dense tensor library with tape-based reverse-mode differentiation.

Tensors wrap numpy arrays of rank 1 or 2 (rows are minibatch items).  Ops
record themselves on the active :class:`Tape` only when one is open and at
least one input requires a gradient, so evaluation code pays nothing for
autodiff bookkeeping.

    with Tape() as tape:
        loss = mean(sigmoid(matmul(x, w)))
    tape.backward(loss)
    w.grad
"""

from __future__ import annotations

import contextlib
import threading
from typing import Callable, Iterator, Sequence

import numpy as np


class DimensionError(ValueError):
    """Operand shapes do not conform."""


class TapeStateError(RuntimeError):
    """Backward requested on a tape that was already consumed."""


class NumericError(ArithmeticError):
    """A non-finite value appeared where a finite one is required."""


_DTYPES = {32: np.float32, 64: np.float64}
_state = threading.local()


def _get(name, default):
    return getattr(_state, name, default)


def default_dtype() -> type:
    return _DTYPES[_get("bits", 32)]


def set_precision(bits: int) -> None:
    """Switch the default float width for newly created tensors (32 or 64)."""
    if bits not in _DTYPES:
        raise ValueError(f"precision must be 32 or 64, got {bits}")
    _state.bits = bits


@contextlib.contextmanager
def precision(bits: int) -> Iterator[None]:
    old = _get("bits", 32)
    set_precision(bits)
    try:
        yield
    finally:
        _state.bits = old


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None,
                 dtype=None):
        arr = np.array(data, dtype=dtype or default_dtype())
        if arr.ndim == 0:
            arr = arr.reshape(1)
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def zero_grad(self) -> None:
        self.grad = None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise DimensionError(f"item() needs a single element, shape is {self.shape}")
        return float(self.data.reshape(-1)[0])

    def _accumulate(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.array(g, dtype=self.data.dtype).reshape(self.data.shape)
        else:
            self.grad += g

    def __repr__(self) -> str:
        label = f" {self.name}" if self.name else ""
        return f"Tensor{label}(shape={self.shape}, dtype={self.data.dtype})"

    def __add__(self, other):
        return add(self, _lift(other, self))

    def __sub__(self, other):
        return subtract(self, _lift(other, self))

    def __mul__(self, other):
        if np.isscalar(other):
            return scale(self, other)
        return multiply(self, other)

    def __matmul__(self, other):
        return matmul(self, other)


def _lift(x, like: Tensor) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.broadcast_to(np.asarray(x, dtype=like.data.dtype), like.shape))


def constant(data) -> Tensor:
    return Tensor(data)


def parameter(data, name: str | None = None) -> Tensor:
    return Tensor(data, requires_grad=True, name=name)


class _Node:
    __slots__ = ("kind", "inputs", "output", "backward")

    def __init__(self, kind, inputs, output, backward):
        self.kind = kind
        self.inputs = inputs
        self.output = output
        self.backward = backward


class Tape:
    """Records differentiable ops in execution order.

    Recording order is already topological, so backward just walks the node
    list in reverse.  A tape can be replayed backward once; call
    :meth:`reset` to reuse it.
    """

    def __init__(self) -> None:
        self.nodes: list[_Node] = []
        self._consumed = False
        self._outer: Tape | None = None

    def __enter__(self) -> "Tape":
        self._outer = _get("tape", None)
        _state.tape = self
        return self

    def __exit__(self, *exc) -> None:
        _state.tape = self._outer

    def record(self, kind, inputs, output, backward) -> None:
        self.nodes.append(_Node(kind, inputs, output, backward))

    def reset(self) -> None:
        self.nodes.clear()
        self._consumed = False

    def backward(self, root: Tensor) -> None:
        if self._consumed:
            raise TapeStateError("tape already used for backward; call reset() first")
        if root.size != 1:
            raise DimensionError(f"backward root must be scalar, got shape {root.shape}")
        self._consumed = True
        root._accumulate(np.ones_like(root.data))
        for node in reversed(self.nodes):
            g = node.output.grad
            if g is None:
                continue
            node.backward(g)


def active_tape() -> Tape | None:
    return _get("tape", None)


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    outer = _get("tape", None)
    _state.tape = None
    try:
        yield
    finally:
        _state.tape = outer


def backward(root: Tensor) -> None:
    """Run backward on the currently open tape."""
    tape = active_tape()
    if tape is None:
        raise TapeStateError("no tape is recording")
    tape.backward(root)


def _make(data: np.ndarray, inputs: Sequence[Tensor], kind: str,
          backward: Callable[[np.ndarray], None]) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.name = None
    tape = _get("tape", None)
    track = tape is not None and any(t.requires_grad for t in inputs)
    out.requires_grad = track
    if track:
        tape.record(kind, tuple(inputs), out, backward)
    return out


def _check_same(a: Tensor, b: Tensor, op: str) -> bool:
    """Return True when b is a row vector broadcast over a's rows."""
    if a.shape == b.shape:
        return False
    if b.data.ndim == 1 and a.data.ndim == 2 and a.shape[1] == b.shape[0]:
        return True
    raise DimensionError(f"{op}: shapes {a.shape} and {b.shape} do not match")


def _reduce_rows(g: np.ndarray, broadcast: bool) -> np.ndarray:
    return g.sum(axis=0) if broadcast else g


# elementwise ----------------------------------------------------------------

def add(a: Tensor, b: Tensor) -> Tensor:
    """a + b; b may be a row vector added to every row of a (bias)."""
    bc = _check_same(a, b, "add")

    def bw(g):
        if a.requires_grad:
            a._accumulate(g)
        if b.requires_grad:
            b._accumulate(_reduce_rows(g, bc))
    return _make(a.data + b.data, (a, b), "add", bw)


def subtract(a: Tensor, b: Tensor) -> Tensor:
    bc = _check_same(a, b, "subtract")

    def bw(g):
        if a.requires_grad:
            a._accumulate(g)
        if b.requires_grad:
            b._accumulate(-_reduce_rows(g, bc))
    return _make(a.data - b.data, (a, b), "subtract", bw)


def multiply(a: Tensor, b: Tensor) -> Tensor:
    bc = _check_same(a, b, "multiply")

    def bw(g):
        if a.requires_grad:
            a._accumulate(g * b.data)
        if b.requires_grad:
            b._accumulate(_reduce_rows(g * a.data, bc))
    return _make(a.data * b.data, (a, b), "multiply", bw)


def scale(a: Tensor, c: float) -> Tensor:
    c = a.data.dtype.type(c)

    def bw(g):
        a._accumulate(g * c)
    return _make(a.data * c, (a,), "scale", bw)


def one_minus(a: Tensor) -> Tensor:
    def bw(g):
        a._accumulate(-g)
    return _make(1 - a.data, (a,), "one_minus", bw)


def sigmoid(a: Tensor) -> Tensor:
    x = a.data
    # split by sign so exp never overflows
    e = np.exp(-np.abs(x))
    out = np.where(x >= 0, 1 / (1 + e), e / (1 + e)).astype(x.dtype, copy=False)

    def bw(g):
        a._accumulate(g * out * (1 - out))
    return _make(out, (a,), "sigmoid", bw)


def tanh(a: Tensor) -> Tensor:
    out = np.tanh(a.data)

    def bw(g):
        a._accumulate(g * (1 - out * out))
    return _make(out, (a,), "tanh", bw)


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    out = np.where(mask, a.data, 0).astype(a.data.dtype, copy=False)

    def bw(g):
        a._accumulate(g * mask)
    return _make(out, (a,), "relu", bw)


def log(a: Tensor) -> Tensor:
    if np.any(a.data <= 0):
        raise NumericError("log of a non-positive value")
    out = np.log(a.data)

    def bw(g):
        a._accumulate(g / a.data)
    return _make(out, (a,), "log", bw)


def elementwise(op_kind: str, *inputs: Tensor, factor: float = 1.0) -> Tensor:
    """Dispatch by name; ``factor`` is only used by ``scale``."""
    unary = {"sigmoid": sigmoid, "tanh": tanh, "relu": relu, "log": log}
    binary = {"add": add, "subtract": subtract, "multiply": multiply}
    if op_kind in unary:
        return unary[op_kind](*inputs)
    if op_kind in binary:
        return binary[op_kind](*inputs)
    if op_kind == "scale":
        return scale(inputs[0], factor)
    raise ValueError(f"unknown elementwise op {op_kind!r}")


# linear algebra -------------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product; a rank-1 left operand is treated as a single row."""
    if b.data.ndim != 2 or a.data.ndim not in (1, 2) or a.shape[-1] != b.shape[0]:
        raise DimensionError(f"matmul: shapes {a.shape} and {b.shape} do not conform")
    out = a.data @ b.data

    def bw(g):
        if a.requires_grad:
            a._accumulate(g @ b.data.T)
        if b.requires_grad:
            if a.data.ndim == 1:
                b._accumulate(np.outer(a.data, g))
            else:
                b._accumulate(a.data.T @ g)
    return _make(out, (a, b), "matmul", bw)


def concat(a: Tensor, b: Tensor) -> Tensor:
    """Join along the last axis; a fills the leading positions."""
    if a.data.ndim != b.data.ndim or a.shape[:-1] != b.shape[:-1]:
        raise DimensionError(f"concat: shapes {a.shape} and {b.shape} do not conform")
    k = a.shape[-1]
    out = np.concatenate([a.data, b.data], axis=-1)

    def bw(g):
        if a.requires_grad:
            a._accumulate(g[..., :k])
        if b.requires_grad:
            b._accumulate(g[..., k:])
    return _make(out, (a, b), "concat", bw)


def broadcast_rows(a: Tensor, n: int) -> Tensor:
    """Repeat a rank-1 tensor as n identical rows."""
    if a.data.ndim != 1:
        raise DimensionError(f"broadcast_rows needs rank 1, got {a.shape}")
    out = np.tile(a.data, (n, 1))

    def bw(g):
        a._accumulate(g.sum(axis=0))
    return _make(out, (a,), "broadcast_rows", bw)


def take_rows(table: Tensor, ids) -> Tensor:
    """Gather rows of a matrix; gradient scatters back to the chosen rows."""
    ids = np.asarray(ids, dtype=np.int64)
    n = table.shape[0]
    bad = ids[(ids < 0) | (ids >= n)]
    if bad.size:
        raise IndexError(f"token id {int(bad[0])} out of range [0, {n})")
    out = table.data[ids]

    def bw(g):
        if table.grad is None:
            table.grad = np.zeros_like(table.data)
        np.add.at(table.grad, ids, g)
    return _make(out, (table,), "take_rows", bw)


# reductions and normalisers -------------------------------------------------

def sum_all(a: Tensor) -> Tensor:
    def bw(g):
        a._accumulate(np.broadcast_to(g.reshape(()), a.shape))
    return _make(np.array([a.data.sum()], dtype=a.data.dtype), (a,), "sum", bw)


def mean_all(a: Tensor) -> Tensor:
    n = a.size

    def bw(g):
        a._accumulate(np.broadcast_to(g.reshape(()) / n, a.shape))
    return _make(np.array([a.data.mean()], dtype=a.data.dtype), (a,), "mean", bw)


def softmax(z: Tensor) -> Tensor:
    if not np.all(np.isfinite(z.data)):
        raise NumericError("softmax input contains non-finite values")
    e = np.exp(z.data - z.data.max(axis=-1, keepdims=True))
    out = e / e.sum(axis=-1, keepdims=True)

    def bw(g):
        z._accumulate(out * (g - (g * out).sum(axis=-1, keepdims=True)))
    return _make(out, (z,), "softmax", bw)


def log_softmax(z: Tensor) -> Tensor:
    if not np.all(np.isfinite(z.data)):
        raise NumericError("log_softmax input contains non-finite values")
    shifted = z.data - z.data.max(axis=-1, keepdims=True)
    out = shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))

    def bw(g):
        p = np.exp(out)
        z._accumulate(g - p * g.sum(axis=-1, keepdims=True))
    return _make(out, (z,), "log_softmax", bw)


def pick(a: Tensor, cols) -> Tensor:
    """Select a[i, cols[i]] for every row i, returning a rank-1 tensor."""
    cols = np.asarray(cols, dtype=np.int64)
    rows = np.arange(a.shape[0])
    out = a.data[rows, cols]

    def bw(g):
        full = np.zeros_like(a.data)
        full[rows, cols] = g
        a._accumulate(full)
    return _make(out, (a,), "pick", bw)


def sum_squares(a: Tensor) -> Tensor:
    def bw(g):
        a._accumulate(2 * g.reshape(()) * a.data)
    return _make(np.array([(a.data * a.data).sum()], dtype=a.data.dtype), (a,),
                 "sum_squares", bw)


def stack_sum(terms: Sequence[Tensor]) -> Tensor:
    """Sum of equally shaped tensors as one node."""
    shape = terms[0].shape
    for t in terms:
        if t.shape != shape:
            raise DimensionError(f"stack_sum: shapes {shape} and {t.shape} differ")
    out = np.sum([t.data for t in terms], axis=0).astype(terms[0].data.dtype, copy=False)

    def bw(g):
        for t in terms:
            if t.requires_grad:
                t._accumulate(g)
    return _make(out, tuple(terms), "stack_sum", bw)


# verification oracle --------------------------------------------------------

def finite_difference_grad(f: Callable[[], float], x: Tensor, step: float = 1e-5,
                           indices: Sequence[int] | None = None) -> np.ndarray:
    """Central differences of scalar ``f()`` with respect to ``x.data``.

    ``f`` reads ``x`` by reference, so each coordinate is nudged in place and
    restored.  ``indices`` limits the work to chosen flat coordinates; the
    others are left as NaN.
    """
    if step <= 0:
        raise ValueError("step must be positive")
    flat = x.data.reshape(-1)
    out = np.full(flat.shape, np.nan, dtype=np.float64)
    coords = range(flat.size) if indices is None else indices
    for i in coords:
        orig = flat[i]
        flat[i] = orig + step
        hi = float(f())
        flat[i] = orig - step
        lo = float(f())
        flat[i] = orig
        out[i] = (hi - lo) / (2 * step)
    return out.reshape(x.shape)
