"""Dense tensors with tape-based reverse-mode differentiation.

Every op records a node on the active :class:`Tape` when at least one input
requires a gradient. Leaves created with ``requires_grad=True`` are the
trainable parameters; everything else is frozen and never receives gradient
storage.

    >>> x = Tensor(np.array([1.0, 2.0]), requires_grad=True)
    >>> with Tape() as tape:
    ...     loss = (x * x).sum()
    >>> tape.backward(loss)[x]
    array([2., 4.])
"""

from __future__ import annotations

import math
import threading
from contextlib import contextmanager
from typing import Callable, Iterable, Sequence

import numpy as np

FLOAT_DTYPES = (np.float32, np.float64)


class ShapeError(ValueError):
    pass


class UsageError(RuntimeError):
    pass


class NonFiniteError(FloatingPointError):
    pass


_local = threading.local()


def _tape_stack() -> list:
    stack = getattr(_local, "tapes", None)
    if stack is None:
        stack = _local.tapes = []
    return stack


def _active_tape() -> "Tape | None":
    stack = _tape_stack()
    return stack[-1] if stack else None


class MacCounter:
    """Counts multiply-accumulates performed by :func:`matmul`."""

    def __init__(self):
        self.macs = 0

    @property
    def flops(self) -> int:
        return 2 * self.macs


@contextmanager
def count_macs():
    prev = getattr(_local, "counter", None)
    counter = MacCounter()
    _local.counter = counter
    try:
        yield counter
    finally:
        _local.counter = prev


class Tensor:
    __slots__ = ("data", "requires_grad", "name", "__weakref__")

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: str | None = None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in FLOAT_DTYPES:
            arr = arr.astype(np.float64 if dtype is None else dtype)
        self.data = arr
        self.requires_grad = requires_grad
        self.name = name

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else _raise_scalar()

    def __repr__(self):
        flag = ", trainable" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

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
        if isinstance(other, Tensor):
            raise TypeError("division by a Tensor is not supported")
        return scale(self, 1.0 / other)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return slice_(self, index)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    @property
    def T(self):
        return swapaxes(self, -1, -2)


def _raise_scalar():
    raise ValueError("item() requires a single-element tensor")


class Tape:
    """Ordered record of forward ops; confined to the thread that opened it."""

    def __init__(self):
        self.nodes: list[tuple[Tensor, tuple, Callable]] = []
        self._produced: set[int] = set()

    def __enter__(self):
        _tape_stack().append(self)
        return self

    def __exit__(self, *exc):
        stack = _tape_stack()
        if stack and stack[-1] is self:
            stack.pop()
        return False

    def _push(self, out: Tensor, inputs: tuple, fn: Callable):
        self.nodes.append((out, inputs, fn))
        self._produced.add(id(out))

    def backward(self, loss: Tensor) -> dict:
        """Return ``{trainable leaf: gradient}`` for a scalar ``loss``."""
        if not isinstance(loss, Tensor) or loss.data.size != 1:
            raise UsageError("backward needs a scalar Tensor loss")
        if id(loss) not in self._produced:
            raise UsageError("loss was not produced on this tape")
        grads = {id(loss): np.ones_like(loss.data)}
        leaves: dict[int, Tensor] = {}
        for out, inputs, fn in reversed(self.nodes):
            g = grads.pop(id(out), None)
            if g is None:
                continue
            for inp, gi in zip(inputs, fn(g)):
                if gi is None or not inp.requires_grad:
                    continue
                key = id(inp)
                if key not in self._produced:
                    leaves[key] = inp
                if key in grads:
                    grads[key] = grads[key] + gi
                else:
                    grads[key] = gi
        return {leaf: grads[key] for key, leaf in leaves.items() if key in grads}


def backward(tape: Tape, loss: Tensor) -> dict:
    return tape.backward(loss)


def no_tape() -> "contextmanager":
    """Suspend recording (forward passes then carry no gradient)."""
    return _suspended()


@contextmanager
def _suspended():
    stack = _tape_stack()
    saved = list(stack)
    stack.clear()
    try:
        yield
    finally:
        stack.extend(saved)


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype))


def _check_finite(arr: np.ndarray, op: str):
    # a finite sum is the cheap common case; overflow of the sum itself falls through to the full check
    with np.errstate(over="ignore", invalid="ignore"):
        if np.isfinite(arr.sum()):
            return
    if not np.isfinite(arr).all():
        raise NonFiniteError(f"{op} produced non-finite values")


def _result(data: np.ndarray, inputs: tuple, fn: Callable, op: str) -> Tensor:
    _check_finite(data, op)
    out = Tensor(data)
    tape = _active_tape()
    if tape is not None and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        tape._push(out, inputs, fn)
    return out


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _pair(a, b, op: str) -> tuple[Tensor, Tensor]:
    if not isinstance(a, Tensor):
        a = Tensor(np.asarray(a, dtype=b.dtype))
    if not isinstance(b, Tensor):
        b = Tensor(np.asarray(b, dtype=a.dtype))
    if a.dtype != b.dtype:
        raise TypeError(f"{op}: dtype mismatch {a.dtype} vs {b.dtype}")
    return a, b


# --- elementwise -----------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = _pair(a, b, "add")

    def fn(g):
        return (_unbroadcast(g, a.shape) if a.requires_grad else None,
                _unbroadcast(g, b.shape) if b.requires_grad else None)
    return _result(a.data + b.data, (a, b), fn, "add")


def sub(a, b) -> Tensor:
    a, b = _pair(a, b, "sub")

    def fn(g):
        return (_unbroadcast(g, a.shape) if a.requires_grad else None,
                _unbroadcast(-g, b.shape) if b.requires_grad else None)
    return _result(a.data - b.data, (a, b), fn, "sub")


def mul(a, b) -> Tensor:
    if not isinstance(a, Tensor) and np.ndim(a) == 0:
        return scale(b, float(a))
    if not isinstance(b, Tensor) and np.ndim(b) == 0:
        return scale(a, float(b))
    a, b = _pair(a, b, "mul")

    def fn(g):
        return (_unbroadcast(g * b.data, a.shape) if a.requires_grad else None,
                _unbroadcast(g * a.data, b.shape) if b.requires_grad else None)
    return _result(a.data * b.data, (a, b), fn, "mul")


def scale(x: Tensor, c: float) -> Tensor:
    c = float(c)
    return _result(x.data * x.dtype.type(c), (x,), lambda g: (g * x.dtype.type(c),), "scale")


def exp(x: Tensor) -> Tensor:
    y = np.exp(x.data)
    return _result(y, (x,), lambda g: (g * y,), "exp")


def log(x: Tensor) -> Tensor:
    return _result(np.log(x.data), (x,), lambda g: (g / x.data,), "log")


def gelu(x: Tensor) -> Tensor:
    """Tanh-approximated GELU."""
    c = math.sqrt(2.0 / math.pi)
    xd = x.data
    x2 = xd * xd
    t = np.tanh(xd * (c + (c * 0.044715) * x2))
    y = 0.5 * xd * (1.0 + t)

    def fn(g):
        dt = (1.0 - t * t) * (c + (3 * c * 0.044715) * x2)
        return (g * (0.5 * (1.0 + t) + 0.5 * xd * dt),)
    return _result(y.astype(x.dtype, copy=False), (x,), fn, "gelu")


# --- reductions and shape ops -------------------------------------------------

def sum_(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    y = x.data.sum(axis=axis, keepdims=keepdims)

    def fn(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)
    return _result(np.asarray(y), (x,), fn, "sum")


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    n = x.data.size if axis is None else np.prod([x.shape[a] for a in np.atleast_1d(axis)])
    return scale(sum_(x, axis=axis, keepdims=keepdims), 1.0 / n)


def reshape(x: Tensor, shape) -> Tensor:
    return _result(x.data.reshape(shape), (x,), lambda g: (g.reshape(x.shape),), "reshape")


def transpose(x: Tensor, axes=None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(x.ndim)))
    inv = tuple(np.argsort(axes))
    return _result(x.data.transpose(axes), (x,), lambda g: (g.transpose(inv),), "transpose")


def swapaxes(x: Tensor, a: int, b: int) -> Tensor:
    return _result(np.swapaxes(x.data, a, b), (x,), lambda g: (np.swapaxes(g, a, b),), "swapaxes")


def broadcast_to(x: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    return _result(np.broadcast_to(x.data, shape), (x,),
                   lambda g: (_unbroadcast(g, x.shape),), "broadcast_to")


def concat(xs: Sequence[Tensor], axis: int = 0) -> Tensor:
    xs = [as_tensor(x) for x in xs]
    if len({x.dtype for x in xs}) > 1:
        raise TypeError("concat: mixed dtypes")
    sizes = [x.shape[axis] for x in xs]
    bounds = np.cumsum([0] + sizes)

    def fn(g):
        out = []
        for x, lo, hi in zip(xs, bounds[:-1], bounds[1:]):
            if not x.requires_grad:
                out.append(None)
                continue
            idx = [slice(None)] * g.ndim
            idx[axis] = slice(lo, hi)
            out.append(g[tuple(idx)])
        return tuple(out)
    return _result(np.concatenate([x.data for x in xs], axis=axis), tuple(xs), fn, "concat")


def slice_(x: Tensor, index) -> Tensor:
    """Basic (non-fancy) indexing."""
    y = x.data[index]

    def fn(g):
        gx = np.zeros_like(x.data)
        gx[index] += g
        return (gx,)
    return _result(np.array(y), (x,), fn, "slice")


def gather_rows(table: Tensor, idx: np.ndarray) -> Tensor:
    """Embedding lookup: ``out[..., :] = table[idx[...], :]``."""
    idx = np.asarray(idx)
    if idx.size and (idx.min() < 0 or idx.max() >= table.shape[0]):
        raise IndexError(f"gather index out of range for table with {table.shape[0]} rows")
    y = table.data[idx]

    def fn(g):
        gt = np.zeros_like(table.data)
        np.add.at(gt, idx.reshape(-1), g.reshape(-1, table.shape[-1]))
        return (gt,)
    return _result(y, (table,), fn, "gather")


# --- linear algebra ---------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _pair(a, b, "matmul")
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    y = a.data @ b.data
    counter = getattr(_local, "counter", None)
    if counter is not None:
        counter.macs += int(np.prod(y.shape)) * a.shape[-1]

    def fn(g):
        ga = _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape) if a.requires_grad else None
        gb = _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape) if b.requires_grad else None
        return ga, gb
    return _result(y, (a, b), fn, "matmul")


# --- normalisations and losses ----------------------------------------------

def softmax(x: Tensor, axis: int = -1) -> Tensor:
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=axis, keepdims=True)

    def fn(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)
    return _result(y, (x,), fn, "softmax")


def softmax_rows(x: Tensor) -> Tensor:
    if x.ndim != 2:
        raise ShapeError(f"softmax_rows expects a matrix, got shape {x.shape}")
    return softmax(x, axis=-1)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    xhat = xc * inv
    y = xhat * gamma.data + beta.data

    def fn(g):
        lead = tuple(range(g.ndim - 1))
        gx = None
        if x.requires_grad:
            gh = g * gamma.data
            gx = inv * (gh - gh.mean(axis=-1, keepdims=True)
                        - xhat * (gh * xhat).mean(axis=-1, keepdims=True))
        gg = _unbroadcast((g * xhat).sum(axis=lead), gamma.shape) if gamma.requires_grad else None
        gb = _unbroadcast(g.sum(axis=lead), beta.shape) if beta.requires_grad else None
        return gx, gg, gb
    return _result(y.astype(x.dtype, copy=False), (x, gamma, beta), fn, "layer_norm")


def cross_entropy_logits(logits: Tensor, targets, mask=None) -> Tensor:
    """Weighted mean of ``-log softmax(logits)[target]`` over masked positions."""
    targets = np.asarray(targets)
    V = logits.shape[-1]
    if targets.shape != logits.shape[:-1]:
        raise ShapeError(f"targets shape {targets.shape} does not match logits {logits.shape}")
    if targets.size and (targets.min() < 0 or targets.max() >= V):
        raise IndexError(f"target id out of range for vocabulary of size {V}")
    w = np.ones(targets.shape, dtype=logits.dtype) if mask is None else np.asarray(mask, dtype=logits.dtype)
    total = w.sum()
    if total <= 0:
        raise ValueError("cross_entropy_logits: mask selects no positions")
    z = logits.data - logits.data.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=-1))
    picked = np.take_along_axis(z, targets[..., None], axis=-1)[..., 0]
    loss = np.asarray((w * (lse - picked)).sum() / total, dtype=logits.dtype)

    def fn(g):
        p = np.exp(z - lse[..., None])
        np.put_along_axis(p, targets[..., None], np.take_along_axis(p, targets[..., None], -1) - 1.0, -1)
        return (p * (w / total * g)[..., None],)
    return _result(loss, (logits,), fn, "cross_entropy")


# --- helpers ------------------------------------------------------------------

def parameters(arrays: dict, trainable: Iterable[str] | None = None) -> dict:
    """Wrap a dict of arrays as leaves; keys in ``trainable`` (default all) require grad."""
    keys = set(arrays) if trainable is None else set(trainable)
    return {k: Tensor(v, requires_grad=k in keys, name=k) for k, v in arrays.items()}


def numerical_gradient(f: Callable[[], float], x: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """Central finite differences of scalar ``f`` w.r.t. the array ``x`` (mutated in place, restored)."""
    grad = np.zeros_like(x)
    flat = x.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = f()
        flat[i] = orig - h
        fm = f()
        flat[i] = orig
        gflat[i] = (fp - fm) / (2 * h)
    return grad


def relative_error(a: np.ndarray, b: np.ndarray, floor: float = 1e-8) -> float:
    """Max elementwise ``|a-b| / max(|a|, |b|, floor)``."""
    denom = np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)
    return float(np.max(np.abs(a - b) / denom)) if a.size else 0.0


def grad_check_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-12) -> float:
    """``||a - n|| / max(||a||, ||n||)``: insensitive to finite-difference noise on near-zero entries."""
    diff = np.linalg.norm(np.ravel(analytic - numeric))
    return float(diff / max(np.linalg.norm(np.ravel(analytic)), np.linalg.norm(np.ravel(numeric)), floor))
