"""Minimal reverse-mode autodiff over dense numpy arrays.

Only the operations the model needs are provided. Elementwise broadcasting is
limited to equal shapes and scalar-vs-tensor; the few places that need a vector
applied along the last axis use dedicated row-vector ops.

Operations record themselves on the innermost active :class:`Tape`::

    with Tape() as tape:
        loss = ad.sum(ad.mul(w, x))
    tape.backward(loss)      # w.grad is now populated
"""
from __future__ import annotations

import contextlib
import threading
from typing import Callable, Iterator

import numpy as np

_local = threading.local()


def default_dtype() -> type:
    return getattr(_local, "dtype", np.float32)


@contextlib.contextmanager
def precision(dtype: type) -> Iterator[None]:
    """Temporarily change the dtype used for newly created tensors."""
    prev = default_dtype()
    _local.dtype = dtype
    try:
        yield
    finally:
        _local.dtype = prev


def _tape_stack() -> list:
    stack = getattr(_local, "tapes", None)
    if stack is None:
        stack = _local.tapes = []
    return stack


def active_tape() -> Tape | None:
    stack = _tape_stack()
    return stack[-1] if stack else None


class Tensor:
    """A dense array plus the bookkeeping needed to differentiate through it."""

    __slots__ = ("data", "requires_grad", "_tape")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        self.data = np.asarray(data, dtype=dtype or default_dtype())
        self.requires_grad = requires_grad
        self._tape = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

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

    def __matmul__(self, other):
        return matmul(self, other)


class Parameter(Tensor):
    """Latent tensor owned by a model. Frozen parameters never get a grad buffer."""

    __slots__ = ("trainable", "grad", "name")

    def __init__(self, data, trainable: bool = True, name: str = ""):
        super().__init__(data, requires_grad=trainable)
        self.trainable = trainable
        self.grad: np.ndarray | None = None
        self.name = name

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        kind = "trainable" if self.trainable else "frozen"
        return f"Parameter({self.name!r}, shape={self.shape}, {kind})"


class Tape:
    """Ordered record of executed operations.

    A tape can be differentiated exactly once; running backward again without
    recording a fresh forward pass is an error.
    """

    def __init__(self):
        self._nodes: list[tuple[Tensor, tuple[Tensor, ...], Callable]] = []
        self._consumed = False
        self.grad_buffers_touched = 0

    def __enter__(self) -> Tape:
        _tape_stack().append(self)
        return self

    def __exit__(self, *exc) -> None:
        _tape_stack().remove(self)

    def __len__(self) -> int:
        return len(self._nodes)

    def record(self, out: Tensor, inputs: tuple[Tensor, ...], backward: Callable) -> None:
        if self._consumed:
            raise RuntimeError("tape already differentiated; start a new Tape")
        out.requires_grad = True
        out._tape = self
        self._nodes.append((out, inputs, backward))

    def backward(self, loss: Tensor) -> None:
        if self._consumed:
            raise RuntimeError("backward called twice on the same tape without a new forward")
        if loss._tape is not self:
            raise ValueError("loss was not produced on this tape")
        if loss.size != 1:
            raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
        self._consumed = True
        grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        touched: set[int] = set()
        for out, inputs, fn in reversed(self._nodes):
            g = grads.pop(id(out), None)
            if g is None:
                continue
            for inp, gi in zip(inputs, fn(g)):
                if gi is None or not inp.requires_grad:
                    continue
                if isinstance(inp, Parameter):
                    # frozen parameters have requires_grad False and never land here
                    if inp.grad is None:
                        inp.grad = np.zeros_like(inp.data)
                    inp.grad += gi
                    touched.add(id(inp))
                elif id(inp) in grads:
                    grads[id(inp)] = grads[id(inp)] + gi
                else:
                    grads[id(inp)] = gi
        self.grad_buffers_touched = len(touched)
        self._nodes.clear()


def backward(loss: Tensor) -> None:
    """Differentiate ``loss`` on the tape that produced it."""
    if loss._tape is None:
        raise ValueError("loss does not depend on any trainable parameter")
    loss._tape.backward(loss)


def _check_finite(name: str, arr: np.ndarray) -> None:
    if not np.isfinite(arr).all():
        raise FloatingPointError(f"non-finite values produced by {name}")


def record(name: str, data: np.ndarray, inputs: tuple[Tensor, ...], backward_fn: Callable) -> Tensor:
    """Wrap an op result, registering ``backward_fn`` when any input needs grads."""
    _check_finite(name, data)
    out = Tensor(data, dtype=data.dtype)
    tape = active_tape()
    if tape is not None and any(t.requires_grad for t in inputs):
        tape.record(out, inputs, backward_fn)
    return out


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    return np.asarray(g.sum()).reshape(shape)


def _is_scalar(t: Tensor) -> bool:
    return t.data.ndim == 0 or t.shape == (1,)


def _check_broadcast(kind: str, a: Tensor, b: Tensor) -> None:
    if a.shape == b.shape or _is_scalar(a) or _is_scalar(b):
        return
    raise ValueError(f"{kind}: incompatible shapes {a.shape} and {b.shape}")


def sigmoid_np(x: np.ndarray) -> np.ndarray:
    # exp overflow for very negative x yields 1/inf = 0, which is the right limit
    with np.errstate(over="ignore"):
        return 1.0 / (1.0 + np.exp(-x))


def silu_np(x: np.ndarray) -> np.ndarray:
    return x * sigmoid_np(x)


def elementwise(op_kind: str, a, b=None) -> Tensor:
    """Apply one of add, sub, mul, sigmoid, silu, tanh."""
    a = as_tensor(a)
    if op_kind in ("add", "sub", "mul"):
        if b is None:
            raise ValueError(f"{op_kind} needs two operands")
        b = as_tensor(b)
        _check_broadcast(op_kind, a, b)
        x, y = a.data, b.data
        if op_kind == "add":
            data = x + y

            def bw(g):
                return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)
        elif op_kind == "sub":
            data = x - y

            def bw(g):
                return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)
        else:
            data = x * y

            def bw(g):
                return _unbroadcast(g * y, a.shape), _unbroadcast(g * x, b.shape)
        return record(op_kind, np.asarray(data), (a, b), bw)

    if b is not None:
        raise ValueError(f"{op_kind} is unary")
    x = a.data
    if op_kind == "sigmoid":
        s = sigmoid_np(x)
        return record(op_kind, s, (a,), lambda g: (g * s * (1.0 - s),))
    if op_kind == "silu":
        s = sigmoid_np(x)
        return record(op_kind, x * s, (a,), lambda g: (g * s * (1.0 + x * (1.0 - s)),))
    if op_kind == "tanh":
        t = np.tanh(x)
        return record(op_kind, t, (a,), lambda g: (g * (1.0 - t * t),))
    raise ValueError(f"unknown elementwise op {op_kind!r}")


def add(a, b) -> Tensor:
    return elementwise("add", a, b)


def sub(a, b) -> Tensor:
    return elementwise("sub", a, b)


def mul(a, b) -> Tensor:
    return elementwise("mul", a, b)


def sigmoid(a) -> Tensor:
    return elementwise("sigmoid", a)


def silu(a) -> Tensor:
    return elementwise("silu", a)


def tanh(a) -> Tensor:
    return elementwise("tanh", a)


def _check_rowvec(kind: str, x: Tensor, v: Tensor) -> None:
    if v.data.ndim != 1 or x.shape[-1:] != v.shape:
        raise ValueError(f"{kind}: incompatible shapes {x.shape} and {v.shape}")


def add_rowvec(x, v) -> Tensor:
    """``x + v`` with ``v`` of shape (last_dim,) broadcast over leading axes."""
    x, v = as_tensor(x), as_tensor(v)
    _check_rowvec("add_rowvec", x, v)
    lead = tuple(range(x.data.ndim - 1))
    return record("add_rowvec", x.data + v.data, (x, v), lambda g: (g, g.sum(axis=lead)))


def mul_rowvec(x, v) -> Tensor:
    x, v = as_tensor(x), as_tensor(v)
    _check_rowvec("mul_rowvec", x, v)
    lead = tuple(range(x.data.ndim - 1))
    xd, vd = x.data, v.data
    return record("mul_rowvec", xd * vd, (x, v), lambda g: (g * vd, (g * xd).sum(axis=lead)))


def matmul(a, b) -> Tensor:
    """Dense ``a @ b`` with ``a`` of shape (..., r) and ``b`` of shape (r, c)."""
    a, b = as_tensor(a), as_tensor(b)
    if b.data.ndim != 2 or a.shape[-1] != b.shape[0]:
        raise ValueError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    ad, bd = a.data, b.data

    def bw(g):
        ga = g @ bd.T
        gb = ad.reshape(-1, ad.shape[-1]).T @ g.reshape(-1, g.shape[-1])
        return ga, gb

    return record("matmul", ad @ bd, (a, b), bw)


def rms_normalize(x, gain, eps: float = 1e-6) -> Tensor:
    """``x / sqrt(mean(x**2) + eps) * gain`` over the last axis."""
    x, gain = as_tensor(x), as_tensor(gain)
    _check_rowvec("rmsnorm", x, gain)
    xd, gd = x.data, gain.data
    r = 1.0 / np.sqrt(np.mean(xd * xd, axis=-1, keepdims=True) + eps)
    xhat = xd * r
    lead = tuple(range(xd.ndim - 1))

    def bw(g):
        dxhat = g * gd
        dx = r * (dxhat - xhat * np.mean(dxhat * xhat, axis=-1, keepdims=True))
        return dx, (g * xhat).sum(axis=lead)

    return record("rmsnorm", xhat * gd, (x, gain), bw)


def softmax_axis0(m) -> Tensor:
    m = as_tensor(m)
    if m.data.ndim != 2 or m.shape[0] < 1:
        raise ValueError(f"softmax_axis0 expects an N x d matrix, got {m.shape}")
    z = m.data - m.data.max(axis=0, keepdims=True)
    e = np.exp(z)
    p = e / e.sum(axis=0, keepdims=True)

    def bw(g):
        return (p * (g - (g * p).sum(axis=0, keepdims=True)),)

    return record("softmax_axis0", p, (m,), bw)


def cumsum_axis0(m) -> Tensor:
    m = as_tensor(m)
    if m.data.ndim != 2 or m.shape[0] < 1:
        raise ValueError(f"cumsum_axis0 expects an N x d matrix, got {m.shape}")

    def bw(g):
        return (np.cumsum(g[::-1], axis=0)[::-1],)

    return record("cumsum_axis0", np.cumsum(m.data, axis=0), (m,), bw)


def row(m, i: int) -> Tensor:
    """Row ``i`` of a matrix as a vector."""
    m = as_tensor(m)

    def bw(g):
        out = np.zeros_like(m.data)
        out[i] = g
        return (out,)

    return record("row", m.data[i].copy(), (m,), bw)


def repeat_rows(v, n: int) -> Tensor:
    """Stack ``n`` copies of vector ``v`` into an (n, d) matrix."""
    v = as_tensor(v)
    if v.data.ndim != 1:
        raise ValueError(f"repeat_rows expects a vector, got {v.shape}")
    return record("repeat_rows", np.tile(v.data, (n, 1)), (v,), lambda g: (g.sum(axis=0),))


def embed(table, ids: np.ndarray) -> Tensor:
    table = as_tensor(table)
    ids = np.asarray(ids)
    vocab = table.shape[0]
    if ids.size and (ids.min() < 0 or ids.max() >= vocab):
        raise ValueError(f"token id out of range [0, {vocab})")

    def bw(g):
        out = np.zeros_like(table.data)
        np.add.at(out, ids.reshape(-1), g.reshape(-1, g.shape[-1]))
        return (out,)

    return record("embed", table.data[ids], (table,), bw)


def log_softmax_np(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def cross_entropy(logits, targets: np.ndarray) -> Tensor:
    """Mean next-token cross-entropy; ``logits`` (..., V), ``targets`` (...)."""
    logits = as_tensor(logits)
    targets = np.asarray(targets)
    if logits.shape[:-1] != targets.shape:
        raise ValueError(f"cross_entropy: logits {logits.shape} vs targets {targets.shape}")
    lp = log_softmax_np(logits.data)
    flat = lp.reshape(-1, lp.shape[-1])
    t = targets.reshape(-1)
    n = t.size
    loss = -flat[np.arange(n), t].mean()

    def bw(g):
        grad = np.exp(flat)
        grad[np.arange(n), t] -= 1.0
        return ((grad * (g / n)).reshape(logits.shape).astype(logits.data.dtype),)

    return record("cross_entropy", np.asarray(loss, dtype=logits.data.dtype), (logits,), bw)


def sum(x) -> Tensor:  # noqa: A001 - mirrors numpy naming
    x = as_tensor(x)
    return record("sum", np.asarray(x.data.sum()), (x,), lambda g: (np.broadcast_to(g, x.shape).copy(),))


def mean(x) -> Tensor:
    x = as_tensor(x)
    n = x.size
    return record("mean", np.asarray(x.data.mean()), (x,), lambda g: (np.full(x.shape, g / n, dtype=x.data.dtype),))
