"""Small reverse-mode autodiff over float64 numpy arrays.

A :class:`Tensor` is an immutable wrapper around a float64 array.  Primitive
ops live at module level; while a :class:`Tape` is active every op whose
inputs require gradients appends a record holding its inputs and a backward
closure.  :func:`backward` replays the tape in reverse.

    with Tape() as tape:
        y = matmul(x, w)
        loss = mean(y)
    grads = backward(tape, loss)
    grads[w]   # ndarray, same shape as w
"""

from __future__ import annotations

import threading
from contextlib import contextmanager
from typing import Callable, Iterable, Sequence

import numpy as np

LN_EPS = 1e-5

_state = threading.local()


class ShapeError(ValueError):
    pass


class NonFiniteError(FloatingPointError):
    pass


class TapeError(RuntimeError):
    pass


def _active_tape() -> "Tape | None":
    return getattr(_state, "tape", None)


def _mac_counter() -> "list[int] | None":
    return getattr(_state, "macs", None)


def _count_macs(n: int) -> None:
    counter = _mac_counter()
    if counter is not None:
        counter[0] += int(n)


@contextmanager
def count_macs():
    """Count multiply-accumulates of every matmul-type op in the block.

    Yields a one-element list whose entry is the running total.
    """
    prev = _mac_counter()
    box = [0]
    _state.macs = box
    try:
        yield box
    finally:
        _state.macs = prev


class Tensor:
    __slots__ = ("data", "requires_grad", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None, _owned: bool = False):
        arr = np.asarray(data, dtype=np.float64)
        if not _owned and arr is data and arr.flags.writeable:
            arr = arr.copy()  # the caller keeps a mutable handle; take a private copy
        if not np.isfinite(arr).all():
            raise NonFiniteError(f"non-finite values in tensor {name or ''}".strip())
        arr.flags.writeable = False
        self.data = arr
        self.requires_grad = requires_grad
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() on tensor of shape {self.shape}")
        return float(self.data.reshape(()))

    def __repr__(self) -> str:
        tag = f" {self.name}" if self.name else ""
        return f"Tensor{tag}(shape={self.shape}, requires_grad={self.requires_grad})"

    # operator sugar, kept minimal
    def __add__(self, other):
        return add(self, _lift(other))

    def __radd__(self, other):
        return add(_lift(other), self)

    def __sub__(self, other):
        return sub(self, _lift(other))

    def __mul__(self, other):
        return mul(self, _lift(other))

    def __rmul__(self, other):
        return mul(_lift(other), self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __neg__(self):
        return scale(self, -1.0)


def _lift(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def param(data, name: str | None = None) -> Tensor:
    """Leaf tensor that receives a gradient."""
    return Tensor(data, requires_grad=True, name=name)


def const(data) -> Tensor:
    return Tensor(data, requires_grad=False)


class _Record:
    __slots__ = ("out", "inputs", "backward")

    def __init__(self, out: Tensor, inputs: tuple[Tensor, ...], backward: Callable):
        self.out = out
        self.inputs = inputs
        self.backward = backward


class Tape:
    """Ordered record of primitive ops; usable once for :func:`backward`."""

    def __init__(self):
        self.records: list[_Record] = []
        self.consumed = False
        self._prev = None

    def __enter__(self) -> "Tape":
        self._prev = _active_tape()
        _state.tape = self
        return self

    def __exit__(self, *exc) -> None:
        _state.tape = self._prev
        self._prev = None

    def __len__(self) -> int:
        return len(self.records)


@contextmanager
def no_record():
    """Suspend recording, e.g. for evaluation inside a training loop."""
    prev = _active_tape()
    _state.tape = None
    try:
        yield
    finally:
        _state.tape = prev


def _emit(out_data: np.ndarray, inputs: tuple[Tensor, ...], backward: Callable) -> Tensor:
    needs = any(t.requires_grad for t in inputs)
    out = Tensor(out_data, requires_grad=needs, _owned=True)
    tape = _active_tape()
    if needs and tape is not None:
        if tape.consumed:
            raise TapeError("recording onto a tape that was already consumed")
        tape.records.append(_Record(out, inputs, backward))
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _check_broadcast(a: Tensor, b: Tensor, op: str) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: incompatible shapes {a.shape} and {b.shape}") from None


# ---------------------------------------------------------------------------
# elementwise
# ---------------------------------------------------------------------------


def add(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast(a, b, "add")
    return _emit(
        a.data + b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
    )


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast(a, b, "sub")
    return _emit(
        a.data - b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)),
    )


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast(a, b, "mul")
    return _emit(
        a.data * b.data,
        (a, b),
        lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
    )


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)
    return _emit(a.data * c, (a,), lambda g: (g * c,))


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return _emit(np.where(mask, a.data, 0.0), (a,), lambda g: (g * mask,))


def abs_(a: Tensor) -> Tensor:
    # subgradient 0 at the kink
    sign = np.sign(a.data)
    return _emit(np.abs(a.data), (a,), lambda g: (g * sign,))


# ---------------------------------------------------------------------------
# linear algebra
# ---------------------------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Batched matrix product with numpy broadcasting on leading axes."""
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    try:
        batch = np.broadcast_shapes(a.shape[:-2], b.shape[:-2])
    except ValueError:
        raise ShapeError(f"matmul: incompatible batch dims {a.shape} and {b.shape}") from None
    m, k = a.shape[-2:]
    n = b.shape[-1]
    _count_macs(int(np.prod(batch, dtype=np.int64)) * m * k * n)

    def back(g):
        ga = gb = None
        if a.requires_grad:
            ga = _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape)
        if b.requires_grad:
            gb = _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape)
        return ga, gb

    return _emit(a.data @ b.data, (a, b), back)


def linear(x: Tensor, w: Tensor) -> Tensor:
    """x @ w.T for a weight stored as (out, in)."""
    if w.ndim != 2 or x.shape[-1] != w.shape[1]:
        raise ShapeError(f"linear: input {x.shape} does not match weight {w.shape}")
    rows = int(np.prod(x.shape[:-1], dtype=np.int64))
    _count_macs(rows * w.shape[0] * w.shape[1])

    def back(g):
        gx = g @ w.data if x.requires_grad else None
        gw = None
        if w.requires_grad:
            gw = g.reshape(-1, w.shape[0]).T @ x.data.reshape(-1, w.shape[1])
        return gx, gw

    return _emit(x.data @ w.data.T, (x, w), back)


def dot(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 1 or a.shape != b.shape:
        raise ShapeError(f"dot: need equal 1-d shapes, got {a.shape} and {b.shape}")
    _count_macs(a.shape[0])
    return _emit(np.dot(a.data, b.data), (a, b), lambda g: (g * b.data, g * a.data))


# ---------------------------------------------------------------------------
# reductions and shape ops
# ---------------------------------------------------------------------------


def sum_(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    def back(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _emit(a.data.sum(axis=axis, keepdims=keepdims), (a,), back)


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    n = a.data.size if axis is None else np.prod([a.shape[i] for i in np.atleast_1d(axis)])
    return scale(sum_(a, axis=axis, keepdims=keepdims), 1.0 / float(n))


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot view {a.shape} as {tuple(shape)}") from None
    return _emit(out, (a,), lambda g: (g.reshape(a.shape),))


def transpose(a: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return _emit(np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inv),))


def slice_(a: Tensor, index) -> Tensor:
    """Basic or fancy indexing; the backward scatters (with accumulation)."""
    out = a.data[index]

    def back(g):
        full = np.zeros(a.shape)
        np.add.at(full, index, g)
        return (full,)

    return _emit(out, (a,), back)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = tuple(tensors)
    if not tensors:
        raise ShapeError("concat: empty input")
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError as e:
        raise ShapeError(f"concat: {e}") from None
    sizes = [t.shape[axis] for t in tensors]
    cuts = np.cumsum(sizes)[:-1]
    return _emit(out, tensors, lambda g: tuple(np.split(g, cuts, axis=axis)))


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = tuple(tensors)
    if not tensors:
        raise ShapeError("stack: empty input")
    if len({t.shape for t in tensors}) != 1:
        raise ShapeError(f"stack: shapes differ: {[t.shape for t in tensors]}")
    out = np.stack([t.data for t in tensors], axis=axis)
    n = len(tensors)
    return _emit(
        out,
        tensors,
        lambda g: tuple(np.take(g, i, axis=axis) for i in range(n)),
    )


def embedding(table: Tensor, ids) -> Tensor:
    ids = np.asarray(ids, dtype=np.int64)
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise ShapeError(f"embedding: id out of range for table of {table.shape[0]} rows")
    out = table.data[ids]

    def back(g):
        full = np.zeros(table.shape)
        np.add.at(full, ids.reshape(-1), g.reshape(-1, table.shape[1]))
        return (full,)

    return _emit(out, (table,), back)


# ---------------------------------------------------------------------------
# normalisation and probabilities
# ---------------------------------------------------------------------------


def _masked_max(x: np.ndarray, mask: np.ndarray | None) -> np.ndarray:
    if mask is None:
        return x.max(axis=-1, keepdims=True)
    m = np.where(mask, x, -np.inf).max(axis=-1, keepdims=True)
    return np.where(np.isfinite(m), m, 0.0)


def softmax(a: Tensor, mask: np.ndarray | None = None) -> Tensor:
    """Softmax over the last axis.  Entries where ``mask`` is False get
    probability exactly zero and never influence the kept entries."""
    x = a.data
    if mask is not None:
        mask = np.broadcast_to(np.asarray(mask, dtype=bool), x.shape)
    shifted = x - _masked_max(x, mask)
    e = np.exp(shifted) if mask is None else np.where(mask, np.exp(np.where(mask, shifted, 0.0)), 0.0)
    p = e / e.sum(axis=-1, keepdims=True)

    def back(g):
        return (p * (g - (g * p).sum(axis=-1, keepdims=True)),)

    return _emit(p, (a,), back)


def log_softmax(a: Tensor) -> Tensor:
    x = a.data
    shifted = x - x.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    out = shifted - lse
    p = np.exp(out)
    return _emit(out, (a,), lambda g: (g - p * g.sum(axis=-1, keepdims=True),))


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = LN_EPS) -> Tensor:
    h = x.shape[-1]
    if gain.shape != (h,) or bias.shape != (h,):
        raise ShapeError(f"layer_norm: gain/bias must be ({h},)")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gain.data + bias.data

    def back(g):
        gx = None
        if x.requires_grad:
            gh = g * gain.data
            gx = inv * (gh - gh.mean(axis=-1, keepdims=True) - xhat * (gh * xhat).mean(axis=-1, keepdims=True))
        gg = (g * xhat).reshape(-1, h).sum(axis=0) if gain.requires_grad else None
        gb = g.reshape(-1, h).sum(axis=0) if bias.requires_grad else None
        return gx, gg, gb

    return _emit(out, (x, gain, bias), back)


def cross_entropy(logits: Tensor, targets, weights=None) -> Tensor:
    """Weighted sum of -log softmax(logits)[target] over rows.

    ``logits`` is (..., V); ``targets`` has the leading shape.  Without
    weights the result is the mean over rows.
    """
    x = logits.data
    t = np.asarray(targets, dtype=np.int64)
    if t.shape != x.shape[:-1]:
        raise ShapeError(f"cross_entropy: targets {t.shape} vs logits {x.shape}")
    if t.size and (t.min() < 0 or t.max() >= x.shape[-1]):
        raise ShapeError("cross_entropy: target index out of range")
    w = np.full(t.shape, 1.0 / max(t.size, 1)) if weights is None else np.asarray(weights, dtype=np.float64)
    shifted = x - x.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=-1))
    picked = np.take_along_axis(shifted, t[..., None], axis=-1)[..., 0]
    nll = lse - picked
    loss = float((w * nll).sum())

    def back(g):
        p = np.exp(shifted - lse[..., None])
        onehot = np.zeros_like(p)
        np.put_along_axis(onehot, t[..., None], 1.0, axis=-1)
        return (g * w[..., None] * (p - onehot),)

    return _emit(np.asarray(max(loss, 0.0)), (logits,), back)


# ---------------------------------------------------------------------------
# backward
# ---------------------------------------------------------------------------


class Gradients:
    """Gradient map keyed by tensor identity; unknown tensors map to zeros."""

    def __init__(self, grads: dict[int, np.ndarray]):
        self._grads = grads

    def __getitem__(self, t: Tensor) -> np.ndarray:
        g = self._grads.get(id(t))
        return np.zeros(t.shape) if g is None else g

    def __contains__(self, t: Tensor) -> bool:
        return id(t) in self._grads


def backward(tape: Tape, loss: Tensor) -> Gradients:
    if tape.consumed:
        raise TapeError("tape already consumed")
    if loss.data.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    tape.consumed = True
    grads: dict[int, np.ndarray] = {id(loss): np.ones(loss.shape)}
    for rec in reversed(tape.records):
        g = grads.pop(id(rec.out), None)
        if g is None:
            continue
        in_grads = rec.backward(g)
        for inp, gi in zip(rec.inputs, in_grads):
            if gi is None or not inp.requires_grad:
                continue
            key = id(inp)
            prev = grads.get(key)
            grads[key] = gi if prev is None else prev + gi
    tape.records.clear()
    return Gradients(grads)


def value_and_grad(fn: Callable[..., Tensor], params: Iterable[Tensor]):
    """Run ``fn`` under a fresh tape; return (loss value, [grad per param])."""
    params = list(params)
    with Tape() as tape:
        loss = fn()
    grads = backward(tape, loss)
    return loss.item(), [grads[p] for p in params]


def grad_check(f: Callable[[Tensor], Tensor], x, step: float = 1e-5) -> float:
    """Max over coordinates of |analytic - central difference| / max(1, |analytic|)."""
    x0 = np.array(x.data if isinstance(x, Tensor) else x, dtype=np.float64)
    xt = param(x0)
    with Tape() as tape:
        y = f(xt)
    analytic = backward(tape, y)[xt]
    if not np.isfinite(y.data).all():
        raise NonFiniteError("grad_check: non-finite evaluation")
    flat = x0.reshape(-1)
    numeric = np.empty_like(flat)
    with no_record():
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            fp = f(Tensor(x0)).item()
            flat[i] = orig - step
            fm = f(Tensor(x0)).item()
            flat[i] = orig
            numeric[i] = (fp - fm) / (2 * step)
    a = analytic.reshape(-1)
    if a.size == 0:
        return 0.0
    return float(np.max(np.abs(a - numeric) / np.maximum(1.0, np.abs(a))))
