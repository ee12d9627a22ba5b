"""Dense float64 tensors with a reverse-mode recording tape.

A :class:`Tensor` wraps a row-major ``numpy`` array. Every primitive applied to
a tensor that requires gradients is appended to the active :class:`Tape`;
:func:`backward` walks that tape once, in exact reverse recording order, and
then drops it.

Broadcasting is deliberately narrow: operands either share a shape, one of
them is a Python scalar, or (for ``add``/``sub``) the second operand matches
the trailing axes of the first, which is all a bias add needs.
"""
from __future__ import annotations

import contextlib
import itertools
import threading
from typing import Callable, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "Tape",
    "ShapeError",
    "TapeError",
    "no_grad",
    "grad_enabled",
    "backward",
    "add",
    "sub",
    "mul",
    "matmul",
    "embedding",
    "softmax",
    "log_softmax",
    "sigmoid",
    "log_sigmoid",
    "exp",
    "log",
    "gelu",
    "layer_norm",
    "masked_fill",
    "concat",
    "take_last",
    "maximum",
]


class ShapeError(ValueError):
    """Operand shapes are incompatible for the requested primitive."""


class TapeError(RuntimeError):
    """The tape is missing, foreign or already consumed."""


BackwardFn = Callable[[np.ndarray], Sequence["np.ndarray | None"]]

_local = threading.local()


def _state():
    if not hasattr(_local, "stack"):
        _local.stack = []
        _local.default = None
        _local.enabled = True
    return _local


class Tape:
    """Ordered record of primitive applications on one thread.

    Use as a context manager to scope recording explicitly; otherwise a
    per-thread default tape is created on demand and replaced after each
    :func:`backward`.
    """

    _ids = itertools.count(1)

    def __init__(self) -> None:
        self.id = next(Tape._ids)
        self.records: list[tuple[Tensor, tuple[Tensor, ...], BackwardFn]] = []
        self.consumed = False

    def __len__(self) -> int:
        return len(self.records)

    def __enter__(self) -> "Tape":
        _state().stack.append(self)
        return self

    def __exit__(self, *exc) -> None:
        stack = _state().stack
        if stack and stack[-1] is self:
            stack.pop()

    def record(self, out: "Tensor", inputs: tuple["Tensor", ...], fn: BackwardFn) -> None:
        if self.consumed:
            raise TapeError(f"tape {self.id} was already consumed by backward()")
        out.requires_grad = True
        out._tape = self
        self.records.append((out, inputs, fn))

    def backward(self, loss: "Tensor") -> None:
        if loss.size != 1:
            raise ShapeError(f"backward() needs a scalar loss, got shape {loss.shape}")
        if self.consumed:
            raise TapeError(f"tape {self.id} was already consumed by backward()")
        if loss._tape is not self:
            raise TapeError("loss was not recorded on this tape")
        loss.grad = np.ones_like(loss.data)
        for out, inputs, fn in reversed(self.records):
            g = out.grad
            if g is None:
                continue
            for t, gi in zip(inputs, fn(g)):
                if gi is None or not t.requires_grad:
                    continue
                t.grad = gi if t.grad is None else t.grad + gi
        self.records.clear()
        self.consumed = True
        st = _state()
        if st.default is self:
            st.default = None


def current_tape() -> Tape | None:
    st = _state()
    if not st.enabled:
        return None
    if st.stack:
        return st.stack[-1]
    if st.default is None:
        st.default = Tape()
    return st.default


def grad_enabled() -> bool:
    return _state().enabled


@contextlib.contextmanager
def no_grad():
    """Disable recording; used for inference so no tape grows unbounded."""
    st = _state()
    prev = st.enabled
    st.enabled = False
    try:
        yield
    finally:
        st.enabled = prev


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_tape", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None) -> None:
        self.data = np.array(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._tape: Tape | None = None
        self.name = name

    @classmethod
    def _wrap(cls, arr: np.ndarray) -> "Tensor":
        t = cls.__new__(cls)
        t.data = arr
        t.grad = None
        t.requires_grad = False
        t._tape = None
        t.name = None
        return t

    # -- introspection -------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def values(self) -> np.ndarray:
        """Flat row-major view of the data."""
        return self.data.reshape(-1)

    @property
    def tape_id(self) -> int | None:
        return None if self._tape is None else self._tape.id

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.size == 1 else _raise_nonscalar(self)

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor._wrap(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    # -- operators -----------------------------------------------------
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

    def __truediv__(self, other):
        if not np.isscalar(other):
            raise ShapeError("division is only defined by a scalar")
        return mul(self, 1.0 / float(other))

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        return mean(self, axis, keepdims)

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes) -> "Tensor":
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)


def _raise_nonscalar(t: Tensor):
    raise ShapeError(f"item() needs a single element, got shape {t.shape}")


def _as_tensor(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor._wrap(np.asarray(x, dtype=np.float64))


def _result(data: np.ndarray, inputs: tuple[Tensor, ...], fn: BackwardFn) -> Tensor:
    out = Tensor._wrap(data)
    if any(t.requires_grad for t in inputs):
        tape = current_tape()
        if tape is not None:
            tape.record(out, inputs, fn)
    return out


def backward(loss: Tensor) -> None:
    """Populate ``.grad`` on every requires-grad tensor reachable from ``loss``."""
    if loss.size != 1:
        raise ShapeError(f"backward() needs a scalar loss, got shape {loss.shape}")
    if loss._tape is None:
        raise TapeError("loss carries no tape: nothing it depends on requires grad")
    loss._tape.backward(loss)


def _trailing(big: tuple[int, ...], small: tuple[int, ...]) -> bool:
    return len(small) <= len(big) and big[len(big) - len(small):] == small


def _shape_report(op: str, *shapes) -> str:
    return f"{op}: incompatible shapes " + " vs ".join(str(tuple(s)) for s in shapes)


# -- elementwise ---------------------------------------------------------

def add(a: Tensor, b) -> Tensor:
    if np.isscalar(b):
        c = float(b)
        return _result(a.data + c, (a,), lambda g: (g,))
    b = _as_tensor(b)
    if a.shape == b.shape:
        return _result(a.data + b.data, (a, b), lambda g: (g, g))
    if _trailing(a.shape, b.shape):
        lead = a.ndim - b.ndim
        return _result(a.data + b.data, (a, b),
                       lambda g: (g, g.sum(axis=tuple(range(lead))) if lead else g))
    if _trailing(b.shape, a.shape):
        return add(b, a)
    raise ShapeError(_shape_report("add", a.shape, b.shape))


def neg(a: Tensor) -> Tensor:
    return _result(-a.data, (a,), lambda g: (-g,))


def sub(a: Tensor, b) -> Tensor:
    if np.isscalar(b):
        return add(a, -float(b))
    b = _as_tensor(b)
    if a.shape == b.shape or _trailing(a.shape, b.shape):
        return add(a, neg(b))
    raise ShapeError(_shape_report("sub", a.shape, b.shape))


def mul(a: Tensor, b) -> Tensor:
    if np.isscalar(b):
        c = float(b)
        return _result(a.data * c, (a,), lambda g: (g * c,))
    b = _as_tensor(b)
    if a.shape != b.shape:
        raise ShapeError(_shape_report("mul", a.shape, b.shape))
    ad, bd = a.data, b.data
    return _result(ad * bd, (a, b), lambda g: (g * bd, g * ad))


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return _result(out, (a,), lambda g: (g * out,))


def log(a: Tensor) -> Tensor:
    ad = a.data
    with np.errstate(divide="ignore"):
        out = np.log(ad)
    return _result(out, (a,), lambda g: (g / ad,))


def maximum(a: Tensor, floor: float) -> Tensor:
    """Elementwise ``max(a, floor)``; gradient flows only where ``a > floor``."""
    keep = a.data > floor
    return _result(np.where(keep, a.data, floor), (a,), lambda g: (g * keep,))


def _sigmoid(x: np.ndarray) -> np.ndarray:
    # sign-split: exp of a non-positive argument only
    e = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


def sigmoid(a: Tensor) -> Tensor:
    out = _sigmoid(a.data)
    return _result(out, (a,), lambda g: (g * out * (1.0 - out),))


def log_sigmoid(a: Tensor) -> Tensor:
    x = a.data
    out = -np.logaddexp(0.0, -x)
    return _result(out, (a,), lambda g: (g * _sigmoid(-x),))


_GELU_C = np.sqrt(2.0 / np.pi)


def gelu(a: Tensor) -> Tensor:
    """Tanh-approximated GELU."""
    x = a.data
    x2 = x * x
    th = np.tanh(_GELU_C * x * (1.0 + 0.044715 * x2))
    out = 0.5 * x * (1.0 + th)

    def fn(g):
        dinner = _GELU_C * (1.0 + 3 * 0.044715 * x2)
        return (g * (0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * dinner),)

    return _result(out, (a,), fn)


# -- reductions and shape ops -------------------------------------------

def _norm_axes(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(ax % ndim for ax in axis)


def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axes(axis, a.ndim)
    out = a.data.sum(axis=axes, keepdims=keepdims)
    shape = a.shape

    def fn(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, shape).copy(),)

    return _result(np.asarray(out), (a,), fn)


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axes(axis, a.ndim)
    n = int(np.prod([a.shape[ax] for ax in axes])) if axes else 1
    if n == 0:
        raise ShapeError(f"mean over an empty axis of shape {a.shape}")
    return mul(tsum(a, axis, keepdims), 1.0 / n)


def reshape(a: Tensor, shape) -> Tensor:
    src = a.shape
    out = a.data.reshape(shape)
    return _result(out, (a,), lambda g: (g.reshape(src),))


def transpose(a: Tensor, axes=None) -> Tensor:
    axes = tuple(reversed(range(a.ndim))) if axes is None else tuple(axes)
    inv = tuple(np.argsort(axes))
    return _result(a.data.transpose(axes), (a,), lambda g: (g.transpose(inv),))


def _is_basic(idx) -> bool:
    items = idx if isinstance(idx, tuple) else (idx,)
    return all(isinstance(i, (int, np.integer, slice)) or i is None or i is Ellipsis for i in items)


def getitem(a: Tensor, idx) -> Tensor:
    out = a.data[idx]
    shape = a.shape
    basic = _is_basic(idx)

    def fn(g):
        full = np.zeros(shape)
        if basic:
            full[idx] += g
        else:
            np.add.at(full, idx, g)
        return (full,)

    return _result(np.array(out), (a,), fn)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = tuple(tensors)
    if not tensors:
        raise ShapeError("concat of zero tensors")
    ref = tensors[0].shape
    ax = axis % len(ref)
    for t in tensors[1:]:
        if len(t.shape) != len(ref) or any(
            d1 != d2 for i, (d1, d2) in enumerate(zip(ref, t.shape)) if i != ax
        ):
            raise ShapeError(_shape_report("concat", *(t.shape for t in tensors)))
    sizes = [t.shape[ax] for t in tensors]
    cuts = np.cumsum(sizes)[:-1]
    out = np.concatenate([t.data for t in tensors], axis=ax)
    return _result(out, tensors, lambda g: tuple(np.split(g, cuts, axis=ax)))


# -- linear algebra ------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """``(..., m, k) @ (k, n)`` or ``(..., m, k) @ (..., k, n)`` with equal batch dims."""
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(_shape_report("matmul", a.shape, b.shape))
    if b.ndim > 2 and a.shape[:-2] != b.shape[:-2]:
        raise ShapeError(_shape_report("matmul", a.shape, b.shape))
    ad, bd = a.data, b.data
    out = ad @ bd

    def fn(g):
        ga = g @ np.swapaxes(bd, -1, -2)
        if bd.ndim == 2:
            gb = ad.reshape(-1, ad.shape[-1]).T @ g.reshape(-1, g.shape[-1])
        else:
            gb = np.swapaxes(ad, -1, -2) @ g
        return ga, gb

    return _result(out, (a, b), fn)


def embedding(table: Tensor, ids) -> Tensor:
    """Gather rows of ``table`` (shape ``(n, d)``) at integer ``ids``."""
    ids = np.asarray(ids)
    if table.ndim != 2:
        raise ShapeError(f"embedding table must be 2-D, got {table.shape}")
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise IndexError(f"embedding id out of range [0, {table.shape[0]})")
    shape = table.shape

    def fn(g):
        full = np.zeros(shape)
        np.add.at(full, ids.reshape(-1), g.reshape(-1, shape[1]))
        return (full,)

    return _result(table.data[ids], (table,), fn)


def take_last(a: Tensor, idx) -> Tensor:
    """``out[...] = a[..., idx[...]]``: one entry per leading position."""
    idx = np.asarray(idx, dtype=np.int64)
    if idx.shape != a.shape[:-1]:
        raise ShapeError(_shape_report("take_last", a.shape, idx.shape))
    ex = idx[..., None]
    out = np.take_along_axis(a.data, ex, axis=-1)[..., 0]
    shape = a.shape

    def fn(g):
        full = np.zeros(shape)
        np.put_along_axis(full, ex, g[..., None], axis=-1)
        return (full,)

    return _result(out, (a,), fn)


# -- normalizers ---------------------------------------------------------

def _check_last(a: Tensor, op: str) -> None:
    if a.ndim == 0 or a.shape[-1] == 0:
        raise ShapeError(f"{op} over an empty last axis (shape {a.shape})")


def softmax(a: Tensor) -> Tensor:
    _check_last(a, "softmax")
    x = a.data
    z = x - x.max(axis=-1, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=-1, keepdims=True)

    def fn(g):
        return (out * (g - (g * out).sum(axis=-1, keepdims=True)),)

    return _result(out, (a,), fn)


def log_softmax(a: Tensor) -> Tensor:
    _check_last(a, "log_softmax")
    x = a.data
    z = x - x.max(axis=-1, keepdims=True)
    out = z - np.log(np.exp(z).sum(axis=-1, keepdims=True))

    def fn(g):
        return (g - np.exp(out) * g.sum(axis=-1, keepdims=True),)

    return _result(out, (a,), fn)


def layer_norm(a: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    d = a.shape[-1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise ShapeError(_shape_report("layer_norm", a.shape, gamma.shape, beta.shape))
    x = a.data
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    inv = 1.0 / np.sqrt((xc**2).mean(axis=-1, keepdims=True) + eps)
    xhat = xc * inv
    gd = gamma.data
    out = xhat * gd + beta.data
    lead = tuple(range(a.ndim - 1))

    def fn(g):
        gx = g * gd
        dx = inv * (gx - gx.mean(axis=-1, keepdims=True)
                    - xhat * (gx * xhat).mean(axis=-1, keepdims=True))
        return dx, (g * xhat).sum(axis=lead), g.sum(axis=lead)

    return _result(out, (a, gamma, beta), fn)


def masked_fill(a: Tensor, mask, value: float) -> Tensor:
    """Replace entries where ``mask`` is true; ``mask`` matches trailing axes of ``a``."""
    mask = np.asarray(mask, dtype=bool)
    if not _trailing(a.shape, mask.shape):
        raise ShapeError(_shape_report("masked_fill", a.shape, mask.shape))
    keep = ~mask
    return _result(np.where(mask, value, a.data), (a,), lambda g: (g * keep,))
