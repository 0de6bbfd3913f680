"""Dense numpy-backed tensors with define-by-run reverse-mode autodiff.

Every differentiable primitive records an :class:`Op` on its output.
:func:`backward` linearises the recorded graph into a :class:`Tape`
(topological order) and walks it once in reverse, accumulating gradients
into leaf tensors.
"""

from __future__ import annotations

import contextlib
import threading
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

_DTYPES = {"float64": np.float64, "float32": np.float32}
_state = threading.local()


def _get(name, default):
    return getattr(_state, name, default)


def get_default_dtype():
    return _get("dtype", np.float64)


def set_default_dtype(dtype) -> None:
    _state.dtype = _resolve_dtype(dtype)


def _resolve_dtype(dtype):
    if isinstance(dtype, str):
        if dtype not in _DTYPES:
            raise ValueError(f"unsupported precision {dtype!r}; expected one of {sorted(_DTYPES)}")
        return _DTYPES[dtype]
    dtype = np.dtype(dtype).type
    if dtype not in (np.float64, np.float32):
        raise ValueError(f"unsupported dtype {dtype}")
    return dtype


@contextlib.contextmanager
def precision(dtype):
    """Temporarily switch the dtype used for newly created tensors."""
    prev = get_default_dtype()
    set_default_dtype(dtype)
    try:
        yield
    finally:
        _state.dtype = prev


def is_grad_enabled() -> bool:
    return _get("grad_enabled", True)


@contextlib.contextmanager
def no_grad():
    """Disable op recording (inference, frozen sub-networks)."""
    prev = is_grad_enabled()
    _state.grad_enabled = False
    try:
        yield
    finally:
        _state.grad_enabled = prev


@dataclass(eq=False)
class Op:
    name: str
    inputs: tuple
    # id only: a strong reference would form a tensor <-> op cycle
    output_id: int
    backward_fn: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None
    released: bool = False


@dataclass
class Tape:
    """Recorded operations in topological order (inputs before outputs)."""

    ops: list[Op] = field(default_factory=list)

    @classmethod
    def from_output(cls, out: "Tensor") -> "Tape":
        order: list[Op] = []
        seen: set[int] = set()
        if out._op is None:
            return cls(order)
        stack = [(out._op, False)]
        while stack:
            op, expanded = stack.pop()
            if expanded:
                order.append(op)
                continue
            if id(op) in seen:
                continue
            seen.add(id(op))
            stack.append((op, True))
            for inp in op.inputs:
                if inp._op is not None and id(inp._op) not in seen:
                    stack.append((inp._op, False))
        return cls(order)

    def __len__(self) -> int:
        return len(self.ops)


class Tensor:
    """N-dimensional float array with an optional gradient buffer."""

    __array_priority__ = 1000

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        dtype = _resolve_dtype(dtype) if dtype is not None else get_default_dtype()
        self.data = np.asarray(data, dtype=dtype)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._op: Op | None = None

    @classmethod
    def _wrap(cls, arr: np.ndarray) -> "Tensor":
        t = cls.__new__(cls)
        t.data = arr
        t.requires_grad = False
        t.grad = None
        t._op = None
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
    def dtype(self):
        return self.data.dtype

    @property
    def is_leaf(self) -> bool:
        return self._op is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def detach(self) -> "Tensor":
        return Tensor._wrap(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype.name}{flag})"

    def __len__(self) -> int:
        return self.shape[0]

    # -- operators -----------------------------------------------------

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
        return getitem(self, index)

    def sum(self, axis=None, keepdims=False):
        return reduce(self, axis, "sum", keepdims)

    def mean(self, axis=None, keepdims=False):
        return reduce(self, axis, "mean", keepdims)

    def max(self, axis=None, keepdims=False):
        return reduce(self, axis, "max", keepdims)

    def exp(self):
        return exp(self)

    def log(self):
        return log(self)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    def backward(self, grad=None) -> None:
        backward(self, grad)


def as_tensor(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(x)


def _lift(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else get_default_dtype()
    return Tensor._wrap(np.asarray(x, dtype=dtype))


def record(name: str, out: np.ndarray, inputs: Iterable[Tensor], backward_fn) -> Tensor:
    """Wrap ``out`` as a tensor and, if needed, attach its backward rule.

    ``backward_fn`` receives the output gradient and returns one gradient
    (or ``None``) per input, each already shaped like that input.
    """
    inputs = tuple(inputs)
    t = Tensor._wrap(out)
    if is_grad_enabled() and any(i.requires_grad for i in inputs):
        t.requires_grad = True
        t._op = Op(name, inputs, id(t), backward_fn)
    return t


def broadcast_shapes(a: tuple, b: tuple) -> tuple:
    try:
        return np.broadcast_shapes(a, b)
    except ValueError:
        raise ValueError(f"cannot broadcast shapes {a} and {b}") from None


def unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum ``grad`` over axes that broadcasting expanded to reach ``shape``."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


# -- elementwise ---------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = _lift(a, b if isinstance(b, Tensor) else None), _lift(b, a if isinstance(a, Tensor) else None)
    broadcast_shapes(a.shape, b.shape)
    sa, sb = a.shape, b.shape
    return record("add", a.data + b.data, (a, b), lambda g: (unbroadcast(g, sa), unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a, b = _lift(a, b if isinstance(b, Tensor) else None), _lift(b, a if isinstance(a, Tensor) else None)
    broadcast_shapes(a.shape, b.shape)
    sa, sb = a.shape, b.shape
    return record("sub", a.data - b.data, (a, b), lambda g: (unbroadcast(g, sa), unbroadcast(-g, sb)))


def mul(a, b) -> Tensor:
    a, b = _lift(a, b if isinstance(b, Tensor) else None), _lift(b, a if isinstance(a, Tensor) else None)
    broadcast_shapes(a.shape, b.shape)
    ad, bd = a.data, b.data

    def bw(g):
        return (
            unbroadcast(g * bd, ad.shape) if a.requires_grad else None,
            unbroadcast(g * ad, bd.shape) if b.requires_grad else None,
        )

    return record("mul", ad * bd, (a, b), bw)


def div(a, b) -> Tensor:
    a, b = _lift(a, b if isinstance(b, Tensor) else None), _lift(b, a if isinstance(a, Tensor) else None)
    broadcast_shapes(a.shape, b.shape)
    ad, bd = a.data, b.data
    out = ad / bd

    def bw(g):
        return (
            unbroadcast(g / bd, ad.shape) if a.requires_grad else None,
            unbroadcast(-g * out / bd, bd.shape) if b.requires_grad else None,
        )

    return record("div", out, (a, b), bw)


def neg(a) -> Tensor:
    a = _lift(a)
    return record("neg", -a.data, (a,), lambda g: (-g,))


def exp(a) -> Tensor:
    a = _lift(a)
    out = np.exp(a.data)
    return record("exp", out, (a,), lambda g: (g * out,))


def log(a) -> Tensor:
    a = _lift(a)
    ad = a.data
    return record("log", np.log(ad), (a,), lambda g: (g / ad,))


def clip(a, low=None, high=None) -> Tensor:
    """Clamp values; gradient flows only where the input was inside the bounds."""
    a = _lift(a)
    out = np.clip(a.data, low, high)
    inside = out == a.data
    return record("clip", out, (a,), lambda g: (g * inside,))


# -- linear algebra ------------------------------------------------------


def matmul(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ValueError(f"matmul needs at least 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ValueError(f"matmul inner dimensions differ: {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data

    def bw(g):
        ga = unbroadcast(g @ np.swapaxes(bd, -1, -2), ad.shape) if a.requires_grad else None
        gb = unbroadcast(np.swapaxes(ad, -1, -2) @ g, bd.shape) if b.requires_grad else None
        return ga, gb

    return record("matmul", ad @ bd, (a, b), bw)


# -- reductions ----------------------------------------------------------


def _norm_axes(axis, ndim: int) -> tuple[int, ...]:
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    out = []
    for ax in axis:
        if not -ndim <= ax < ndim:
            raise ValueError(f"axis {ax} is out of range for a tensor of rank {ndim}")
        out.append(ax % ndim)
    if len(set(out)) != len(out):
        raise ValueError(f"repeated axis in {axis}")
    return tuple(sorted(out))


def reduce(a, axis=None, kind: str = "sum", keepdims: bool = False) -> Tensor:
    """Sum, mean or max over ``axis``; max routes gradient to the first maximum."""
    a = _lift(a)
    axes = _norm_axes(axis, a.ndim)
    ad = a.data
    kept_shape = tuple(1 if i in axes else n for i, n in enumerate(ad.shape))
    if kind in ("sum", "mean"):
        out = ad.sum(axis=axes, keepdims=True)
        count = int(np.prod([ad.shape[i] for i in axes])) if axes else 1
        scale = 1.0 if kind == "sum" else 1.0 / count
        if kind == "mean":
            out = out * scale

        def bw(g):
            return (np.broadcast_to(g.reshape(kept_shape) * scale, ad.shape).astype(ad.dtype, copy=True),)

    elif kind == "max":
        if ad.size == 0:
            raise ValueError("max of an empty tensor")
        rest = tuple(i for i in range(ad.ndim) if i not in axes)
        moved = np.transpose(ad, rest + axes)
        flat = moved.reshape(moved.shape[: len(rest)] + (-1,))
        idx = flat.argmax(axis=-1)
        out = np.take_along_axis(flat, idx[..., None], axis=-1)[..., 0].reshape(kept_shape)
        inv = np.argsort(rest + axes)

        def bw(g):
            gflat = np.zeros_like(flat)
            np.put_along_axis(gflat, idx[..., None], g.reshape(idx.shape + (1,)), axis=-1)
            return (np.transpose(gflat.reshape(moved.shape), inv),)

    else:
        raise ValueError(f"unknown reduction {kind!r}")
    if not keepdims:
        out = out.reshape(tuple(n for i, n in enumerate(ad.shape) if i not in axes))
    return record(kind, out, (a,), bw)


def sum(a, axis=None, keepdims=False) -> Tensor:  # noqa: A001
    return reduce(a, axis, "sum", keepdims)


def mean(a, axis=None, keepdims=False) -> Tensor:
    return reduce(a, axis, "mean", keepdims)


def max(a, axis=None, keepdims=False) -> Tensor:  # noqa: A001
    return reduce(a, axis, "max", keepdims)


# -- shape manipulation --------------------------------------------------


def reshape(a, shape) -> Tensor:
    a = _lift(a)
    src = a.shape
    return record("reshape", a.data.reshape(shape), (a,), lambda g: (g.reshape(src),))


def transpose(a, axes=None) -> Tensor:
    a = _lift(a)
    axes = tuple(range(a.ndim))[::-1] if axes is None else tuple(axes)
    inv = np.argsort(axes)
    return record("transpose", np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inv),))


def getitem(a, index) -> Tensor:
    a = _lift(a)
    src_shape, dtype = a.shape, a.dtype

    def bw(g):
        out = np.zeros(src_shape, dtype=dtype)
        np.add.at(out, index, g)
        return (out,)

    return record("getitem", a.data[index], (a,), bw)


def concat(tensors: Sequence, axis: int = 0) -> Tensor:
    tensors = [_lift(t) for t in tensors]
    out = np.concatenate([t.data for t in tensors], axis=axis)
    bounds = np.cumsum([0] + [t.shape[axis] for t in tensors])

    def bw(g):
        return tuple(np.take(g, np.arange(lo, hi), axis=axis) for lo, hi in zip(bounds[:-1], bounds[1:]))

    return record("concat", out, tensors, bw)


def gather(a, index: np.ndarray, axis: int = -1) -> Tensor:
    """``take_along_axis`` with the index broadcast as a single slot on ``axis``."""
    a = _lift(a)
    idx = np.expand_dims(np.asarray(index, dtype=np.intp), axis)
    out = np.take_along_axis(a.data, idx, axis=axis)
    out = np.squeeze(out, axis=axis)

    def bw(g):
        full = np.zeros_like(a.data)
        np.put_along_axis(full, idx, np.expand_dims(g, axis), axis=axis)
        return (full,)

    return record("gather", out, (a,), bw)


# -- backward ------------------------------------------------------------


def backward(loss: Tensor, grad=None) -> None:
    """Populate ``.grad`` on every leaf that requires it.

    The graph is released afterwards; a second call on the same graph
    raises until a new forward pass is recorded.
    """
    if loss.size != 1 and grad is None:
        raise ValueError(f"backward() needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise RuntimeError("loss does not require grad; nothing was recorded")
    seed = np.ones_like(loss.data) if grad is None else np.asarray(grad, dtype=loss.dtype).reshape(loss.shape)
    if loss._op is None:
        loss.grad = seed.copy() if loss.grad is None else loss.grad + seed
        return
    tape = Tape.from_output(loss)
    if any(op.released for op in tape.ops):
        raise RuntimeError("backward() called twice on the same graph; run the forward pass again")
    grads: dict[int, np.ndarray] = {id(loss): seed}
    for op in reversed(tape.ops):
        g = grads.pop(op.output_id, None)
        fn = op.backward_fn
        op.released = True
        op.backward_fn = None
        if g is None:
            continue
        for inp, ig in zip(op.inputs, fn(g)):
            if ig is None or not inp.requires_grad:
                continue
            if inp._op is None:
                inp.grad = ig.astype(inp.dtype, copy=True) if inp.grad is None else inp.grad + ig
            else:
                key = id(inp)
                grads[key] = ig if key not in grads else grads[key] + ig
    # drop the graph edges so intermediates are freed; the loss's op stays marked released
    for op in tape.ops:
        op.inputs = ()
