"""Dense tensors with tape-based reverse-mode automatic differentiation.

Every differentiable primitive goes through :func:`apply`, which wraps the
numpy result in a :class:`Tensor` and, when any input requires a gradient,
appends an :class:`Op` to the active :class:`ComputationTape`.
:func:`backward` walks that tape in exact reverse recording order.
"""

from __future__ import annotations

import contextlib
import threading
from typing import Callable, Sequence

import numpy as np

from .errors import NonFiniteInput, NotScalar, ShapeMismatch

_local = threading.local()


def _ctx():
    if not hasattr(_local, "tape"):
        _local.tape = ComputationTape()
        _local.grad_enabled = True
        _local.strict = False
    return _local


class Op:
    __slots__ = ("kind", "inputs", "output", "backward")

    def __init__(self, kind, inputs, output, backward):
        self.kind = kind
        self.inputs = inputs
        self.output = output
        self.backward = backward

    def __repr__(self):
        return f"Op({self.kind}, out={self.output.shape})"


class ComputationTape:
    """Ordered record of primitive operations for one execution context."""

    def __init__(self):
        self.ops: list[Op] = []

    def record(self, op: Op) -> None:
        self.ops.append(op)

    def clear(self) -> None:
        self.ops.clear()

    def __len__(self):
        return len(self.ops)


def get_tape() -> ComputationTape:
    return _ctx().tape


def is_grad_enabled() -> bool:
    return _ctx().grad_enabled


@contextlib.contextmanager
def no_grad():
    ctx = _ctx()
    prev = ctx.grad_enabled
    ctx.grad_enabled = False
    try:
        yield
    finally:
        ctx.grad_enabled = prev


@contextlib.contextmanager
def strict_mode(enabled: bool = True):
    """Raise :class:`NonFiniteInput` whenever a primitive sees NaN or Inf."""
    ctx = _ctx()
    prev = ctx.strict
    ctx.strict = enabled
    try:
        yield
    finally:
        ctx.strict = prev


def set_strict(enabled: bool) -> None:
    _ctx().strict = bool(enabled)


class Tensor:
    """n-dimensional array of reals with an optional gradient."""

    __slots__ = ("data", "requires_grad", "grad", "_leaf", "name")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: str | None = None):
        if isinstance(data, Tensor):
            data = data.data
        if dtype is None:
            arr = np.asarray(data)
            if arr.dtype not in (np.float32, np.float64):
                arr = arr.astype(np.float64)
        else:
            arr = np.asarray(data, dtype=dtype)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._leaf = True
        self.name = name

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def is_leaf(self) -> bool:
        return self._leaf

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise NotScalar(f"tensor of shape {self.shape} is not a scalar")
        return float(self.data.reshape(-1)[0])

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    def __len__(self):
        return self.data.shape[0]

    # operator sugar; the primitives below do the work
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return take(self, index)

    def sum(self, axis=None):
        return tsum(self, axis)

    def mean(self):
        return mean(self)

    def relu(self):
        return relu(self)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        return transpose(self, axes or None)

    def backward(self) -> None:
        backward(self)


def as_tensor(x, dtype=None) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x, dtype=dtype)


def _check_finite(kind, inputs):
    for t in inputs:
        if not np.all(np.isfinite(t.data)):
            raise NonFiniteInput(f"{kind}: non-finite values in input of shape {t.shape}")


def apply(kind: str, out_data: np.ndarray, inputs: Sequence[Tensor],
          backward_fn: Callable[[np.ndarray], Sequence[np.ndarray | None]]) -> Tensor:
    """Wrap ``out_data`` and record the op when a gradient is needed.

    ``backward_fn`` maps the output gradient to one gradient (or None) per
    input, in input order.
    """
    ctx = _ctx()
    if ctx.strict:
        _check_finite(kind, inputs)
    out = Tensor(out_data)
    if ctx.grad_enabled and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        out._leaf = False
        ctx.tape.record(Op(kind, tuple(inputs), out, backward_fn))
    return out


def backward(loss: Tensor) -> None:
    """Populate ``.grad`` on every leaf that requires a gradient, then clear the tape."""
    if loss.data.size != 1:
        raise NotScalar(f"backward needs a scalar loss, got shape {loss.shape}")
    tape = get_tape()
    seed = np.ones_like(loss.data)
    if loss.is_leaf:
        if loss.requires_grad:
            _accumulate_leaf(loss, seed)
        tape.clear()
        return
    grads = {id(loss): seed}
    for op in reversed(tape.ops):
        g = grads.pop(id(op.output), None)
        if g is None:
            continue
        for t, gi in zip(op.inputs, op.backward(g)):
            if gi is None or not t.requires_grad:
                continue
            if t.is_leaf:
                _accumulate_leaf(t, gi)
            else:
                key = id(t)
                prev = grads.get(key)
                grads[key] = gi if prev is None else prev + gi
    tape.clear()


def _accumulate_leaf(t: Tensor, g: np.ndarray) -> None:
    g = np.asarray(g, dtype=t.data.dtype).reshape(t.shape)
    t.grad = g.copy() if t.grad is None else t.grad + g


# ---------------------------------------------------------------------------
# primitives

def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def _broadcast_shape(kind, a, b):
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeMismatch(f"{kind}: incompatible shapes", a.shape, b.shape) from None


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("add", a, b)
    sa, sb = a.shape, b.shape
    return apply("add", a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("sub", a, b)
    sa, sb = a.shape, b.shape
    return apply("sub", a.data - b.data, (a, b),
                 lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("mul", a, b)
    ad, bd = a.data, b.data
    return apply("mul", ad * bd, (a, b),
                 lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)))


def neg(a) -> Tensor:
    a = as_tensor(a)
    return apply("neg", -a.data, (a,), lambda g: (-g,))


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeMismatch("matmul: inner dimensions disagree", a.shape, b.shape)
    ad, bd = a.data, b.data
    return apply("matmul", ad @ bd, (a, b), lambda g: (g @ bd.T, ad.T @ g))


def tsum(a, axis=None) -> Tensor:
    a = as_tensor(a)
    shape = a.shape

    def bw(g):
        if axis is None:
            return (np.broadcast_to(g, shape).copy(),)
        return (np.broadcast_to(np.expand_dims(g, axis), shape).copy(),)

    return apply("sum", np.asarray(a.data.sum(axis=axis)), (a,), bw)


def mean(a) -> Tensor:
    a = as_tensor(a)
    n = a.data.size
    shape = a.shape
    return apply("mean", np.asarray(a.data.mean()), (a,),
                 lambda g: (np.full(shape, g / n, dtype=a.data.dtype),))


def relu(a) -> Tensor:
    a = as_tensor(a)
    mask = a.data > 0
    return apply("relu", np.where(mask, a.data, 0).astype(a.data.dtype), (a,),
                 lambda g: (g * mask,))


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    old = a.shape
    return apply("reshape", a.data.reshape(shape), (a,), lambda g: (g.reshape(old),))


def transpose(a, axes=None) -> Tensor:
    a = as_tensor(a)
    inv = None if axes is None else np.argsort(axes)
    return apply("transpose", np.transpose(a.data, axes), (a,),
                 lambda g: (np.transpose(g, inv),))


def take(a, index) -> Tensor:
    a = as_tensor(a)
    shape, dtype = a.shape, a.data.dtype

    def bw(g):
        out = np.zeros(shape, dtype=dtype)
        np.add.at(out, index, g)
        return (out,)

    return apply("take", np.array(a.data[index]), (a,), bw)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError:
        raise ShapeMismatch("concat: incompatible shapes", *[t.shape for t in tensors]) from None
    return apply("concat", out, tensors, lambda g: tuple(np.split(g, splits, axis=axis)))


PRIMITIVES: dict[str, Callable[..., Tensor]] = {
    "add": add,
    "sub": sub,
    "mul": mul,
    "neg": neg,
    "matmul": matmul,
    "sum": tsum,
    "mean": mean,
    "relu": relu,
    "reshape": reshape,
    "transpose": transpose,
    "take": take,
    "concat": lambda *ts, axis=0: concat(ts, axis=axis),
}


def register_primitive(kind: str):
    def deco(fn):
        PRIMITIVES[kind] = fn
        return fn
    return deco


def forward_primitive(kind: str, inputs: Sequence, **attrs) -> Tensor:
    """Run the primitive named ``kind`` on ``inputs``."""
    try:
        fn = PRIMITIVES[kind]
    except KeyError:
        raise KeyError(f"unknown primitive {kind!r}; known: {sorted(PRIMITIVES)}") from None
    return fn(*inputs, **attrs)
