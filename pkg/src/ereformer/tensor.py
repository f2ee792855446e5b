"""Dense tensors with reverse-mode differentiation.

Every differentiable op builds its output eagerly with numpy and attaches a
closure that maps the output gradient to input gradients.  Ops get a
monotonically increasing sequence number when they are recorded, so the
backward pass can replay them in exact reverse recording order.
"""

from __future__ import annotations

import contextlib
import itertools
import threading
from typing import Callable, Iterable, Sequence

import numpy as np

_state = threading.local()


def _st():
    if not hasattr(_state, "grad_enabled"):
        _state.grad_enabled = True
        _state.dtype = np.float32
        _state.debug = False
        _state.counter = itertools.count()
        _state.branches = None
    return _state


def get_default_dtype():
    return _st().dtype


def set_default_dtype(dtype) -> None:
    dtype = np.dtype(dtype).type
    if dtype not in (np.float32, np.float64):
        raise ValueError(f"unsupported dtype {dtype}")
    _st().dtype = dtype


@contextlib.contextmanager
def precision(dtype):
    """Temporarily switch the default dtype (``float64`` for gradient checks)."""
    prev = get_default_dtype()
    set_default_dtype(dtype)
    try:
        yield
    finally:
        set_default_dtype(prev)


@contextlib.contextmanager
def no_grad():
    st = _st()
    prev = st.grad_enabled
    st.grad_enabled = False
    try:
        yield
    finally:
        st.grad_enabled = prev


def is_grad_enabled() -> bool:
    return _st().grad_enabled


@contextlib.contextmanager
def debug_checks(enabled: bool = True):
    """Raise ``FloatingPointError`` as soon as an op produces NaN or Inf."""
    st = _st()
    prev = st.debug
    st.debug = enabled
    try:
        yield
    finally:
        st.debug = prev


@contextlib.contextmanager
def record_branches():
    """Collect which side of its kink every piecewise op (elu, abs) evaluated on.

    Yields a list that receives one boolean mask per op call, in execution
    order. Finite-difference checks compare these to detect perturbations
    that cross a kink, where central differences are not a valid oracle.
    """
    st = _st()
    prev = st.branches
    st.branches = []
    try:
        yield st.branches
    finally:
        st.branches = prev


def _note_branch(mask: np.ndarray) -> None:
    branches = _st().branches
    if branches is not None:
        branches.append(mask)


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "name", "_parents", "_backward", "_seq", "_op")
    __array_priority__ = 1000

    def __init__(self, data, requires_grad: bool = False, name: str | None = None, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        dtype = dtype or get_default_dtype()
        self.data = np.ascontiguousarray(data, dtype=dtype)
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.name = name
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None
        self._seq = -1
        self._op = "leaf"

    # -- introspection -------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> Tensor:
        return Tensor(self.data, dtype=self.data.dtype.type)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, op={self._op})"

    # -- graph construction --------------------------------------------
    @classmethod
    def _make(cls, data: np.ndarray, parents: Sequence[Tensor], backward, op: str) -> Tensor:
        out = cls.__new__(cls)
        out.data = data
        out.grad = None
        out.name = None
        out._op = op
        st = _st()
        if st.debug and not np.all(np.isfinite(data)):
            raise FloatingPointError(f"non-finite values produced by op '{op}'")
        if st.grad_enabled and any(p.requires_grad for p in parents):
            out.requires_grad = True
            out._parents = tuple(parents)
            out._backward = backward
            out._seq = next(st.counter)
        else:
            out.requires_grad = False
            out._parents = ()
            out._backward = None
            out._seq = -1
        return out

    def backward(self, grad: np.ndarray | None = None) -> None:
        """Accumulate gradients of this tensor into every reachable leaf."""
        tape = Tape.from_output(self)
        tape.backward(self, grad)

    # -- operator sugar ------------------------------------------------
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

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)


class Tape:
    """Ordered record of the differentiable ops that produced an output."""

    def __init__(self, nodes: list[Tensor]):
        self.nodes = nodes

    @classmethod
    def from_output(cls, out: Tensor) -> Tape:
        seen: set[int] = set()
        nodes: list[Tensor] = []
        stack = [out]
        while stack:
            t = stack.pop()
            if id(t) in seen or t._backward is None:
                continue
            seen.add(id(t))
            nodes.append(t)
            stack.extend(t._parents)
        nodes.sort(key=lambda t: t._seq)
        return cls(nodes)

    def __len__(self) -> int:
        return len(self.nodes)

    def ops(self) -> list[str]:
        return [t._op for t in self.nodes]

    def backward(self, out: Tensor, grad: np.ndarray | None = None) -> None:
        if not out.requires_grad:
            raise RuntimeError("tensor does not require grad")
        if grad is None:
            grad = np.ones_like(out.data)
        grads: dict[int, np.ndarray] = {id(out): np.asarray(grad, dtype=out.dtype)}
        for node in reversed(self.nodes):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            parent_grads = node._backward(g)
            for p, pg in zip(node._parents, parent_grads):
                if pg is None or not p.requires_grad:
                    continue
                if p._backward is None:
                    p.grad = pg.copy() if p.grad is None else p.grad + pg
                else:
                    prev = grads.get(id(p))
                    grads[id(p)] = pg if prev is None else prev + pg
        if out._backward is None:  # backward called directly on a leaf
            out.grad = grad if out.grad is None else out.grad + grad


# ----------------------------------------------------------------------
# helpers

def as_tensor(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype.type if like is not None else get_default_dtype()
    return Tensor(np.asarray(x, dtype=dtype), dtype=dtype)


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


def _check_axis(axis: int, ndim: int) -> int:
    if not -ndim <= axis < ndim:
        raise IndexError(f"axis {axis} out of range for tensor of rank {ndim}")
    return axis % ndim


# ----------------------------------------------------------------------
# elementwise arithmetic

def add(a, b) -> Tensor:
    a, b = _pair(a, b)
    return Tensor._make(a.data + b.data, (a, b),
                        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)), "add")


def sub(a, b) -> Tensor:
    a, b = _pair(a, b)
    return Tensor._make(a.data - b.data, (a, b),
                        lambda g: (_unbroadcast(g, a.shape), -_unbroadcast(g, b.shape)), "sub")


def mul(a, b) -> Tensor:
    a, b = _pair(a, b)
    return Tensor._make(a.data * b.data, (a, b),
                        lambda g: (_unbroadcast(g * b.data, a.shape),
                                   _unbroadcast(g * a.data, b.shape)), "mul")


def div(a, b) -> Tensor:
    a, b = _pair(a, b)
    out = a.data / b.data
    return Tensor._make(out, (a, b),
                        lambda g: (_unbroadcast(g / b.data, a.shape),
                                   _unbroadcast(-g * out / b.data, b.shape)), "div")


def scale(x: Tensor, c: float) -> Tensor:
    c = x.dtype.type(c)
    return Tensor._make(x.data * c, (x,), lambda g: (g * c,), "scale")


def _pair(a, b) -> tuple[Tensor, Tensor]:
    if isinstance(a, Tensor):
        return a, as_tensor(b, like=a)
    b = as_tensor(b)
    return as_tensor(a, like=b), b


# ----------------------------------------------------------------------
# unary nonlinearities

def sigmoid(x: Tensor) -> Tensor:
    d = x.data
    # split by sign so large |x| never overflows exp
    e = np.exp(-np.abs(d))
    out = np.where(d >= 0, 1.0 / (1.0 + e), e / (1.0 + e)).astype(d.dtype)
    return Tensor._make(out, (x,), lambda g: (g * out * (1.0 - out),), "sigmoid")


def elu(x: Tensor) -> Tensor:
    d = x.data
    _note_branch(d >= 0)
    neg = np.expm1(np.minimum(d, 0.0))
    out = np.where(d >= 0, d, neg)
    return Tensor._make(out, (x,), lambda g: (g * np.where(d >= 0, 1.0, neg + 1.0).astype(d.dtype),), "elu")


_GELU_C = float(np.sqrt(2.0 / np.pi))


def gelu(x: Tensor) -> Tensor:
    """Tanh-approximated GELU."""
    d = x.data
    u = _GELU_C * (d + 0.044715 * d ** 3)
    th = np.tanh(u)
    out = 0.5 * d * (1.0 + th)

    def backward(g):
        du = _GELU_C * (1.0 + 3 * 0.044715 * d ** 2)
        return (g * (0.5 * (1.0 + th) + 0.5 * d * (1.0 - th ** 2) * du),)

    return Tensor._make(out, (x,), backward, "gelu")


def exp(x: Tensor) -> Tensor:
    out = np.exp(x.data)
    return Tensor._make(out, (x,), lambda g: (g * out,), "exp")


def log(x: Tensor) -> Tensor:
    d = x.data
    return Tensor._make(np.log(d), (x,), lambda g: (g / d,), "log")


def abs_(x: Tensor) -> Tensor:
    d = x.data
    _note_branch(d >= 0)
    return Tensor._make(np.abs(d), (x,), lambda g: (g * np.sign(d),), "abs")


# ----------------------------------------------------------------------
# reductions

def sum_(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = np.asarray(x.data.sum(axis=axis, keepdims=keepdims))

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)

    return Tensor._make(out, (x,), backward, "sum")


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is None:
        n = x.size
    else:
        axes = (axis,) if isinstance(axis, int) else axis
        n = int(np.prod([x.shape[a] for a in axes]))
    return scale(sum_(x, axis, keepdims), 1.0 / n)


# ----------------------------------------------------------------------
# linear algebra

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Batched matrix product with numpy broadcasting over leading dims."""
    a, b = _pair(a, b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ValueError(f"matmul dimension mismatch: {a.shape} @ {b.shape}")
    try:
        out = np.matmul(a.data, b.data)
    except ValueError as exc:
        raise ValueError(f"matmul dimension mismatch: {a.shape} @ {b.shape}") from exc

    def backward(g):
        ga = gb = None
        if a.requires_grad:
            ga = _unbroadcast(np.matmul(g, np.swapaxes(b.data, -1, -2)), a.shape)
        if b.requires_grad:
            gb = _unbroadcast(np.matmul(np.swapaxes(a.data, -1, -2), g), b.shape)
        return ga, gb

    return Tensor._make(out, (a, b), backward, "matmul")


# ----------------------------------------------------------------------
# shape manipulation

def reshape(x: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    out = x.data.reshape(shape)
    return Tensor._make(out, (x,), lambda g: (g.reshape(x.shape),), "reshape")


def transpose(x: Tensor, axes=None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(x.ndim)))
    axes = tuple(_check_axis(a, x.ndim) for a in axes)
    inv = tuple(np.argsort(axes))
    out = np.ascontiguousarray(x.data.transpose(axes))
    return Tensor._make(out, (x,), lambda g: (np.ascontiguousarray(g.transpose(inv)),), "transpose")


def concat(xs: Sequence[Tensor], axis: int = 0) -> Tensor:
    xs = [as_tensor(x) for x in xs]
    axis = _check_axis(axis, xs[0].ndim)
    for x in xs[1:]:
        if x.ndim != xs[0].ndim or any(x.shape[i] != xs[0].shape[i] for i in range(x.ndim) if i != axis):
            raise ValueError(f"incompatible concat shapes {[t.shape for t in xs]} on axis {axis}")
    out = np.concatenate([x.data for x in xs], axis=axis)
    bounds = np.cumsum([x.shape[axis] for x in xs])[:-1]

    def backward(g):
        return tuple(np.split(g, bounds, axis=axis))

    return Tensor._make(out, xs, backward, "concat")


def getitem(x: Tensor, idx) -> Tensor:
    out = np.ascontiguousarray(x.data[idx])

    def backward(g):
        full = np.zeros_like(x.data)
        np.add.at(full, idx, g) if _is_fancy(idx) else full.__setitem__(idx, g)
        return (full,)

    return Tensor._make(out, (x,), backward, "getitem")


def _is_fancy(idx) -> bool:
    items = idx if isinstance(idx, tuple) else (idx,)
    return any(isinstance(i, (list, np.ndarray)) for i in items)


def split(x: Tensor, sections: int | Sequence[int], axis: int = 0) -> list[Tensor]:
    """Split along ``axis`` into equal ``sections`` or at the given sizes."""
    axis = _check_axis(axis, x.ndim)
    n = x.shape[axis]
    if isinstance(sections, int):
        if n % sections:
            raise ValueError(f"cannot split axis of length {n} into {sections} parts")
        sizes = [n // sections] * sections
    else:
        sizes = list(sections)
        if sum(sizes) != n:
            raise ValueError(f"split sizes {sizes} do not sum to {n}")
    parts, start = [], 0
    for s in sizes:
        sl = [slice(None)] * x.ndim
        sl[axis] = slice(start, start + s)
        parts.append(getitem(x, tuple(sl)))
        start += s
    return parts


def roll(x: Tensor, shift: Sequence[int], axes: Sequence[int]) -> Tensor:
    shift, axes = tuple(shift), tuple(axes)
    out = np.roll(x.data, shift, axis=axes)
    neg = tuple(-s for s in shift)
    return Tensor._make(out, (x,), lambda g: (np.roll(g, neg, axis=axes),), "roll")


def take(x: Tensor, index: np.ndarray, axis: int = 0) -> Tensor:
    """Gather rows of ``x`` along ``axis``; backward scatter-adds."""
    axis = _check_axis(axis, x.ndim)
    index = np.asarray(index)
    out = np.take(x.data, index, axis=axis)

    def backward(g):
        full = np.zeros_like(x.data)
        gm = np.moveaxis(g.reshape(x.shape[:axis] + (index.size,) + x.shape[axis + 1:]), axis, 0)
        np.add.at(np.moveaxis(full, axis, 0), index.ravel(), gm)
        return (full,)

    return Tensor._make(out, (x,), backward, "take")


# ----------------------------------------------------------------------
# fused normalisation ops

def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    if eps <= 0:
        raise ValueError("layer_norm eps must be positive")
    c = x.shape[-1]
    if gain.shape != (c,) or bias.shape != (c,):
        raise ValueError(f"layer_norm expects gain/bias of shape ({c},), got {gain.shape}, {bias.shape}")
    d = x.data
    mu = d.mean(axis=-1, keepdims=True)
    xc = d - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + eps)
    xhat = xc * rstd
    out = xhat * gain.data + bias.data

    def backward(g):
        gx = gg = gb = None
        if gain.requires_grad:
            gg = (g * xhat).reshape(-1, c).sum(axis=0)
        if bias.requires_grad:
            gb = g.reshape(-1, c).sum(axis=0)
        if x.requires_grad:
            gh = g * gain.data
            gx = rstd * (gh - gh.mean(axis=-1, keepdims=True)
                         - xhat * (gh * xhat).mean(axis=-1, keepdims=True))
        return gx, gg, gb

    return Tensor._make(out, (x, gain, bias), backward, "layer_norm")


def softmax(x: Tensor, mask: np.ndarray | None = None) -> Tensor:
    """Softmax over the last axis; ``mask`` is an additive constant (0 or -LARGE)."""
    d = x.data if mask is None else x.data + mask.astype(x.dtype)
    z = d - d.max(axis=-1, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=-1, keepdims=True)

    def backward(g):
        return (out * (g - (g * out).sum(axis=-1, keepdims=True)),)

    return Tensor._make(out, (x,), backward, "softmax")


def parameters_of(tensors: Iterable[Tensor]) -> list[Tensor]:
    return [t for t in tensors if t.requires_grad]
