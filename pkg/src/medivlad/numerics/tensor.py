"""Dense float tensors with a tape-free reverse-mode graph.

Every op returns a new :class:`Tensor` holding its parents and a closure that
pushes the output gradient back onto them. ``backward`` orders the reachable
nodes topologically and runs each closure exactly once.
"""
from __future__ import annotations

import contextlib
import math
from typing import Callable, Iterable, Sequence

import numpy as np

EPS = 1e-12

_state = {"dtype": np.float32, "grad_enabled": True, "strict": False}


class ShapeError(ValueError):
    """Operand shapes are incompatible for an op."""

    def __init__(self, op: str, *shapes):
        self.op = op
        self.shapes = tuple(tuple(s) for s in shapes)
        desc = " vs ".join(str(s) for s in self.shapes)
        super().__init__(f"{op}: incompatible shapes {desc}")


class NonFiniteError(FloatingPointError):
    pass


class GraphError(RuntimeError):
    pass


def default_dtype():
    return _state["dtype"]


@contextlib.contextmanager
def precision(dtype):
    """Temporarily switch the dtype used for newly created tensors."""
    old = _state["dtype"]
    _state["dtype"] = np.dtype(dtype).type
    try:
        yield
    finally:
        _state["dtype"] = old


@contextlib.contextmanager
def no_grad():
    old = _state["grad_enabled"]
    _state["grad_enabled"] = False
    try:
        yield
    finally:
        _state["grad_enabled"] = old


@contextlib.contextmanager
def strict(enabled: bool = True):
    """Raise :class:`NonFiniteError` whenever an op sees NaN or inf input."""
    old = _state["strict"]
    _state["strict"] = enabled
    try:
        yield
    finally:
        _state["strict"] = old


def _as_array(x, dtype=None) -> np.ndarray:
    if isinstance(x, Tensor):
        return x.data
    return np.asarray(x, dtype=dtype or _state["dtype"])


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "_op", "_done", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None, dtype=None):
        arr = np.asarray(data, dtype=dtype or _state["dtype"])
        # ascontiguousarray would promote 0-d arrays to shape (1,)
        self.data = arr if arr.flags.c_contiguous else arr.copy(order="C")
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], None] | None = None
        self._op = "leaf"
        self._done = False
        self.name = name

    # -- basic properties -------------------------------------------------
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
        return self._backward is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else _raise_item(self)

    def detach(self) -> "Tensor":
        return Tensor(self.data, dtype=self.data.dtype)

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, op={self._op}{flag})"

    def __len__(self):
        return self.shape[0]

    # -- graph ------------------------------------------------------------
    def backward(self):
        """Accumulate d(self)/d(leaf) into ``.grad`` of every reachable leaf.

        Leaf gradients are reset to zero first. The graph is released
        afterwards, so a second call on the same output raises.
        """
        if self.data.size != 1:
            raise GraphError(f"backward needs a scalar output, got shape {self.shape}")
        if self._done:
            raise GraphError("backward already ran on this graph; rebuild the forward pass")
        if not self.requires_grad:
            raise GraphError("output does not depend on any tensor requiring grad")
        order = _topo_order(self)
        for node in order:
            if node.is_leaf:
                if node.requires_grad:
                    node.grad = np.zeros_like(node.data)
            else:
                node.grad = None
        grads: dict[int, np.ndarray] = {id(self): np.ones_like(self.data)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if node.is_leaf:
                continue
            if g is not None:
                node._backward(g, grads)
        for node in order:
            if not node.is_leaf:
                node._parents = ()
                node._backward = None
                node._done = True
        self._done = True

    # -- operator sugar ---------------------------------------------------
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
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __pow__(self, p):
        return power(self, p)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def max(self, axis=None, keepdims=False):
        return max_(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    def swapaxes(self, a, b):
        axes = list(range(self.ndim))
        axes[a], axes[b] = axes[b], axes[a]
        return transpose(self, tuple(axes))

    def exp(self):
        return exp(self)

    def log(self):
        return log(self)

    def tanh(self):
        return tanh(self)


class Parameter(Tensor):
    """A leaf tensor that an optimizer is allowed to update."""

    __slots__ = ()

    def __init__(self, data, name: str | None = None, dtype=None):
        super().__init__(data, requires_grad=True, name=name, dtype=dtype)

    def __repr__(self):
        return f"Parameter(shape={self.shape})"


def _raise_item(t):
    raise ValueError(f"item() needs a single element, got shape {t.shape}")


def _topo_order(root: Tensor) -> list[Tensor]:
    seen: set[int] = set()
    order: list[Tensor] = []
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in seen:
                stack.append((p, False))
    return order


def tensor(data, requires_grad: bool = False, dtype=None) -> Tensor:
    return Tensor(data, requires_grad=requires_grad, dtype=dtype)


def _lift(x, like: np.ndarray | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else _state["dtype"]
    return Tensor(np.asarray(x, dtype=dtype), dtype=dtype)


def _check_finite(op: str, arrays: Iterable[np.ndarray]):
    if not _state["strict"]:
        return
    for a in arrays:
        if not np.all(np.isfinite(a)):
            raise NonFiniteError(f"{op}: non-finite input")


def _make(op: str, data: np.ndarray, parents: Sequence[Tensor], backward) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.name = None
    out._op = op
    out._done = False
    need = _state["grad_enabled"] and any(p.requires_grad for p in parents)
    out.requires_grad = need
    if need:
        out._parents = tuple(parents)
        out._backward = backward
    else:
        out._parents = ()
        out._backward = None
    return out


def _accum(grads: dict, t: Tensor, g: np.ndarray):
    if not t.requires_grad:
        return
    if t.is_leaf:
        t.grad += g
        return
    key = id(t)
    prev = grads.get(key)
    grads[key] = g if prev is None else prev + g


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _broadcast_shape(op: str, a: Tensor, b: Tensor):
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(op, a.shape, b.shape) from None


# -- elementwise binary ops -------------------------------------------------

def add(a, b) -> Tensor:
    a, b = _pair(a, b)
    _broadcast_shape("add", a, b)
    _check_finite("add", (a.data, b.data))

    def bw(g, grads):
        _accum(grads, a, _unbroadcast(g, a.shape))
        _accum(grads, b, _unbroadcast(g, b.shape))

    return _make("add", a.data + b.data, (a, b), bw)


def sub(a, b) -> Tensor:
    a, b = _pair(a, b)
    _broadcast_shape("sub", a, b)
    _check_finite("sub", (a.data, b.data))

    def bw(g, grads):
        _accum(grads, a, _unbroadcast(g, a.shape))
        _accum(grads, b, _unbroadcast(-g, b.shape))

    return _make("sub", a.data - b.data, (a, b), bw)


def mul(a, b) -> Tensor:
    a, b = _pair(a, b)
    _broadcast_shape("multiply", a, b)
    _check_finite("multiply", (a.data, b.data))

    def bw(g, grads):
        if a.requires_grad:
            _accum(grads, a, _unbroadcast(g * b.data, a.shape))
        if b.requires_grad:
            _accum(grads, b, _unbroadcast(g * a.data, b.shape))

    return _make("multiply", a.data * b.data, (a, b), bw)


def div(a, b) -> Tensor:
    a, b = _pair(a, b)
    _broadcast_shape("divide", a, b)
    _check_finite("divide", (a.data, b.data))
    out = a.data / b.data

    def bw(g, grads):
        if a.requires_grad:
            _accum(grads, a, _unbroadcast(g / b.data, a.shape))
        if b.requires_grad:
            _accum(grads, b, _unbroadcast(-g * out / b.data, b.shape))

    return _make("divide", out, (a, b), bw)


def _pair(a, b) -> tuple[Tensor, Tensor]:
    if isinstance(a, Tensor):
        return a, _lift(b, a.data)
    if isinstance(b, Tensor):
        return _lift(a, b.data), b
    return _lift(a), _lift(b)


def matmul(a, b) -> Tensor:
    a, b = _pair(a, b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError("matmul", a.shape, b.shape)
    try:
        np.broadcast_shapes(a.shape[:-2], b.shape[:-2])
    except ValueError:
        raise ShapeError("matmul", a.shape, b.shape) from None
    _check_finite("matmul", (a.data, b.data))

    fold = b.ndim == 2 and a.ndim > 2

    def bw(g, grads):
        if fold:
            # one GEMM over all leading axes instead of a per-slice loop
            g2 = g.reshape(-1, g.shape[-1])
            if a.requires_grad:
                _accum(grads, a, (g2 @ b.data.T).reshape(a.shape))
            if b.requires_grad:
                _accum(grads, b, a.data.reshape(-1, a.shape[-1]).T @ g2)
            return
        if a.requires_grad:
            _accum(grads, a, _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape))
        if b.requires_grad:
            _accum(grads, b, _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape))

    if fold:
        out = (a.data.reshape(-1, a.shape[-1]) @ b.data).reshape(a.shape[:-1] + (b.shape[-1],))
    else:
        out = a.data @ b.data
    return _make("matmul", out, (a, b), bw)


def power(a: Tensor, p: float) -> Tensor:
    a = _lift(a)
    _check_finite("power", (a.data,))
    p = float(p)

    def bw(g, grads):
        _accum(grads, a, g * p * a.data ** (p - 1.0))

    return _make("power", a.data ** p, (a,), bw)


# -- elementwise unary ops ----------------------------------------------------

def exp(a: Tensor) -> Tensor:
    a = _lift(a)
    _check_finite("exp", (a.data,))
    out = np.exp(a.data)

    def bw(g, grads):
        _accum(grads, a, g * out)

    return _make("exp", out, (a,), bw)


def log(a: Tensor, eps: float = EPS) -> Tensor:
    """Natural log of ``max(a, eps)``; zero gradient where clamped."""
    a = _lift(a)
    _check_finite("log", (a.data,))
    clamped = np.maximum(a.data, a.data.dtype.type(eps))

    def bw(g, grads):
        _accum(grads, a, np.where(a.data > eps, g / clamped, 0.0).astype(a.data.dtype))

    return _make("log", np.log(clamped), (a,), bw)


def tanh(a: Tensor) -> Tensor:
    a = _lift(a)
    _check_finite("tanh", (a.data,))
    out = np.tanh(a.data)

    def bw(g, grads):
        _accum(grads, a, g * (1.0 - out * out))

    return _make("tanh", out, (a,), bw)


def relu(a: Tensor) -> Tensor:
    a = _lift(a)
    _check_finite("relu", (a.data,))
    mask = a.data > 0

    def bw(g, grads):
        _accum(grads, a, g * mask)

    return _make("relu", a.data * mask, (a,), bw)


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(a: Tensor) -> Tensor:
    """GELU, tanh approximation."""
    a = _lift(a)
    _check_finite("gelu", (a.data,))
    x = a.data
    x2 = x * x
    inner = x * (x2 * np.float32(_GELU_C * 0.044715) + np.float32(_GELU_C)).astype(x.dtype, copy=False)
    t = np.tanh(inner)
    out = 0.5 * x * (1.0 + t)

    def bw(g, grads):
        dinner = x2 * np.float32(3 * _GELU_C * 0.044715) + np.float32(_GELU_C)
        d = 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * dinner
        _accum(grads, a, (g * d).astype(x.dtype, copy=False))

    return _make("gelu", out, (a,), bw)


# -- normalizations -----------------------------------------------------------

def softmax(a: Tensor, axis: int = -1, temperature: float = 1.0) -> Tensor:
    """softmax(a / temperature) along ``axis`` (max-subtracted)."""
    if temperature <= 0:
        raise ValueError(f"softmax: temperature must be > 0, got {temperature}")
    a = _lift(a)
    _check_finite("softmax", (a.data,))
    z = a.data / a.data.dtype.type(temperature)
    z = z - z.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)

    def bw(g, grads):
        inner = (g * out).sum(axis=axis, keepdims=True)
        _accum(grads, a, out * (g - inner) / out.dtype.type(temperature))

    return _make("softmax", out, (a,), bw)


def log_softmax(a: Tensor, axis: int = -1, temperature: float = 1.0) -> Tensor:
    if temperature <= 0:
        raise ValueError(f"log_softmax: temperature must be > 0, got {temperature}")
    a = _lift(a)
    _check_finite("log_softmax", (a.data,))
    z = a.data / a.data.dtype.type(temperature)
    z = z - z.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    out = z - lse
    p = np.exp(out)

    def bw(g, grads):
        gs = g.sum(axis=axis, keepdims=True)
        _accum(grads, a, (g - p * gs) / p.dtype.type(temperature))

    return _make("log_softmax", out, (a,), bw)


def layer_norm(a: Tensor, weight: Tensor | None = None, bias: Tensor | None = None,
               eps: float = 1e-6) -> Tensor:
    """Normalize over the last axis, then apply optional gain and offset."""
    a = _lift(a)
    d = a.shape[-1]
    for p, label in ((weight, "weight"), (bias, "bias")):
        if p is not None and p.shape != (d,):
            raise ShapeError(f"layer_norm.{label}", a.shape, p.shape)
    _check_finite("layer_norm", (a.data,))
    mu = a.data.mean(axis=-1, keepdims=True)
    xc = a.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + a.data.dtype.type(eps))
    xhat = xc * rstd
    out = xhat
    if weight is not None:
        out = out * weight.data
    if bias is not None:
        out = out + bias.data
    parents = [a] + [p for p in (weight, bias) if p is not None]

    def bw(g, grads):
        lead = tuple(range(g.ndim - 1))
        if weight is not None and weight.requires_grad:
            _accum(grads, weight, (g * xhat).sum(axis=lead))
        if bias is not None and bias.requires_grad:
            _accum(grads, bias, g.sum(axis=lead))
        if a.requires_grad:
            gx = g * weight.data if weight is not None else g
            m1 = gx.mean(axis=-1, keepdims=True)
            m2 = (gx * xhat).mean(axis=-1, keepdims=True)
            _accum(grads, a, rstd * (gx - m1 - xhat * m2))

    return _make("layer_norm", out, parents, bw)


def l2_normalize(a: Tensor, axis: int = -1, eps: float = EPS) -> Tensor:
    """x / max(||x||, eps) along ``axis``; all-zero slices map to zero."""
    a = _lift(a)
    _check_finite("l2_normalize", (a.data,))
    norm = np.sqrt((a.data * a.data).sum(axis=axis, keepdims=True))
    denom = np.maximum(norm, a.data.dtype.type(eps))
    out = a.data / denom

    def bw(g, grads):
        live = norm > eps
        proj = (g * out).sum(axis=axis, keepdims=True)
        gx = np.where(live, (g - out * proj) / denom, g / denom)
        _accum(grads, a, gx.astype(a.data.dtype, copy=False))

    return _make("l2_normalize", out, (a,), bw)


# -- shape ops -----------------------------------------------------------------

def reshape(a: Tensor, shape) -> Tensor:
    a = _lift(a)
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise ShapeError("reshape", a.shape, tuple(shape)) from None

    def bw(g, grads):
        _accum(grads, a, g.reshape(a.shape))

    return _make("reshape", out, (a,), bw)


def transpose(a: Tensor, axes=None) -> Tensor:
    a = _lift(a)
    axes = tuple(reversed(range(a.ndim))) if axes is None else tuple(axes)
    if sorted(axes) != list(range(a.ndim)):
        raise ShapeError("transpose", a.shape, axes)
    inv = tuple(np.argsort(axes))

    def bw(g, grads):
        _accum(grads, a, np.transpose(g, inv))

    return _make("transpose", np.transpose(a.data, axes), (a,), bw)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    ts = [_lift(t) for t in tensors]
    if not ts:
        raise ValueError("concat: empty input")
    ax = axis % ts[0].ndim
    for t in ts[1:]:
        if t.ndim != ts[0].ndim or any(
            t.shape[i] != ts[0].shape[i] for i in range(t.ndim) if i != ax
        ):
            raise ShapeError("concat", ts[0].shape, t.shape)
    sizes = [t.shape[ax] for t in ts]
    splits = np.cumsum(sizes)[:-1]

    def bw(g, grads):
        for t, piece in zip(ts, np.split(g, splits, axis=ax)):
            _accum(grads, t, piece)

    return _make("concat", np.concatenate([t.data for t in ts], axis=ax), ts, bw)


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    ts = [_lift(t) for t in tensors]
    expanded = [reshape(t, t.shape[:axis % (t.ndim + 1)] + (1,) + t.shape[axis % (t.ndim + 1):])
                for t in ts]
    return concat(expanded, axis=axis)


def _is_basic_index(idx) -> bool:
    items = idx if isinstance(idx, tuple) else (idx,)
    return all(isinstance(i, (int, np.integer, slice)) or i is None or i is Ellipsis for i in items)


def getitem(a: Tensor, idx) -> Tensor:
    a = _lift(a)
    try:
        out = a.data[idx]
    except IndexError as exc:
        raise ShapeError("slice", a.shape, ()) from exc
    basic = _is_basic_index(idx)

    def bw(g, grads):
        full = np.zeros_like(a.data)
        if basic:
            full[idx] += g
        else:
            np.add.at(full, idx, g)
        _accum(grads, a, full)

    return _make("slice", np.array(out, copy=True) if not basic else out, (a,), bw)


# -- reductions ------------------------------------------------------------------

def _norm_axes(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        return (axis % ndim,)
    return tuple(ax % ndim for ax in axis)


def sum_(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    a = _lift(a)
    axes = _norm_axes(axis, a.ndim)
    out = a.data.sum(axis=axes, keepdims=keepdims)

    def bw(g, grads):
        gk = g if keepdims else np.expand_dims(g, axes)
        _accum(grads, a, np.broadcast_to(gk, a.shape).copy())

    return _make("sum", np.asarray(out, dtype=a.data.dtype), (a,), bw)


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    a = _lift(a)
    axes = _norm_axes(axis, a.ndim)
    n = int(np.prod([a.shape[i] for i in axes])) if axes else 1
    return mul(sum_(a, axes, keepdims), 1.0 / n)


def max_(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    """Max reduction; gradient is split evenly across tied maxima."""
    a = _lift(a)
    axes = _norm_axes(axis, a.ndim)
    mk = a.data.max(axis=axes, keepdims=True)
    mask = (a.data == mk).astype(a.data.dtype)
    mask /= mask.sum(axis=axes, keepdims=True)
    out = mk if keepdims else np.squeeze(mk, axis=axes)

    def bw(g, grads):
        gk = g if keepdims else np.expand_dims(g, axes)
        _accum(grads, a, mask * gk)

    return _make("max", np.asarray(out), (a,), bw)
