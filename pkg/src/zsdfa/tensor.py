"""Reverse-mode automatic differentiation over numpy arrays.

The engine is intentionally small: it carries exactly the operators the
attribution model and its losses need.  Every differentiable operation
records a :class:`Node` on its output; :func:`backward` linearises the graph
into a :class:`Tape` (topological order) and replays it in reverse.

Broadcasting is one-sided: a binary op may broadcast its smaller operand
into the shape of the larger one (numpy rules, right-aligned), but never
both at once.  This covers bias/affine terms along trailing axes and
keepdims-style reductions without admitting outer-product shapes.
"""
from __future__ import annotations

import contextlib
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

_GRAD_ENABLED = True
DEBUG = False


class ShapeError(ValueError):
    """Operand shapes are incompatible for the requested operation."""


class GradientError(RuntimeError):
    """Misuse of the differentiation machinery (non-scalar loss, NaN, ...)."""


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def grad_enabled() -> bool:
    return _GRAD_ENABLED


@dataclass(eq=False)
class Node:
    """One recorded operation: its inputs and the rule mapping the output
    gradient to one gradient per input (``None`` where not needed)."""

    op: str
    inputs: tuple["Tensor", ...]
    backward: Callable[[np.ndarray], Sequence[np.ndarray | None]]


@dataclass
class Tape:
    """Topologically ordered nodes reachable from a loss."""

    nodes: list["Tensor"] = field(default_factory=list)

    @classmethod
    def from_output(cls, out: "Tensor") -> "Tape":
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(out, False)]
        while stack:
            t, expanded = stack.pop()
            if expanded:
                order.append(t)
                continue
            if id(t) in seen:
                continue
            seen.add(id(t))
            stack.append((t, True))
            if t._node is not None:
                for inp in reversed(t._node.inputs):
                    if inp.requires_grad and id(inp) not in seen:
                        stack.append((inp, False))
        return cls(order)

    def reset(self) -> None:
        for t in self.nodes:
            t._node = None
        self.nodes = []


class Tensor:
    """An n-dimensional array that can take part in gradient recording."""

    __slots__ = ("data", "requires_grad", "grad", "_node", "name")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: str | None = None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float64 if dtype is None else dtype)
        self.data: np.ndarray = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._node: Node | None = None
        self.name = name

    # -- basic properties -------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data, dtype=self.dtype)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    def __len__(self) -> int:
        return len(self.data)

    # -- operators ---------------------------------------------------------
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

    def __pow__(self, p: float):
        return power(self, p)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)

    @property
    def T(self) -> "Tensor":
        return transpose(self)

    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        return mean(self, axis, keepdims)

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def exp(self) -> "Tensor":
        return exp(self)

    def log(self) -> "Tensor":
        return log(self)

    def backward(self) -> None:
        backward(self)


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype))


def _wrap(data: np.ndarray, op: str, inputs: Iterable[Tensor], rule) -> Tensor:
    inputs = tuple(inputs)
    out = Tensor(data, dtype=data.dtype)
    if DEBUG and not np.all(np.isfinite(data)):
        raise GradientError(f"non-finite output from {op}")
    if _GRAD_ENABLED and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        out._node = Node(op, inputs, rule)
    return out


def _pair(a, b) -> tuple[Tensor, Tensor]:
    if isinstance(a, Tensor) and not isinstance(b, Tensor):
        b = Tensor(np.asarray(b, dtype=a.dtype))
    elif isinstance(b, Tensor) and not isinstance(a, Tensor):
        a = Tensor(np.asarray(a, dtype=b.dtype))
    if a.dtype != b.dtype:
        raise TypeError(f"dtype mismatch: {a.dtype} vs {b.dtype}")
    return a, b


def _check_broadcast(op: str, sa: tuple, sb: tuple) -> tuple:
    if sa == sb:
        return sa
    try:
        out = np.broadcast_shapes(sa, sb)
    except ValueError:
        raise ShapeError(f"{op}: cannot combine shapes {sa} and {sb}") from None
    if out != sa and out != sb:
        raise ShapeError(f"{op}: two-sided broadcast of {sa} and {sb} is not supported")
    return out


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    lead = g.ndim - len(shape)
    if lead:
        g = g.sum(axis=tuple(range(lead)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


# -- elementwise binary ------------------------------------------------------
def add(a, b) -> Tensor:
    a, b = _pair(a, b)
    _check_broadcast("add", a.shape, b.shape)
    sa, sb = a.shape, b.shape
    return _wrap(a.data + b.data, "add", (a, b),
                 lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a, b = _pair(a, b)
    _check_broadcast("sub", a.shape, b.shape)
    sa, sb = a.shape, b.shape
    return _wrap(a.data - b.data, "sub", (a, b),
                 lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def mul(a, b) -> Tensor:
    a, b = _pair(a, b)
    _check_broadcast("mul", a.shape, b.shape)
    ad, bd = a.data, b.data

    def rule(g):
        return (_unbroadcast(g * bd, ad.shape) if a.requires_grad else None,
                _unbroadcast(g * ad, bd.shape) if b.requires_grad else None)

    return _wrap(ad * bd, "mul", (a, b), rule)


def div(a, b) -> Tensor:
    a, b = _pair(a, b)
    _check_broadcast("div", a.shape, b.shape)
    ad, bd = a.data, b.data
    out = ad / bd

    def rule(g):
        ga = _unbroadcast(g / bd, ad.shape) if a.requires_grad else None
        gb = _unbroadcast(-g * out / bd, bd.shape) if b.requires_grad else None
        return ga, gb

    return _wrap(out, "div", (a, b), rule)


def where(mask, a, b) -> Tensor:
    """Select ``a`` where the constant boolean ``mask`` holds, else ``b``."""
    a, b = _pair(a, b)
    if a.shape != b.shape:
        raise ShapeError(f"where: shapes {a.shape} and {b.shape} differ")
    mask = np.broadcast_to(np.asarray(mask, dtype=bool), a.shape)
    zero = np.zeros((), dtype=a.dtype)
    return _wrap(np.where(mask, a.data, b.data), "where", (a, b),
                 lambda g: (np.where(mask, g, zero), np.where(mask, zero, g)))


# -- elementwise unary -------------------------------------------------------
def neg(x: Tensor) -> Tensor:
    return _wrap(-x.data, "neg", (x,), lambda g: (-g,))


def power(x: Tensor, p: float) -> Tensor:
    xd = x.data
    return _wrap(xd ** p, "pow", (x,), lambda g: (g * p * xd ** (p - 1),))


def exp(x: Tensor) -> Tensor:
    out = np.exp(x.data)
    return _wrap(out, "exp", (x,), lambda g: (g * out,))


def log(x: Tensor, floor: float | None = None) -> Tensor:
    """Natural log; with ``floor`` the input is clamped first and the
    gradient vanishes where the clamp is active."""
    xd = x.data
    if floor is None:
        return _wrap(np.log(xd), "log", (x,), lambda g: (g / xd,))
    clamped = np.maximum(xd, floor)
    live = xd >= floor
    return _wrap(np.log(clamped), "log", (x,),
                 lambda g: (np.where(live, g / clamped, 0).astype(xd.dtype),))


def sqrt(x: Tensor) -> Tensor:
    out = np.sqrt(x.data)
    return _wrap(out, "sqrt", (x,), lambda g: (g * 0.5 / out,))


def tanh(x: Tensor) -> Tensor:
    out = np.tanh(x.data)
    return _wrap(out, "tanh", (x,), lambda g: (g * (1 - out * out),))


def norm_rows(x: Tensor) -> Tensor:
    """Euclidean norm over the last axis; the gradient at a zero vector is 0."""
    xd = x.data
    out = np.sqrt((xd * xd).sum(axis=-1))
    safe = np.where(out > 0, out, 1)

    def rule(g):
        return ((g / safe)[..., None] * xd * (out > 0)[..., None],)

    return _wrap(out, "norm", (x,), rule)


def sigmoid(x: Tensor) -> Tensor:
    xd = x.data
    # split form avoids overflow in exp for large |x|
    e = np.exp(-np.abs(xd))
    out = np.where(xd >= 0, 1 / (1 + e), e / (1 + e)).astype(xd.dtype)
    return _wrap(out, "sigmoid", (x,), lambda g: (g * out * (1 - out),))


def log_sigmoid(x: Tensor) -> Tensor:
    xd = x.data
    out = -np.logaddexp(0, -xd).astype(xd.dtype)
    e = np.exp(-np.abs(xd))
    sig_neg = np.where(xd >= 0, e / (1 + e), 1 / (1 + e)).astype(xd.dtype)
    return _wrap(out, "log_sigmoid", (x,), lambda g: (g * sig_neg,))


def relu(x: Tensor) -> Tensor:
    xd = x.data
    live = xd > 0
    return _wrap(np.where(live, xd, 0).astype(xd.dtype), "relu", (x,),
                 lambda g: (g * live,))


_GELU_C = np.sqrt(2 / np.pi)


def gelu(x: Tensor) -> Tensor:
    """GELU, tanh approximation."""
    xd = x.data
    c = xd.dtype.type(_GELU_C)
    x2 = xd * xd
    t = np.tanh(c * xd * (1 + 0.044715 * x2))
    out = 0.5 * xd * (1 + t)

    def rule(g):
        dinner = c * (1 + 3 * 0.044715 * x2)
        return (g * (0.5 * (1 + t) + 0.5 * xd * (1 - t * t) * dinner),)

    return _wrap(out.astype(xd.dtype), "gelu", (x,), rule)


# -- reductions --------------------------------------------------------------
def _norm_axis(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(a % ndim for a in axis)


def tsum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axis(axis, x.ndim)
    out = x.data.sum(axis=axes, keepdims=keepdims)
    shape = x.shape

    def rule(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, shape).copy(),)

    return _wrap(np.asarray(out, dtype=x.dtype), "sum", (x,), rule)


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axis(axis, x.ndim)
    n = int(np.prod([x.shape[a] for a in axes])) if axes else 1
    return tsum(x, axes, keepdims) * (1.0 / n)


# -- shape manipulation ------------------------------------------------------
def reshape(x: Tensor, shape) -> Tensor:
    src = x.shape
    return _wrap(x.data.reshape(shape), "reshape", (x,), lambda g: (g.reshape(src),))


def transpose(x: Tensor, axes=None) -> Tensor:
    if axes is None:
        axes = tuple(range(x.ndim - 2)) + (x.ndim - 1, x.ndim - 2)
    inv = np.argsort(axes)
    return _wrap(x.data.transpose(axes), "transpose", (x,), lambda g: (g.transpose(inv),))


def getitem(x: Tensor, idx) -> Tensor:
    if isinstance(idx, Tensor):
        idx = idx.data.astype(np.int64)
    out = x.data[idx]
    shape, dtype = x.shape, x.dtype
    parts = idx if isinstance(idx, tuple) else (idx,)
    basic = all(p is None or p is Ellipsis or isinstance(p, (int, np.integer, slice)) for p in parts)

    def rule(g):
        full = np.zeros(shape, dtype=dtype)
        if basic:
            full[idx] = g  # basic indexing never repeats an element
        else:
            np.add.at(full, idx, g)
        return (full,)

    return _wrap(np.array(out, dtype=dtype), "getitem", (x,), rule)


def concat(ts: Sequence[Tensor], axis: int = 0) -> Tensor:
    ts = list(ts)
    axis = axis % ts[0].ndim
    sizes = [t.shape[axis] for t in ts]
    bounds = np.cumsum([0] + sizes)

    def rule(g):
        return tuple(np.take(g, np.arange(bounds[i], bounds[i + 1]), axis=axis)
                     for i in range(len(ts)))

    return _wrap(np.concatenate([t.data for t in ts], axis=axis), "concat", ts, rule)


def stack(ts: Sequence[Tensor], axis: int = 0) -> Tensor:
    ts = list(ts)

    def rule(g):
        return tuple(np.take(g, i, axis=axis) for i in range(len(ts)))

    return _wrap(np.stack([t.data for t in ts], axis=axis), "stack", ts, rule)


# -- linear algebra ----------------------------------------------------------
def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product over the last two axes.

    Leading (batch) axes follow numpy's matmul rules; a 2-D right operand is
    shared across the batch.
    """
    a, b = _pair(a, b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: shapes {a.shape} and {b.shape} do not align")
    ad, bd = a.data, b.data

    def rule(g):
        ga = _unbroadcast(g @ np.swapaxes(bd, -1, -2), ad.shape) if a.requires_grad else None
        gb = None
        if b.requires_grad:
            if bd.ndim == 2 and ad.ndim > 2:
                gb = ad.reshape(-1, ad.shape[-1]).T @ g.reshape(-1, g.shape[-1])
            else:
                gb = _unbroadcast(np.swapaxes(ad, -1, -2) @ g, bd.shape)
        return ga, gb

    return _wrap(ad @ bd, "matmul", (a, b), rule)


def softmax_rows(x: Tensor) -> Tensor:
    """Softmax along the last axis with max-subtraction."""
    xd = x.data
    z = np.exp(xd - xd.max(axis=-1, keepdims=True))
    out = z / z.sum(axis=-1, keepdims=True)

    def rule(g):
        return (out * (g - (g * out).sum(axis=-1, keepdims=True)),)

    return _wrap(out, "softmax", (x,), rule)


def log_softmax_rows(x: Tensor) -> Tensor:
    xd = x.data
    shifted = xd - xd.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    out = shifted - lse
    p = np.exp(out)

    def rule(g):
        return (g - p * g.sum(axis=-1, keepdims=True),)

    return _wrap(out, "log_softmax", (x,), rule)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalise over the last axis, then apply ``gamma * xhat + beta``."""
    d = x.shape[-1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise ShapeError(f"layer_norm: gamma/beta {gamma.shape}/{beta.shape} vs last axis {d}")
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    gd = gamma.data
    out = xhat * gd + beta.data

    def rule(g):
        lead = tuple(range(g.ndim - 1))
        ggamma = (g * xhat).sum(axis=lead) if gamma.requires_grad else None
        gbeta = g.sum(axis=lead) if beta.requires_grad else None
        gx = None
        if x.requires_grad:
            gh = g * gd
            gx = inv * (gh - gh.mean(axis=-1, keepdims=True)
                        - xhat * (gh * xhat).mean(axis=-1, keepdims=True))
        return gx, ggamma, gbeta

    return _wrap(out.astype(xd.dtype), "layer_norm", (x, gamma, beta), rule)


def conv2d(x: Tensor, kernels: Tensor, stride: int = 1) -> Tensor:
    """Valid-padding cross-correlation.

    ``x`` is ``c_in×h×w`` or batched ``n×c_in×h×w``; ``kernels`` is
    ``c_out×c_in×k×k``.
    """
    x, kernels = _pair(x, kernels)
    batched = x.ndim == 4
    if x.ndim not in (3, 4) or kernels.ndim != 4:
        raise ShapeError(f"conv2d: bad ranks {x.shape}, {kernels.shape}")
    xd = x.data if batched else x.data[None]
    n, cin, h, w = xd.shape
    cout, kcin, k, k2 = kernels.shape
    if kcin != cin or k != k2:
        raise ShapeError(f"conv2d: kernels {kernels.shape} do not fit input {x.shape}")
    if k > h or k > w:
        raise ShapeError(f"conv2d: kernel {k}x{k} larger than input {h}x{w}")
    if stride < 1:
        raise ShapeError("conv2d: stride must be >= 1")
    ho = (h - k) // stride + 1
    wo = (w - k) // stride + 1
    span_r = stride * (ho - 1) + 1
    span_c = stride * (wo - 1) + 1
    # im2col, channel-major: (n, cin, k, k, ho, wo) so both passes stay contiguous
    cols = np.empty((n, cin, k, k, ho, wo), dtype=xd.dtype)
    for i in range(k):
        for j in range(k):
            cols[:, :, i, j] = xd[:, :, i:i + span_r:stride, j:j + span_c:stride]
    cols = cols.reshape(n, cin * k * k, ho * wo)
    kmat = kernels.data.reshape(cout, cin * k * k)
    out = (kmat @ cols).reshape(n, cout, ho, wo)

    def rule(g):
        g = g if batched else g[None]
        g2 = g.reshape(n, cout, ho * wo)
        gk = None
        if kernels.requires_grad:
            gk = (g2 @ cols.transpose(0, 2, 1)).sum(axis=0).reshape(kernels.shape)
        gx = None
        if x.requires_grad:
            dcols = (kmat.T @ g2).reshape(n, cin, k, k, ho, wo)
            gx = np.zeros((n, cin, h, w), dtype=xd.dtype)
            for i in range(k):
                for j in range(k):
                    gx[:, :, i:i + span_r:stride, j:j + span_c:stride] += dcols[:, :, i, j]
            if not batched:
                gx = gx[0]
        return gx, gk

    return _wrap(out if batched else out[0], "conv2d", (x, kernels), rule)


# -- driver ------------------------------------------------------------------
def backward(loss: Tensor, retain_graph: bool = False) -> Tape:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every leaf that requires it."""
    if loss.size != 1:
        raise GradientError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise GradientError("loss is not on the tape (no input requires grad)")
    tape = Tape.from_output(loss)
    grads: dict[int, np.ndarray] = {id(loss): np.ones(loss.shape, dtype=loss.dtype)}
    for t in reversed(tape.nodes):
        g = grads.pop(id(t), None)
        if g is None:
            continue
        if t._node is None:
            t.grad = g.astype(t.dtype) if t.grad is None else t.grad + g
            continue
        for inp, gi in zip(t._node.inputs, t._node.backward(g)):
            if gi is None or not inp.requires_grad:
                continue
            key = id(inp)
            grads[key] = gi if key not in grads else grads[key] + gi
    if not retain_graph:
        tape.reset()
    return tape


def zeros(shape, dtype=np.float32, requires_grad: bool = False) -> Tensor:
    return Tensor(np.zeros(shape, dtype=dtype), requires_grad=requires_grad)
