"""Dense tensors with reverse-mode automatic differentiation.

Every primitive here (arithmetic, matmul, reductions, the softmax family,
layer norm, convolutions, slicing/concat/reshape, embedding lookups) defines
a forward result and a vector-Jacobian product, so arbitrary compositions are
differentiable end to end.  Tensors are immutable values once created: ops
return new tensors, and backward() over one graph is single-writer.

float32 is the working precision for training; gradient validation must run
in float64, where central differences are meaningful.
"""

from __future__ import annotations

import math
from contextlib import contextmanager

import numpy as np

__all__ = [
    "Tensor",
    "ShapeMismatchError",
    "NonFiniteError",
    "NonSmoothPointError",
    "tensor",
    "zeros",
    "ones",
    "concat",
    "matmul",
    "relu",
    "gelu",
    "sigmoid",
    "tanh",
    "exp",
    "log",
    "sqrt",
    "square",
    "softmax",
    "log_softmax",
    "layer_norm",
    "embedding",
    "pick",
    "pad",
    "broadcast_to",
    "conv1d",
    "conv1d_depthwise",
    "conv2d",
    "dropout",
    "no_grad",
    "is_grad_enabled",
    "set_finite_checks",
    "finite_checks_enabled",
    "grad_check",
]

_FLOAT_DTYPES = (np.float32, np.float64)

_grad_enabled = True
_finite_checks = True


class ShapeMismatchError(ValueError):
    """Operands have incompatible shapes; the message names both."""


class NonFiniteError(FloatingPointError):
    """A forward or backward array picked up a NaN or Inf."""


class NonSmoothPointError(ValueError):
    """grad_check probed a point where one-sided derivatives disagree."""


@contextmanager
def no_grad():
    """Disable graph construction inside the block (inference fast path)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def is_grad_enabled() -> bool:
    return _grad_enabled


def set_finite_checks(enabled: bool) -> bool:
    """Toggle per-op NaN/Inf checking; returns the previous setting.

    Checks default to on.  The training loop may switch them off for speed
    and instead verifies the loss and every parameter gradient each step,
    which preserves the "non-finite is an error" contract at the points
    where corruption would propagate into parameters.
    """
    global _finite_checks
    prev = _finite_checks
    _finite_checks = bool(enabled)
    return prev


def finite_checks_enabled() -> bool:
    return _finite_checks


def _check_finite(arr: np.ndarray, op: str) -> None:
    if _finite_checks and not np.all(np.isfinite(arr)):
        raise NonFiniteError(f"non-finite values produced by '{op}'")


def _as_array(value, dtype=None) -> np.ndarray:
    arr = np.asarray(value)
    if dtype is not None:
        return arr.astype(dtype, copy=False)
    if arr.dtype in _FLOAT_DTYPES:
        return arr
    return arr.astype(np.float32)


class Tensor:
    """A dense real-valued array plus the bookkeeping for backprop."""

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_vjp")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        self.data = _as_array(data, dtype)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._vjp = None
        _check_finite(self.data, "tensor")

    # -- metadata ---------------------------------------------------------

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

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeMismatchError(f"item() needs a scalar, got shape {self.shape}")
        return float(self.data.reshape(()))

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False)

    def astype(self, dtype) -> "Tensor":
        return Tensor(self.data.astype(dtype), requires_grad=self.requires_grad)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype}, requires_grad={self.requires_grad})"

    # -- autodiff ---------------------------------------------------------

    def backward(self) -> None:
        """Reverse-mode sweep from this scalar; accumulates .grad on leaves."""
        if self.data.size != 1:
            raise ShapeMismatchError(f"backward() needs a scalar output, got shape {self.shape}")
        topo: list[Tensor] = []
        visited: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                topo.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for parent in node._parents:
                if parent.requires_grad and id(parent) not in visited:
                    stack.append((parent, False))

        grads: dict[int, np.ndarray] = {id(self): np.ones_like(self.data)}
        for node in reversed(topo):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._vjp is None:
                _check_finite(g, "backward")
                node.grad = g if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node._parents, node._vjp(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg

    # -- operator sugar ---------------------------------------------------

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

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis=axis, keepdims=keepdims)

    def abs(self):
        return abs_(self)

    def square(self):
        return square(self)

    def reshape(self, shape):
        return reshape(self, shape)

    def transpose(self, axes=None):
        return transpose(self, axes)

    def swapaxes(self, a, b):
        return swapaxes(self, a, b)


def _ensure_tensor(value, like: Tensor | None = None) -> Tensor:
    if isinstance(value, Tensor):
        return value
    dtype = like.data.dtype if like is not None else None
    return Tensor(value, dtype=dtype)


def _make(data: np.ndarray, parents: tuple[Tensor, ...], vjp, op: str) -> Tensor:
    _check_finite(data, op)
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._vjp = vjp
    else:
        out.requires_grad = False
        out._parents = ()
        out._vjp = None
    return out


def _reduce_to(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum a broadcast gradient back down to the original operand shape."""
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


# -- creation ---------------------------------------------------------------


def tensor(data, requires_grad: bool = False, dtype=None) -> Tensor:
    return Tensor(data, requires_grad=requires_grad, dtype=dtype)


def zeros(shape, dtype=np.float32, requires_grad: bool = False) -> Tensor:
    return Tensor(np.zeros(shape, dtype=dtype), requires_grad=requires_grad)


def ones(shape, dtype=np.float32, requires_grad: bool = False) -> Tensor:
    return Tensor(np.ones(shape, dtype=dtype), requires_grad=requires_grad)


# -- elementwise arithmetic ---------------------------------------------------


def add(a, b) -> Tensor:
    a = _ensure_tensor(a, like=b if isinstance(b, Tensor) else None)
    b = _ensure_tensor(b, like=a)
    try:
        data = a.data + b.data
    except ValueError:
        raise ShapeMismatchError(f"add: shapes {a.shape} and {b.shape} do not broadcast") from None

    def vjp(g):
        return _reduce_to(g, a.shape), _reduce_to(g, b.shape)

    return _make(data, (a, b), vjp, "add")


def sub(a, b) -> Tensor:
    a = _ensure_tensor(a, like=b if isinstance(b, Tensor) else None)
    b = _ensure_tensor(b, like=a)
    try:
        data = a.data - b.data
    except ValueError:
        raise ShapeMismatchError(f"sub: shapes {a.shape} and {b.shape} do not broadcast") from None

    def vjp(g):
        return _reduce_to(g, a.shape), _reduce_to(-g, b.shape)

    return _make(data, (a, b), vjp, "sub")


def mul(a, b) -> Tensor:
    a = _ensure_tensor(a, like=b if isinstance(b, Tensor) else None)
    b = _ensure_tensor(b, like=a)
    try:
        data = a.data * b.data
    except ValueError:
        raise ShapeMismatchError(f"mul: shapes {a.shape} and {b.shape} do not broadcast") from None

    def vjp(g):
        return _reduce_to(g * b.data, a.shape), _reduce_to(g * a.data, b.shape)

    return _make(data, (a, b), vjp, "mul")


def div(a, b) -> Tensor:
    a = _ensure_tensor(a, like=b if isinstance(b, Tensor) else None)
    b = _ensure_tensor(b, like=a)
    try:
        data = a.data / b.data
    except ValueError:
        raise ShapeMismatchError(f"div: shapes {a.shape} and {b.shape} do not broadcast") from None

    def vjp(g):
        ga = _reduce_to(g / b.data, a.shape)
        gb = _reduce_to(-g * a.data / (b.data * b.data), b.shape)
        return ga, gb

    return _make(data, (a, b), vjp, "div")


def neg(a) -> Tensor:
    a = _ensure_tensor(a)
    return _make(-a.data, (a,), lambda g: (-g,), "neg")


def abs_(a) -> Tensor:
    a = _ensure_tensor(a)
    sign = np.sign(a.data)  # subgradient at 0 is 0
    return _make(np.abs(a.data), (a,), lambda g: (g * sign,), "abs")


def square(a) -> Tensor:
    a = _ensure_tensor(a)
    return _make(a.data * a.data, (a,), lambda g: (g * (2.0 * a.data),), "square")


def sqrt(a) -> Tensor:
    a = _ensure_tensor(a)
    out = np.sqrt(a.data)
    return _make(out, (a,), lambda g: (g * (0.5 / out),), "sqrt")


def exp(a) -> Tensor:
    a = _ensure_tensor(a)
    out = np.exp(a.data)
    return _make(out, (a,), lambda g: (g * out,), "exp")


def log(a) -> Tensor:
    a = _ensure_tensor(a)
    return _make(np.log(a.data), (a,), lambda g: (g / a.data,), "log")


def tanh(a) -> Tensor:
    a = _ensure_tensor(a)
    out = np.tanh(a.data)
    return _make(out, (a,), lambda g: (g * (1.0 - out * out),), "tanh")


def sigmoid(a) -> Tensor:
    a = _ensure_tensor(a)
    out = _sigmoid_np(a.data)
    return _make(out, (a,), lambda g: (g * out * (1.0 - out),), "sigmoid")


def relu(a) -> Tensor:
    a = _ensure_tensor(a)
    keep = a.data > 0
    return _make(np.where(keep, a.data, 0.0), (a,), lambda g: (g * keep,), "relu")


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(a) -> Tensor:
    """tanh-approximated GELU; the VJP differentiates the approximation."""
    a = _ensure_tensor(a)
    x = a.data
    inner = _GELU_C * (x + 0.044715 * x * x * x)
    t = np.tanh(inner)
    out = 0.5 * x * (1.0 + t)

    def vjp(g):
        dinner = _GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
        d = 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * dinner
        return (g * d,)

    return _make(out, (a,), vjp, "gelu")


def _sigmoid_np(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def _gelu_np(x: np.ndarray) -> np.ndarray:
    return 0.5 * x * (1.0 + np.tanh(_GELU_C * (x + 0.044715 * x * x * x)))


# -- linear algebra -----------------------------------------------------------


def matmul(a, b) -> Tensor:
    a = _ensure_tensor(a)
    b = _ensure_tensor(b, like=a)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeMismatchError(f"matmul needs >=2-D operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeMismatchError(f"matmul: inner dims differ, {a.shape} vs {b.shape}")
    data = np.matmul(a.data, b.data)

    def vjp(g):
        ga = _reduce_to(np.matmul(g, b.data.swapaxes(-1, -2)), a.shape)
        gb = _reduce_to(np.matmul(a.data.swapaxes(-1, -2), g), b.shape)
        return ga, gb

    return _make(data, (a, b), vjp, "matmul")


# -- reductions ---------------------------------------------------------------


def sum_(a, axis=None, keepdims: bool = False) -> Tensor:
    a = _ensure_tensor(a)
    data = a.data.sum(axis=axis, keepdims=keepdims)

    def vjp(g):
        g = np.asarray(g)
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _make(np.asarray(data), (a,), vjp, "sum")


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = _ensure_tensor(a)
    data = a.data.mean(axis=axis, keepdims=keepdims)
    count = a.data.size if axis is None else np.prod([a.shape[i] for i in np.atleast_1d(axis)])

    def vjp(g):
        g = np.asarray(g) / count
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _make(np.asarray(data), (a,), vjp, "mean")


# -- softmax family and normalization ----------------------------------------


def _softmax_np(x: np.ndarray, axis: int) -> np.ndarray:
    shifted = x - x.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=axis, keepdims=True)


def softmax(a, axis: int = -1) -> Tensor:
    a = _ensure_tensor(a)
    s = _softmax_np(a.data, axis)

    def vjp(g):
        dot = (g * s).sum(axis=axis, keepdims=True)
        return (s * (g - dot),)

    return _make(s, (a,), vjp, "softmax")


def log_softmax(a, axis: int = -1) -> Tensor:
    a = _ensure_tensor(a)
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    out = shifted - np.log(np.exp(shifted).sum(axis=axis, keepdims=True))

    def vjp(g):
        return (g - np.exp(out) * g.sum(axis=axis, keepdims=True),)

    return _make(out, (a,), vjp, "log_softmax")


def _layer_norm_np(x: np.ndarray, g: np.ndarray, b: np.ndarray, eps: float):
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = np.mean(xc * xc, axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    return xhat * g + b, xhat, inv


def layer_norm(x, gain, bias, eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis, then scale and shift."""
    x = _ensure_tensor(x)
    gain = _ensure_tensor(gain, like=x)
    bias = _ensure_tensor(bias, like=x)
    if gain.shape != x.shape[-1:] or bias.shape != x.shape[-1:]:
        raise ShapeMismatchError(
            f"layer_norm: gain {gain.shape} / bias {bias.shape} must match last dim of {x.shape}"
        )
    out, xhat, inv = _layer_norm_np(x.data, gain.data, bias.data, eps)

    def vjp(g):
        lead = tuple(range(g.ndim - 1))
        dgain = (g * xhat).sum(axis=lead)
        dbias = g.sum(axis=lead)
        dxhat = g * gain.data
        m1 = dxhat.mean(axis=-1, keepdims=True)
        m2 = (dxhat * xhat).mean(axis=-1, keepdims=True)
        dx = inv * (dxhat - m1 - xhat * m2)
        return dx, dgain, dbias

    return _make(out, (x, gain, bias), vjp, "layer_norm")


# -- indexing and layout ------------------------------------------------------


def getitem(a, index) -> Tensor:
    """Basic (slice/int/Ellipsis) indexing; fancy indexing is not supported."""
    a = _ensure_tensor(a)
    data = a.data[index]

    def vjp(g):
        full = np.zeros_like(a.data)
        full[index] += g
        return (full,)

    return _make(data, (a,), vjp, "getitem")


def concat(parts, axis: int = 0) -> Tensor:
    parts = [_ensure_tensor(p) for p in parts]
    if not parts:
        raise ShapeMismatchError("concat of an empty list")
    data = np.concatenate([p.data for p in parts], axis=axis)
    sizes = [p.shape[axis] for p in parts]
    offsets = np.cumsum([0] + sizes)

    def vjp(g):
        sl = [slice(None)] * g.ndim
        grads = []
        for i in range(len(parts)):
            sl[axis] = slice(offsets[i], offsets[i + 1])
            grads.append(g[tuple(sl)])
        return tuple(grads)

    return _make(data, tuple(parts), vjp, "concat")


def reshape(a, shape) -> Tensor:
    a = _ensure_tensor(a)
    data = a.data.reshape(shape)
    return _make(data, (a,), lambda g: (g.reshape(a.shape),), "reshape")


def transpose(a, axes=None) -> Tensor:
    a = _ensure_tensor(a)
    data = a.data.transpose(axes)
    inv = None if axes is None else np.argsort(axes)

    def vjp(g):
        return (g.transpose(inv),)

    return _make(data, (a,), vjp, "transpose")


def swapaxes(a, ax1: int, ax2: int) -> Tensor:
    a = _ensure_tensor(a)
    return _make(a.data.swapaxes(ax1, ax2), (a,), lambda g: (g.swapaxes(ax1, ax2),), "swapaxes")


def broadcast_to(a, shape) -> Tensor:
    a = _ensure_tensor(a)
    data = np.broadcast_to(a.data, shape).copy()
    return _make(data, (a,), lambda g: (_reduce_to(g, a.shape),), "broadcast_to")


def pad(a, pad_width) -> Tensor:
    """Zero-pad; pad_width follows np.pad convention (per-axis pairs)."""
    a = _ensure_tensor(a)
    data = np.pad(a.data, pad_width)
    sl = tuple(slice(before, before + n) for (before, _), n in zip(pad_width, a.shape))

    def vjp(g):
        return (g[sl],)

    return _make(data, (a,), vjp, "pad")


def embedding(table, ids) -> Tensor:
    """Row lookup: table (V, D) indexed by an integer array of any shape."""
    table = _ensure_tensor(table)
    ids = np.asarray(ids)
    if ids.dtype.kind not in "iu":
        raise ShapeMismatchError(f"embedding ids must be integers, got {ids.dtype}")
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise ShapeMismatchError(
            f"embedding ids out of range [0, {table.shape[0]}): min={ids.min()}, max={ids.max()}"
        )
    data = table.data[ids]

    def vjp(g):
        full = np.zeros_like(table.data)
        np.add.at(full, ids.reshape(-1), g.reshape(-1, table.shape[-1]))
        return (full,)

    return _make(data, (table,), vjp, "embedding")


def pick(a, ids) -> Tensor:
    """Select a[i, ids[i]] from a 2-D tensor; used for target log-probs."""
    a = _ensure_tensor(a)
    ids = np.asarray(ids)
    if a.ndim != 2 or ids.ndim != 1 or ids.shape[0] != a.shape[0]:
        raise ShapeMismatchError(f"pick: need (N,V) and (N,), got {a.shape} and {ids.shape}")
    if ids.size and (ids.min() < 0 or ids.max() >= a.shape[1]):
        raise ShapeMismatchError(
            f"pick ids out of range [0, {a.shape[1]}): min={ids.min()}, max={ids.max()}"
        )
    rows = np.arange(a.shape[0])
    data = a.data[rows, ids]

    def vjp(g):
        full = np.zeros_like(a.data)
        np.add.at(full, (rows, ids), g)
        return (full,)

    return _make(data, (a,), vjp, "pick")


# -- convolutions -------------------------------------------------------------


def _same_pads(size: int, kernel: int, stride: int) -> tuple[int, int]:
    out = -(-size // stride)
    total = max((out - 1) * stride + kernel - size, 0)
    before = total // 2
    return before, total - before


def conv2d(x, w, stride=(1, 1), padding: str = "same") -> Tensor:
    """2-D convolution; x (B, H, W, Cin), w (kh, kw, Cin, Cout)."""
    x = _ensure_tensor(x)
    w = _ensure_tensor(w, like=x)
    if x.ndim != 4 or w.ndim != 4:
        raise ShapeMismatchError(f"conv2d: need 4-D x and w, got {x.shape} and {w.shape}")
    kh, kw, cin, _ = w.shape
    if x.shape[3] != cin:
        raise ShapeMismatchError(f"conv2d: channels differ, x {x.shape} vs w {w.shape}")
    sh, sw = stride
    if padding == "same":
        pt, pb = _same_pads(x.shape[1], kh, sh)
        pl, pr = _same_pads(x.shape[2], kw, sw)
        xp = pad(x, ((0, 0), (pt, pb), (pl, pr), (0, 0)))
    elif padding == "valid":
        xp = x
    else:
        raise ValueError(f"unknown padding {padding!r}")
    ho = (xp.shape[1] - kh) // sh + 1
    wo = (xp.shape[2] - kw) // sw + 1
    out = None
    for i in range(kh):
        for j in range(kw):
            patch = xp[:, i : i + sh * (ho - 1) + 1 : sh, j : j + sw * (wo - 1) + 1 : sw, :]
            term = matmul(patch, w[i, j])
            out = term if out is None else out + term
    return out


def conv1d(x, w, stride: int = 1, padding: str = "same") -> Tensor:
    """1-D convolution over time; x (B, T, Cin), w (k, Cin, Cout)."""
    x = _ensure_tensor(x)
    w = _ensure_tensor(w, like=x)
    if x.ndim != 3 or w.ndim != 3:
        raise ShapeMismatchError(f"conv1d: need 3-D x and w, got {x.shape} and {w.shape}")
    k, cin, _ = w.shape
    if x.shape[2] != cin:
        raise ShapeMismatchError(f"conv1d: channels differ, x {x.shape} vs w {w.shape}")
    if padding == "same":
        pb, pa = _same_pads(x.shape[1], k, stride)
        xp = pad(x, ((0, 0), (pb, pa), (0, 0)))
    elif padding == "valid":
        xp = x
    else:
        raise ValueError(f"unknown padding {padding!r}")
    to = (xp.shape[1] - k) // stride + 1
    out = None
    for i in range(k):
        term = matmul(xp[:, i : i + stride * (to - 1) + 1 : stride, :], w[i])
        out = term if out is None else out + term
    return out


def conv1d_depthwise(x, w, padding: str = "same") -> Tensor:
    """Per-channel 1-D convolution; x (B, T, C), w (k, C)."""
    x = _ensure_tensor(x)
    w = _ensure_tensor(w, like=x)
    if x.ndim != 3 or w.ndim != 2 or x.shape[2] != w.shape[1]:
        raise ShapeMismatchError(f"conv1d_depthwise: got x {x.shape}, w {w.shape}")
    k = w.shape[0]
    if padding == "same":
        pb, pa = _same_pads(x.shape[1], k, 1)
        xp = pad(x, ((0, 0), (pb, pa), (0, 0)))
    elif padding == "valid":
        xp = x
    else:
        raise ValueError(f"unknown padding {padding!r}")
    to = xp.shape[1] - k + 1
    out = None
    for i in range(k):
        term = xp[:, i : i + to, :] * w[i]
        out = term if out is None else out + term
    return out


def dropout(x, rate: float, rng: np.random.Generator | None) -> Tensor:
    """Inverted dropout; identity when rate <= 0 or no generator is given."""
    x = _ensure_tensor(x)
    if rate <= 0.0 or rng is None:
        return x
    keep = (rng.random(x.shape) >= rate).astype(x.data.dtype)
    return x * Tensor(keep / (1.0 - rate))


# -- gradient validation ------------------------------------------------------


def grad_check(
    fn,
    args,
    eps: float = 1e-5,
    *,
    max_coords_per_tensor: int | None = None,
    rng: np.random.Generator | None = None,
    detect_nonsmooth: bool = True,
    nonsmooth_rtol: float = 0.3,
    atol: float = 0.0,
) -> float:
    """Compare analytic gradients of a scalar function with central differences.

    Returns max over probed coordinates of
    ``|analytic - numeric| / max(|analytic|, |numeric|, 1e-8)``.

    ``fn`` must be pure and scalar-valued; ``args`` is one Tensor or a
    sequence of Tensors, all float64 (float32 noise makes the comparison
    meaningless).  Coordinates where the one-sided difference quotients
    disagree are non-smooth loci (L1 kinks, argmax ties); by default they
    raise NonSmoothPointError naming the offending coordinate instead of
    letting a spurious 0 == 0 comparison pass.

    ``max_coords_per_tensor`` probes a random subset per tensor, for use on
    whole-model parameter lists where a full sweep is quadratic.

    ``atol`` passes a coordinate outright when both derivative estimates are
    at most that size. Some parameters have structurally zero gradients (a
    bias added to every attention key cancels in the softmax), and there the
    central difference returns pure rounding noise of order
    |f| * ulp / eps, which the relative formula would misread as a gross
    mismatch. Set atol above that noise level and below the smallest real
    gradient of interest; 0 disables the escape entirely.
    """
    if not (1e-7 <= eps <= 1e-3):
        raise ValueError(f"eps must lie in [1e-7, 1e-3], got {eps}")
    if atol < 0.0:
        raise ValueError(f"atol must be >= 0, got {atol}")
    single = isinstance(args, Tensor)
    tensors = [args] if single else list(args)
    for i, t in enumerate(tensors):
        if not isinstance(t, Tensor):
            raise TypeError(f"argument {i} is not a Tensor")
        if t.data.dtype != np.float64:
            raise ValueError(f"grad_check requires float64 inputs; argument {i} is {t.data.dtype}")

    leaves = [Tensor(t.data.copy(), requires_grad=True) for t in tensors]
    out = fn(*leaves)
    if not isinstance(out, Tensor) or out.data.size != 1:
        raise ShapeMismatchError("grad_check requires a scalar-valued function")
    out.backward()
    base = out.item()
    analytic = [l.grad if l.grad is not None else np.zeros_like(l.data) for l in leaves]

    datas = [t.data.copy() for t in tensors]

    def evaluate() -> float:
        with no_grad():
            return fn(*[Tensor(d) for d in datas]).item()

    if max_coords_per_tensor is not None and rng is None:
        rng = np.random.default_rng(0)

    max_rel = 0.0
    for ti, t in enumerate(tensors):
        n = t.data.size
        if max_coords_per_tensor is not None and n > max_coords_per_tensor:
            coords = rng.choice(n, size=max_coords_per_tensor, replace=False)
        else:
            coords = range(n)
        flat = datas[ti].reshape(-1)
        for c in coords:
            orig = flat[c]
            flat[c] = orig + eps
            fp = evaluate()
            flat[c] = orig - eps
            fm = evaluate()
            flat[c] = orig
            numeric = (fp - fm) / (2.0 * eps)
            if detect_nonsmooth:
                fwd = (fp - base) / eps
                bwd = (base - fm) / eps
                if abs(fwd - bwd) > nonsmooth_rtol * max(1.0, abs(fwd), abs(bwd)):
                    raise NonSmoothPointError(
                        f"one-sided derivatives disagree at argument {ti}, flat coordinate {c}: "
                        f"forward {fwd:.6g} vs backward {bwd:.6g} (non-smooth point)"
                    )
            a = float(analytic[ti].reshape(-1)[c])
            if max(abs(a), abs(numeric)) <= atol:
                continue
            rel = abs(a - numeric) / max(abs(a), abs(numeric), 1e-8)
            max_rel = max(max_rel, rel)
    return max_rel
