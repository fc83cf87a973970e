"""Dense tensors with reverse-mode automatic differentiation.

Implements exactly the operator set a small Vision Transformer plus a
distillation head needs: broadcast arithmetic, (batched) matmul, reshaping,
slicing, reductions, softmax/log-softmax with temperature, layer norm,
tanh-GELU and a stable binary cross-entropy.  The computation graph is a
tape of nodes holding parent references; `backward` walks it once in
reverse topological order.

Storage defaults to float32; reductions accumulate in float64 and cast
back.  Ops preserve the dtype of their inputs, so the same graph can be
evaluated in float64 for finite-difference verification.  Any NaN/Inf
produced by a forward op raises NumericError immediately.
"""

from __future__ import annotations

import contextlib
import math
from typing import Iterable, Sequence

import numpy as np

from .errors import DimensionError, NumericError, ParameterError, UsageError

_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Disable graph recording; forward values only."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def _as_array(value, dtype=None):
    arr = np.asarray(value)
    if arr.dtype not in (np.float32, np.float64):
        arr = arr.astype(np.float32 if dtype is None else dtype)
    if dtype is not None and arr.dtype != dtype:
        arr = arr.astype(dtype)
    return arr


def _check_finite(arr: np.ndarray, op: str) -> None:
    # A float64 sum of finite float32 values cannot overflow, and any
    # NaN/Inf input makes the sum non-finite, so this is a fast exact check.
    if not math.isfinite(float(np.sum(arr, dtype=np.float64))):
        raise NumericError(f"non-finite value produced by {op}")


class Tensor:
    """A numpy array plus an optional gradient tape node."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_vjp", "_op")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        self.data = _as_array(data, dtype)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._vjp = None
        self._op = "leaf"

    # -- construction -----------------------------------------------------

    @staticmethod
    def _from_op(data, parents: Sequence["Tensor"], vjp, op: str,
                 check: bool = False) -> "Tensor":
        # `check` marks ops that can mint non-finite values from finite
        # inputs (exp/log/div/matmul overflow...); cheap linear ops cannot,
        # and NaN/Inf propagates to a checked op or the loss downstream.
        if check:
            _check_finite(data, op)
        out = Tensor.__new__(Tensor)
        out.data = data
        out.grad = None
        out._op = op
        if _grad_enabled and any(p.requires_grad for p in parents):
            out.requires_grad = True
            out._parents = tuple(parents)
            out._vjp = vjp
        else:
            out.requires_grad = False
            out._parents = ()
            out._vjp = None
        return out

    # -- introspection ----------------------------------------------------

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self):
        return self.data.size

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = np.zeros_like(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, op={self._op})"

    # -- operators ----------------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(_wrap(other, self.dtype), self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __pow__(self, p):
        return pow_scalar(self, p)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, axes=None):
        return transpose(self, axes)


def _wrap(value, dtype) -> Tensor:
    if isinstance(value, Tensor):
        return value
    return Tensor(np.asarray(value, dtype=dtype))


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum `grad` back down to `shape` after numpy broadcasting."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.astype(grad.dtype, copy=False)


# -- arithmetic -------------------------------------------------------------


def add(a: Tensor, b) -> Tensor:
    b = _wrap(b, a.dtype)
    out = a.data + b.data

    def vjp(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return Tensor._from_op(out, (a, b), vjp, "add")


def sub(a: Tensor, b) -> Tensor:
    b = _wrap(b, a.dtype)
    out = a.data - b.data

    def vjp(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return Tensor._from_op(out, (a, b), vjp, "sub")


def mul(a: Tensor, b) -> Tensor:
    b = _wrap(b, a.dtype)
    out = a.data * b.data

    def vjp(g):
        return (
            _unbroadcast(g * b.data, a.shape),
            _unbroadcast(g * a.data, b.shape),
        )

    return Tensor._from_op(out, (a, b), vjp, "mul")


def div(a: Tensor, b) -> Tensor:
    b = _wrap(b, a.dtype)
    with np.errstate(divide="ignore", invalid="ignore"):
        out = a.data / b.data

    def vjp(g):
        return (
            _unbroadcast(g / b.data, a.shape),
            _unbroadcast(-g * a.data / (b.data * b.data), b.shape),
        )

    return Tensor._from_op(out, (a, b), vjp, "div", check=True)


def neg(a: Tensor) -> Tensor:
    return Tensor._from_op(-a.data, (a,), lambda g: (-g,), "neg")


def pow_scalar(a: Tensor, p: float) -> Tensor:
    with np.errstate(invalid="ignore", divide="ignore"):
        out = a.data**p

    def vjp(g):
        return (g * p * a.data ** (p - 1),)

    return Tensor._from_op(out, (a,), vjp, "pow", check=True)


def texp(a: Tensor) -> Tensor:
    with np.errstate(over="ignore"):
        out = np.exp(a.data)
    return Tensor._from_op(out, (a,), lambda g: (g * out,), "exp", check=True)


def tlog(a: Tensor) -> Tensor:
    with np.errstate(invalid="ignore", divide="ignore"):
        out = np.log(a.data)
    return Tensor._from_op(out, (a,), lambda g: (g / a.data,), "log", check=True)


def tsqrt(a: Tensor) -> Tensor:
    with np.errstate(invalid="ignore"):
        out = np.sqrt(a.data)
    return Tensor._from_op(out, (a,), lambda g: (g / (2.0 * out),), "sqrt", check=True)


# -- matmul ------------------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product with numpy batch broadcasting over leading dims."""
    if a.ndim < 2 or b.ndim < 2:
        raise DimensionError("matmul operands must have ndim >= 2")
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError(
            f"matmul inner dims differ: {a.shape} x {b.shape}"
        )
    out = np.matmul(a.data, b.data)

    def vjp(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    # inf/nan minted here surfaces at the next checked op (layer_norm,
    # softmax, l2_normalize) before reaching the loss
    return Tensor._from_op(out, (a, b), vjp, "matmul")


# -- shape ops ----------------------------------------------------------------


def reshape(a: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    out = a.data.reshape(shape)

    def vjp(g):
        return (g.reshape(a.shape),)

    return Tensor._from_op(out, (a,), vjp, "reshape")


def transpose(a: Tensor, axes=None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    out = a.data.transpose(axes)

    def vjp(g):
        return (g.transpose(inv),)

    return Tensor._from_op(out, (a,), vjp, "transpose")


def concat(tensors: Iterable[Tensor], axis: int = 0) -> Tensor:
    tensors = list(tensors)
    out = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def vjp(g):
        return tuple(np.split(g, splits, axis=axis))

    return Tensor._from_op(out, tensors, vjp, "concat")


def getitem(a: Tensor, idx) -> Tensor:
    out = a.data[idx]

    def vjp(g):
        ga = np.zeros_like(a.data)
        ga[idx] += g
        return (ga,)

    return Tensor._from_op(out.copy(), (a,), vjp, "getitem")


# -- reductions ----------------------------------------------------------------


def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = np.sum(a.data, axis=axis, keepdims=keepdims, dtype=np.float64)
    out = out.astype(a.dtype)

    def vjp(g):
        if axis is None:
            return (np.broadcast_to(g, a.shape).astype(a.dtype),)
        gg = g if keepdims else np.expand_dims(g, axis)
        return (np.broadcast_to(gg, a.shape).astype(a.dtype),)

    return Tensor._from_op(np.asarray(out), (a,), vjp, "sum")


def tmean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is None:
        n = a.size
    else:
        n = a.shape[axis]
    out = np.sum(a.data, axis=axis, keepdims=keepdims, dtype=np.float64) / n
    out = out.astype(a.dtype)

    def vjp(g):
        if axis is None:
            return ((np.broadcast_to(g, a.shape) / n).astype(a.dtype),)
        gg = g if keepdims else np.expand_dims(g, axis)
        return ((np.broadcast_to(gg, a.shape) / n).astype(a.dtype),)

    return Tensor._from_op(np.asarray(out), (a,), vjp, "mean")


# -- neural-net primitives -----------------------------------------------------


def softmax(x: Tensor, temperature: float = 1.0, axis: int = -1) -> Tensor:
    """Temperature softmax along `axis`, computed with max-subtraction."""
    if not temperature > 0:
        raise ParameterError(f"softmax temperature must be > 0, got {temperature}")
    z = x.data / np.asarray(temperature, dtype=x.dtype)
    z = z - np.max(z, axis=axis, keepdims=True)
    e = np.exp(z)
    denom = np.sum(e, axis=axis, keepdims=True, dtype=np.float64).astype(x.dtype)
    y = e / denom

    def vjp(g):
        inner = np.sum(g * y, axis=axis, keepdims=True,
                       dtype=np.float64).astype(x.dtype)
        return ((g - inner) * y / np.asarray(temperature, dtype=x.dtype),)

    return Tensor._from_op(y, (x,), vjp, "softmax", check=True)


def log_softmax(x: Tensor, temperature: float = 1.0, axis: int = -1) -> Tensor:
    if not temperature > 0:
        raise ParameterError(f"log_softmax temperature must be > 0, got {temperature}")
    z = x.data / np.asarray(temperature, dtype=x.dtype)
    m = np.max(z, axis=axis, keepdims=True)
    e = np.exp(z - m)
    s = np.sum(e, axis=axis, keepdims=True, dtype=np.float64)
    out = (z - m - np.log(s).astype(x.dtype))
    y = (e / s.astype(x.dtype))

    def vjp(g):
        inner = np.sum(g, axis=axis, keepdims=True,
                       dtype=np.float64).astype(x.dtype)
        return ((g - y * inner) / np.asarray(temperature, dtype=x.dtype),)

    return Tensor._from_op(out, (x,), vjp, "log_softmax", check=True)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis to zero mean / unit variance, then affine."""
    d = x.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise DimensionError("layer_norm gain/bias must match the last axis")
    xd = x.data
    mu = np.mean(xd, axis=-1, keepdims=True, dtype=np.float64)
    m2 = np.mean(xd * xd, axis=-1, keepdims=True, dtype=np.float64)
    var = np.maximum(m2 - mu * mu, 0.0)
    inv = (1.0 / np.sqrt(var + eps)).astype(x.dtype)
    xhat = (xd - mu.astype(x.dtype)) * inv
    out = xhat * gain.data + bias.data

    def vjp(g):
        gx_hat = g * gain.data
        c1 = np.mean(gx_hat, axis=-1, keepdims=True,
                     dtype=np.float64).astype(x.dtype)
        c2 = np.mean(gx_hat * xhat, axis=-1, keepdims=True,
                     dtype=np.float64).astype(x.dtype)
        gx = inv * (gx_hat - c1 - xhat * c2)
        axes = tuple(range(x.ndim - 1))
        ggain = np.sum(g * xhat, axis=axes, dtype=np.float64).astype(x.dtype)
        gbias = np.sum(g, axis=axes, dtype=np.float64).astype(x.dtype)
        return gx, ggain, gbias

    return Tensor._from_op(out, (x, gain, bias), vjp, "layer_norm", check=True)


_GELU_C = 0.7978845608028654  # sqrt(2/pi)
_GELU_A = 0.044715


def gelu(x: Tensor) -> Tensor:
    """tanh-approximation GELU."""
    xd = x.data
    x2 = xd * xd
    t = np.tanh(_GELU_C * (xd + _GELU_A * x2 * xd))
    out = (0.5 * xd * (1.0 + t)).astype(x.dtype)

    def vjp(g):
        du = _GELU_C * (1.0 + 3.0 * _GELU_A * x2)
        grad = 0.5 * (1.0 + t) + 0.5 * xd * (1.0 - t * t) * du
        return ((g * grad).astype(x.dtype),)

    return Tensor._from_op(out, (x,), vjp, "gelu")


def bce_with_logits(logits: Tensor, targets: np.ndarray) -> Tensor:
    """Elementwise stable binary cross-entropy: softplus(z) - y*z."""
    z = logits.data
    y = np.asarray(targets, dtype=z.dtype)
    if y.shape != z.shape:
        raise DimensionError("bce_with_logits target shape mismatch")
    out = (np.maximum(z, 0.0) - z * y + np.log1p(np.exp(-np.abs(z)))).astype(
        z.dtype
    )

    def vjp(g):
        sig = 1.0 / (1.0 + np.exp(-z))
        return ((g * (sig - y)).astype(z.dtype),)

    return Tensor._from_op(out, (logits,), vjp, "bce_with_logits", check=True)


def l2_normalize(x: Tensor, axis: int = -1, eps: float = 1e-12) -> Tensor:
    """x / max(||x||, eps) along `axis`; exactly invariant to positive scaling."""
    norm = np.sqrt(np.sum(x.data.astype(np.float64) ** 2, axis=axis, keepdims=True))
    n = np.maximum(norm, eps).astype(x.dtype)
    y = (x.data / n).astype(x.dtype)

    def vjp(g):
        clamped = norm <= eps
        inner = np.sum(g * y, axis=axis, keepdims=True, dtype=np.float64)
        gx = (g - np.where(clamped, 0.0, y * inner)) / n
        return (gx.astype(x.dtype),)

    return Tensor._from_op(y, (x,), vjp, "l2_normalize", check=True)


# -- backward ------------------------------------------------------------------


def _topo_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, processed = stack.pop()
        if processed:
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


def backward(loss: Tensor) -> None:
    """Populate `.grad` on every requires_grad tensor reachable from `loss`.

    The loss must be scalar.  Gradients accumulate (callers zero them
    between steps).  NaN/Inf in any gradient raises NumericError.
    """
    if loss.data.size != 1:
        raise UsageError("backward requires a scalar loss")
    if not loss.requires_grad:
        return
    order = _topo_order(loss)
    grads: dict[int, np.ndarray] = {
        id(loss): np.ones_like(loss.data)
    }
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._vjp is not None:
            parent_grads = node._vjp(g)
            for parent, pg in zip(node._parents, parent_grads):
                if pg is None or not parent.requires_grad:
                    continue
                prev = grads.get(id(parent))
                grads[id(parent)] = pg if prev is None else prev + pg
        if node._parents == () and node.requires_grad:
            if not np.all(np.isfinite(g)):
                raise NumericError("non-finite gradient in backward")
            if node.grad is None:
                node.grad = np.zeros_like(node.data)
            node.grad = node.grad + g.astype(node.dtype, copy=False)
