"""Dense tensors with define-by-run reverse-mode automatic differentiation.

Every op builds a fresh graph node that remembers its parents and a closure
mapping the output gradient to parent gradients.  ``Tensor.backward`` walks
the nodes in reverse topological order.  Elementwise ops never broadcast
implicitly: shapes must match exactly, or the second operand must be a
scalar constant.  Use :func:`broadcast_to` when an expansion is intended.

Ops accept any floating dtype and preserve it, so the same network code runs
in float32 for training and in float64 under gradient checks.
"""
from __future__ import annotations

import contextlib
import logging
import numbers
from typing import Callable, Iterable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import DomainError, NumericError, ShapeError

logger = logging.getLogger(__name__)

CLAMP_FLOOR = 1e-12

_grad_enabled = True
_clamp_events = 0


def clamp_events() -> int:
    """Number of times log/sqrt had to clamp an input up to ``CLAMP_FLOOR``."""
    return _clamp_events


def reset_clamp_events() -> None:
    global _clamp_events
    _clamp_events = 0


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block (evaluation passes)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "op")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(dtype, copy=False)
        elif not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(np.float32)
        self.data: np.ndarray = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None
        self.op = "leaf"

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
        return self.data.item()

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, op={self.op})"

    def __len__(self) -> int:
        return len(self.data)

    # -- autodiff ------------------------------------------------------
    def backward(self, grad: np.ndarray | None = None) -> None:
        """Accumulate d(self)/d(leaf) into ``leaf.grad`` for every reachable leaf.

        Without an explicit ``grad`` the tensor must be a scalar.
        """
        if grad is None:
            if self.data.size != 1:
                raise ShapeError(f"backward() needs a scalar loss, got shape {self.shape}")
            grad = np.ones_like(self.data)
        else:
            grad = np.asarray(grad, dtype=self.dtype)
            if grad.shape != self.shape:
                raise ShapeError(f"seed gradient shape {grad.shape} != {self.shape}")

        order = _topo_order(self)
        grads: dict[int, np.ndarray] = {id(self): grad}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if not node._parents:
                if node.requires_grad:
                    node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            parent_grads = node._backward(g)
            for parent, pg in zip(node._parents, parent_grads):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg

    # -- operator sugar ------------------------------------------------
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
        return div(self, other)

    def __rtruediv__(self, other):
        return mul(reciprocal(self), other)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    def sum(self, axis=None, keepdims: bool = False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        return mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    @property
    def T(self):
        return transpose(self, None)


def tensor(data, requires_grad: bool = False, dtype=None) -> Tensor:
    return Tensor(data, requires_grad=requires_grad, dtype=dtype)


def _topo_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
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


def _result(data: np.ndarray, parents: Iterable[Tensor], backward, op: str) -> Tensor:
    if not np.all(np.isfinite(data)):
        raise NumericError(f"{op} produced non-finite values")
    out = Tensor(data)
    parents = tuple(parents)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward
    out.op = op
    return out


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _is_constant(b) -> bool:
    return isinstance(b, numbers.Real) or (isinstance(b, np.ndarray) and b.ndim == 0)


def _check_same_shape(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


# ----------------------------------------------------------------------
# elementwise
# ----------------------------------------------------------------------

def add(a, b) -> Tensor:
    a = _as_tensor(a)
    if _is_constant(b):
        c = a.dtype.type(b)
        return _result(a.data + c, (a,), lambda g: (g,), "add")
    b = _as_tensor(b)
    _check_same_shape(a, b, "add")
    return _result(a.data + b.data, (a, b), lambda g: (g, g), "add")


def sub(a, b) -> Tensor:
    a = _as_tensor(a)
    if _is_constant(b):
        c = a.dtype.type(b)
        return _result(a.data - c, (a,), lambda g: (g,), "sub")
    b = _as_tensor(b)
    _check_same_shape(a, b, "sub")
    return _result(a.data - b.data, (a, b), lambda g: (g, -g), "sub")


def mul(a, b) -> Tensor:
    a = _as_tensor(a)
    if _is_constant(b):
        c = a.dtype.type(b)
        return _result(a.data * c, (a,), lambda g: (g * c,), "mul")
    b = _as_tensor(b)
    _check_same_shape(a, b, "mul")
    ad, bd = a.data, b.data
    return _result(ad * bd, (a, b), lambda g: (g * bd, g * ad), "mul")


def scale(a: Tensor, c: float) -> Tensor:
    return mul(a, c)


def div(a, b) -> Tensor:
    a = _as_tensor(a)
    if _is_constant(b):
        if b == 0:
            raise DomainError("div: division by zero constant")
        c = a.dtype.type(b)
        return _result(a.data / c, (a,), lambda g: (g / c,), "div")
    b = _as_tensor(b)
    _check_same_shape(a, b, "div")
    if np.any(b.data == 0):
        raise DomainError("div: zero in divisor")
    ad, bd = a.data, b.data
    out = ad / bd
    return _result(out, (a, b), lambda g: (g / bd, -g * out / bd), "div")


def neg(a: Tensor) -> Tensor:
    return _result(-a.data, (a,), lambda g: (-g,), "neg")


def reciprocal(a: Tensor) -> Tensor:
    if np.any(a.data == 0):
        raise DomainError("reciprocal: zero input")
    out = 1.0 / a.data
    return _result(out, (a,), lambda g: (-g * out * out,), "reciprocal")


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return _result(np.where(mask, a.data, 0).astype(a.dtype), (a,), lambda g: (g * mask,), "relu")


def sigmoid(a: Tensor) -> Tensor:
    out = _stable_sigmoid(a.data)
    return _result(out, (a,), lambda g: (g * out * (1 - out),), "sigmoid")


def _stable_sigmoid(z: np.ndarray) -> np.ndarray:
    e = np.exp(-np.abs(z))
    return np.where(z >= 0, 1 / (1 + e), e / (1 + e)).astype(z.dtype)


def exp(a: Tensor) -> Tensor:
    with np.errstate(over="ignore"):
        out = np.exp(a.data)
    return _result(out, (a,), lambda g: (g * out,), "exp")


def _clamp_floor(x: np.ndarray, op: str) -> np.ndarray:
    global _clamp_events
    low = x < CLAMP_FLOOR
    if np.any(low):
        _clamp_events += 1
        logger.warning("%s: %d input(s) clamped to %g", op, int(low.sum()), CLAMP_FLOOR)
        x = np.where(low, x.dtype.type(CLAMP_FLOOR), x)
    return x


def log(a: Tensor) -> Tensor:
    if np.any(a.data <= 0):
        raise DomainError("log: non-positive input")
    x = _clamp_floor(a.data, "log")
    return _result(np.log(x), (a,), lambda g: (g / x,), "log")


def sqrt(a: Tensor) -> Tensor:
    if np.any(a.data < 0):
        raise DomainError("sqrt: negative input")
    x = _clamp_floor(a.data, "sqrt")
    out = np.sqrt(x)
    return _result(out, (a,), lambda g: (g / (2 * out),), "sqrt")


def elementwise(op: str, a, b=None) -> Tensor:
    """Dispatch by name: add, sub, mul, div, relu, sigmoid, exp, log, sqrt, scale."""
    binary = {"add": add, "sub": sub, "mul": mul, "div": div, "scale": scale}
    unary = {"relu": relu, "sigmoid": sigmoid, "exp": exp, "log": log, "sqrt": sqrt}
    if op in binary:
        return binary[op](_as_tensor(a), b)
    if op in unary:
        return unary[op](_as_tensor(a))
    raise ValueError(f"unknown elementwise op {op!r}")


# ----------------------------------------------------------------------
# shape manipulation and reductions
# ----------------------------------------------------------------------

def reshape(a: Tensor, shape) -> Tensor:
    src = a.shape
    return _result(a.data.reshape(shape), (a,), lambda g: (g.reshape(src),), "reshape")


def transpose(a: Tensor, axes=None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    inv = tuple(np.argsort(axes))
    return _result(np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inv),), "transpose")


def broadcast_to(a: Tensor, shape) -> Tensor:
    """Explicit numpy-style expansion; the gradient sums over expanded axes."""
    shape = tuple(shape)
    src = a.shape
    try:
        out = np.broadcast_to(a.data, shape).copy()
    except ValueError as exc:
        raise ShapeError(f"cannot broadcast {src} to {shape}") from exc

    def backward(g):
        lead = len(shape) - len(src)
        g = g.sum(axis=tuple(range(lead))) if lead else g
        axes = tuple(i for i, n in enumerate(src) if n == 1 and g.shape[i] != 1)
        if axes:
            g = g.sum(axis=axes, keepdims=True)
        return (g,)

    return _result(out, (a,), backward, "broadcast_to")


def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    src = a.shape
    out = np.asarray(a.data.sum(axis=axis, keepdims=keepdims))

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, src).copy(),)

    return _result(out, (a,), backward, "sum")


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is None:
        n = a.size
    else:
        axes = (axis,) if isinstance(axis, int) else axis
        n = int(np.prod([a.shape[i] for i in axes]))
    return mul(tsum(a, axis=axis, keepdims=keepdims), 1.0 / n)


def getitem(a: Tensor, index) -> Tensor:
    src_shape = a.shape
    dtype = a.dtype

    def backward(g):
        full = np.zeros(src_shape, dtype=dtype)
        np.add.at(full, index, g)
        return (full,)

    return _result(np.array(a.data[index]), (a,), backward, "getitem")


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [_as_tensor(t) for t in tensors]
    ref = tensors[0]
    ax = axis % ref.ndim
    for t in tensors[1:]:
        if t.ndim != ref.ndim or any(
            t.shape[i] != ref.shape[i] for i in range(ref.ndim) if i != ax
        ):
            raise ShapeError(f"concat: incompatible shapes {ref.shape} and {t.shape} on axis {axis}")
    sizes = [t.shape[ax] for t in tensors]
    bounds = np.cumsum([0] + sizes)

    def backward(g):
        return tuple(
            np.take(g, np.arange(bounds[i], bounds[i + 1]), axis=ax) for i in range(len(tensors))
        )

    return _result(np.concatenate([t.data for t in tensors], axis=ax), tensors, backward, "concat")


def concat_channels(a: Tensor, b: Tensor) -> Tensor:
    """Stack along the channel axis of ``C×H×W`` or ``N×C×H×W`` maps."""
    if a.shape[-2:] != b.shape[-2:] or a.shape[:-3] != b.shape[:-3]:
        raise ShapeError(f"concat_channels: spatial mismatch {a.shape} vs {b.shape}")
    return concat([a, b], axis=-3)


# ----------------------------------------------------------------------
# linear algebra
# ----------------------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product over the last two axes; leading batch axes must agree exactly."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim < 2 or a.ndim != b.ndim or a.shape[:-2] != b.shape[:-2] or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    ad, bd = a.data, b.data

    def backward(g):
        return (g @ np.swapaxes(bd, -1, -2), np.swapaxes(ad, -1, -2) @ g)

    return _result(ad @ bd, (a, b), backward, "matmul")


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """``x @ w + b`` for ``x: N×D_in``, ``w: D_in×D_out``, ``b: D_out``."""
    y = matmul(x, w)
    if b is not None:
        y = add(y, broadcast_to(b, y.shape))
    return y


# ----------------------------------------------------------------------
# convolution, pooling, resampling
# ----------------------------------------------------------------------

def _batched(x: Tensor, op: str) -> tuple[Tensor, bool]:
    if x.ndim == 3:
        return reshape(x, (1,) + x.shape), True
    if x.ndim == 4:
        return x, False
    raise ShapeError(f"{op}: expected C×H×W or N×C×H×W, got {x.shape}")


def conv_output_size(n: int, k: int, stride: int, padding: int) -> int:
    span = n + 2 * padding - k
    if span < 0 or span % stride:
        raise ShapeError(
            f"conv2d: non-integral output size ({n} + 2*{padding} - {k})/{stride} + 1"
        )
    return span // stride + 1


def conv2d(x: Tensor, w: Tensor, bias: Tensor | None = None, stride: int = 1, padding: int = 0) -> Tensor:
    """Cross-correlation with zero padding.

    ``x`` is ``C_in×H×W`` or ``N×C_in×H×W``; ``w`` is ``C_out×C_in×k×k``.  The
    kernel must be odd, or equal to the stride (non-overlapping patch merge).
    """
    xb, squeeze = _batched(x, "conv2d")
    n, cin, h, wd = xb.shape
    cout, wcin, kh, kw = w.shape
    if wcin != cin or kh != kw:
        raise ShapeError(f"conv2d: weight {w.shape} incompatible with input {x.shape}")
    k = kh
    if k % 2 == 0 and k != stride:
        raise ShapeError(f"conv2d: even kernel {k} only allowed as a stride-{k} patch merge")
    ho = conv_output_size(h, k, stride, padding)
    wo = conv_output_size(wd, k, stride, padding)

    xd, wdat = xb.data, w.data
    xp = np.pad(xd, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else xd
    win = sliding_window_view(xp, (k, k), axis=(2, 3))[:, :, ::stride, ::stride][:, :, :ho, :wo]
    out = np.tensordot(win, wdat, axes=([1, 4, 5], [1, 2, 3])).transpose(0, 3, 1, 2)
    if bias is not None:
        if bias.shape != (cout,):
            raise ShapeError(f"conv2d: bias shape {bias.shape} != ({cout},)")
        out = out + bias.data.reshape(1, cout, 1, 1)
    out = np.ascontiguousarray(out)

    def backward(g):
        gw = np.tensordot(g, win, axes=([0, 2, 3], [0, 2, 3]))
        gxp = np.zeros_like(xp)
        for i in range(k):
            for j in range(k):
                gxp[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride] += np.einsum(
                    "nohw,oc->nchw", g, wdat[:, :, i, j]
                )
        gx = gxp[:, :, padding : padding + h, padding : padding + wd] if padding else gxp
        gb = g.sum(axis=(0, 2, 3)) if bias is not None else None
        return (gx, gw, gb)

    parents = (xb, w) if bias is None else (xb, w, bias)
    y = _result(out, parents, backward, "conv2d")
    return reshape(y, y.shape[1:]) if squeeze else y


def avg_pool(x: Tensor, window: int) -> Tensor:
    """Mean over non-overlapping ``window×window`` blocks of the last two axes."""
    *lead, h, w = x.shape
    if window < 1 or h % window or w % window:
        raise ShapeError(f"avg_pool: extents {h}×{w} not divisible by window {window}")
    src = x.shape
    blocks = x.data.reshape(*lead, h // window, window, w // window, window)
    out = blocks.mean(axis=(-3, -1))
    inv = x.dtype.type(1.0 / (window * window))

    def backward(g):
        g = np.repeat(np.repeat(g, window, axis=-2), window, axis=-1) * inv
        return (g.reshape(src),)

    return _result(out, (x,), backward, "avg_pool")


def global_avg_pool(x: Tensor) -> Tensor:
    """``C×H×W -> C`` (or ``N×C×H×W -> N×C``)."""
    return mean(x, axis=(-2, -1))


def upsample_nearest(x: Tensor, factor: int) -> Tensor:
    if factor < 1:
        raise ShapeError(f"upsample_nearest: factor must be >= 1, got {factor}")
    if factor == 1:
        return _result(x.data.copy(), (x,), lambda g: (g,), "upsample_nearest")
    *lead, h, w = x.shape
    out = np.repeat(np.repeat(x.data, factor, axis=-2), factor, axis=-1)

    def backward(g):
        return (g.reshape(*lead, h, factor, w, factor).sum(axis=(-3, -1)),)

    return _result(out, (x,), backward, "upsample_nearest")


def group_norm(x: Tensor, groups: int, weight: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize ``N×C×H×W`` over channel groups, then a per-channel affine map."""
    if x.ndim != 4:
        raise ShapeError(f"group_norm: expected N×C×H×W, got {x.shape}")
    n, c, h, w = x.shape
    if groups < 1 or c % groups:
        raise ShapeError(f"group_norm: {c} channels not divisible into {groups} groups")
    if weight.shape != (c,) or bias.shape != (c,):
        raise ShapeError(f"group_norm: affine parameters must have shape ({c},)")
    xg = x.data.reshape(n, groups, -1)
    mu = xg.mean(axis=-1, keepdims=True)
    centered = xg - mu
    inv_std = 1.0 / np.sqrt((centered * centered).mean(axis=-1, keepdims=True) + x.dtype.type(eps))
    xhat = (centered * inv_std).reshape(x.shape)
    gamma = weight.data.reshape(1, c, 1, 1)
    out = xhat * gamma + bias.data.reshape(1, c, 1, 1)

    def backward(g):
        dxhat = (g * gamma).reshape(n, groups, -1)
        xh = xhat.reshape(n, groups, -1)
        dx = inv_std * (dxhat - dxhat.mean(axis=-1, keepdims=True)
                        - xh * (dxhat * xh).mean(axis=-1, keepdims=True))
        return (dx.reshape(x.shape), (g * xhat).sum(axis=(0, 2, 3)), g.sum(axis=(0, 2, 3)))

    return _result(out, (x, weight, bias), backward, "group_norm")


# ----------------------------------------------------------------------
# normalized probabilities and losses
# ----------------------------------------------------------------------

def softmax(x: Tensor, axis: int = -1) -> Tensor:
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _result(out, (x,), backward, "softmax")


def softmax_cross_entropy(logits: Tensor, targets: Sequence[int]) -> Tensor:
    """Mean over rows of ``-log softmax(row)[target]``, max-subtracted for stability."""
    if logits.ndim != 2:
        raise ShapeError(f"softmax_cross_entropy: expected 2-D logits, got {logits.shape}")
    rows, classes = logits.shape
    idx = np.asarray(targets, dtype=np.int64)
    if idx.shape != (rows,):
        raise ShapeError(f"softmax_cross_entropy: need {rows} targets, got {idx.shape}")
    if np.any(idx < 0) or np.any(idx >= classes):
        raise IndexError(f"softmax_cross_entropy: target index outside [0, {classes})")
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1))
    picked = z[np.arange(rows), idx]
    loss = np.asarray((lse - picked).mean(), dtype=logits.dtype)
    probs = np.exp(z - lse[:, None])

    def backward(g):
        d = probs.copy()
        d[np.arange(rows), idx] -= 1
        return (d * (g / rows),)

    return _result(loss, (logits,), backward, "softmax_cross_entropy")


def bce_with_logits(logits: Tensor, targets: np.ndarray) -> Tensor:
    """Mean binary cross-entropy in the stable form ``max(z,0) - z*t + log1p(exp(-|z|))``."""
    t = np.asarray(targets, dtype=logits.dtype)
    if t.shape != logits.shape:
        raise ShapeError(f"bce: logits {logits.shape} vs targets {t.shape}")
    z = logits.data
    per = np.maximum(z, 0) - z * t + np.log1p(np.exp(-np.abs(z)))
    loss = np.asarray(per.mean(), dtype=logits.dtype)
    n = z.size

    def backward(g):
        return ((_stable_sigmoid(z) - t) * (g / n),)

    return _result(loss, (logits,), backward, "bce_with_logits")
