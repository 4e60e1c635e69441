"""Dense float64 tensors with tape-based reverse-mode differentiation.

Every op builds a node holding its parents and a closure mapping the output
adjoint to one adjoint per parent. ``backward`` walks the nodes reachable from
a scalar loss in reverse topological order (the "tape") and accumulates
gradients into ``.grad``.

Broadcasting follows numpy, with one extra rule: a rank-1 operand combined
with a rank-4 ``(B, C, H, W)`` operand is treated as a per-channel vector and
broadcast over batch, height and width.
"""
from __future__ import annotations

from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import ContractError, DimensionError, DomainError, ParameterError

DTYPE = np.float64
MAX_RANK = 4

BackwardFn = Callable[[np.ndarray], Sequence["np.ndarray | None"]]


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "op")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data, dtype=DTYPE)
        if arr.ndim > MAX_RANK:
            raise DimensionError(f"rank {arr.ndim} exceeds the supported maximum of {MAX_RANK}")
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple[Tensor, ...] = ()
        self._backward: BackwardFn | None = None
        self.op = "leaf"

    # -- construction helpers -------------------------------------------------
    @classmethod
    def _from_op(cls, data: np.ndarray, parents: Sequence["Tensor"], backward: BackwardFn, op: str) -> "Tensor":
        out = cls.__new__(cls)
        out.data = data
        out.grad = None
        out.op = op
        out.requires_grad = any(p.requires_grad for p in parents)
        if out.requires_grad:
            out._parents = tuple(parents)
            out._backward = backward
        else:
            out._parents = ()
            out._backward = None
        return out

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

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

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor({np.array2string(self.data, precision=4)}{flag})"

    def __len__(self) -> int:
        return len(self.data)

    # -- operators -------------------------------------------------------------
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

    def __pow__(self, exponent: float):
        return power(self, exponent)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        return mean(self, axis, keepdims)

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    @property
    def T(self) -> "Tensor":
        return transpose(self)


def tensor(data, requires_grad: bool = False) -> Tensor:
    return Tensor(data, requires_grad=requires_grad)


def _wrap(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _align(a: Tensor, b: Tensor) -> tuple[Tensor, Tensor]:
    """Apply the channel-vector rule, then check numpy broadcast compatibility."""
    if a.ndim == 4 and b.ndim == 1:
        if b.shape[0] != a.shape[1]:
            raise DimensionError(f"channel vector of length {b.shape[0]} does not match {a.shape[1]} channels")
        b = reshape(b, (1, b.shape[0], 1, 1))
    elif a.ndim == 1 and b.ndim == 4:
        if a.shape[0] != b.shape[1]:
            raise DimensionError(f"channel vector of length {a.shape[0]} does not match {b.shape[1]} channels")
        a = reshape(a, (1, a.shape[0], 1, 1))
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError as exc:
        raise DimensionError(f"shapes {a.shape} and {b.shape} do not broadcast") from exc
    return a, b


# -- elementwise ---------------------------------------------------------------
def add(a, b) -> Tensor:
    a, b = _align(_wrap(a), _wrap(b))
    sa, sb = a.shape, b.shape
    return Tensor._from_op(a.data + b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)), "add")


def sub(a, b) -> Tensor:
    a, b = _align(_wrap(a), _wrap(b))
    sa, sb = a.shape, b.shape
    return Tensor._from_op(a.data - b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)), "sub")


def mul(a, b) -> Tensor:
    a, b = _align(_wrap(a), _wrap(b))
    ad, bd = a.data, b.data
    return Tensor._from_op(
        ad * bd,
        (a, b),
        lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)),
        "mul",
    )


def div(a, b) -> Tensor:
    a, b = _align(_wrap(a), _wrap(b))
    if np.any(b.data == 0):
        raise DomainError("division by zero; guard the denominator with an epsilon")
    ad, bd = a.data, b.data
    out = ad / bd

    def backward(g):
        return _unbroadcast(g / bd, ad.shape), _unbroadcast(-g * out / bd, bd.shape)

    return Tensor._from_op(out, (a, b), backward, "div")


def neg(a) -> Tensor:
    a = _wrap(a)
    return Tensor._from_op(-a.data, (a,), lambda g: (-g,), "neg")


def exp(a) -> Tensor:
    a = _wrap(a)
    out = np.exp(a.data)
    return Tensor._from_op(out, (a,), lambda g: (g * out,), "exp")


def log(a) -> Tensor:
    a = _wrap(a)
    if np.any(a.data <= 0):
        raise DomainError("log of a non-positive value")
    ad = a.data
    return Tensor._from_op(np.log(ad), (a,), lambda g: (g / ad,), "log")


def sqrt(a) -> Tensor:
    a = _wrap(a)
    if np.any(a.data < 0):
        raise DomainError("sqrt of a negative value")
    out = np.sqrt(a.data)
    return Tensor._from_op(out, (a,), lambda g: (g * 0.5 / out,), "sqrt")


def power(a, exponent: float) -> Tensor:
    a = _wrap(a)
    ad = a.data
    if exponent == 2:
        return Tensor._from_op(ad * ad, (a,), lambda g: (2.0 * g * ad,), "square")
    return Tensor._from_op(ad**exponent, (a,), lambda g: (g * exponent * ad ** (exponent - 1),), "pow")


def relu(a) -> Tensor:
    a = _wrap(a)
    out = np.maximum(a.data, 0.0)
    return Tensor._from_op(out, (a,), lambda g: (g * (out > 0),), "relu")


def clamp_min(a, floor: float) -> Tensor:
    """max(a, floor) elementwise; the adjoint is zero where the floor is active."""
    a = _wrap(a)
    mask = a.data >= floor
    return Tensor._from_op(np.where(mask, a.data, floor), (a,), lambda g: (g * mask,), "clamp_min")


# -- shape ---------------------------------------------------------------------
def reshape(a, shape) -> Tensor:
    a = _wrap(a)
    src = a.shape
    try:
        out = a.data.reshape(shape)
    except ValueError as exc:
        raise DimensionError(f"cannot reshape {src} into {tuple(shape)}") from exc
    return Tensor._from_op(out, (a,), lambda g: (g.reshape(src),), "reshape")


def transpose(a, axes: Sequence[int] | None = None) -> Tensor:
    a = _wrap(a)
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    inv = tuple(np.argsort(axes))
    return Tensor._from_op(a.data.transpose(axes), (a,), lambda g: (g.transpose(inv),), "transpose")


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    parts = [_wrap(t) for t in tensors]
    try:
        out = np.concatenate([p.data for p in parts], axis=axis)
    except ValueError as exc:
        raise DimensionError(f"cannot concatenate shapes {[p.shape for p in parts]}") from exc
    bounds = np.cumsum([p.shape[axis] for p in parts])[:-1]
    return Tensor._from_op(out, parts, lambda g: tuple(np.split(g, bounds, axis=axis)), "concat")


def slice_rows(x, start: int, stop: int) -> Tensor:
    """``x[start:stop]`` along the leading axis."""
    x = _wrap(x)
    src = x.shape

    def backward(g):
        full = np.zeros(src, dtype=DTYPE)
        full[start:stop] = g
        return (full,)

    return Tensor._from_op(x.data[start:stop], (x,), backward, "slice_rows")


def _norm_axes(axis, ndim: int) -> tuple[int, ...]:
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    axes = []
    for ax in axis:
        if not -ndim <= ax < ndim:
            raise DimensionError(f"axis {ax} out of range for rank {ndim}")
        axes.append(ax % ndim)
    return tuple(sorted(set(axes)))


def tsum(a, axis=None, keepdims: bool = False) -> Tensor:
    a = _wrap(a)
    axes = _norm_axes(axis, a.ndim)
    src = a.shape
    out = a.data.sum(axis=axes, keepdims=keepdims)

    def backward(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, src),)

    return Tensor._from_op(np.asarray(out), (a,), backward, "sum")


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = _wrap(a)
    axes = _norm_axes(axis, a.ndim)
    count = int(np.prod([a.shape[i] for i in axes])) if axes else 1
    if count == 0:
        raise DomainError("mean over an empty reduction set")
    return tsum(a, axes, keepdims) * (1.0 / count)


def reduce_stats(x, axes) -> tuple[Tensor, Tensor]:
    """Mean and population (biased) variance over ``axes``, both kept as broadcastable dims."""
    x = _wrap(x)
    axes = _norm_axes(axes, x.ndim)
    count = int(np.prod([x.shape[i] for i in axes])) if axes else 0
    if count == 0:
        raise DomainError("statistics over an empty reduction set")
    mu = mean(x, axes, keepdims=True)
    centered = x - mu
    var = mean(centered * centered, axes, keepdims=True)
    return mu, var


# -- linear algebra ------------------------------------------------------------
def matmul(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    if a.ndim != 2 or b.ndim != 2:
        raise DimensionError(f"matmul expects rank-2 operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise DimensionError(f"inner extents differ: {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data
    return Tensor._from_op(ad @ bd, (a, b), lambda g: (g @ bd.T, ad.T @ g), "matmul")


def _im2col(xp: np.ndarray, k: int, stride: int, ho: int, wo: int) -> np.ndarray:
    """Patch matrix of shape (C*k*k, B*ho*wo); rows ordered (channel, ki, kj)."""
    b, c = xp.shape[:2]
    cols = np.empty((c, k, k, b, ho, wo), dtype=DTYPE)
    hspan = stride * (ho - 1) + 1
    wspan = stride * (wo - 1) + 1
    src = xp.transpose(1, 0, 2, 3)
    for i in range(k):
        for j in range(k):
            cols[:, i, j] = src[:, :, i : i + hspan : stride, j : j + wspan : stride]
    return cols.reshape(c * k * k, b * ho * wo)


def conv2d(x, w, bias=None, stride: int = 1, pad: int = 0) -> Tensor:
    """Cross-correlation of ``x`` (B, C_in, H, W) with ``w`` (C_out, C_in, k, k), zero padding.

    ``bias`` is an optional (C_out,) vector added to every output position.
    """
    x, w = _wrap(x), _wrap(w)
    if x.ndim != 4 or w.ndim != 4:
        raise DimensionError(f"conv2d expects rank-4 input and weight, got {x.shape} and {w.shape}")
    b, cin, h, wd = x.shape
    cout, wcin, k, k2 = w.shape
    if wcin != cin:
        raise DimensionError(f"weight expects {wcin} input channels, input has {cin}")
    if k != k2:
        raise DimensionError("only square kernels are supported")
    if stride < 1 or pad < 0:
        raise ParameterError("stride must be >= 1 and pad >= 0")
    parents = [x, w]
    if bias is not None:
        bias = _wrap(bias)
        if bias.shape != (cout,):
            raise DimensionError(f"bias shape {bias.shape} does not match {cout} output channels")
        parents.append(bias)
    ho = (h + 2 * pad - k) // stride + 1
    wo = (wd + 2 * pad - k) // stride + 1
    if ho <= 0 or wo <= 0:
        raise DimensionError(f"kernel {k} with pad {pad} does not fit a {h}x{wd} input")
    xp = np.pad(x.data, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x.data
    cols = _im2col(xp, k, stride, ho, wo)
    wmat = w.data.reshape(cout, -1)
    out = wmat @ cols
    if bias is not None:
        out += bias.data[:, None]
    out = np.ascontiguousarray(out.reshape(cout, b, ho, wo).transpose(1, 0, 2, 3))

    def backward(g):
        gf = np.ascontiguousarray(g.transpose(1, 0, 2, 3)).reshape(cout, -1)
        gw = (gf @ cols.T).reshape(w.data.shape) if w.requires_grad else None
        grads = [None, gw]
        if bias is not None:
            grads.append(gf.sum(axis=1))
        if x.requires_grad:
            dcols = (wmat.T @ gf).reshape(cin, k, k, b, ho, wo)
            dxp = np.zeros((cin, b) + xp.shape[2:], dtype=DTYPE)
            hspan = stride * (ho - 1) + 1
            wspan = stride * (wo - 1) + 1
            for i in range(k):
                for j in range(k):
                    dxp[:, :, i : i + hspan : stride, j : j + wspan : stride] += dcols[:, i, j]
            dxp = dxp[:, :, pad : pad + h, pad : pad + wd] if pad else dxp
            grads[0] = dxp.transpose(1, 0, 2, 3)
        return grads

    return Tensor._from_op(out, parents, backward, "conv2d")


# -- resampling ----------------------------------------------------------------
def _check_even(x: Tensor) -> None:
    if x.ndim < 2:
        raise DimensionError("spatial ops need at least two axes")
    h, w = x.shape[-2:]
    if h % 2 or w % 2:
        raise DimensionError(
            f"spatial extent {h}x{w} is odd; the stylization block can only be inserted where "
            "height and width are both even"
        )


def avg_pool2(x) -> Tensor:
    """2x2 average pooling with stride 2 over the last two axes."""
    x = _wrap(x)
    _check_even(x)
    *lead, h, w = x.shape
    xd = x.data
    out = ((xd[..., ::2, ::2] + xd[..., 1::2, ::2]) + (xd[..., ::2, 1::2] + xd[..., 1::2, 1::2])) * 0.25

    def backward(g):
        g4 = np.broadcast_to(g[..., :, None, :, None] * 0.25, (*lead, h // 2, 2, w // 2, 2))
        return (g4.reshape(*lead, h, w),)

    return Tensor._from_op(out, (x,), backward, "avg_pool2")


def max_pool2(x) -> Tensor:
    """2x2 max pooling with stride 2; ties route the gradient to the first maximum."""
    x = _wrap(x)
    _check_even(x)
    *lead, h, w = x.shape
    xd = x.data
    quads = (xd[..., ::2, ::2], xd[..., ::2, 1::2], xd[..., 1::2, ::2], xd[..., 1::2, 1::2])
    out = np.maximum(np.maximum(quads[0], quads[1]), np.maximum(quads[2], quads[3]))
    taken = np.zeros(out.shape, dtype=bool)
    masks = []
    for q in quads:
        m = (q == out) & ~taken
        taken |= m
        masks.append(m)

    def backward(g):
        gx = np.zeros((*lead, h, w))
        gx[..., ::2, ::2] = g * masks[0]
        gx[..., ::2, 1::2] = g * masks[1]
        gx[..., 1::2, ::2] = g * masks[2]
        gx[..., 1::2, 1::2] = g * masks[3]
        return (gx,)

    return Tensor._from_op(out, (x,), backward, "max_pool2")


def upsample_nearest2(x) -> Tensor:
    """Replicate each cell of the last two axes into a 2x2 block."""
    x = _wrap(x)
    if x.ndim < 2:
        raise DimensionError("spatial ops need at least two axes")
    *lead, h, w = x.shape
    out = np.broadcast_to(x.data[..., :, None, :, None], (*lead, h, 2, w, 2)).reshape(*lead, 2 * h, 2 * w)

    def backward(g):
        return (g.reshape(*lead, h, 2, w, 2).sum(axis=(-3, -1)),)

    return Tensor._from_op(out, (x,), backward, "upsample_nearest2")


# -- normalised exponentials ---------------------------------------------------
def _check_tau(tau: float) -> None:
    if not tau > 0:
        raise ParameterError(f"temperature must be positive, got {tau}")


def softmax(logits, tau: float = 1.0) -> Tensor:
    """Row softmax of ``logits / tau`` along the last axis, max-subtracted."""
    _check_tau(tau)
    z = _wrap(logits)
    s = z.data / tau
    e = np.exp(s - s.max(axis=-1, keepdims=True))
    p = e / e.sum(axis=-1, keepdims=True)

    def backward(g):
        return ((p * (g - (g * p).sum(axis=-1, keepdims=True))) / tau,)

    return Tensor._from_op(p, (z,), backward, "softmax")


def log_softmax(logits, tau: float = 1.0) -> Tensor:
    _check_tau(tau)
    z = _wrap(logits)
    s = z.data / tau
    shifted = s - s.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    out = shifted - lse
    p = np.exp(out)

    def backward(g):
        return ((g - p * g.sum(axis=-1, keepdims=True)) / tau,)

    return Tensor._from_op(out, (z,), backward, "log_softmax")


def masked_logsumexp(x, mask: np.ndarray) -> Tensor:
    """log(sum_j mask[i, j] * exp(x[i, j])) for each row of a rank-2 tensor."""
    x = _wrap(x)
    mask = np.asarray(mask, dtype=bool)
    if x.ndim != 2 or mask.shape != x.shape:
        raise DimensionError(f"mask {mask.shape} must match rank-2 input {x.shape}")
    if not mask.any(axis=1).all():
        raise ContractError("every row needs at least one unmasked entry")
    xm = np.where(mask, x.data, -np.inf)
    top = xm.max(axis=1, keepdims=True)
    e = np.where(mask, np.exp(xm - top), 0.0)
    total = e.sum(axis=1, keepdims=True)
    out = (np.log(total) + top)[:, 0]
    weights = e / total
    return Tensor._from_op(out, (x,), lambda g: (g[:, None] * weights,), "masked_logsumexp")


# -- gradient control ----------------------------------------------------------
def stop_gradient(x) -> Tensor:
    """Same values, no backward edge."""
    x = _wrap(x)
    return Tensor(x.data, requires_grad=False)


def tape(root: Tensor) -> list[Tensor]:
    """Nodes reachable from ``root`` in topological order (parents first)."""
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
        for parent in reversed(node._parents):
            if id(parent) not in seen:
                stack.append((parent, False))
    return order


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(t) into ``t.grad`` for every tensor on the tape that requires it."""
    if loss.ndim != 0:
        raise DimensionError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise ContractError("loss does not depend on any tensor that requires grad")
    grads: dict[int, np.ndarray] = {id(loss): np.ones((), dtype=DTYPE)}
    for node in reversed(tape(loss)):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        node.grad = g if node.grad is None else node.grad + g
        if node._backward is None:
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            grads[key] = pg if key not in grads else grads[key] + pg


def zero_grad(params: Iterable[Tensor]) -> None:
    for p in params:
        p.grad = None
