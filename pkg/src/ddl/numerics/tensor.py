"""Dense float tensors with a dynamically taped reverse-mode autodiff.

Every differentiable op builds its output through :meth:`Tensor._from_op`,
which records the parents and a closure mapping the output gradient to one
gradient per parent. :meth:`Tensor.backward` walks the tape in reverse
topological order.
"""
from __future__ import annotations

import contextlib
from typing import Callable, Iterable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

_DEFAULT_DTYPE = np.dtype(np.float32)
_GRAD_ENABLED = True


def get_default_dtype() -> np.dtype:
    return _DEFAULT_DTYPE


def set_default_dtype(dtype) -> None:
    global _DEFAULT_DTYPE
    dtype = np.dtype(dtype)
    if dtype not in (np.float32, np.float64):
        raise ValueError(f"unsupported dtype {dtype}")
    _DEFAULT_DTYPE = dtype


@contextlib.contextmanager
def default_dtype(dtype):
    """Temporarily switch the project-wide float precision."""
    previous = _DEFAULT_DTYPE
    set_default_dtype(dtype)
    try:
        yield
    finally:
        set_default_dtype(previous)


@contextlib.contextmanager
def no_grad():
    """Disable graph recording (inference, sampling)."""
    global _GRAD_ENABLED
    previous = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = previous


def is_grad_enabled() -> bool:
    return _GRAD_ENABLED


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


class Tensor:
    """A float array that optionally participates in the autodiff graph."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "name")
    __array_priority__ = 1000

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.array(data, dtype=_DEFAULT_DTYPE)
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None
        self.name = name

    @classmethod
    def _from_op(cls, data: np.ndarray, parents: Sequence["Tensor"], backward: Callable) -> "Tensor":
        out = cls.__new__(cls)
        out.data = data
        out.grad = None
        out.name = None
        if _GRAD_ENABLED and any(p.requires_grad for p in parents):
            out.requires_grad = True
            out._parents = tuple(parents)
            out._backward = backward
        else:
            out.requires_grad = False
            out._parents = ()
            out._backward = None
        return out

    # ------------------------------------------------------------------ basics
    @property
    def shape(self) -> tuple:
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
        if self.data.size != 1:
            raise ValueError("item() requires a single-element tensor")
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        out = Tensor.__new__(Tensor)
        out.data = self.data
        out.grad = None
        out.requires_grad = False
        out._parents = ()
        out._backward = None
        out.name = None
        return out

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    def __len__(self) -> int:
        return len(self.data)

    # ---------------------------------------------------------------- autodiff
    def backward(self, grad: np.ndarray | None = None) -> None:
        """Accumulate d(self)/d(node) into ``node.grad`` for every node on the tape."""
        if grad is None:
            if self.data.size != 1:
                raise ValueError(f"backward() needs a scalar loss, got shape {self.shape}")
            grad = np.ones_like(self.data)
        else:
            grad = np.asarray(grad, dtype=self.data.dtype).reshape(self.shape)
        if not self.requires_grad:
            raise RuntimeError("loss does not depend on any tensor requiring grad")

        pending = {id(self): grad}
        for node in reversed(_toposort(self)):
            g = pending.pop(id(node), None)
            if g is None:
                continue
            node.grad = g.copy() if node.grad is None else node.grad + g
            if node._backward is None:
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                pending[key] = pending[key] + pg if key in pending else pg

    # ------------------------------------------------------------- arithmetic
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

    def __pow__(self, exponent):
        return power(self, exponent)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    def abs(self):
        return tabs(self)

    def exp(self):
        return exp(self)

    def log(self):
        return log(self)

    def sqrt(self):
        return sqrt(self)


def _toposort(root: Tensor) -> list[Tensor]:
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
        for parent in node._parents:
            if parent.requires_grad and id(parent) not in seen:
                stack.append((parent, False))
    return order


def as_tensor(value) -> Tensor:
    if isinstance(value, Tensor):
        return value
    return Tensor(value)


class Parameter(Tensor):
    """A leaf tensor owned by a module; requires grad unless frozen."""

    __slots__ = ()

    def __init__(self, data, requires_grad: bool = True, name: str | None = None):
        super().__init__(data, requires_grad=requires_grad, name=name)


# ----------------------------------------------------------------- elementwise
def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape
    return Tensor._from_op(a.data + b.data, (a, b),
                           lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape
    return Tensor._from_op(a.data - b.data, (a, b),
                           lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def backward(g):
        return (_unbroadcast(g * b.data, a.shape) if a.requires_grad else None,
                _unbroadcast(g * a.data, b.shape) if b.requires_grad else None)

    return Tensor._from_op(a.data * b.data, (a, b), backward)


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data / b.data

    def backward(g):
        ga = _unbroadcast(g / b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(-g * out / b.data, b.shape) if b.requires_grad else None
        return ga, gb

    return Tensor._from_op(out, (a, b), backward)


def power(a, exponent: float) -> Tensor:
    a = as_tensor(a)
    exponent = float(exponent)
    if exponent == 2.0:
        return Tensor._from_op(a.data * a.data, (a,), lambda g: (2.0 * g * a.data,))
    return Tensor._from_op(a.data ** exponent, (a,),
                           lambda g: (exponent * g * a.data ** (exponent - 1.0),))


def exp(a) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)
    return Tensor._from_op(out, (a,), lambda g: (g * out,))


def log(a) -> Tensor:
    a = as_tensor(a)
    return Tensor._from_op(np.log(a.data), (a,), lambda g: (g / a.data,))


def sqrt(a) -> Tensor:
    a = as_tensor(a)
    out = np.sqrt(a.data)
    return Tensor._from_op(out, (a,), lambda g: (0.5 * g / out,))


def tabs(a) -> Tensor:
    a = as_tensor(a)
    return Tensor._from_op(np.abs(a.data), (a,), lambda g: (g * np.sign(a.data),))


def relu(a) -> Tensor:
    a = as_tensor(a)
    mask = a.data > 0
    return Tensor._from_op(np.where(mask, a.data, 0).astype(a.dtype), (a,), lambda g: (g * mask,))


def _sigmoid(x: np.ndarray) -> np.ndarray:
    # one transcendental pass; tanh saturates instead of overflowing
    out = np.multiply(x, 0.5)
    np.tanh(out, out=out)
    out *= 0.5
    out += 0.5
    return out


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    s = _sigmoid(a.data)
    return Tensor._from_op(s, (a,), lambda g: (g * s * (1.0 - s),))


def silu(a) -> Tensor:
    a = as_tensor(a)
    x = a.data
    s = _sigmoid(x)

    def backward(g):
        d = 1.0 - s
        d *= x
        d += 1.0
        d *= s
        d *= g
        return (d,)

    return Tensor._from_op(x * s, (a,), backward)


def softplus(a) -> Tensor:
    a = as_tensor(a)
    x = a.data
    out = np.log1p(np.exp(-np.abs(x))) + np.maximum(x, 0)
    return Tensor._from_op(out.astype(x.dtype), (a,), lambda g: (g * _sigmoid(x),))


def tanh(a) -> Tensor:
    a = as_tensor(a)
    out = np.tanh(a.data)
    return Tensor._from_op(out, (a,), lambda g: (g * (1.0 - out * out),))


# ------------------------------------------------------------------ reductions
def _norm_axis(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(ax % ndim for ax in axis)


def tsum(a, axis=None, keepdims=False) -> Tensor:
    a = as_tensor(a)
    axes = _norm_axis(axis, a.ndim)
    out = np.sum(a.data, axis=axes, keepdims=keepdims, dtype=np.float64).astype(a.dtype)
    shape = a.shape

    def backward(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, shape),)

    return Tensor._from_op(np.asarray(out), (a,), backward)


def mean(a, axis=None, keepdims=False) -> Tensor:
    a = as_tensor(a)
    axes = _norm_axis(axis, a.ndim)
    count = int(np.prod([a.shape[ax] for ax in axes])) if axes else 1
    return tsum(a, axis, keepdims) * (1.0 / count)


# ------------------------------------------------------------- shape handling
def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    old = a.shape
    return Tensor._from_op(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),))


def transpose(a, axes=None) -> Tensor:
    a = as_tensor(a)
    axes = tuple(reversed(range(a.ndim))) if axes is None else tuple(axes)
    inverse = tuple(np.argsort(axes))
    return Tensor._from_op(a.data.transpose(axes), (a,), lambda g: (g.transpose(inverse),))


def getitem(a, index) -> Tensor:
    a = as_tensor(a)
    if isinstance(index, Tensor):
        index = index.data
    shape, dtype = a.shape, a.dtype

    def backward(g):
        full = np.zeros(shape, dtype=dtype)
        np.add.at(full, index, g)
        return (full,)

    return Tensor._from_op(np.asarray(a.data[index]), (a,), backward)


def concat(tensors: Iterable[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    bounds = np.cumsum(sizes)[:-1]

    def backward(g):
        return tuple(np.split(g, bounds, axis=axis))

    return Tensor._from_op(np.concatenate([t.data for t in tensors], axis=axis), tensors, backward)


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2:
        raise ValueError("matmul expects 2-D operands")
    if a.shape[1] != b.shape[0]:
        raise ValueError(f"matmul dimension mismatch: {a.shape} @ {b.shape}")

    def backward(g):
        g = np.ascontiguousarray(g)
        return (g @ b.data.T if a.requires_grad else None,
                a.data.T @ g if b.requires_grad else None)

    return Tensor._from_op(a.data @ b.data, (a, b), backward)


# ------------------------------------------------------------------ nn kernels
def linear(x, weight, bias=None) -> Tensor:
    """``x @ weight.T + bias`` for x of shape [N, in] and weight [out, in]."""
    out = matmul(x, transpose(weight))
    return out + bias if bias is not None else out


def conv2d(x, kernel, bias=None, stride: int = 1, padding: int = 0) -> Tensor:
    """2-D cross-correlation over NCHW input via an im2col matrix product.

    Columns are gathered from a channels-last copy of the input.
    """
    x, kernel = as_tensor(x), as_tensor(kernel)
    if bias is not None:
        bias = as_tensor(bias)
    if x.ndim != 4 or kernel.ndim != 4:
        raise ValueError("conv2d expects input [N,C,H,W] and kernel [F,C,kh,kw]")
    n, c, h, w = x.shape
    f, kc, kh, kw = kernel.shape
    if kc != c:
        raise ValueError(f"kernel expects {kc} input channels, input has {c}")
    if stride < 1:
        raise ValueError("stride must be >= 1")
    if kh > h + 2 * padding or kw > w + 2 * padding:
        raise ValueError("kernel larger than padded input")
    ho = (h + 2 * padding - kh) // stride + 1
    wo = (w + 2 * padding - kw) // stride + 1

    wmat = kernel.data.transpose(0, 2, 3, 1).reshape(f, -1)
    out, backward = _conv_im2col(x, kernel, bias, wmat, stride, padding, ho, wo)
    parents = (x, kernel, bias) if bias is not None else (x, kernel)
    return Tensor._from_op(out, parents, backward)


def _conv_im2col(x, kernel, bias, wmat, stride, padding, ho, wo):
    n, c, h, w = x.shape
    f, _, kh, kw = kernel.shape
    xh = x.data.transpose(0, 2, 3, 1)
    if padding:
        xp = np.zeros((n, h + 2 * padding, w + 2 * padding, c), dtype=x.dtype)
        xp[:, padding:padding + h, padding:padding + w, :] = xh
    else:
        xp = np.ascontiguousarray(xh)
    if kh == 1 and kw == 1:
        cols = np.ascontiguousarray(xp[:, ::stride, ::stride, :]).reshape(n * ho * wo, c)
    else:
        windows = sliding_window_view(xp, (kh, kw), axis=(1, 2))[:, ::stride, ::stride]
        cols = windows.transpose(0, 1, 2, 4, 5, 3).reshape(n * ho * wo, kh * kw * c)
    out = cols @ wmat.T
    if bias is not None:
        out += bias.data
    out = np.ascontiguousarray(out.reshape(n, ho, wo, f).transpose(0, 3, 1, 2))

    def backward(g):
        gmat = np.ascontiguousarray(g.transpose(0, 2, 3, 1)).reshape(n * ho * wo, f)
        gk = None
        if kernel.requires_grad:
            gk = (gmat.T @ cols).reshape(f, kh, kw, c).transpose(0, 3, 1, 2)
        gb = gmat.sum(axis=0) if bias is not None and bias.requires_grad else None
        gx = None
        if x.requires_grad:
            gcols = (gmat @ wmat).reshape(n, ho, wo, kh, kw, c)
            gxp = np.zeros(xp.shape, dtype=g.dtype)
            for i in range(kh):
                for j in range(kw):
                    gxp[:, i:i + stride * ho:stride, j:j + stride * wo:stride, :] += gcols[:, :, :, i, j, :]
            if padding:
                gxp = gxp[:, padding:padding + h, padding:padding + w, :]
            gx = gxp.transpose(0, 3, 1, 2)
        return (gx, gk, gb) if bias is not None else (gx, gk)

    return out, backward


def upsample2x(x) -> Tensor:
    """Nearest-neighbour 2x spatial upsampling of NCHW input."""
    x = as_tensor(x)
    n, c, h, w = x.shape
    out = np.repeat(np.repeat(x.data, 2, axis=2), 2, axis=3)
    return Tensor._from_op(out, (x,),
                           lambda g: (g.reshape(n, c, h, 2, w, 2).sum(axis=(3, 5)),))


def space_to_depth(x, block: int = 2) -> Tensor:
    """[N,C,H,W] -> [N,C*b*b,H/b,W/b] (pixel unshuffle)."""
    x = as_tensor(x)
    n, c, h, w = x.shape
    if h % block or w % block:
        raise ValueError(f"spatial size {h}x{w} not divisible by {block}")
    y = reshape(x, (n, c, h // block, block, w // block, block))
    y = transpose(y, (0, 1, 3, 5, 2, 4))
    return reshape(y, (n, c * block * block, h // block, w // block))


def depth_to_space(x, block: int = 2) -> Tensor:
    """Inverse of :func:`space_to_depth`."""
    x = as_tensor(x)
    n, cb, h, w = x.shape
    c = cb // (block * block)
    y = reshape(x, (n, c, block, block, h, w))
    y = transpose(y, (0, 1, 4, 2, 5, 3))
    return reshape(y, (n, c, h * block, w * block))


def avgpool2x(x) -> Tensor:
    x = as_tensor(x)
    n, c, h, w = x.shape
    out = x.data.reshape(n, c, h // 2, 2, w // 2, 2).mean(axis=(3, 5))

    def backward(g):
        return (np.repeat(np.repeat(g, 2, axis=2), 2, axis=3) * 0.25,)

    return Tensor._from_op(out, (x,), backward)


def group_norm(x, groups: int, weight=None, bias=None, eps: float = 1e-5) -> Tensor:
    """Group normalization over NCHW input with optional per-channel affine."""
    x = as_tensor(x)
    n, c, h, w = x.shape
    if c % groups:
        raise ValueError(f"{c} channels not divisible into {groups} groups")
    xg = x.data.reshape(n, groups, -1)
    m = xg.shape[-1]
    xc = xg - xg.mean(axis=-1, keepdims=True)
    var = np.einsum("ngk,ngk->ng", xc, xc)[..., None] / m
    inv_std = (1.0 / np.sqrt(var + eps)).astype(x.dtype)
    per_channel = np.repeat(inv_std, c // groups, axis=1)  # [n, c, 1]
    parents: list[Tensor] = [x]
    if weight is not None:
        weight, bias = as_tensor(weight), as_tensor(bias)
        scale = per_channel * weight.data.reshape(1, c, 1)
        out = xc.reshape(n, c, -1) * scale
        out += bias.data.reshape(1, c, 1)
        parents += [weight, bias]
    else:
        out = xc.reshape(n, c, -1) * per_channel
    out = out.reshape(n, c, h, w)

    def backward(g):
        g3 = g.reshape(n, c, -1)
        xhat = xc.reshape(n, c, -1) * per_channel
        grads = []
        if x.requires_grad:
            dxhat = g3 * weight.data.reshape(1, c, 1) if weight is not None else g3
            dg = dxhat.reshape(n, groups, m)
            xh = xhat.reshape(n, groups, m)
            sum_dg = dg.sum(axis=-1, keepdims=True)
            sum_dgx = np.einsum("ngk,ngk->ng", dg, xh)[..., None]
            gx = dg * m
            gx -= sum_dg
            gx -= xh * sum_dgx
            gx *= inv_std / m
            grads.append(gx.reshape(n, c, h, w))
        else:
            grads.append(None)
        if weight is not None:
            grads.append(np.einsum("nck,nck->c", g3, xhat))
            grads.append(g3.sum(axis=(0, 2)))
        return tuple(grads)

    return Tensor._from_op(out, parents, backward)
