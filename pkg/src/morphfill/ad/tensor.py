"""Reverse-mode automatic differentiation on numpy arrays.

Defines a small define-by-run tensor graph. Every primitive records its
parents and a vector-Jacobian closure written in terms of other primitives,
so differentiating a backward pass (``create_graph=True``) works for free;
this is what the gradient-penalty loss relies on.

Conventions:
    - values are float32 by default, float64 for finite-difference checks
    - integer index arrays are passed as plain ndarrays, never as Tensors
    - images/feature maps are NCHW
"""

from __future__ import annotations

import contextlib
from typing import Callable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

__all__ = [
    "Tensor", "as_tensor", "no_grad", "grad_of",
    "add", "sub", "mul", "div", "neg", "pow", "exp", "log", "sqrt", "absolute",
    "sin", "cos", "tanh", "sigmoid", "softplus", "elu", "leaky_relu", "relu",
    "clip", "tsum", "tmean", "matmul", "reshape", "transpose", "concat",
    "broadcast_to", "flip", "pad2d", "upsample_nearest", "take", "scatter_add",
    "conv2d", "conv2d_input_grad", "conv2d_weight_grad", "avg_pool2d",
    "linear", "stack", "where_mask",
]

_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


class Tensor:
    """N-dimensional array participating in reverse-mode differentiation."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_vjp")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float32)
        self.data = arr
        self.grad: Tensor | None = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple[Tensor, ...] = ()
        self._vjp: Callable | None = None

    # -- basic introspection -------------------------------------------------

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def numpy(self) -> np.ndarray:
        """Underlying array (not a copy; treat as read-only)."""
        return self.data

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def astype(self, dtype) -> "Tensor":
        return _cast(self, dtype)

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        head = np.array2string(self.data, precision=4, threshold=8)
        return f"Tensor({head}, shape={self.shape}, grad={self.requires_grad})"

    # -- autodiff ------------------------------------------------------------

    def backward(self, grad=None, create_graph: bool = False):
        """Backpropagate from this tensor, accumulating ``.grad`` on leaves."""
        if grad is None:
            if self.size != 1:
                raise ValueError("backward() without gradient needs a scalar output")
            grad = Tensor(np.ones_like(self.data))
        grads = _backprop(self, as_tensor(grad), create_graph)
        for node, g in grads.items():
            t = node
            if t.requires_grad and t._vjp is None:
                t.grad = g if t.grad is None else add(t.grad, g)

    # -- operator sugar ------------------------------------------------------

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

    def __pow__(self, p):
        return pow(self, p)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return _getitem(self, key)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        if dtype is not None and x.dtype != dtype:
            return _cast(x, dtype)
        return x
    return Tensor(x, dtype=dtype)


def _make(data: np.ndarray, parents: Sequence[Tensor], vjp: Callable) -> Tensor:
    if _grad_enabled and any(p.requires_grad for p in parents):
        out = Tensor(data, requires_grad=True)
        out._parents = tuple(parents)
        out._vjp = vjp
        return out
    return Tensor(data)


def _toposort(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def _backprop(root: Tensor, grad: Tensor, create_graph: bool):
    order = _toposort(root)
    grads: dict[int, Tensor] = {id(root): grad}
    nodes: dict[int, Tensor] = {id(root): root}
    ctx = contextlib.nullcontext() if create_graph else no_grad()
    with ctx:
        for node in reversed(order):
            g = grads.get(id(node))
            if g is None or node._vjp is None:
                continue
            parent_grads = node._vjp(g)
            for p, pg in zip(node._parents, parent_grads):
                if pg is None or not p.requires_grad:
                    continue
                pid = id(p)
                if pid in grads:
                    grads[pid] = add(grads[pid], pg)
                else:
                    grads[pid] = pg
                    nodes[pid] = p
    return {nodes[k]: v for k, v in grads.items()}


def grad_of(output: Tensor, inputs: Sequence[Tensor], grad=None,
            create_graph: bool = False) -> list[Tensor | None]:
    """Gradients of a scalar output w.r.t. ``inputs`` without touching ``.grad``."""
    if grad is None:
        if output.size != 1:
            raise ValueError("grad_of needs a scalar output or an explicit grad")
        grad = Tensor(np.ones_like(output.data))
    grads = _backprop(output, as_tensor(grad), create_graph)
    by_id = {id(k): v for k, v in grads.items()}
    return [by_id.get(id(t)) for t in inputs]


# -- broadcasting helpers ----------------------------------------------------

def _sum_to_shape(t: Tensor, shape: tuple[int, ...]) -> Tensor:
    """Reduce a broadcasted gradient back to ``shape``."""
    if t.shape == shape:
        return t
    extra = t.ndim - len(shape)
    if extra > 0:
        t = tsum(t, axis=tuple(range(extra)))
    axes = tuple(i for i, d in enumerate(shape) if d == 1 and t.shape[i] != 1)
    if axes:
        t = tsum(t, axis=axes, keepdims=True)
    if t.shape != shape:
        t = reshape(t, shape)
    return t


# -- elementwise arithmetic ----------------------------------------------------

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def vjp(g):
        return _sum_to_shape(g, a.shape), _sum_to_shape(g, b.shape)

    return _make(a.data + b.data, (a, b), vjp)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def vjp(g):
        return _sum_to_shape(g, a.shape), _sum_to_shape(neg(g), b.shape)

    return _make(a.data - b.data, (a, b), vjp)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def vjp(g):
        return (_sum_to_shape(mul(g, b), a.shape),
                _sum_to_shape(mul(g, a), b.shape))

    return _make(a.data * b.data, (a, b), vjp)


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def vjp(g):
        ga = div(g, b)
        gb = neg(mul(ga, div(a, b)))
        return _sum_to_shape(ga, a.shape), _sum_to_shape(gb, b.shape)

    return _make(a.data / b.data, (a, b), vjp)


def neg(a) -> Tensor:
    a = as_tensor(a)
    return _make(-a.data, (a,), lambda g: (neg(g),))


def pow(a, p: float) -> Tensor:
    a = as_tensor(a)
    p = float(p)

    def vjp(g):
        return (mul(g, mul(Tensor(np.asarray(p, dtype=a.dtype)), pow(a, p - 1.0))),)

    return _make(a.data ** p, (a,), vjp)


def exp(a) -> Tensor:
    a = as_tensor(a)
    out = _make(np.exp(a.data), (a,), None)
    out._vjp = lambda g: (mul(g, out),)
    return out


def log(a) -> Tensor:
    a = as_tensor(a)
    return _make(np.log(a.data), (a,), lambda g: (div(g, a),))


def sqrt(a) -> Tensor:
    a = as_tensor(a)
    out = _make(np.sqrt(a.data), (a,), None)
    out._vjp = lambda g: (div(g, mul(Tensor(np.asarray(2.0, dtype=a.dtype)), out)),)
    return out


def absolute(a) -> Tensor:
    a = as_tensor(a)
    sign = Tensor(np.sign(a.data))
    return _make(np.abs(a.data), (a,), lambda g: (mul(g, sign),))


def sin(a) -> Tensor:
    a = as_tensor(a)
    return _make(np.sin(a.data), (a,), lambda g: (mul(g, cos(a)),))


def cos(a) -> Tensor:
    a = as_tensor(a)
    return _make(np.cos(a.data), (a,), lambda g: (neg(mul(g, sin(a))),))


def tanh(a) -> Tensor:
    a = as_tensor(a)
    out = _make(np.tanh(a.data), (a,), None)
    out._vjp = lambda g: (mul(g, sub(1.0, mul(out, out))),)
    return out


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    out = _make(1.0 / (1.0 + np.exp(-a.data)), (a,), None)
    out._vjp = lambda g: (mul(g, mul(out, sub(1.0, out))),)
    return out


def softplus(a) -> Tensor:
    # log(1+e^x), stabilized
    a = as_tensor(a)
    d = a.data
    out_data = np.maximum(d, 0) + np.log1p(np.exp(-np.abs(d)))
    return _make(out_data, (a,), lambda g: (mul(g, sigmoid(a)),))


def elu(a, alpha: float = 1.0) -> Tensor:
    a = as_tensor(a)
    d = a.data
    pos = d > 0
    out_data = np.where(pos, d, alpha * (np.exp(np.minimum(d, 0.0)) - 1.0))
    mask = Tensor(pos.astype(a.dtype))
    out = _make(out_data, (a,), None)

    def vjp(g):
        # derivative is 1 for x>0, alpha*e^x = y+alpha otherwise
        neg_part = mul(sub(1.0, mask), add(out, alpha))
        return (mul(g, add(mask, neg_part)),)

    out._vjp = vjp
    return out


def leaky_relu(a, slope: float = 0.2) -> Tensor:
    a = as_tensor(a)
    pos = a.data > 0
    factor = Tensor(np.where(pos, 1.0, slope).astype(a.dtype))
    return _make(np.where(pos, a.data, slope * a.data), (a,), lambda g: (mul(g, factor),))


def relu(a) -> Tensor:
    return leaky_relu(a, 0.0)


def clip(a, lo=None, hi=None) -> Tensor:
    a = as_tensor(a)
    d = a.data
    mask = np.ones(d.shape, dtype=bool)
    if lo is not None:
        mask &= d >= lo
    if hi is not None:
        mask &= d <= hi
    passthrough = Tensor(mask.astype(a.dtype))
    return _make(np.clip(d, lo, hi), (a,), lambda g: (mul(g, passthrough),))


def where_mask(mask: np.ndarray, a, b) -> Tensor:
    """Select by a constant boolean mask; gradients route to the chosen side."""
    a, b = as_tensor(a), as_tensor(b)
    m = Tensor(mask.astype(a.dtype))

    def vjp(g):
        return (_sum_to_shape(mul(g, m), a.shape),
                _sum_to_shape(mul(g, sub(1.0, m)), b.shape))

    return _make(np.where(mask, a.data, b.data), (a, b), vjp)


def _cast(a: Tensor, dtype) -> Tensor:
    dtype = np.dtype(dtype)

    def vjp(g):
        return (_cast(g, a.dtype),)

    return _make(a.data.astype(dtype), (a,), vjp)


# -- reductions ----------------------------------------------------------------

def tsum(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)

    def vjp(g):
        if axis is None:
            return (broadcast_to(reshape(g, (1,) * a.ndim), a.shape),)
        axes = axis if isinstance(axis, tuple) else (axis,)
        axes = tuple(ax % a.ndim for ax in axes)
        if keepdims:
            return (broadcast_to(g, a.shape),)
        shp = tuple(1 if i in axes else d for i, d in enumerate(a.shape))
        return (broadcast_to(reshape(g, shp), a.shape),)

    return _make(a.data.sum(axis=axis, keepdims=keepdims), (a,), vjp)


def tmean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    if axis is None:
        n = a.size
    else:
        axes = axis if isinstance(axis, tuple) else (axis,)
        n = int(np.prod([a.shape[ax] for ax in axes]))
    return mul(tsum(a, axis=axis, keepdims=keepdims), 1.0 / n)


# -- shape manipulation ----------------------------------------------------------

def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    old = a.shape
    return _make(a.data.reshape(shape), (a,), lambda g: (reshape(g, old),))


def transpose(a, axes) -> Tensor:
    a = as_tensor(a)
    inv = np.argsort(axes)
    return _make(np.ascontiguousarray(a.data.transpose(axes)), (a,),
                 lambda g: (transpose(g, tuple(inv)),))


def broadcast_to(a, shape) -> Tensor:
    a = as_tensor(a)
    return _make(np.broadcast_to(a.data, shape).copy(), (a,),
                 lambda g: (_sum_to_shape(g, a.shape),))


def concat(tensors, axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in ts]
    offsets = np.cumsum([0] + sizes)

    def vjp(g):
        outs = []
        for i in range(len(ts)):
            key = [slice(None)] * g.ndim
            key[axis] = slice(int(offsets[i]), int(offsets[i + 1]))
            outs.append(_getitem(g, tuple(key)))
        return tuple(outs)

    return _make(np.concatenate([t.data for t in ts], axis=axis), ts, vjp)


def stack(tensors, axis: int = 0) -> Tensor:
    ts = [reshape(as_tensor(t), _insert_axis(as_tensor(t).shape, axis)) for t in tensors]
    return concat(ts, axis=axis)


def _insert_axis(shape, axis):
    shape = list(shape)
    if axis < 0:
        axis = len(shape) + 1 + axis
    shape.insert(axis, 1)
    return tuple(shape)


def _getitem(a: Tensor, key) -> Tensor:
    a = as_tensor(a)

    def vjp(g):
        return (_put(a.shape, key, g, a.dtype),)

    return _make(a.data[key], (a,), vjp)


def _put(shape, key, values: Tensor, dtype) -> Tensor:
    values = as_tensor(values)
    out = np.zeros(shape, dtype=dtype)
    out[key] = values.data

    def vjp(g):
        return (_getitem(g, key),)

    return _make(out, (values,), vjp)


def flip(a, axis: int) -> Tensor:
    a = as_tensor(a)
    return _make(np.flip(a.data, axis=axis).copy(), (a,),
                 lambda g: (flip(g, axis),))


def pad2d(a, pad: int) -> Tensor:
    """Zero-pad the two trailing axes symmetrically."""
    a = as_tensor(a)
    if pad == 0:
        return a
    widths = [(0, 0)] * (a.ndim - 2) + [(pad, pad), (pad, pad)]
    key = tuple([slice(None)] * (a.ndim - 2) + [slice(pad, -pad), slice(pad, -pad)])

    def vjp(g):
        return (_getitem(g, key),)

    return _make(np.pad(a.data, widths), (a,), vjp)


def upsample_nearest(a, sh: int, sw: int) -> Tensor:
    """Nearest-neighbour upsampling of an NCHW tensor."""
    a = as_tensor(a)
    n, c, h, w = a.shape
    out_data = a.data.repeat(sh, axis=2).repeat(sw, axis=3)

    def vjp(g):
        gr = reshape(g, (n, c, h, sh, w, sw))
        return (tsum(gr, axis=(3, 5)),)

    return _make(out_data, (a,), vjp)


# -- gather / scatter -------------------------------------------------------------

def take(a, idx: np.ndarray, axis: int = 0) -> Tensor:
    """Gather rows ``a[idx]`` along ``axis`` (indices are constants)."""
    a = as_tensor(a)
    idx = np.asarray(idx)
    if axis != 0:
        raise NotImplementedError("take supports axis=0")

    def vjp(g):
        return (scatter_add(g, idx, a.shape[0]),)

    return _make(a.data[idx], (a,), vjp)


def scatter_add(src, idx: np.ndarray, length: int) -> Tensor:
    """out[j] = sum of src rows whose index is j; adjoint of :func:`take`."""
    src = as_tensor(src)
    idx = np.asarray(idx)
    out = np.zeros((length,) + src.shape[idx.ndim:], dtype=src.dtype)
    np.add.at(out, idx, src.data)

    def vjp(g):
        return (take(g, idx),)

    return _make(out, (src,), vjp)


# -- linear algebra ---------------------------------------------------------------

def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def vjp(g):
        ga = gb = None
        if a.ndim == 1 and b.ndim == 2:      # (k,) @ (k,n) -> (n,)
            ga = matmul(b, g)                # (k,n)@(n,) -> (k,)
            gb = mul(reshape(a, (-1, 1)), reshape(g, (1, -1)))
        elif a.ndim == 2 and b.ndim == 1:    # (m,k) @ (k,) -> (m,)
            ga = mul(reshape(g, (-1, 1)), reshape(b, (1, -1)))
            gb = matmul(transpose(a, (1, 0)), g)
        elif a.ndim == 2 and b.ndim == 2:
            ga = matmul(g, transpose(b, (1, 0)))
            gb = matmul(transpose(a, (1, 0)), g)
        elif a.ndim == 1 and b.ndim == 1:
            ga = mul(g, b)
            gb = mul(g, a)
        else:
            raise NotImplementedError("matmul vjp for >2D operands")
        return ga, gb

    return _make(np.matmul(a.data, b.data), (a, b), vjp)


def linear(x, w, b=None) -> Tensor:
    """x @ w.T (+ b); x is (..., in), w is (out, in)."""
    x, w = as_tensor(x), as_tensor(w)
    flat = reshape(x, (-1, x.shape[-1])) if x.ndim != 2 else x
    y = matmul(flat, transpose(w, (1, 0)))
    if x.ndim != 2:
        y = reshape(y, x.shape[:-1] + (w.shape[0],))
    if b is not None:
        y = add(y, b)
    return y


# -- convolution ------------------------------------------------------------------

def _conv_windows(xd: np.ndarray, kh: int, kw: int, stride: int, pad: int) -> np.ndarray:
    if pad:
        xd = np.pad(xd, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    win = sliding_window_view(xd, (kh, kw), axis=(2, 3))
    return win[:, :, ::stride, ::stride]  # (N, C, Ho, Wo, kh, kw)


def _conv_out_hw(h, w, kh, kw, stride, pad):
    return (h + 2 * pad - kh) // stride + 1, (w + 2 * pad - kw) // stride + 1


def conv2d(x, w, stride: int = 1, pad: int = 0) -> Tensor:
    """2D cross-correlation; x (N,C,H,W), w (F,C,kh,kw) -> (N,F,Ho,Wo)."""
    x, w = as_tensor(x), as_tensor(w)
    n, c, h, wd = x.shape
    f, c2, kh, kw = w.shape
    if c != c2:
        raise ValueError(f"conv2d channel mismatch: input C={c}, weight C={c2}")
    win = _conv_windows(x.data, kh, kw, stride, pad)
    ho, wo = win.shape[2], win.shape[3]
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(n * ho * wo, c * kh * kw)
    out = (cols @ w.data.reshape(f, -1).T).reshape(n, ho, wo, f).transpose(0, 3, 1, 2)

    def vjp(g):
        gx = conv2d_input_grad(g, w, stride, pad, (h, wd))
        gw = conv2d_weight_grad(x, g, stride, pad, (kh, kw))
        return gx, gw

    return _make(np.ascontiguousarray(out), (x, w), vjp)


def conv2d_input_grad(g, w, stride: int, pad: int, in_hw) -> Tensor:
    """Adjoint of conv2d w.r.t. its input (a transposed convolution)."""
    g, w = as_tensor(g), as_tensor(w)
    n, f, ho, wo = g.shape
    f2, c, kh, kw = w.shape
    h, wd = in_hw
    cols = (g.data.transpose(0, 2, 3, 1).reshape(-1, f) @ w.data.reshape(f, -1))
    cols = cols.reshape(n, ho, wo, c, kh, kw).transpose(0, 3, 4, 5, 1, 2)
    hp, wp = h + 2 * pad, wd + 2 * pad
    out = np.zeros((n, c, hp, wp), dtype=g.dtype)
    for i in range(kh):
        for j in range(kw):
            out[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += cols[:, :, i, j]
    if pad:
        out = out[:, :, pad:pad + h, pad:pad + wd]

    def vjp(gg):
        return (conv2d(gg, w, stride, pad),
                conv2d_weight_grad(gg, g, stride, pad, (kh, kw)))

    return _make(np.ascontiguousarray(out), (g, w), vjp)


def conv2d_weight_grad(x, g, stride: int, pad: int, k_hw) -> Tensor:
    """Adjoint of conv2d w.r.t. its weight."""
    x, g = as_tensor(x), as_tensor(g)
    n, c, h, wd = x.shape
    n2, f, ho, wo = g.shape
    kh, kw = k_hw
    win = _conv_windows(x.data, kh, kw, stride, pad)
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(n * ho * wo, c * kh * kw)
    gr = g.data.transpose(1, 0, 2, 3).reshape(f, -1)
    gw = (gr @ cols).reshape(f, c, kh, kw)

    def vjp(gg):
        return (conv2d_input_grad(g, gg, stride, pad, (h, wd)),
                conv2d(x, gg, stride, pad))

    return _make(np.ascontiguousarray(gw), (x, g), vjp)


def avg_pool2d(x, k: int) -> Tensor:
    """Average pooling with kernel = stride = k; spatial dims must divide by k."""
    x = as_tensor(x)
    n, c, h, w = x.shape
    if h % k or w % k:
        raise ValueError(f"avg_pool2d: spatial dims ({h},{w}) not divisible by {k}")
    xr = reshape(x, (n, c, h // k, k, w // k, k))
    return tmean(xr, axis=(3, 5))
