"""Dense tensors with reverse-mode autodiff on a numpy backend.

Every value flowing through the model, the losses and the optimizer is a
`Tensor`. Ops build a backward graph out of closures (one `Node` per op);
`backward()` walks the graph in reverse topological order and accumulates
gradients additively, so a tensor consumed twice receives the sum of both
path gradients.

Precision is switchable: float64 for gradient checking, float32 for
training throughput. Finite-difference checks are unreliable in 32-bit.
"""

from __future__ import annotations

import contextlib
from dataclasses import dataclass

import numpy as np

__all__ = [
    "Tensor",
    "ShapeError",
    "GradCheckReport",
    "tensor",
    "zeros",
    "ones",
    "set_default_dtype",
    "default_dtype",
    "precision",
    "no_grad",
    "grad_enabled",
    "add",
    "sub",
    "mul",
    "div",
    "matmul",
    "relu",
    "gelu",
    "softmax",
    "log_softmax",
    "layer_norm",
    "im2col",
    "conv2d",
    "bilinear_resize",
    "concat",
    "gradcheck",
]


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible."""


_DEFAULT_DTYPE = np.float64
_GRAD_ENABLED = True


def set_default_dtype(dtype):
    global _DEFAULT_DTYPE
    dtype = np.dtype(dtype).type
    if dtype not in (np.float32, np.float64):
        raise ValueError(f"unsupported dtype {dtype}; use float32 or float64")
    _DEFAULT_DTYPE = dtype


def default_dtype():
    return _DEFAULT_DTYPE


@contextlib.contextmanager
def precision(dtype):
    """Temporarily switch the default float width ('float32'/'float64')."""
    global _DEFAULT_DTYPE
    old = _DEFAULT_DTYPE
    set_default_dtype(dtype)
    try:
        yield
    finally:
        _DEFAULT_DTYPE = old


@contextlib.contextmanager
def no_grad():
    """Disable graph recording (used for the frozen teacher path)."""
    global _GRAD_ENABLED
    old = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = old


def grad_enabled():
    return _GRAD_ENABLED


class Node:
    """Backward-graph record: op tag, parent tensors, gradient closure."""

    __slots__ = ("op", "parents", "backward")

    def __init__(self, op, parents, backward):
        self.op = op
        self.parents = parents
        self.backward = backward


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "node")

    def __init__(self, data, requires_grad=False):
        self.data = np.asarray(data, dtype=_DEFAULT_DTYPE)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self.node = None

    # -- plumbing -----------------------------------------------------------

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def item(self):
        return float(self.data)

    def detach(self):
        out = Tensor.__new__(Tensor)
        out.data = self.data
        out.grad = None
        out.requires_grad = False
        out.node = None
        return out

    def numpy(self):
        return self.data

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def _accumulate(self, g, owned=False):
        if self.grad is None:
            # unless the caller owns g, copy: it may alias an upstream grad
            # buffer (pass-through ops) or a view
            self.grad = g if owned else np.array(g, dtype=self.data.dtype)
        else:
            self.grad += g

    # -- backward -----------------------------------------------------------

    def backward(self):
        if self.size != 1:
            raise ValueError(f"backward() requires a scalar loss, got shape {self.shape}")
        # iterative topo sort: graphs from long training steps exceed the
        # recursion limit
        topo = []
        visited = set()
        stack = [(self, False)]
        while stack:
            t, expanded = stack.pop()
            if expanded:
                topo.append(t)
                continue
            if id(t) in visited:
                continue
            visited.add(id(t))
            stack.append((t, True))
            if t.node is not None:
                for p in t.node.parents:
                    if id(p) not in visited:
                        stack.append((p, False))
        self.grad = np.ones_like(self.data)
        for t in reversed(topo):
            if t.node is not None and t.grad is not None:
                t.node.backward(t.grad)

    # -- operator sugar -----------------------------------------------------

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
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __pow__(self, p):
        return power(self, p)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis, keepdims)

    def reshape(self, *shape):
        return reshape(self, *shape)

    def transpose(self, *axes):
        return transpose(self, *axes)

    def exp(self):
        return exp(self)

    def log(self):
        return log(self)

    def sqrt(self):
        return sqrt(self)


def tensor(data, requires_grad=False):
    return Tensor(data, requires_grad=requires_grad)


def zeros(shape, requires_grad=False):
    return Tensor(np.zeros(shape), requires_grad=requires_grad)


def ones(shape, requires_grad=False):
    return Tensor(np.ones(shape), requires_grad=requires_grad)


def _wrap(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data, op, parents, backward):
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.node = None
    out.requires_grad = False
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out.node = Node(op, parents, backward)
    return out


def _unbroadcast(g, shape):
    """Reduce gradient g back onto `shape` after numpy broadcasting.

    Returns (grad, owned): owned is True when a reduction made a fresh
    array the caller may keep without copying."""
    owned = False
    while g.ndim > len(shape):
        g = g.sum(axis=0)
        owned = True
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
            owned = True
    return g, owned


def _check_broadcast(a, b, op):
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} do not broadcast") from None


# -- elementwise ------------------------------------------------------------


def add(a, b):
    a, b = _wrap(a), _wrap(b)
    _check_broadcast(a, b, "add")

    def backward(g):
        if a.requires_grad:
            a._accumulate(*_unbroadcast(g, a.shape))
        if b.requires_grad:
            b._accumulate(*_unbroadcast(g, b.shape))

    return _make(a.data + b.data, "add", (a, b), backward)


def sub(a, b):
    a, b = _wrap(a), _wrap(b)
    _check_broadcast(a, b, "sub")

    def backward(g):
        if a.requires_grad:
            a._accumulate(*_unbroadcast(g, a.shape))
        if b.requires_grad:
            gb, _ = _unbroadcast(-g, b.shape)
            b._accumulate(gb, owned=True)

    return _make(a.data - b.data, "sub", (a, b), backward)


def mul(a, b):
    a, b = _wrap(a), _wrap(b)
    _check_broadcast(a, b, "mul")

    def backward(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g * b.data, a.shape)[0], owned=True)
        if b.requires_grad:
            b._accumulate(_unbroadcast(g * a.data, b.shape)[0], owned=True)

    return _make(a.data * b.data, "mul", (a, b), backward)


def div(a, b):
    a, b = _wrap(a), _wrap(b)
    _check_broadcast(a, b, "div")

    def backward(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g / b.data, a.shape)[0], owned=True)
        if b.requires_grad:
            b._accumulate(
                _unbroadcast(-g * a.data / (b.data * b.data), b.shape)[0], owned=True
            )

    return _make(a.data / b.data, "div", (a, b), backward)


def power(a, p):
    a = _wrap(a)
    p = float(p)

    def backward(g):
        if a.requires_grad:
            a._accumulate(g * p * a.data ** (p - 1.0), owned=True)

    return _make(a.data**p, "pow", (a,), backward)


def exp(a):
    a = _wrap(a)
    out_data = np.exp(a.data)

    def backward(g):
        if a.requires_grad:
            a._accumulate(g * out_data, owned=True)

    return _make(out_data, "exp", (a,), backward)


def log(a):
    a = _wrap(a)

    def backward(g):
        if a.requires_grad:
            a._accumulate(g / a.data, owned=True)

    return _make(np.log(a.data), "log", (a,), backward)


def sqrt(a):
    a = _wrap(a)
    out_data = np.sqrt(a.data)

    def backward(g):
        if a.requires_grad:
            a._accumulate(g * 0.5 / out_data, owned=True)

    return _make(out_data, "sqrt", (a,), backward)


def relu(a):
    a = _wrap(a)
    out_data = np.maximum(a.data, 0.0)

    def backward(g):
        if a.requires_grad:
            a._accumulate(g * (a.data > 0), owned=True)

    return _make(out_data, "relu", (a,), backward)


_GELU_C = 0.7978845608028654  # sqrt(2/pi)


def gelu(a):
    """tanh-approximation GELU; its derivative is differentiated exactly."""
    a = _wrap(a)
    x = a.data
    x2 = x * x
    t = np.tanh(_GELU_C * (x + 0.044715 * x2 * x))
    out_data = 0.5 * x * (1.0 + t)

    def backward(g):
        if a.requires_grad:
            d_inner = _GELU_C * (1.0 + 3 * 0.044715 * x2)
            da = 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * d_inner
            a._accumulate(g * da, owned=True)

    return _make(out_data, "gelu", (a,), backward)


# -- reductions / shape -----------------------------------------------------


def tsum(a, axis=None, keepdims=False):
    a = _wrap(a)
    out_data = a.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if a.requires_grad:
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            a._accumulate(np.broadcast_to(g, a.shape).copy(), owned=True)

    return _make(out_data, "sum", (a,), backward)


def tmean(a, axis=None, keepdims=False):
    a = _wrap(a)
    out_data = a.data.mean(axis=axis, keepdims=keepdims)
    count = a.data.size if axis is None else np.prod(
        [a.shape[ax] for ax in (axis if isinstance(axis, tuple) else (axis,))]
    )

    def backward(g):
        if a.requires_grad:
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            a._accumulate(np.broadcast_to(g, a.shape) / count, owned=True)

    return _make(out_data, "mean", (a,), backward)


def reshape(a, *shape):
    a = _wrap(a)
    if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
        shape = tuple(shape[0])

    def backward(g):
        if a.requires_grad:
            a._accumulate(g.reshape(a.shape))

    return _make(a.data.reshape(shape), "reshape", (a,), backward)


def transpose(a, *axes):
    a = _wrap(a)
    if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
        axes = tuple(axes[0])
    if not axes:
        axes = tuple(reversed(range(a.ndim)))
    inv = np.argsort(axes)

    def backward(g):
        if a.requires_grad:
            a._accumulate(g.transpose(inv))

    return _make(a.data.transpose(axes), "transpose", (a,), backward)


def concat(tensors, axis=0):
    tensors = [_wrap(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def backward(g):
        for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
            if t.requires_grad:
                idx = [slice(None)] * g.ndim
                idx[axis] = slice(lo, hi)
                t._accumulate(g[tuple(idx)])

    return _make(
        np.concatenate([t.data for t in tensors], axis=axis), "concat", tuple(tensors), backward
    )


def split(x, parts, axis=0):
    """Inverse of concat: cut axis into `parts` equal chunks."""
    x = _wrap(x)
    n = x.shape[axis]
    if n % parts:
        raise ShapeError(f"split: axis size {n} not divisible into {parts} parts")
    step = n // parts
    outs = []
    for p in range(parts):
        idx = [slice(None)] * x.ndim
        idx[axis] = slice(p * step, (p + 1) * step)
        idx = tuple(idx)

        def backward(g, idx=idx):
            if x.requires_grad:
                gx = np.zeros_like(x.data)
                gx[idx] = g
                x._accumulate(gx, owned=True)

        outs.append(_make(x.data[idx].copy(), "split", (x,), backward))
    return outs


# -- matmul -----------------------------------------------------------------


def matmul(a, b):
    a, b = _wrap(a), _wrap(b)
    if a.ndim < 1 or b.ndim < 1 or a.shape[-1] != b.shape[-2 if b.ndim > 1 else 0]:
        raise ShapeError(f"matmul: inner dimensions of {a.shape} and {b.shape} disagree")

    def backward(g):
        if a.requires_grad:
            ga = g @ np.swapaxes(b.data, -1, -2)
            a._accumulate(_unbroadcast(ga, a.shape)[0], owned=True)
        if b.requires_grad:
            gb = np.swapaxes(a.data, -1, -2) @ g
            b._accumulate(_unbroadcast(gb, b.shape)[0], owned=True)

    return _make(a.data @ b.data, "matmul", (a, b), backward)


# -- softmax family ---------------------------------------------------------


def softmax(a, axis=-1):
    a = _wrap(a)
    if not -a.ndim <= axis < a.ndim:
        raise ValueError(f"softmax: axis {axis} out of bounds for ndim {a.ndim}")
    z = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        if a.requires_grad:
            a._accumulate(s * (g - (g * s).sum(axis=axis, keepdims=True)), owned=True)

    return _make(s, "softmax", (a,), backward)


def log_softmax(a, axis=-1):
    a = _wrap(a)
    if not -a.ndim <= axis < a.ndim:
        raise ValueError(f"log_softmax: axis {axis} out of bounds for ndim {a.ndim}")
    z = a.data - a.data.max(axis=axis, keepdims=True)
    ls = z - np.log(np.exp(z).sum(axis=axis, keepdims=True))

    def backward(g):
        if a.requires_grad:
            a._accumulate(g - np.exp(ls) * g.sum(axis=axis, keepdims=True), owned=True)

    return _make(ls, "log_softmax", (a,), backward)


# -- layer norm (composite) -------------------------------------------------


def layer_norm(x, gamma, beta, eps=1e-5):
    """Normalize the last axis to mean 0 / var 1, then scale and shift.

    eps keeps zero-variance rows finite: they normalize to exact zeros.
    """
    mu = tmean(x, axis=-1, keepdims=True)
    xc = sub(x, mu)
    var = tmean(mul(xc, xc), axis=-1, keepdims=True)
    inv = div(1.0, sqrt(add(var, eps)))
    return add(mul(mul(xc, inv), gamma), beta)


# -- convolution via im2col -------------------------------------------------


def _conv_out_size(size, k, stride, pad, what):
    span = size + 2 * pad - k
    if span < 0 or span % stride != 0:
        raise ShapeError(
            f"conv2d: non-integral output {what}: ({size} + 2*{pad} - {k}) / {stride} + 1"
        )
    return span // stride + 1


def im2col(x, k, stride=1, pad=0):
    """Unfold [B,C,H,W] into patch columns [B*H'*W', C*k*k].

    Backward scatters gradients back with col2im, so conv2d needs no
    dedicated backward rule beyond matmul's.
    """
    x = _wrap(x)
    b, c, h, w = x.shape
    oh = _conv_out_size(h, k, stride, pad, "height")
    ow = _conv_out_size(w, k, stride, pad, "width")
    xp = np.pad(x.data, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    cols = np.empty((b, c, k, k, oh, ow), dtype=x.dtype)
    for i in range(k):
        for j in range(k):
            cols[:, :, i, j] = xp[:, :, i : i + stride * oh : stride, j : j + stride * ow : stride]
    out_data = cols.transpose(0, 4, 5, 1, 2, 3).reshape(b * oh * ow, c * k * k)

    def backward(g):
        if not x.requires_grad:
            return
        gcols = g.reshape(b, oh, ow, c, k, k).transpose(0, 3, 4, 5, 1, 2)
        gxp = np.zeros((b, c, h + 2 * pad, w + 2 * pad), dtype=x.dtype)
        for i in range(k):
            for j in range(k):
                gxp[:, :, i : i + stride * oh : stride, j : j + stride * ow : stride] += gcols[
                    :, :, i, j
                ]
        if pad:
            gxp = np.ascontiguousarray(gxp[:, :, pad:-pad, pad:-pad])
        x._accumulate(gxp, owned=True)

    return _make(out_data, "im2col", (x,), backward)


def conv2d(x, w, b=None, stride=1, pad=0):
    """Cross-correlation of [B,C,H,W] with [O,C,k,k] kernels, k in {1,3}."""
    x, w = _wrap(x), _wrap(w)
    o, cw, kh, kw = w.shape
    if kh != kw or kh not in (1, 3):
        raise ShapeError(f"conv2d: kernel must be square 1x1 or 3x3, got {kh}x{kw}")
    bt, c, h, width = x.shape
    if c != cw:
        raise ShapeError(f"conv2d: input channels {c} != kernel channels {cw}")
    k = kh
    oh = _conv_out_size(h, k, stride, pad, "height")
    ow = _conv_out_size(width, k, stride, pad, "width")
    cols = im2col(x, k, stride, pad)
    wmat = transpose(reshape(w, o, c * k * k), 1, 0)
    out = matmul(cols, wmat)
    if b is not None:
        out = add(out, b)
    out = transpose(reshape(out, bt, oh, ow, o), 0, 3, 1, 2)
    return out


# -- bilinear resize --------------------------------------------------------


def _resize_axis_matrix(n_in, n_out, dtype):
    """Half-pixel sampling matrix A[out, in]: src = (i+0.5)*n_in/n_out - 0.5,
    clamped; each row carries the two linear interpolation weights."""
    src = (np.arange(n_out, dtype=np.float64) + 0.5) * (n_in / n_out) - 0.5
    lo = np.floor(src)
    frac = src - lo
    i0 = np.clip(lo, 0, n_in - 1).astype(np.int64)
    i1 = np.clip(lo + 1, 0, n_in - 1).astype(np.int64)
    mat = np.zeros((n_out, n_in), dtype=dtype)
    rows = np.arange(n_out)
    np.add.at(mat, (rows, i0), (1.0 - frac).astype(dtype))
    np.add.at(mat, (rows, i1), frac.astype(dtype))
    return mat


def bilinear_resize(x, out_h, out_w):
    x = _wrap(x)
    if out_h < 1 or out_w < 1:
        raise ValueError(f"bilinear_resize: target size {out_h}x{out_w} must be >= 1")
    b, c, h, w = x.shape
    if (out_h, out_w) == (h, w):
        def backward_id(g):
            if x.requires_grad:
                x._accumulate(g)

        return _make(x.data, "bilinear_resize", (x,), backward_id)
    # separable resize as two contractions: out = A_h @ x @ A_w^T
    ah = _resize_axis_matrix(h, out_h, x.data.dtype)
    aw = _resize_axis_matrix(w, out_w, x.data.dtype)
    out_data = ah @ (x.data @ aw.T)

    def backward(g):
        if x.requires_grad:
            x._accumulate(ah.T @ (g @ aw), owned=True)

    return _make(out_data, "bilinear_resize", (x,), backward)


# -- gradient checking ------------------------------------------------------


@dataclass
class GradCheckReport:
    op_name: str
    max_rel_error: float
    tolerance: float
    passed: bool


def gradcheck(f, inputs, name="op", tol=1e-4, step=1e-6, max_coords=32, seed=0):
    """Compare autodiff gradients of scalar-valued f against central finite
    differences, sampling at most max_coords coordinates per input.

    Relative error uses denominator max(|analytic|, |numeric|, 1e-8).
    Requires float64 inputs; FD with step 1e-6 is meaningless in float32.
    """
    inputs = [t if isinstance(t, Tensor) else Tensor(t, requires_grad=True) for t in inputs]
    for t in inputs:
        if t.data.dtype != np.float64:
            raise ValueError("gradcheck requires float64 inputs (64-bit mode)")
        t.grad = None
    out = f(*inputs)
    out.backward()
    rng = np.random.default_rng(seed)
    max_rel = 0.0
    with no_grad():
        for t in inputs:
            if not t.requires_grad:
                continue
            analytic = t.grad if t.grad is not None else np.zeros_like(t.data)
            n = t.data.size
            coords = (
                np.arange(n) if n <= max_coords else rng.choice(n, size=max_coords, replace=False)
            )
            for idx in coords:
                orig = t.data.flat[idx]
                t.data.flat[idx] = orig + step
                f_hi = float(f(*inputs).data)
                t.data.flat[idx] = orig - step
                f_lo = float(f(*inputs).data)
                t.data.flat[idx] = orig
                numeric = (f_hi - f_lo) / (2 * step)
                a = float(analytic.flat[idx])
                rel = abs(a - numeric) / max(abs(a), abs(numeric), 1e-8)
                max_rel = max(max_rel, rel)
    return GradCheckReport(op_name=name, max_rel_error=max_rel, tolerance=tol, passed=max_rel <= tol)
