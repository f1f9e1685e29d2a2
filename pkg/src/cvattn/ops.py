"""Differentiable primitives on :class:`~cvattn.tensor.Tensor`.

Convolution is cross-correlation (no kernel flip).  Bilinear resampling uses
the half-pixel ("align corners false") convention: output index ``o`` samples
source coordinate ``(o + 0.5) * in_size / out_size - 0.5``, clamped to
``[0, in_size - 1]``.
"""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import as_strided

from . import _kernels
from .tensor import Function, ShapeError, Tensor, as_tensor, log_branch


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, (gs, s) in enumerate(zip(g.shape, shape)) if s == 1 and gs != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _broadcast_shape(a: np.ndarray, b: np.ndarray) -> tuple[int, ...]:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"shapes {a.shape} and {b.shape} are not broadcastable") from None


# --- binary pointwise -------------------------------------------------------


class Add(Function):
    def forward(self, a, b):
        _broadcast_shape(a, b)
        self.shapes = a.shape, b.shape
        return a + b

    def backward(self, g):
        sa, sb = self.shapes
        return _unbroadcast(g, sa), _unbroadcast(g, sb)


class Sub(Function):
    def forward(self, a, b):
        _broadcast_shape(a, b)
        self.shapes = a.shape, b.shape
        return a - b

    def backward(self, g):
        sa, sb = self.shapes
        return _unbroadcast(g, sa), _unbroadcast(-g, sb)


class Mul(Function):
    def forward(self, a, b):
        _broadcast_shape(a, b)
        self.a, self.b = a, b
        return a * b

    def backward(self, g):
        return _unbroadcast(g * self.b, self.a.shape), _unbroadcast(g * self.a, self.b.shape)


class Div(Function):
    def forward(self, a, b):
        _broadcast_shape(a, b)
        self.a, self.b = a, b
        return a / b

    def backward(self, g):
        a, b = self.a, self.b
        return _unbroadcast(g / b, a.shape), _unbroadcast(-g * a / (b * b), b.shape)


def _operands(a, b):
    a, b = as_tensor(a), as_tensor(b)
    # python scalars follow the tensor's precision
    if a.data.ndim == 0 and not a.requires_grad and b.data.ndim:
        a = Tensor(a.data.astype(b.dtype))
    if b.data.ndim == 0 and not b.requires_grad and a.data.ndim:
        b = Tensor(b.data.astype(a.dtype))
    return a, b


def add(a, b) -> Tensor:
    return Add.apply(*_operands(a, b))


def sub(a, b) -> Tensor:
    return Sub.apply(*_operands(a, b))


def mul(a, b) -> Tensor:
    return Mul.apply(*_operands(a, b))


def div(a, b) -> Tensor:
    return Div.apply(*_operands(a, b))


# --- unary pointwise --------------------------------------------------------


class ScalarMul(Function):
    def forward(self, x, c):
        self.c = c
        return x * x.dtype.type(c)

    def backward(self, g):
        return (g * g.dtype.type(self.c),)


class Square(Function):
    def forward(self, x):
        self.x = x
        return x * x

    def backward(self, g):
        return (2.0 * g * self.x,)


class Sigmoid(Function):
    def forward(self, x):
        e = np.exp(-np.abs(x))
        s = np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e)).astype(x.dtype, copy=False)
        # keep the output strictly inside (0, 1) even where it would round to 0 or 1
        fi = np.finfo(x.dtype)
        s = np.clip(s, fi.tiny, 1.0 - fi.epsneg)
        self.s = s
        return s

    def backward(self, g):
        return (g * self.s * (1.0 - self.s),)


class Relu(Function):
    def forward(self, x):
        self.mask = x > 0
        log_branch(self.mask)
        return np.where(self.mask, x, 0).astype(x.dtype, copy=False)

    def backward(self, g):
        return (g * self.mask,)


class Exp(Function):
    def forward(self, x):
        self.y = np.exp(x)
        return self.y

    def backward(self, g):
        return (g * self.y,)


class Log(Function):
    def forward(self, x):
        self.x = x
        with np.errstate(divide="ignore", invalid="ignore"):
            return np.log(x)

    def backward(self, g):
        return (g / self.x,)


def scalar_mul(x, c: float) -> Tensor:
    return ScalarMul.apply(x, c=float(c))


def square(x) -> Tensor:
    return Square.apply(x)


def sigmoid(x) -> Tensor:
    return Sigmoid.apply(x)


def relu(x) -> Tensor:
    return Relu.apply(x)


def exp(x) -> Tensor:
    return Exp.apply(x)


def log(x) -> Tensor:
    return Log.apply(x)


# --- reductions and shape ---------------------------------------------------


class Reduce(Function):
    def forward(self, x, op="sum", axes=None, keepdims=False):
        if axes is not None:
            axes = tuple(a % x.ndim for a in (axes if isinstance(axes, (tuple, list)) else (axes,)))
            if len(axes) == 0:
                axes = None
        self.in_shape = x.shape
        self.axes = axes
        self.keepdims = keepdims
        self.op = op
        if op == "sum":
            return np.sum(x, axis=axes, keepdims=keepdims)
        if op == "mean":
            return np.mean(x, axis=axes, keepdims=keepdims)
        raise ValueError(f"unknown reduction {op!r}")

    def backward(self, g):
        axes = self.axes if self.axes is not None else tuple(range(len(self.in_shape)))
        if not self.keepdims:
            g = np.expand_dims(g, axes)
        g = np.broadcast_to(g, self.in_shape)
        if self.op == "mean":
            count = int(np.prod([self.in_shape[a] for a in axes]))
            g = g / count
        return (np.array(g),)


def reduce(x, op: str = "sum", axes=None, keepdims: bool = False) -> Tensor:
    """Sum or mean over ``axes``; ``None`` or an empty list reduces over all."""
    return Reduce.apply(x, op=op, axes=axes, keepdims=keepdims)


class Reshape(Function):
    def forward(self, x, shape):
        self.in_shape = x.shape
        return x.reshape(shape)

    def backward(self, g):
        return (g.reshape(self.in_shape),)


def reshape(x, shape) -> Tensor:
    return Reshape.apply(x, shape=tuple(shape))


class Concat(Function):
    def forward(self, *xs, axis=1):
        self.axis = axis
        self.sizes = [x.shape[axis] for x in xs]
        return np.concatenate(xs, axis=axis)

    def backward(self, g):
        splits = np.cumsum(self.sizes)[:-1]
        return tuple(np.split(g, splits, axis=self.axis))


def concat(xs, axis: int = 1) -> Tensor:
    ref = xs[0].shape
    for x in xs[1:]:
        if len(x.shape) != len(ref) or any(a != b for i, (a, b) in enumerate(zip(x.shape, ref)) if i != axis % len(ref)):
            raise ShapeError(f"cannot concatenate {ref} and {x.shape} along axis {axis}")
    return Concat.apply(*xs, axis=axis)


# --- convolution ------------------------------------------------------------


class Conv2d(Function):
    def forward(self, x, w, b=None, stride=1, padding=0):
        N, C, H, W = x.shape
        Co, Ci, kh, kw = w.shape
        p, s = padding, stride
        Hp, Wp = H + 2 * p, W + 2 * p
        Ho = (Hp - kh) // s + 1
        Wo = (Wp - kw) // s + 1
        self.geom = (N, C, H, W, kh, kw, Ho, Wo, Hp, Wp, s, p)
        self.w = w
        self.has_bias = b is not None
        if kh == 1 and kw == 1 and p == 0 and s == 1:
            self.cols = None
            self.x = x
            out = np.einsum("oc,nchw->nohw", w[:, :, 0, 0], x, optimize=True)
        else:
            xp = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p))) if p else x
            sn, sc, sh, sw = xp.strides
            cols = as_strided(xp, (N, C, kh, kw, Ho, Wo), (sn, sc, sh, sw, sh * s, sw * s))
            cols = cols.transpose(1, 2, 3, 0, 4, 5).reshape(C * kh * kw, N * Ho * Wo)
            self.cols = cols
            out = (w.reshape(Co, -1) @ cols).reshape(Co, N, Ho, Wo).transpose(1, 0, 2, 3)
        if b is not None:
            out = out + b.reshape(1, -1, 1, 1)
        return np.ascontiguousarray(out)

    def backward(self, g):
        N, C, H, W, kh, kw, Ho, Wo, Hp, Wp, s, p = self.geom
        w = self.w
        Co = w.shape[0]
        gb = g.sum(axis=(0, 2, 3)) if self.has_bias else None
        if self.cols is None:
            w2 = w[:, :, 0, 0]
            gw = np.einsum("nohw,nchw->oc", g, self.x, optimize=True).reshape(w.shape)
            gx = np.einsum("oc,nohw->nchw", w2, g, optimize=True)
        else:
            g2 = g.transpose(1, 0, 2, 3).reshape(Co, -1)
            gw = (g2 @ self.cols.T).reshape(w.shape)
            gcols = (w.reshape(Co, -1).T @ g2).reshape(C, kh, kw, N, Ho, Wo)
            gxp = _kernels.col2im(gcols, Hp, Wp, s)
            gx = gxp[:, :, p:p + H, p:p + W] if p else gxp
            gx = np.ascontiguousarray(gx)
        if self.has_bias:
            return gx, gw, gb
        return gx, gw


def conv2d(x, w, b=None, stride: int = 1, padding: int = 0) -> Tensor:
    x, w = as_tensor(x), as_tensor(w)
    if x.ndim != 4 or w.ndim != 4:
        raise ShapeError(f"conv2d expects 4-d input and kernel, got {x.shape} and {w.shape}")
    Co, Ci, kh, kw = w.shape
    if x.shape[1] != Ci:
        raise ShapeError(f"conv2d channel mismatch: input has C={x.shape[1]}, kernel expects Cin={Ci}")
    if kh % 2 == 0 or kw % 2 == 0:
        raise ShapeError(f"conv2d kernel extents must be odd, got kh={kh}, kw={kw}")
    if stride < 1 or padding < 0:
        raise ShapeError(f"conv2d needs stride >= 1 and padding >= 0, got stride={stride}, padding={padding}")
    if x.shape[2] + 2 * padding < kh or x.shape[3] + 2 * padding < kw:
        raise ShapeError(f"conv2d kernel {kh}x{kw} larger than padded input {x.shape[2:]}")
    if b is not None:
        b = as_tensor(b)
        if b.shape != (Co,):
            raise ShapeError(f"conv2d bias shape {b.shape} does not match Cout={Co}")
        return Conv2d.apply(x, w, b, stride=stride, padding=padding)
    return Conv2d.apply(x, w, stride=stride, padding=padding)


# --- pooling and resampling -------------------------------------------------


class MaxPool2d(Function):
    def forward(self, x):
        N, C, H, W = x.shape
        out, self.arg = _kernels.maxpool2x2(x.reshape(N * C, H, W))
        log_branch(self.arg)
        return out.reshape(N, C, H // 2, W // 2)

    def backward(self, g):
        N, C, Ho, Wo = g.shape
        gx = _kernels.maxpool2x2_backward(g.reshape(N * C, Ho, Wo), self.arg)
        return (gx.reshape(N, C, 2 * Ho, 2 * Wo),)


def maxpool2d(x, window: int = 2) -> Tensor:
    """2x2 max pooling; the gradient goes to the first maximal element in row-major order."""
    x = as_tensor(x)
    if window != 2:
        raise ValueError("only window=2 is supported")
    if x.ndim != 4 or x.shape[2] % 2 or x.shape[3] % 2:
        raise ShapeError(f"maxpool2d needs even spatial dims, got {x.shape}")
    return MaxPool2d.apply(x)


class UpsampleNearest(Function):
    def forward(self, x, factor):
        self.f = factor
        return np.repeat(np.repeat(x, factor, axis=-2), factor, axis=-1)

    def backward(self, g):
        f = self.f
        *lead, H, W = g.shape
        return (g.reshape(*lead, H // f, f, W // f, f).sum(axis=(-3, -1)),)


def bilinear_matrix(n_in: int, n_out: int, dtype=np.float64) -> np.ndarray:
    """Interpolation matrix R with R @ v resampling a length-n_in signal to n_out."""
    o = np.arange(n_out, dtype=np.float64)
    src = (o + 0.5) * (n_in / n_out) - 0.5
    src = np.clip(src, 0.0, n_in - 1)
    i0 = np.floor(src).astype(int)
    i1 = np.minimum(i0 + 1, n_in - 1)
    w1 = src - i0
    R = np.zeros((n_out, n_in), dtype=np.float64)
    np.add.at(R, (np.arange(n_out), i0), 1.0 - w1)
    np.add.at(R, (np.arange(n_out), i1), w1)
    return R.astype(dtype)


class ResizeBilinear(Function):
    def forward(self, x, size):
        Ho, Wo = size
        self.Ry = bilinear_matrix(x.shape[-2], Ho, x.dtype)
        self.Rx = bilinear_matrix(x.shape[-1], Wo, x.dtype)
        return np.einsum("oh,...hw,pw->...op", self.Ry, x, self.Rx, optimize=True)

    def backward(self, g):
        return (np.einsum("oh,...op,pw->...hw", self.Ry, g, self.Rx, optimize=True),)


def resize_bilinear(x, size: tuple[int, int]) -> Tensor:
    return ResizeBilinear.apply(x, size=tuple(size))


def upsample2d(x, factor: int = 2, mode: str = "nearest") -> Tensor:
    x = as_tensor(x)
    if factor < 2:
        raise ValueError(f"upsample factor must be >= 2, got {factor}")
    if x.ndim < 2:
        raise ShapeError(f"upsample2d needs spatial dims, got {x.shape}")
    if mode == "nearest":
        return UpsampleNearest.apply(x, factor=factor)
    if mode == "bilinear":
        return resize_bilinear(x, (x.shape[-2] * factor, x.shape[-1] * factor))
    raise ValueError(f"unknown upsample mode {mode!r}")


def avgpool(x: np.ndarray, factor: int) -> np.ndarray:
    """Block-average downsampling (plain arrays; the inverse of nearest upsampling)."""
    *lead, H, W = x.shape
    return x.reshape(*lead, H // factor, factor, W // factor, factor).mean(axis=(-3, -1))
