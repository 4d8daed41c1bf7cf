"""Dense float tensors with reverse-mode automatic differentiation.

Layout is fixed to N,C,H,W row-major. Compute is float32 by default; the
same ops run unchanged on float64 tensors, which is how the gradient
checker builds its 64-bit reference path. Gradients are accumulated
additively across fan-out, so ``y = x + x`` yields ``grad(x) == 2``.

The recorded graph lives in the tensors themselves: each op output keeps
references to its inputs plus a backward closure. ``Tensor.backward``
topologically sorts that record and visits every op exactly once in
reverse execution order.
"""

from __future__ import annotations

import struct
from contextlib import contextmanager
from typing import Callable, Iterable, Optional, Sequence

import numpy as np

from .errors import (
    ContractError,
    DataIOError,
    DegenerateBatchError,
    DimensionError,
    NumericError,
)

__all__ = [
    "Tensor",
    "RunningMoments",
    "no_grad",
    "record_switches",
    "concat",
    "concat_channels",
    "relu",
    "sigmoid",
    "softmax_channel",
    "conv2d",
    "conv2d_forward_direct",
    "maxpool2",
    "upsample_bilinear2",
    "directional_avgpool",
    "batchnorm2d",
    "save_tns",
    "load_tns",
    "tns_encode",
    "tns_decode",
]

_grad_enabled = True

# When not None, relu sign masks and maxpool argmax indices are appended
# here during forward.  The gradient checker compares these records across
# perturbed evaluations to detect (and exclude) non-differentiable points.
_switch_trace: Optional[list] = None


@contextmanager
def no_grad():
    """Disable graph recording; outputs become constants."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


@contextmanager
def record_switches():
    """Collect relu/maxpool branching decisions of every forward run inside."""
    global _switch_trace
    prev = _switch_trace
    _switch_trace = []
    try:
        yield _switch_trace
    finally:
        _switch_trace = prev


def _trace(arr: np.ndarray) -> None:
    if _switch_trace is not None:
        _switch_trace.append(arr)


class Tensor:
    """N-dimensional float array with an optional gradient slot."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward_fn")

    def __init__(self, data, requires_grad: bool = False, dtype=None, check: bool = True):
        if isinstance(data, Tensor):
            data = data.data
        preserve = (dtype is None and isinstance(data, np.ndarray)
                    and data.dtype in (np.float32, np.float64))
        arr = np.asarray(data, dtype=dtype)
        if not preserve and dtype is None and arr.dtype != np.float32:
            arr = arr.astype(np.float32)
        if check and not np.isfinite(arr).all():
            raise NumericError("tensor construction received non-finite values")
        self.data: np.ndarray = arr
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple = ()
        self._backward_fn: Optional[Callable[[np.ndarray], None]] = None

    @classmethod
    def _make(cls, data: np.ndarray, parents: tuple, backward_fn) -> "Tensor":
        out = cls.__new__(cls)
        out.data = data
        out.grad = None
        req = _grad_enabled and any(p.requires_grad for p in parents)
        out.requires_grad = req
        if req:
            out._parents = parents
            out._backward_fn = backward_fn
        else:
            out._parents = ()
            out._backward_fn = None
        return out

    # -- introspection -------------------------------------------------

    @property
    def shape(self):
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

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def to_double(self) -> "Tensor":
        return Tensor(self.data.astype(np.float64), requires_grad=self.requires_grad)

    def __repr__(self) -> str:
        req = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}{req})"

    # -- backward ------------------------------------------------------

    def backward(self) -> None:
        """Populate grad slots of every requires_grad tensor reachable from self."""
        if self.data.size != 1:
            raise ContractError(
                f"backward requires a scalar loss, got shape {self.data.shape}"
            )
        if not self.requires_grad:
            return
        topo: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, emitted = stack.pop()
            if emitted:
                topo.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))
        self.grad = np.ones_like(self.data)
        for node in reversed(topo):
            if node._backward_fn is not None and node.grad is not None:
                node._backward_fn(node.grad)

    def _accum(self, g: np.ndarray) -> None:
        if not self.requires_grad:
            return
        if self.grad is None:
            self.grad = g.copy() if g.base is not None or g is self.data else g
        else:
            self.grad = self.grad + g

    # -- elementwise arithmetic (broadcasting) --------------------------

    def _coerce(self, other) -> "Tensor":
        if isinstance(other, Tensor):
            return other
        return Tensor(np.asarray(other, dtype=self.dtype), check=False)

    def __add__(self, other):
        b = self._coerce(other)
        out_data = self.data + b.data

        def bw(g):
            self._accum(_unbroadcast(g, self.shape))
            b._accum(_unbroadcast(g, b.shape))

        return Tensor._make(out_data, (self, b), bw)

    __radd__ = __add__

    def __sub__(self, other):
        b = self._coerce(other)
        out_data = self.data - b.data

        def bw(g):
            self._accum(_unbroadcast(g, self.shape))
            b._accum(_unbroadcast(-g, b.shape))

        return Tensor._make(out_data, (self, b), bw)

    def __rsub__(self, other):
        return self._coerce(other).__sub__(self)

    def __mul__(self, other):
        b = self._coerce(other)
        out_data = self.data * b.data
        a_d, b_d = self.data, b.data

        def bw(g):
            self._accum(_unbroadcast(g * b_d, self.shape))
            b._accum(_unbroadcast(g * a_d, b.shape))

        return Tensor._make(out_data, (self, b), bw)

    __rmul__ = __mul__

    def __truediv__(self, other):
        b = self._coerce(other)
        out_data = self.data / b.data
        a_d, b_d = self.data, b.data

        def bw(g):
            self._accum(_unbroadcast(g / b_d, self.shape))
            b._accum(_unbroadcast(-g * a_d / (b_d * b_d), b.shape))

        return Tensor._make(out_data, (self, b), bw)

    def __rtruediv__(self, other):
        return self._coerce(other).__truediv__(self)

    def __neg__(self):
        def bw(g):
            self._accum(-g)

        return Tensor._make(-self.data, (self,), bw)

    def pow(self, exponent: float, grad_floor: float = 0.0) -> "Tensor":
        """Elementwise power with a real exponent.

        ``grad_floor`` bounds the base away from zero inside the backward
        formula only; the forward value is exact. Needed when an exponent
        below one meets a base that can reach zero (the derivative there
        is unbounded).
        """
        d = self.data
        out_data = d ** exponent

        def bw(g):
            base = np.maximum(d, grad_floor) if grad_floor > 0.0 else d
            self._accum(g * exponent * base ** (exponent - 1.0))

        return Tensor._make(out_data, (self,), bw)

    def __pow__(self, exponent: float) -> "Tensor":
        return self.pow(exponent)

    def exp(self) -> "Tensor":
        out_data = np.exp(self.data)

        def bw(g):
            self._accum(g * out_data)

        return Tensor._make(out_data, (self,), bw)

    def log(self) -> "Tensor":
        d = self.data

        def bw(g):
            self._accum(g / d)

        return Tensor._make(np.log(d), (self,), bw)

    def sqrt(self) -> "Tensor":
        out_data = np.sqrt(self.data)

        def bw(g):
            self._accum(g * 0.5 / out_data)

        return Tensor._make(out_data, (self,), bw)

    def clip(self, lo: Optional[float], hi: Optional[float]) -> "Tensor":
        d = self.data
        out_data = np.clip(d, lo, hi)
        inside = np.ones_like(d, dtype=bool)
        if lo is not None:
            inside &= d >= lo
        if hi is not None:
            inside &= d <= hi
        _trace(inside)

        def bw(g):
            self._accum(g * inside)

        return Tensor._make(out_data, (self,), bw)

    # -- reductions ------------------------------------------------------

    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        in_shape = self.shape
        out_data = self.data.sum(axis=axis, keepdims=keepdims)

        def bw(g):
            self._accum(_spread(g, in_shape, axis, keepdims))

        return Tensor._make(out_data, (self,), bw)

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        in_shape = self.shape
        out_data = self.data.mean(axis=axis, keepdims=keepdims)
        count = self.data.size // max(out_data.size, 1)

        def bw(g):
            self._accum(_spread(g, in_shape, axis, keepdims) / count)

        return Tensor._make(out_data, (self,), bw)

    # -- shape ops -------------------------------------------------------

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        in_shape = self.shape
        out_data = self.data.reshape(shape)

        def bw(g):
            self._accum(g.reshape(in_shape))

        return Tensor._make(out_data, (self,), bw)

    def transpose(self, axes: Sequence[int]) -> "Tensor":
        axes = tuple(axes)
        inv = tuple(np.argsort(axes))
        out_data = self.data.transpose(axes)

        def bw(g):
            self._accum(g.transpose(inv))

        return Tensor._make(out_data, (self,), bw)

    def narrow(self, axis: int, start: int, length: int) -> "Tensor":
        idx = [slice(None)] * self.ndim
        idx[axis] = slice(start, start + length)
        idx = tuple(idx)
        in_shape = self.shape
        out_data = self.data[idx]

        def bw(g):
            full = np.zeros(in_shape, dtype=g.dtype)
            full[idx] = g
            self._accum(full)

        return Tensor._make(out_data, (self,), bw)


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum g down to `shape`, undoing numpy broadcasting."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _spread(g: np.ndarray, in_shape: tuple, axis, keepdims: bool) -> np.ndarray:
    """Broadcast a reduction gradient back to the input shape."""
    if axis is not None and not keepdims:
        ax = (axis,) if isinstance(axis, int) else tuple(axis)
        ax = tuple(a % len(in_shape) for a in ax)
        kshape = tuple(1 if i in ax else s for i, s in enumerate(in_shape))
        g = g.reshape(kshape)
    return np.broadcast_to(g, in_shape)


# -- activations ---------------------------------------------------------


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    _trace(mask)

    def bw(g):
        x._accum(g * mask)

    return Tensor._make(np.maximum(x.data, 0), (x,), bw)


def sigmoid(x: Tensor) -> Tensor:
    d = x.data
    out_data = np.empty_like(d)
    pos = d >= 0
    out_data[pos] = 1.0 / (1.0 + np.exp(-d[pos]))
    ex = np.exp(d[~pos])
    out_data[~pos] = ex / (1.0 + ex)

    def bw(g):
        x._accum(g * out_data * (1.0 - out_data))

    return Tensor._make(out_data, (x,), bw)


def softmax_channel(x: Tensor) -> Tensor:
    """Softmax across axis 1; every pixel's channel vector sums to 1."""
    if x.ndim < 2:
        raise DimensionError("softmax_channel requires a channel axis (ndim >= 2)")
    d = x.data
    shifted = d - d.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    p = e / e.sum(axis=1, keepdims=True)

    def bw(g):
        dot = (g * p).sum(axis=1, keepdims=True)
        x._accum(p * (g - dot))

    return Tensor._make(p, (x,), bw)


# -- concatenation ---------------------------------------------------------


def concat(tensors: Sequence[Tensor], axis: int) -> Tensor:
    ref = tensors[0].shape
    for i, t in enumerate(tensors[1:], start=1):
        for a, (s0, s1) in enumerate(zip(ref, t.shape)):
            if a != axis % len(ref) and s0 != s1:
                raise DimensionError(
                    f"concat operand {i} has extent {s1} on axis {a}, expected {s0}"
                )
    out_data = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.shape[axis] for t in tensors]

    def bw(g):
        start = 0
        for t, s in zip(tensors, sizes):
            idx = [slice(None)] * g.ndim
            idx[axis] = slice(start, start + s)
            t._accum(g[tuple(idx)])
            start += s

    return Tensor._make(out_data, tuple(tensors), bw)


def concat_channels(a: Tensor, b: Tensor) -> Tensor:
    return concat([a, b], axis=1)


# -- convolution -----------------------------------------------------------


def conv2d_forward_direct(x: np.ndarray, w: np.ndarray, b: Optional[np.ndarray],
                          stride: int = 1, padding: int = 0) -> np.ndarray:
    """Plain-loop cross-correlation; the correctness-defining form.

    Test-scale only: the Tensor op below uses an im2col fast path whose
    output must match this function bit-for-bit modulo summation order.
    """
    n, cin, h, wd = x.shape
    cout, _, kh, kw = w.shape
    hout = (h + 2 * padding - kh) // stride + 1
    wout = (wd + 2 * padding - kw) // stride + 1
    xp = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    out = np.zeros((n, cout, hout, wout), dtype=x.dtype)
    for ni in range(n):
        for co in range(cout):
            for i in range(hout):
                for j in range(wout):
                    patch = xp[ni, :, i * stride:i * stride + kh, j * stride:j * stride + kw]
                    out[ni, co, i, j] = np.sum(patch * w[co])
            if b is not None:
                out[ni, co] += b[co]
    return out


def _im2col_nchw(xp: np.ndarray, kh: int, kw: int, stride: int,
                 hout: int, wout: int) -> np.ndarray:
    """Columns in (N, C*kh*kw, hout*wout) layout.

    Built from kh*kw contiguous slice copies, so both the copy and the
    following batched GEMM run without any axis gather. For 1x1 stride-1
    kernels this is a free reshape of the input.
    """
    n, c = xp.shape[:2]
    if kh == 1 and kw == 1 and stride == 1:
        return xp.reshape(n, c, hout * wout)
    col = np.empty((n, c, kh, kw, hout, wout), dtype=xp.dtype)
    for i in range(kh):
        for j in range(kw):
            col[:, :, i, j] = xp[:, :, i:i + stride * hout:stride,
                                 j:j + stride * wout:stride]
    return col.reshape(n, c * kh * kw, hout * wout)


def conv2d(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None,
           stride: int = 1, padding: int = 0) -> Tensor:
    """2D cross-correlation over N,C,H,W with gradients for all operands."""
    if x.ndim != 4:
        raise DimensionError(f"conv2d input must be 4D, got shape {x.shape}")
    if weight.ndim != 4:
        raise DimensionError(f"conv2d weight must be 4D, got shape {weight.shape}")
    n, cin, h, w = x.shape
    cout, cin_w, kh, kw = weight.shape
    if cin != cin_w:
        raise DimensionError(
            f"conv2d input has {cin} channels but weight expects {cin_w}"
        )
    if stride < 1:
        raise DimensionError(f"conv2d stride must be >= 1, got {stride}")
    if kh > h + 2 * padding or kw > w + 2 * padding:
        raise DimensionError(
            f"conv2d kernel {kh}x{kw} exceeds padded input {h + 2 * padding}x{w + 2 * padding}"
        )
    if bias is not None and bias.shape != (cout,):
        raise DimensionError(
            f"conv2d bias has shape {bias.shape}, expected ({cout},)"
        )
    hout = (h + 2 * padding - kh) // stride + 1
    wout = (w + 2 * padding - kw) // stride + 1

    if padding:
        xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    else:
        xp = x.data
    cols = _im2col_nchw(xp, kh, kw, stride, hout, wout)
    w_mat = weight.data.reshape(cout, -1)
    out_data = np.matmul(w_mat, cols).reshape(n, cout, hout, wout)
    if bias is not None:
        out_data += bias.data.reshape(1, cout, 1, 1)

    parents = (x, weight) if bias is None else (x, weight, bias)

    def bw(g):
        g3 = g.reshape(n, cout, hout * wout)
        if weight.requires_grad:
            gw = np.matmul(g3, cols.transpose(0, 2, 1)).sum(axis=0)
            weight._accum(gw.reshape(weight.shape))
        if bias is not None and bias.requires_grad:
            bias._accum(g.sum(axis=(0, 2, 3)))
        if x.requires_grad:
            g_cols = np.matmul(w_mat.T, g3)
            if kh == 1 and kw == 1 and stride == 1 and padding == 0:
                x._accum(g_cols.reshape(n, cin, h, w))
                return
            g_col6 = g_cols.reshape(n, cin, kh, kw, hout, wout)
            hp, wp = h + 2 * padding, w + 2 * padding
            gxp = np.zeros((n, cin, hp, wp), dtype=g.dtype)
            for i in range(kh):
                for j in range(kw):
                    gxp[:, :, i:i + stride * hout:stride,
                        j:j + stride * wout:stride] += g_col6[:, :, i, j]
            if padding:
                gxp = gxp[:, :, padding:padding + h, padding:padding + w]
            x._accum(gxp)

    return Tensor._make(out_data, parents, bw)


# -- pooling / resampling ----------------------------------------------------


def maxpool2(x: Tensor) -> Tensor:
    """2x2 max pooling, stride 2. Ties route gradient to the first window
    element in scan order."""
    if x.ndim != 4:
        raise DimensionError(f"maxpool2 input must be 4D, got shape {x.shape}")
    n, c, h, w = x.shape
    if h % 2 or w % 2:
        raise DimensionError(f"maxpool2 requires even H and W, got {h}x{w}")
    h2, w2 = h // 2, w // 2
    win = x.data.reshape(n, c, h2, 2, w2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h2, w2, 4)
    idx = win.argmax(axis=-1)  # first occurrence on ties
    _trace(idx)
    out_data = np.take_along_axis(win, idx[..., None], axis=-1)[..., 0]

    def bw(g):
        g4 = np.zeros((n, c, h2, w2, 4), dtype=g.dtype)
        np.put_along_axis(g4, idx[..., None], g[..., None], axis=-1)
        gx = g4.reshape(n, c, h2, w2, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h, w)
        x._accum(gx)

    return Tensor._make(np.ascontiguousarray(out_data), (x,), bw)


_lerp_cache: dict = {}


def _lerp_matrix(length: int, dtype) -> np.ndarray:
    """(2L, L) doubling matrix: bilinear, half-pixel centers, edges clamped."""
    key = (length, np.dtype(dtype).str)
    m = _lerp_cache.get(key)
    if m is None:
        m = np.zeros((2 * length, length), dtype=np.float64)
        for i in range(2 * length):
            src = (i + 0.5) / 2.0 - 0.5
            j0 = int(np.floor(src))
            t = src - j0
            m[i, min(max(j0, 0), length - 1)] += 1.0 - t
            m[i, min(max(j0 + 1, 0), length - 1)] += t
        m = m.astype(dtype)
        _lerp_cache[key] = m
    return m


def upsample_bilinear2(x: Tensor) -> Tensor:
    """Double H and W by bilinear interpolation (half-pixel convention,
    same as common align_corners=False)."""
    if x.ndim != 4:
        raise DimensionError(f"upsample_bilinear2 input must be 4D, got shape {x.shape}")
    n, c, h, w = x.shape
    mh = _lerp_matrix(h, x.dtype)
    mw = _lerp_matrix(w, x.dtype)
    yh = np.tensordot(mh, x.data, axes=([1], [2])).transpose(1, 2, 0, 3)
    out_data = np.tensordot(mw, yh, axes=([1], [3])).transpose(1, 2, 3, 0)

    def bw(g):
        gh = np.tensordot(mw.T, g, axes=([1], [3])).transpose(1, 2, 3, 0)
        gx = np.tensordot(mh.T, gh, axes=([1], [2])).transpose(1, 2, 0, 3)
        x._accum(np.ascontiguousarray(gx))

    return Tensor._make(np.ascontiguousarray(out_data), (x,), bw)


def directional_avgpool(x: Tensor, axis: str) -> Tensor:
    """Average away one spatial axis, keeping it with extent 1.

    axis="width" collapses W (output N,C,H,1); axis="height" collapses H
    (output N,C,1,W). These are the two 1D positional encodings that feed
    the coordinate-attention branches.
    """
    if x.ndim != 4:
        raise DimensionError(f"directional_avgpool input must be 4D, got shape {x.shape}")
    if axis == "width":
        ax = 3
    elif axis == "height":
        ax = 2
    else:
        raise DimensionError(f"directional_avgpool axis must be 'height' or 'width', got {axis!r}")
    extent = x.shape[ax]
    out_data = x.data.mean(axis=ax, keepdims=True)

    def bw(g):
        x._accum(np.broadcast_to(g / extent, x.shape))

    return Tensor._make(out_data, (x,), bw)


# -- batch normalization -------------------------------------------------


class RunningMoments:
    """Per-channel EMA of batch mean/variance (the non-trainable BN state)."""

    __slots__ = ("mean", "var")

    def __init__(self, channels: int, dtype=np.float32):
        self.mean = np.zeros(channels, dtype=dtype)
        self.var = np.ones(channels, dtype=dtype)

    def copy(self) -> "RunningMoments":
        m = RunningMoments.__new__(RunningMoments)
        m.mean = self.mean.copy()
        m.var = self.var.copy()
        return m

    def to_double(self) -> "RunningMoments":
        m = RunningMoments.__new__(RunningMoments)
        m.mean = self.mean.astype(np.float64)
        m.var = self.var.astype(np.float64)
        return m


def batchnorm2d(x: Tensor, gamma: Tensor, beta: Tensor, state: RunningMoments,
                training: bool, momentum: float = 0.1, eps: float = 1e-5) -> Tensor:
    """Per-channel normalization with affine transform.

    Training mode normalizes with batch statistics and updates `state` by
    EMA (variance stored unbiased); eval mode uses the stored moments.
    """
    if x.ndim != 4:
        raise DimensionError(f"batchnorm2d input must be 4D, got shape {x.shape}")
    n, c, h, w = x.shape
    if gamma.shape != (c,) or beta.shape != (c,):
        raise DimensionError(
            f"batchnorm2d affine params must have shape ({c},), got {gamma.shape} and {beta.shape}"
        )
    d = x.data
    g_d = gamma.data.reshape(1, c, 1, 1)

    if training:
        m = n * h * w
        if m < 2:
            raise DegenerateBatchError(
                f"batch statistics need N*H*W >= 2, got {m}"
            )
        mean = d.mean(axis=(0, 2, 3))
        var = d.var(axis=(0, 2, 3))
        ivar = 1.0 / np.sqrt(var + eps)
        xhat = (d - mean.reshape(1, c, 1, 1)) * ivar.reshape(1, c, 1, 1)
        state.mean[:] = (1.0 - momentum) * state.mean + momentum * mean
        unbias = m / (m - 1)
        state.var[:] = (1.0 - momentum) * state.var + momentum * var * unbias
        out_data = g_d * xhat + beta.data.reshape(1, c, 1, 1)

        def bw(g):
            if beta.requires_grad:
                beta._accum(g.sum(axis=(0, 2, 3)))
            if gamma.requires_grad:
                gamma._accum((g * xhat).sum(axis=(0, 2, 3)))
            if x.requires_grad:
                dxhat = g * g_d
                s1 = dxhat.mean(axis=(0, 2, 3), keepdims=True)
                s2 = (dxhat * xhat).mean(axis=(0, 2, 3), keepdims=True)
                x._accum(ivar.reshape(1, c, 1, 1) * (dxhat - s1 - xhat * s2))

        return Tensor._make(out_data, (x, gamma, beta), bw)

    ivar = (1.0 / np.sqrt(state.var + eps)).astype(d.dtype).reshape(1, c, 1, 1)
    mean = state.mean.astype(d.dtype).reshape(1, c, 1, 1)
    xhat = (d - mean) * ivar
    out_data = g_d * xhat + beta.data.reshape(1, c, 1, 1)

    def bw_eval(g):
        if beta.requires_grad:
            beta._accum(g.sum(axis=(0, 2, 3)))
        if gamma.requires_grad:
            gamma._accum((g * xhat).sum(axis=(0, 2, 3)))
        if x.requires_grad:
            x._accum(g * g_d * ivar)

    return Tensor._make(out_data, (x, gamma, beta), bw_eval)


# -- tensor container file (TNS1) -------------------------------------------

_TNS_MAGIC = b"TNS1"
_DTYPE_CODES = {0: np.dtype("<f4"), 1: np.dtype("u1")}


def tns_encode(arr: np.ndarray) -> bytes:
    """Serialize an array to TNS1 bytes: magic, dtype code, rank, u32 LE
    extents, row-major payload."""
    arr = np.ascontiguousarray(arr)
    if arr.dtype.kind == "f":
        payload = arr.astype("<f4", copy=False)
        code = 0
    elif arr.dtype.kind in ("u", "i"):
        if arr.dtype != np.uint8 and arr.size and (arr.min() < 0 or arr.max() > 255):
            raise DataIOError("integer payload out of u8 range")
        payload = arr.astype("u1", copy=False)
        code = 1
    else:
        raise DataIOError(f"unsupported dtype {arr.dtype}")
    if arr.ndim > 255:
        raise DataIOError("rank exceeds format limit")
    head = _TNS_MAGIC + struct.pack("<BB", code, arr.ndim)
    head += struct.pack(f"<{arr.ndim}I", *arr.shape)
    return head + payload.tobytes(order="C")


def tns_decode(buf: bytes, offset: int = 0) -> tuple[np.ndarray, int]:
    """Parse one TNS1 record starting at `offset`; returns (array, end)."""
    if buf[offset:offset + 4] != _TNS_MAGIC:
        raise DataIOError("not a TNS1 container")
    code, rank = struct.unpack_from("<BB", buf, offset + 4)
    if code not in _DTYPE_CODES:
        raise DataIOError(f"unknown dtype code {code}")
    dims = struct.unpack_from(f"<{rank}I", buf, offset + 6)
    dtype = _DTYPE_CODES[code]
    count = int(np.prod(dims)) if rank else 1
    start = offset + 6 + 4 * rank
    end = start + count * dtype.itemsize
    if end > len(buf):
        raise DataIOError("TNS1 payload truncated")
    arr = np.frombuffer(buf, dtype=dtype, count=count, offset=start).reshape(dims)
    if code == 0:
        arr = arr.astype(np.float32)
    else:
        arr = arr.copy()
    return arr, end


def save_tns(path, arr: np.ndarray) -> None:
    """Write an array as a TNS1 container file (bit-exact round trip)."""
    try:
        with open(path, "wb") as f:
            f.write(tns_encode(arr))
    except OSError as e:
        raise DataIOError(f"cannot write {path}: {e}") from e


def load_tns(path) -> np.ndarray:
    """Read a TNS1 container file; f32 payloads are checked for finiteness."""
    try:
        with open(path, "rb") as f:
            raw = f.read()
    except OSError as e:
        raise DataIOError(f"cannot read {path}: {e}") from e
    try:
        arr, end = tns_decode(raw, 0)
    except DataIOError as e:
        raise DataIOError(f"{path}: {e.args[0] if e.args else e}") from e
    if end != len(raw):
        raise DataIOError(f"{path} has {len(raw) - end} trailing bytes")
    if arr.dtype.kind == "f" and not np.isfinite(arr).all():
        raise NumericError(f"{path} contains non-finite values")
    return arr
