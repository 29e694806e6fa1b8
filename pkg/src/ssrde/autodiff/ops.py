"""Differentiable operators.

Every function takes Tensors (or array-likes, treated as constants) and returns a
Tensor wired into the tape. Image tensors are laid out N x C x H x W.
"""

from __future__ import annotations

from typing import Optional, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .tensor import Tensor, as_tensor, make_result


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _const_like(x, ref: Tensor) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=ref.data.dtype))


# ---------------------------------------------------------------------------
# elementwise arithmetic
# ---------------------------------------------------------------------------

def add(a, b) -> Tensor:
    a = a if isinstance(a, Tensor) else _const_like(a, b)
    b = _const_like(b, a)
    sa, sb = a.shape, b.shape

    def bw(g):
        return _unbroadcast(g, sa), _unbroadcast(g, sb)

    return make_result(a.data + b.data, (a, b), bw, "add")


def sub(a, b) -> Tensor:
    a = a if isinstance(a, Tensor) else _const_like(a, b)
    b = _const_like(b, a)
    sa, sb = a.shape, b.shape

    def bw(g):
        return _unbroadcast(g, sa), _unbroadcast(-g, sb)

    return make_result(a.data - b.data, (a, b), bw, "sub")


def mul(a, b) -> Tensor:
    a = a if isinstance(a, Tensor) else _const_like(a, b)
    b = _const_like(b, a)

    def bw(g):
        ga = _unbroadcast(g * b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(g * a.data, b.shape) if b.requires_grad else None
        return ga, gb

    return make_result(a.data * b.data, (a, b), bw, "mul")


def div(a, b) -> Tensor:
    a = a if isinstance(a, Tensor) else _const_like(a, b)
    b = _const_like(b, a)
    out = a.data / b.data

    def bw(g):
        ga = _unbroadcast(g / b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(-g * out / b.data, b.shape) if b.requires_grad else None
        return ga, gb

    return make_result(out, (a, b), bw, "div")


def neg(a: Tensor) -> Tensor:
    return make_result(-a.data, (a,), lambda g: (-g,), "neg")


def power(a: Tensor, exponent: float) -> Tensor:
    e = float(exponent)

    def bw(g):
        return (g * e * a.data ** (e - 1.0),)

    return make_result(a.data ** e, (a,), bw, "pow")


def abs(a: Tensor) -> Tensor:  # noqa: A001
    return make_result(np.abs(a.data), (a,), lambda g: (g * np.sign(a.data),), "abs")


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return make_result(out, (a,), lambda g: (g * out,), "exp")


def log(a: Tensor) -> Tensor:
    return make_result(np.log(a.data), (a,), lambda g: (g / a.data,), "log")


def sqrt(a: Tensor) -> Tensor:
    out = np.sqrt(a.data)
    return make_result(out, (a,), lambda g: (g * 0.5 / out,), "sqrt")


def clamp(a: Tensor, lo: Optional[float] = None, hi: Optional[float] = None) -> Tensor:
    """Clip to [lo, hi]; gradient passes only where the value was not clipped."""
    out = np.clip(a.data, lo, hi)
    inside = np.ones(a.shape, dtype=bool)
    if lo is not None:
        inside &= a.data >= lo
    if hi is not None:
        inside &= a.data <= hi
    return make_result(out, (a,), lambda g: (g * inside,), "clamp")


def maximum(a, b) -> Tensor:
    """Elementwise max of two tensors; ties send the gradient to ``a``."""
    a = a if isinstance(a, Tensor) else _const_like(a, b)
    b = _const_like(b, a)
    pick_a = a.data >= b.data
    out = np.where(pick_a, a.data, b.data)

    def bw(g):
        return _unbroadcast(g * pick_a, a.shape), _unbroadcast(g * ~pick_a, b.shape)

    return make_result(out, (a, b), bw, "maximum")


def minimum(a, b) -> Tensor:
    a = a if isinstance(a, Tensor) else _const_like(a, b)
    b = _const_like(b, a)
    pick_a = a.data <= b.data
    out = np.where(pick_a, a.data, b.data)

    def bw(g):
        return _unbroadcast(g * pick_a, a.shape), _unbroadcast(g * ~pick_a, b.shape)

    return make_result(out, (a, b), bw, "minimum")


# ---------------------------------------------------------------------------
# activations
# ---------------------------------------------------------------------------

def relu(a: Tensor) -> Tensor:
    pos = a.data > 0
    return make_result(a.data * pos, (a,), lambda g: (g * pos,), "relu")


def prelu(a: Tensor, alpha) -> Tensor:
    """PReLU with one slope per channel (axis 1); ``alpha`` may be a Tensor or float."""
    alpha = _const_like(alpha, a)
    al = alpha.data
    if al.ndim == 1:
        al = al.reshape((1, -1) + (1,) * (a.ndim - 2))
    pos = a.data > 0
    out = np.where(pos, a.data, al * a.data)

    def bw(g):
        ga = g * np.where(pos, 1.0, al)
        gal = None
        if alpha.requires_grad:
            gal = _unbroadcast(g * np.where(pos, 0.0, a.data), al.shape).reshape(alpha.shape)
        return ga, gal

    return make_result(out, (a, alpha), bw, "prelu")


def sigmoid(a: Tensor) -> Tensor:
    out = 0.5 * (1.0 + np.tanh(0.5 * a.data))
    return make_result(out, (a,), lambda g: (g * out * (1.0 - out),), "sigmoid")


def tanh(a: Tensor) -> Tensor:
    out = np.tanh(a.data)
    return make_result(out, (a,), lambda g: (g * (1.0 - out * out),), "tanh")


def activation(a: Tensor, kind: str, alpha=0.25) -> Tensor:
    if kind == "relu":
        return relu(a)
    if kind == "prelu":
        return prelu(a, alpha)
    if kind == "sigmoid":
        return sigmoid(a)
    if kind == "tanh":
        return tanh(a)
    raise ValueError(f"unknown activation {kind!r}")


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    """Numerically stable softmax (max subtracted before exponentiation)."""
    z = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return make_result(out, (a,), bw, "softmax")


def softmax_lastdim(a: Tensor) -> Tensor:
    return softmax(a, axis=-1)


# ---------------------------------------------------------------------------
# reductions and shape ops
# ---------------------------------------------------------------------------

def _norm_axes(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(ax % ndim for ax in axis)


def sum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    axes = _norm_axes(axis, a.ndim)
    out = a.data.sum(axis=axes, keepdims=keepdims)

    def bw(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, a.shape),)

    return make_result(out, (a,), bw, "sum")


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axes(axis, a.ndim)
    count = int(np.prod([a.shape[ax] for ax in axes])) if axes else 1
    out = a.data.mean(axis=axes, keepdims=keepdims)

    def bw(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g / count, a.shape),)

    return make_result(out, (a,), bw, "mean")


def reshape(a: Tensor, shape) -> Tensor:
    src = a.shape
    return make_result(a.data.reshape(shape), (a,), lambda g: (g.reshape(src),), "reshape")


def transpose(a: Tensor, axes) -> Tensor:
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return make_result(a.data.transpose(axes), (a,), lambda g: (g.transpose(inv),), "transpose")


def getitem(a: Tensor, index) -> Tensor:
    out = a.data[index]
    advanced = isinstance(index, (list, np.ndarray)) or (
        isinstance(index, tuple) and any(isinstance(i, (list, np.ndarray)) for i in index)
    )

    def bw(g):
        full = np.zeros(a.shape, dtype=g.dtype)
        if advanced:
            np.add.at(full, index, g)
        else:
            full[index] = g
        return (full,)

    return make_result(out, (a,), bw, "getitem")


def concat(tensors: Sequence[Tensor], axis: int = 1) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    cuts = np.cumsum(sizes)[:-1]
    out = np.concatenate([t.data for t in tensors], axis=axis)

    def bw(g):
        return tuple(np.split(g, cuts, axis=axis))

    return make_result(out, tensors, bw, "concat")


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    out = np.stack([t.data for t in tensors], axis=axis)

    def bw(g):
        return tuple(np.moveaxis(g, axis, 0))

    return make_result(out, tensors, bw, "stack")


def pad2d(a: Tensor, pad: int | tuple[int, int, int, int], mode: str = "zeros") -> Tensor:
    """Pad the last two axes. ``pad`` is p or (top, bottom, left, right)."""
    if isinstance(pad, int):
        pad = (pad, pad, pad, pad)
    top, bottom, left, right = pad
    if not any(pad):
        return a
    widths = [(0, 0)] * (a.ndim - 2) + [(top, bottom), (left, right)]
    if mode in ("zeros", "zero", "constant"):
        out = np.pad(a.data, widths)
        H, W = a.shape[-2:]

        def bw(g):
            return (g[..., top:top + H, left:left + W],)

        return make_result(out, (a,), bw, "pad_zero")
    if mode in ("reflect", "replicate", "edge"):
        H, W = a.shape[-2:]
        np_mode = "reflect" if mode == "reflect" else "edge"
        iy = np.pad(np.arange(H), (top, bottom), mode=np_mode)
        ix = np.pad(np.arange(W), (left, right), mode=np_mode)
        out = a.data[..., iy[:, None], ix[None, :]]
        Ry = np.zeros((H, len(iy)), dtype=a.data.dtype)
        Ry[iy, np.arange(len(iy))] = 1.0
        Rx = np.zeros((len(ix), W), dtype=a.data.dtype)
        Rx[np.arange(len(ix)), ix] = 1.0

        def bw(g):
            return (Ry @ g @ Rx,)

        return make_result(out, (a,), bw, f"pad_{mode}")
    raise ValueError(f"unknown padding mode {mode!r}")


# ---------------------------------------------------------------------------
# matrix products
# ---------------------------------------------------------------------------

def matmul(a, b) -> Tensor:
    a = a if isinstance(a, Tensor) else _const_like(a, b)
    b = _const_like(b, a)

    def bw(g):
        ga = gb = None
        if a.requires_grad:
            ga = _unbroadcast(np.matmul(g, np.swapaxes(b.data, -1, -2)), a.shape)
        if b.requires_grad:
            gb = _unbroadcast(np.matmul(np.swapaxes(a.data, -1, -2), g), b.shape)
        return ga, gb

    return make_result(np.matmul(a.data, b.data), (a, b), bw, "matmul")


def epipolar_matmul(A: Tensor, B: Tensor) -> Tensor:
    """Row-wise matrix product: (..., H, W, C) x (..., H, C, W') -> (..., H, W, W')."""
    if A.shape[:-2] != B.shape[:-2] or A.shape[-1] != B.shape[-2]:
        raise ValueError(
            f"epipolar_matmul shape mismatch: A {A.shape} (.., H, W, C) vs B {B.shape} (.., H, C, W)"
        )
    return matmul(A, B)


def resample(a: Tensor, rows: Optional[np.ndarray], cols: Optional[np.ndarray]) -> Tensor:
    """Apply fixed linear maps along H and W: ``rows @ a @ cols.T``."""
    out = a
    if cols is not None:
        out = matmul(out, Tensor(np.ascontiguousarray(cols.T, dtype=a.data.dtype)))
    if rows is not None:
        out = matmul(Tensor(np.asarray(rows, dtype=a.data.dtype)), out)
    return out


# ---------------------------------------------------------------------------
# convolutions
# ---------------------------------------------------------------------------

def _im2col(xp: np.ndarray, kh: int, kw: int, stride: int, Ho: int, Wo: int) -> np.ndarray:
    N, C = xp.shape[:2]
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))
    win = win[:, :, : stride * (Ho - 1) + 1 : stride, : stride * (Wo - 1) + 1 : stride]
    return win.transpose(0, 2, 3, 1, 4, 5).reshape(N * Ho * Wo, C * kh * kw)


def _col2im(cols: np.ndarray, shape, kh: int, kw: int, stride: int, Ho: int, Wo: int) -> np.ndarray:
    N, C, Hp, Wp = shape
    cols = cols.reshape(N, Ho, Wo, C, kh, kw).transpose(0, 3, 4, 5, 1, 2)
    out = np.zeros(shape, dtype=cols.dtype)
    for i in range(kh):
        for j in range(kw):
            out[:, :, i : i + stride * (Ho - 1) + 1 : stride, j : j + stride * (Wo - 1) + 1 : stride] += cols[:, :, i, j]
    return out


def _conv_valid(x: Tensor, w: Tensor, b: Optional[Tensor], stride: int) -> Tensor:
    N, C, H, W = x.shape
    O, Ci, kh, kw = w.shape
    Ho = (H - kh) // stride + 1
    Wo = (W - kw) // stride + 1
    w2 = w.data.reshape(O, -1)
    if kh == 1 and kw == 1 and stride == 1:
        x2 = x.data.transpose(0, 2, 3, 1).reshape(-1, C)
    else:
        x2 = _im2col(x.data, kh, kw, stride, Ho, Wo)
    out2 = x2 @ w2.T
    if b is not None:
        out2 = out2 + b.data
    out = np.ascontiguousarray(out2.reshape(N, Ho, Wo, O).transpose(0, 3, 1, 2))
    del x2

    def bw(g):
        g2 = g.transpose(0, 2, 3, 1).reshape(-1, O)
        gx = gw = gb = None
        if kh == 1 and kw == 1 and stride == 1:
            if w.requires_grad:
                gw = (g2.T @ x.data.transpose(0, 2, 3, 1).reshape(-1, C)).reshape(w.shape)
            if x.requires_grad:
                gx = np.ascontiguousarray((g2 @ w2).reshape(N, H, W, C).transpose(0, 3, 1, 2))
        else:
            if w.requires_grad:
                cols = _im2col(x.data, kh, kw, stride, Ho, Wo)
                gw = (g2.T @ cols).reshape(w.shape)
                del cols
            if x.requires_grad:
                gx = _col2im(g2 @ w2, x.shape, kh, kw, stride, Ho, Wo)
        if b is not None and b.requires_grad:
            gb = g2.sum(axis=0)
        return gx, gw, gb

    parents = (x, w) if b is None else (x, w, b)
    return make_result(out, parents, bw, "conv2d")


def _conv_shift(x: Tensor, w: Tensor, b: Optional[Tensor], pad: int) -> Tensor:
    """Stride-1 convolution with zero padding as a sum of kh*kw row-shifted GEMMs.

    The padded input is laid out channels-last and flattened to rows; the
    kernel tap (i, j) then reads a contiguous row window offset by i*Wp + j.
    Rows that straddle image borders produce junk that is cropped away.
    """
    N, C, H, W = x.shape
    O, _, kh, kw = w.shape
    Hp, Wp = H + 2 * pad, W + 2 * pad
    Ho, Wo = Hp - kh + 1, Wp - kw + 1
    dtype = x.data.dtype
    xp = np.zeros((N, Hp, Wp, C), dtype=dtype)
    xp[:, pad:pad + H, pad:pad + W, :] = x.data.transpose(0, 2, 3, 1)
    flat = xp.reshape(-1, C)
    rows = flat.shape[0]
    M = rows - ((kh - 1) * Wp + (kw - 1))
    taps = np.ascontiguousarray(w.data.transpose(2, 3, 1, 0))  # kh, kw, C, O
    offsets = [(i, j, i * Wp + j) for i in range(kh) for j in range(kw)]
    acc = np.zeros((rows, O), dtype=dtype)
    head = acc[:M]
    for i, j, off in offsets:
        head += flat[off:off + M] @ taps[i, j]
    out = acc.reshape(N, Hp, Wp, O)[:, :Ho, :Wo, :]
    if b is not None:
        out = out + b.data
    out = np.ascontiguousarray(out.transpose(0, 3, 1, 2))
    del acc, head

    def bw(g):
        gx = gw = gb = None
        gfull = np.zeros((N, Hp, Wp, O), dtype=dtype)
        gfull[:, :Ho, :Wo, :] = g.transpose(0, 2, 3, 1)
        gflat = gfull.reshape(-1, O)[:M]
        if w.requires_grad:
            xpf = np.zeros((N, Hp, Wp, C), dtype=dtype)
            xpf[:, pad:pad + H, pad:pad + W, :] = x.data.transpose(0, 2, 3, 1)
            xflat = xpf.reshape(-1, C)
            gtaps = np.empty((kh, kw, C, O), dtype=dtype)
            for i, j, off in offsets:
                gtaps[i, j] = xflat[off:off + M].T @ gflat
            gw = np.ascontiguousarray(gtaps.transpose(3, 2, 0, 1))
        if x.requires_grad:
            gxp = np.zeros((rows, C), dtype=dtype)
            for i, j, off in offsets:
                gxp[off:off + M] += gflat @ taps[i, j].T
            gx = np.ascontiguousarray(
                gxp.reshape(N, Hp, Wp, C)[:, pad:pad + H, pad:pad + W, :].transpose(0, 3, 1, 2)
            )
        if b is not None and b.requires_grad:
            gb = g.sum(axis=(0, 2, 3))
        return gx, gw, gb

    parents = (x, w) if b is None else (x, w, b)
    return make_result(out, parents, bw, "conv2d")


def conv2d(
    x: Tensor,
    weight: Tensor,
    bias: Optional[Tensor] = None,
    stride: int = 1,
    padding: int = 0,
    padding_mode: str = "zeros",
) -> Tensor:
    """2-D cross-correlation, weight layout (out_ch, in_ch, kh, kw)."""
    x = as_tensor(x)
    weight = as_tensor(weight)
    if x.ndim != 4 or weight.ndim != 4:
        raise ValueError(f"conv2d expects 4-D input and weight, got {x.shape} and {weight.shape}")
    if x.shape[1] != weight.shape[1]:
        raise ValueError(
            f"conv2d channel mismatch: input {x.shape} has {x.shape[1]} channels, "
            f"weight {weight.shape} expects {weight.shape[1]}"
        )
    if stride < 1 or padding < 0:
        raise ValueError(f"invalid stride={stride} / padding={padding}")
    kh, kw = weight.shape[2:]
    if x.shape[2] + 2 * padding < kh or x.shape[3] + 2 * padding < kw:
        raise ValueError(f"conv2d input {x.shape} smaller than kernel {weight.shape} after padding {padding}")
    zero_pad = padding_mode in ("zeros", "zero", "constant")
    if stride == 1 and (kh > 1 or kw > 1):
        if zero_pad:
            return _conv_shift(x, weight, bias, padding)
        return _conv_shift(pad2d(x, padding, padding_mode), weight, bias, 0)
    xp = pad2d(x, padding, padding_mode) if padding else x
    return _conv_valid(xp, weight, bias, stride)


def conv_transpose2d(
    x: Tensor,
    weight: Tensor,
    bias: Optional[Tensor] = None,
    stride: int = 1,
    padding: int = 0,
) -> Tensor:
    """Adjoint of ``conv2d`` w.r.t. its input; weight layout (in_ch, out_ch, kh, kw)."""
    x = as_tensor(x)
    weight = as_tensor(weight)
    if x.ndim != 4 or weight.ndim != 4:
        raise ValueError(f"conv_transpose2d expects 4-D input and weight, got {x.shape} and {weight.shape}")
    if x.shape[1] != weight.shape[0]:
        raise ValueError(
            f"conv_transpose2d channel mismatch: input {x.shape} vs weight {weight.shape}"
        )
    N, Ci, H, W = x.shape
    _, Co, kh, kw = weight.shape
    Hf = (H - 1) * stride + kh
    Wf = (W - 1) * stride + kw
    if Hf - 2 * padding < 1 or Wf - 2 * padding < 1:
        raise ValueError(f"conv_transpose2d padding {padding} too large for input {x.shape}")
    w2 = weight.data.reshape(Ci, -1)
    x2 = x.data.transpose(0, 2, 3, 1).reshape(-1, Ci)
    full = _col2im(x2 @ w2, (N, Co, Hf, Wf), kh, kw, stride, H, W)
    out = full[:, :, padding : Hf - padding, padding : Wf - padding]
    if bias is not None:
        out = out + bias.data.reshape(1, -1, 1, 1)
    out = np.ascontiguousarray(out)

    def bw(g):
        gfull = np.pad(g, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else g
        cols = _im2col(gfull, kh, kw, stride, H, W)
        gx = gw = gb = None
        if x.requires_grad:
            gx = np.ascontiguousarray((cols @ w2.T).reshape(N, H, W, Ci).transpose(0, 3, 1, 2))
        if weight.requires_grad:
            gw = (x.data.transpose(0, 2, 3, 1).reshape(-1, Ci).T @ cols).reshape(weight.shape)
        if bias is not None and bias.requires_grad:
            gb = g.sum(axis=(0, 2, 3))
        return gx, gw, gb

    parents = (x, weight) if bias is None else (x, weight, bias)
    return make_result(out, parents, bw, "conv_transpose2d")


transposed_conv2d = conv_transpose2d


# ---------------------------------------------------------------------------
# pooling and rearrangement
# ---------------------------------------------------------------------------

def avg_pool(x: Tensor, window: int) -> Tensor:
    """Non-overlapping mean pooling; trailing partial windows average their actual cells."""
    N, C, H, W = x.shape
    if window < 1:
        raise ValueError("window must be positive")
    if window > H or window > W:
        raise ValueError(f"pooling window {window} larger than input {H}x{W}")
    Ho = -(-H // window)
    Wo = -(-W // window)
    ph, pw = Ho * window - H, Wo * window - W
    xp = np.pad(x.data, ((0, 0), (0, 0), (0, ph), (0, pw))) if (ph or pw) else x.data
    sums = xp.reshape(N, C, Ho, window, Wo, window).sum(axis=(3, 5))
    ch = np.minimum(window, H - np.arange(Ho) * window).astype(x.data.dtype)
    cw = np.minimum(window, W - np.arange(Wo) * window).astype(x.data.dtype)
    counts = ch[:, None] * cw[None, :]
    out = sums / counts

    def bw(g):
        gs = g / counts
        full = np.repeat(np.repeat(gs, window, axis=2), window, axis=3)
        return (full[:, :, :H, :W],)

    return make_result(out, (x,), bw, "avg_pool")


def pixel_shuffle(x: Tensor, s: int) -> Tensor:
    """(N, C*s*s, H, W) -> (N, C, sH, sW)."""
    N, Cs, H, W = x.shape
    if Cs % (s * s):
        raise ValueError(f"pixel_shuffle: {Cs} channels not divisible by s^2={s * s}")
    if s == 1:
        return x
    C = Cs // (s * s)
    y = reshape(x, (N, C, s, s, H, W))
    y = transpose(y, (0, 1, 4, 2, 5, 3))
    return reshape(y, (N, C, H * s, W * s))


def space_to_depth(x: Tensor, s: int) -> Tensor:
    """(N, C, sH, sW) -> (N, C*s*s, H, W); exact inverse of ``pixel_shuffle``."""
    N, C, Hs, Ws = x.shape
    if Hs % s or Ws % s:
        raise ValueError(f"space_to_depth: spatial dims {Hs}x{Ws} not divisible by {s}")
    if s == 1:
        return x
    H, W = Hs // s, Ws // s
    y = reshape(x, (N, C, H, s, W, s))
    y = transpose(y, (0, 1, 3, 5, 2, 4))
    return reshape(y, (N, C * s * s, H, W))


# ---------------------------------------------------------------------------
# horizontal bilinear sampling
# ---------------------------------------------------------------------------

def sample_rows(feature: Tensor, xpos) -> Tensor:
    """Bilinear sampling along the width axis.

    ``feature`` is (N, C, H, W); ``xpos`` is (N, P, H, W') of real column
    coordinates. Returns (N, C, P, H, W'), with out[n, c, p, h, w] the value of
    row h of channel c at column xpos[n, p, h, w]. Samples outside [0, W-1]
    read zeros.
    """
    xpos = xpos if isinstance(xpos, Tensor) else Tensor(np.asarray(xpos, dtype=feature.data.dtype))
    F = feature.data
    N, C, H, W = F.shape
    Np, P, Hp, Wq = xpos.shape
    if Np != N or Hp != H:
        raise ValueError(f"sample_rows: feature {feature.shape} vs positions {xpos.shape}")
    pos = xpos.data
    x0 = np.floor(pos)
    frac = pos - x0
    x0 = x0.astype(np.int64)
    x1 = x0 + 1
    v0 = (x0 >= 0) & (x0 <= W - 1)
    v1 = (x1 >= 0) & (x1 <= W - 1)
    x0c = np.clip(x0, 0, W - 1)
    x1c = np.clip(x1, 0, W - 1)
    w0 = np.where(v0, 1.0 - frac, 0.0).astype(F.dtype)
    w1 = np.where(v1, frac, 0.0).astype(F.dtype)

    # linear offsets into F viewed as (N, C, H*W)
    row = (np.arange(H) * W)[None, None, :, None]
    i0 = (row + x0c).reshape(N, 1, -1)
    i1 = (row + x1c).reshape(N, 1, -1)
    Fr = F.reshape(N, C, H * W)
    f0 = np.take_along_axis(Fr, i0, axis=2).reshape(N, C, P, H, Wq)
    f1 = np.take_along_axis(Fr, i1, axis=2).reshape(N, C, P, H, Wq)
    out = f0 * w0[:, None] + f1 * w1[:, None]

    def bw(g):
        gf = gp = None
        if feature.requires_grad:
            base = (np.arange(N * C) * (H * W)).reshape(N, C, 1)
            idx0 = (base + i0).ravel()
            idx1 = (base + i1).ravel()
            vals0 = (g * w0[:, None]).reshape(N, C, -1).ravel()
            vals1 = (g * w1[:, None]).reshape(N, C, -1).ravel()
            size = N * C * H * W
            gf = (np.bincount(idx0, vals0, size) + np.bincount(idx1, vals1, size)).reshape(F.shape)
            gf = gf.astype(F.dtype, copy=False)
        if xpos.requires_grad:
            slope = f1 * v1[:, None] - f0 * v0[:, None]
            gp = (g * slope).sum(axis=1)
        return gf, gp

    return make_result(out, (feature, xpos), bw, "sample_rows")

