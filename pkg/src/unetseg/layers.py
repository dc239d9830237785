"""
Differentiable layers used by the UNet: convolution, transposed convolution,
max-pooling, batch normalization, activations, bilinear resize, center-crop
and channel concatenation.

All functions take and return :class:`~unetseg.tensor.Tensor` objects in
N, C, H, W layout. Convolutions use an im2col formulation (a strided window
view copied into a column matrix, then one batched matmul); the reduction
order is fixed by that layout so results are deterministic for a fixed BLAS
thread count.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import (
    CropLargerThanInputError,
    DegenerateBatchError,
    InvalidGeometryError,
    OddSpatialDimError,
    ShapeMismatchError,
)
from .tensor import Tensor, make_op


def _require_4d(x: Tensor, op: str) -> None:
    if x.ndim != 4:
        raise ShapeMismatchError(f"{op}: expected a 4-D N,C,H,W tensor, got shape {x.shape}")


def conv_output_size(size: int, kernel: int, stride: int, padding: int) -> int:
    return (size + 2 * padding - kernel) // stride + 1


def _im2col(xp: np.ndarray, kh: int, kw: int, stride: int) -> np.ndarray:
    """(N, C, Hp, Wp) padded input -> (N, C*kh*kw, Ho*Wo) column matrix."""
    n, c = xp.shape[:2]
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
    ho, wo = win.shape[2:4]
    cols = np.ascontiguousarray(win.transpose(0, 1, 4, 5, 2, 3))
    return cols.reshape(n, c * kh * kw, ho * wo)


def _col2im(cols: np.ndarray, shape: tuple, kh: int, kw: int, stride: int, ho: int, wo: int) -> np.ndarray:
    """Adjoint of :func:`_im2col`: scatter-add columns back into a padded image."""
    n, c, hp, wp = shape
    cols = cols.reshape(n, c, kh, kw, ho, wo)
    out = np.zeros(shape, dtype=cols.dtype)
    for i in range(kh):
        for j in range(kw):
            out[:, :, i:i + stride * (ho - 1) + 1:stride, j:j + stride * (wo - 1) + 1:stride] += cols[:, :, i, j]
    return out


def conv2d(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None, stride: int = 1, padding: int = 0) -> Tensor:
    """2-D cross-correlation.

    ``weight`` is (Cout, Cin, kH, kW), ``bias`` is (Cout,). Saves the column
    matrix of the padded input and the weight for backward.
    """
    _require_4d(x, "conv2d")
    if weight.ndim != 4 or weight.shape[1] != x.shape[1]:
        raise ShapeMismatchError(f"conv2d: weight {weight.shape} incompatible with input {x.shape}")
    if bias is not None and bias.shape != (weight.shape[0],):
        raise ShapeMismatchError(f"conv2d: bias {bias.shape} does not match {weight.shape[0]} output channels")
    if stride < 1 or padding < 0:
        raise InvalidGeometryError(f"conv2d: stride={stride}, padding={padding}")
    n, cin, h, w = x.shape
    cout, _, kh, kw = weight.shape
    ho, wo = conv_output_size(h, kh, stride, padding), conv_output_size(w, kw, stride, padding)
    if ho < 1 or wo < 1:
        raise InvalidGeometryError(f"conv2d: {h}x{w} input with kernel {kh}x{kw} gives empty output")

    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x.data
    cols = _im2col(xp, kh, kw, stride)
    wmat = weight.data.reshape(cout, -1)
    out = np.matmul(wmat, cols)
    if bias is not None:
        out += bias.data[None, :, None]
    out = out.reshape(n, cout, ho, wo)
    padded_shape = xp.shape

    def backward(g):
        g2 = g.reshape(n, cout, ho * wo)
        gw = np.matmul(g2, cols.transpose(0, 2, 1)).sum(axis=0).reshape(weight.shape)
        gcols = np.matmul(wmat.T, g2)
        gxp = _col2im(gcols, padded_shape, kh, kw, stride, ho, wo)
        gx = gxp[:, :, padding:padding + h, padding:padding + w] if padding else gxp
        gb = g.sum(axis=(0, 2, 3)) if bias is not None else None
        return (np.ascontiguousarray(gx), gw, gb)

    inputs = (x, weight) if bias is None else (x, weight, bias)
    return make_op("conv2d", out, inputs, backward)


def conv_transpose2d(x: Tensor, weight: Tensor, stride: int = 2) -> Tensor:
    """Transposed convolution (no padding, no bias), the adjoint of a strided conv2d.

    ``weight`` is (Cin, Cout, kH, kW). Output size is (H-1)*stride + kH, so
    the UNet's 2x2 / stride-2 setting exactly doubles H and W. Saves the input
    and the weight.
    """
    _require_4d(x, "conv_transpose2d")
    if weight.ndim != 4 or weight.shape[0] != x.shape[1]:
        raise ShapeMismatchError(f"conv_transpose2d: weight {weight.shape} incompatible with input {x.shape}")
    n, cin, h, w = x.shape
    _, cout, kh, kw = weight.shape
    ho, wo = (h - 1) * stride + kh, (w - 1) * stride + kw
    wmat = weight.data.reshape(cin, cout * kh * kw)
    xmat = x.data.reshape(n, cin, h * w)
    cols = np.matmul(wmat.T, xmat)  # (N, Cout*kh*kw, H*W)
    out = _col2im(cols, (n, cout, ho, wo), kh, kw, stride, h, w)

    def backward(g):
        gcols = _im2col(g, kh, kw, stride)  # (N, Cout*kh*kw, H*W)
        gx = np.matmul(wmat, gcols).reshape(x.shape)
        gw = np.matmul(xmat, gcols.transpose(0, 2, 1)).sum(axis=0).reshape(weight.shape)
        return gx, gw

    return make_op("conv_transpose2d", out, (x, weight), backward)


def maxpool2d(x: Tensor, kernel: int = 2, stride: int = 2) -> Tensor:
    """Non-overlapping max-pooling.

    Ties go to the first element of the window in row-major order. Saves the
    per-window argmax indices only.
    """
    _require_4d(x, "maxpool2d")
    if kernel != stride:
        raise InvalidGeometryError("maxpool2d supports non-overlapping windows only (kernel == stride)")
    n, c, h, w = x.shape
    if h % kernel or w % kernel:
        raise OddSpatialDimError(f"maxpool2d: spatial dims {h}x{w} not divisible by {kernel}")
    k = kernel
    ho, wo = h // k, w // k
    win = x.data.reshape(n, c, ho, k, wo, k).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, ho, wo, k * k)
    idx = win.argmax(axis=-1)
    out = np.take_along_axis(win, idx[..., None], axis=-1)[..., 0]

    def backward(g):
        gwin = np.zeros((n, c, ho, wo, k * k), dtype=g.dtype)
        np.put_along_axis(gwin, idx[..., None], g[..., None], axis=-1)
        gx = gwin.reshape(n, c, ho, wo, k, k).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h, w)
        return (gx,)

    return make_op("maxpool2d", np.ascontiguousarray(out), (x,), backward)


@dataclass
class BatchNorm2dState:
    """Learnable affine parameters and running statistics of one batch-norm layer."""

    gamma: Tensor
    beta: Tensor
    running_mean: Tensor
    running_var: Tensor
    momentum: float = 0.1
    eps: float = 1e-5

    @classmethod
    def create(cls, channels: int, dtype=np.float32) -> "BatchNorm2dState":
        return cls(
            gamma=Tensor(np.ones(channels, dtype=dtype), requires_grad=True),
            beta=Tensor(np.zeros(channels, dtype=dtype), requires_grad=True),
            running_mean=Tensor(np.zeros(channels, dtype=dtype)),
            running_var=Tensor(np.ones(channels, dtype=dtype)),
        )


def batchnorm2d(x: Tensor, state: BatchNorm2dState, training: bool) -> Tensor:
    """Per-channel batch normalization.

    Training mode normalizes with the biased batch variance and updates the
    running statistics (running variance uses the unbiased estimate). Eval
    mode is a pure function of the input and the running statistics. Saves
    the normalized input and 1/sqrt(var + eps).
    """
    _require_4d(x, "batchnorm2d")
    c = x.shape[1]
    if state.gamma.shape != (c,) or state.beta.shape != (c,):
        raise ShapeMismatchError(f"batchnorm2d: parameters sized for {state.gamma.shape[0]} channels, input has {c}")
    dt = x.dtype
    gamma = state.gamma.data.reshape(1, c, 1, 1)
    beta = state.beta.data.reshape(1, c, 1, 1)
    eps = dt.type(state.eps)

    if training:
        m = x.shape[0] * x.shape[2] * x.shape[3]
        if m < 2:
            raise DegenerateBatchError(f"batchnorm2d: need N*H*W >= 2 per channel in training mode, got {m}")
        mean = x.data.mean(axis=(0, 2, 3))
        centered = x.data - mean.reshape(1, c, 1, 1)
        var = (centered * centered).mean(axis=(0, 2, 3))
        mom = dt.type(state.momentum)
        state.running_mean.data = ((1 - mom) * state.running_mean.data + mom * mean).astype(state.running_mean.dtype)
        unbiased = var * dt.type(m / (m - 1))
        state.running_var.data = ((1 - mom) * state.running_var.data + mom * unbiased).astype(state.running_var.dtype)
    else:
        mean = state.running_mean.data.astype(dt)
        var = state.running_var.data.astype(dt)
        centered = x.data - mean.reshape(1, c, 1, 1)

    inv_std = (1.0 / np.sqrt(var + eps)).astype(dt).reshape(1, c, 1, 1)
    xhat = centered * inv_std
    out = xhat * gamma + beta

    def backward(g):
        ggamma = (g * xhat).sum(axis=(0, 2, 3))
        gbeta = g.sum(axis=(0, 2, 3))
        gxhat = g * gamma
        if training:
            mean_g = gxhat.mean(axis=(0, 2, 3), keepdims=True)
            mean_gx = (gxhat * xhat).mean(axis=(0, 2, 3), keepdims=True)
            gx = inv_std * (gxhat - mean_g - xhat * mean_gx)
        else:
            gx = gxhat * inv_std
        return gx, ggamma, gbeta

    return make_op("batchnorm2d", out, (x, state.gamma, state.beta), backward)


def relu(x: Tensor) -> Tensor:
    """max(x, 0); the subgradient at 0 is 0. Saves the positive mask."""
    mask = x.data > 0
    return make_op("relu", np.maximum(x.data, 0), (x,), lambda g: (g * mask,))


def sigmoid(x: Tensor) -> Tensor:
    """Numerically stable logistic function. Saves the output.

    Results are clipped to [tiny, nextafter(1, 0)] of the dtype so the output
    stays strictly inside (0, 1) even where exp under/overflows.
    """
    d = x.data
    dt = x.dtype
    pos = d >= 0
    e = np.exp(-np.abs(d))
    s = np.where(pos, 1.0 / (1.0 + e), e / (1.0 + e)).astype(dt)
    s = np.clip(s, np.finfo(dt).tiny, np.nextafter(dt.type(1), dt.type(0)))
    return make_op("sigmoid", s, (x,), lambda g: (g * s * (1 - s),))


def bilinear_matrix(in_size: int, out_size: int, dtype=np.float64) -> np.ndarray:
    """(out_size, in_size) interpolation weights, half-pixel centres (align_corners=False).

    Source coordinates below 0 are clamped to 0 and the upper neighbour is
    clamped to the last index, so each row sums to one.
    """
    if in_size < 1 or out_size < 1:
        raise InvalidGeometryError(f"resize: sizes must be >= 1, got {in_size} -> {out_size}")
    src = (np.arange(out_size, dtype=np.float64) + 0.5) * (in_size / out_size) - 0.5
    src = np.maximum(src, 0.0)
    i0 = np.minimum(np.floor(src).astype(np.int64), in_size - 1)
    i1 = np.minimum(i0 + 1, in_size - 1)
    lam = src - i0
    mat = np.zeros((out_size, in_size), dtype=np.float64)
    rows = np.arange(out_size)
    np.add.at(mat, (rows, i0), 1.0 - lam)
    np.add.at(mat, (rows, i1), lam)
    return mat.astype(dtype)


def resize_bilinear(x: Tensor, out_h: int, out_w: int) -> Tensor:
    """Bilinear resize of the two trailing axes, as ``Ry @ x @ Rx.T``.

    Backward applies the transposed interpolation matrices, so upstream
    gradients reach the input (the skip path stays connected). Saves the
    two interpolation matrices.
    """
    if x.ndim < 2:
        raise ShapeMismatchError(f"resize_bilinear: need at least 2 dims, got shape {x.shape}")
    if out_h < 1 or out_w < 1:
        raise InvalidGeometryError(f"resize_bilinear: output size {out_h}x{out_w}")
    h, w = x.shape[-2:]
    if (h, w) == (out_h, out_w):
        return make_op("resize_bilinear", x.data.copy(), (x,), lambda g: (g,))
    ry = bilinear_matrix(h, out_h, x.dtype)
    rx = bilinear_matrix(w, out_w, x.dtype)
    out = np.matmul(np.matmul(ry, x.data), rx.T)

    def backward(g):
        return (np.matmul(np.matmul(ry.T, g), rx),)

    return make_op("resize_bilinear", out, (x,), backward)


def center_crop(x: Tensor, out_h: int, out_w: int) -> Tensor:
    """Crop the centred out_h x out_w window (offset = floor((H - out_h) / 2))."""
    h, w = x.shape[-2:]
    if out_h > h or out_w > w:
        raise CropLargerThanInputError(f"center_crop: {out_h}x{out_w} exceeds input {h}x{w}")
    if out_h < 1 or out_w < 1:
        raise InvalidGeometryError(f"center_crop: output size {out_h}x{out_w}")
    top, left = (h - out_h) // 2, (w - out_w) // 2
    out = x.data[..., top:top + out_h, left:left + out_w].copy()
    shape = x.shape

    def backward(g):
        gx = np.zeros(shape, dtype=g.dtype)
        gx[..., top:top + out_h, left:left + out_w] = g
        return (gx,)

    return make_op("center_crop", out, (x,), backward)


def concat_channels(a: Tensor, b: Tensor) -> Tensor:
    """Concatenate along the channel axis, ``a`` first."""
    _require_4d(a, "concat_channels")
    _require_4d(b, "concat_channels")
    if a.shape[0] != b.shape[0] or a.shape[2:] != b.shape[2:]:
        raise ShapeMismatchError(f"concat_channels: {a.shape} and {b.shape} differ outside the channel axis")
    ca = a.shape[1]
    out = np.concatenate([a.data, b.data], axis=1)
    return make_op("concat_channels", out, (a, b), lambda g: (g[:, :ca].copy(), g[:, ca:].copy()))
