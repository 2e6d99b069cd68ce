"""Differentiable layer primitives: convolution, its transpose, batch norm,
leaky ReLU and global average pooling.

Convolutions are evaluated as one large GEMM per call via im2col. The
column matrices are rebuilt during backward instead of being kept alive in
the closure, trading a little recompute for a much smaller peak footprint.
The scatter-add in col2im iterates over the K*K kernel offsets in a fixed
row-major order, so results are bit-identical from run to run.
"""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from ..errors import DimensionError
from .tensor import Tensor


def _im2col(padded: np.ndarray, k: int, stride: int, oh: int, ow: int) -> np.ndarray:
    """(N, C, Hp, Wp) -> (N*oh*ow, C*k*k) patch matrix."""
    n, c = padded.shape[:2]
    windows = sliding_window_view(padded, (k, k), axis=(2, 3))
    windows = windows[:, :, ::stride, ::stride]
    return windows.transpose(0, 2, 3, 1, 4, 5).reshape(n * oh * ow, c * k * k)


def _col2im_t(
    cols_t: np.ndarray,
    n: int,
    c: int,
    k: int,
    stride: int,
    oh: int,
    ow: int,
    hp: int,
    wp: int,
) -> np.ndarray:
    """Adjoint of :func:`_im2col` for channel-major columns.

    ``cols_t`` has shape (c*k*k, n*oh*ow); that layout makes every (ki, kj)
    slice a contiguous read, so the scatter-add loop streams memory. The
    accumulator is kept channel-major too and transposed once at the end.
    """
    grid = np.zeros((c, n, hp, wp))
    cols_t = cols_t.reshape(c, k, k, n, oh, ow)
    for ki in range(k):
        for kj in range(k):
            grid[:, :, ki : ki + stride * oh : stride, kj : kj + stride * ow : stride] += cols_t[
                :, ki, kj
            ]
    return grid.transpose(1, 0, 2, 3)


def conv2d(x: Tensor, w: Tensor, b: Tensor, stride: int = 1, pad: int = 0) -> Tensor:
    """2-d convolution, NCHW input against an OIKK kernel."""
    if x.data.ndim != 4 or w.data.ndim != 4:
        raise DimensionError(
            f"conv2d expects 4-d input and kernel, got {x.shape} and {w.shape}"
        )
    n, c, h, width = x.shape
    o, i, kh, kw = w.shape
    if kh != kw:
        raise DimensionError(f"conv2d kernel must be square, got {kh}x{kw}")
    if c != i:
        raise DimensionError(
            f"conv2d channel mismatch: input axis 1 has {c}, kernel axis 1 has {i}"
        )
    if b.shape != (o,):
        raise DimensionError(f"conv2d bias must have shape ({o},), got {b.shape}")
    if stride < 1 or pad < 0:
        raise DimensionError(f"conv2d needs stride >= 1 and pad >= 0, got {stride}, {pad}")
    k = kh
    oh = (h + 2 * pad - k) // stride + 1
    ow = (width + 2 * pad - k) // stride + 1
    if oh < 1 or ow < 1:
        raise DimensionError(
            f"conv2d output would be empty for input {h}x{width}, k={k}, "
            f"stride={stride}, pad={pad}"
        )

    padded = np.pad(x.data, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    cols = _im2col(padded, k, stride, oh, ow)
    wmat = w.data.reshape(o, c * k * k)
    y = cols @ wmat.T
    y = y.reshape(n, oh, ow, o).transpose(0, 3, 1, 2) + b.data[None, :, None, None]
    out = Tensor(y, _parents=(x, w, b))

    def backward(g):
        g2 = g.transpose(0, 2, 3, 1).reshape(n * oh * ow, o)
        if b.requires_grad:
            b.accumulate_grad(g2.sum(axis=0))
        if w.requires_grad:
            w.accumulate_grad((g2.T @ cols).reshape(w.shape))
        if x.requires_grad:
            gcols_t = wmat.T @ g2.T
            gp = _col2im_t(gcols_t, n, c, k, stride, oh, ow, h + 2 * pad, width + 2 * pad)
            if pad:
                gp = gp[:, :, pad : pad + h, pad : pad + width]
            x.accumulate_grad(gp)

    out._backward_fn = backward
    return out


def deconv2d(x: Tensor, w: Tensor, b: Tensor, stride: int = 1, pad: int = 0) -> Tensor:
    """Transposed convolution, NCHW input against an IOKK kernel.

    With matching hyper-parameters this is the exact adjoint of
    :func:`conv2d` in its input: <conv(x), y> == <x, deconv(y)> for a shared
    kernel buffer and zero bias.
    """
    if x.data.ndim != 4 or w.data.ndim != 4:
        raise DimensionError(
            f"deconv2d expects 4-d input and kernel, got {x.shape} and {w.shape}"
        )
    n, c, h, width = x.shape
    i, o, kh, kw = w.shape
    if kh != kw:
        raise DimensionError(f"deconv2d kernel must be square, got {kh}x{kw}")
    if c != i:
        raise DimensionError(
            f"deconv2d channel mismatch: input axis 1 has {c}, kernel axis 0 has {i}"
        )
    if b.shape != (o,):
        raise DimensionError(f"deconv2d bias must have shape ({o},), got {b.shape}")
    if stride < 1 or pad < 0:
        raise DimensionError(
            f"deconv2d needs stride >= 1 and pad >= 0, got {stride}, {pad}"
        )
    k = kh
    oh = (h - 1) * stride - 2 * pad + k
    ow = (width - 1) * stride - 2 * pad + k
    if oh < 1 or ow < 1:
        raise DimensionError(
            f"deconv2d output would be empty for input {h}x{width}, k={k}, "
            f"stride={stride}, pad={pad}"
        )
    hp = (h - 1) * stride + k
    wp = (width - 1) * stride + k

    wmat = w.data.reshape(i, o * k * k)
    x2 = x.data.transpose(0, 2, 3, 1).reshape(n * h * width, c)
    ycols_t = wmat.T @ x2.T
    yfull = _col2im_t(ycols_t, n, o, k, stride, h, width, hp, wp)
    y = yfull[:, :, pad : pad + oh, pad : pad + ow] + b.data[None, :, None, None]
    out = Tensor(y, _parents=(x, w, b))

    def backward(g):
        if b.requires_grad:
            b.accumulate_grad(g.sum(axis=(0, 2, 3)))
        gp = np.pad(g, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
        gcols = _im2col(gp, k, stride, h, width)
        if w.requires_grad:
            w.accumulate_grad((x2.T @ gcols).reshape(w.shape))
        if x.requires_grad:
            gx2 = gcols @ wmat.T
            x.accumulate_grad(gx2.reshape(n, h, width, c).transpose(0, 3, 1, 2))

    out._backward_fn = backward
    return out


def batchnorm2d(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    *,
    training: bool,
    running_mean: np.ndarray,
    running_var: np.ndarray,
    eps: float = 1e-5,
    momentum: float = 0.1,
) -> Tensor:
    """Per-channel batch normalization over an NCHW tensor.

    Train mode normalizes with the batch's population statistics and updates
    the running buffers in place: running = (1 - momentum)*running +
    momentum*batch. Eval mode uses the running buffers only.
    """
    if x.data.ndim != 4:
        raise DimensionError(f"batchnorm2d expects a 4-d input, got {x.shape}")
    n, c, h, w = x.shape
    if gamma.shape != (c,) or beta.shape != (c,):
        raise DimensionError(
            f"batchnorm2d gamma/beta must have shape ({c},), got {gamma.shape}, {beta.shape}"
        )
    m = n * h * w

    if training:
        if m < 2:
            raise DimensionError(
                f"batchnorm2d train mode needs >= 2 elements per channel, got {m}"
            )
        mean = x.data.mean(axis=(0, 2, 3))
        var = x.data.var(axis=(0, 2, 3))
        running_mean *= 1.0 - momentum
        running_mean += momentum * mean
        running_var *= 1.0 - momentum
        running_var += momentum * var
    else:
        mean = running_mean
        var = running_var

    invstd = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mean[None, :, None, None]) * invstd[None, :, None, None]
    y = gamma.data[None, :, None, None] * xhat + beta.data[None, :, None, None]
    out = Tensor(y, _parents=(x, gamma, beta))

    def backward(g):
        if beta.requires_grad:
            beta.accumulate_grad(g.sum(axis=(0, 2, 3)))
        if gamma.requires_grad:
            gamma.accumulate_grad((g * xhat).sum(axis=(0, 2, 3)))
        if not x.requires_grad:
            return
        gx = g * gamma.data[None, :, None, None]
        if training:
            s1 = gx.sum(axis=(0, 2, 3), keepdims=True)
            s2 = (gx * xhat).sum(axis=(0, 2, 3), keepdims=True)
            gx -= s1 / m
            gx -= xhat * (s2 / m)
        gx *= invstd[None, :, None, None]
        x.accumulate_grad(gx)

    out._backward_fn = backward
    return out


def leaky_relu(x: Tensor, slope: float = 0.2) -> Tensor:
    """y = x for x >= 0 else slope*x; the subgradient at 0 is 1."""
    nonneg = x.data >= 0
    out = Tensor(np.where(nonneg, x.data, slope * x.data), _parents=(x,))

    def backward(g):
        if x.requires_grad:
            x.accumulate_grad(np.where(nonneg, g, slope * g))

    out._backward_fn = backward
    return out


def global_avg_pool(x: Tensor) -> Tensor:
    """(N, C, H, W) -> (N, C) spatial mean per channel plane."""
    if x.data.ndim != 4:
        raise DimensionError(f"global_avg_pool expects a 4-d input, got {x.shape}")
    n, c, h, w = x.shape
    out = Tensor(x.data.mean(axis=(2, 3)), _parents=(x,))

    def backward(g):
        if x.requires_grad:
            x.accumulate_grad(
                np.broadcast_to(g[:, :, None, None] / (h * w), x.shape).copy()
            )

    out._backward_fn = backward
    return out


def linear(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """Affine map (N, F) @ (F, G) + (G,), built from graph primitives."""
    return x.matmul(w) + b
