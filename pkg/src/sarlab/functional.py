"""Neural-network building blocks over the autodiff tensor.

Convolution is a single fused tape operation (im2col + GEMM with a custom
backward); batch norm and softmax are composed from tensor primitives so
their gradients fall out of the tape automatically.
"""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import DegenerateBatchError, ShapeError
from .tensor import Tensor, _apply, clamp_min

__all__ = [
    "conv2d",
    "linear",
    "batch_norm",
    "softmax",
    "global_avg_pool",
    "relu",
]

BN_EPS = 1e-5


def conv2d(x: Tensor, kernel: Tensor, stride: int = 1, pad: int = 0) -> Tensor:
    """2-D cross correlation with zero padding.

    ``x`` is [N, C, H, W], ``kernel`` is [F, C, kh, kw]; the output is
    [N, F, H', W'] with H' = floor((H + 2*pad - kh) / stride) + 1.
    """
    if x.ndim != 4 or kernel.ndim != 4:
        raise ShapeError("conv2d expects 4-D input and kernel")
    n, c, h, w = x.shape
    f, ck, kh, kw = kernel.shape
    if ck != c:
        raise ShapeError(
            f"conv2d channel mismatch: input has {c}, kernel expects {ck}")
    if stride < 1:
        raise ShapeError("conv2d stride must be >= 1")
    if pad < 0:
        raise ShapeError("conv2d pad must be >= 0")
    if kh > h + 2 * pad or kw > w + 2 * pad:
        raise ShapeError("conv2d kernel larger than padded input")
    ho = (h + 2 * pad - kh) // stride + 1
    wo = (w + 2 * pad - kw) // stride + 1

    xd = x.data
    if pad:
        xp = np.zeros((n, c, h + 2 * pad, w + 2 * pad), dtype=xd.dtype)
        xp[:, :, pad:pad + h, pad:pad + w] = xd
        xd = xp
    win = sliding_window_view(xd, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
    cols = np.ascontiguousarray(win.transpose(0, 2, 3, 1, 4, 5))
    cols = cols.reshape(n, ho * wo, c * kh * kw)
    wmat = kernel.data.reshape(f, c * kh * kw)
    out = (cols @ wmat.T).transpose(0, 2, 1).reshape(n, f, ho, wo)

    def backward(g):
        g2 = g.reshape(n, f, ho * wo).transpose(0, 2, 1)
        gk = None
        if kernel.requires_grad:
            gk = np.tensordot(g2, cols, axes=([0, 1], [0, 1]))
            gk = gk.reshape(f, c, kh, kw)
        gx = None
        if x.requires_grad:
            gcols = (g2 @ wmat).reshape(n, ho, wo, c, kh, kw)
            hp, wp = h + 2 * pad, w + 2 * pad
            gxp = np.zeros((n, c, hp, wp), dtype=g.dtype)
            for i in range(kh):
                hi = i + stride * (ho - 1) + 1
                for j in range(kw):
                    wj = j + stride * (wo - 1) + 1
                    gxp[:, :, i:hi:stride, j:wj:stride] += \
                        gcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
            gx = gxp[:, :, pad:pad + h, pad:pad + w] if pad else gxp
        return gx, gk

    return _apply("conv2d", out, (x, kernel), backward)


def linear(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """Affine map ``x @ weight + bias`` for [N, D] inputs."""
    if x.ndim != 2 or weight.ndim != 2 or bias.ndim != 1:
        raise ShapeError("linear expects x [N,D], weight [D,M], bias [M]")
    if x.shape[1] != weight.shape[0] or weight.shape[1] != bias.shape[0]:
        raise ShapeError(
            f"linear dimension mismatch: x {x.shape}, weight {weight.shape}, "
            f"bias {bias.shape}")
    return (x @ weight) + bias


def batch_norm(x: Tensor, gamma: Tensor, beta: Tensor,
               running_mean: np.ndarray, running_var: np.ndarray,
               training: bool, update_running: bool | None = None,
               momentum: float = 0.1, eps: float = BN_EPS) -> Tensor:
    """Per-channel batch normalisation over [N, C] or [N, C, H, W].

    Train mode normalises with biased batch statistics and, unless
    ``update_running`` is False, folds them into the running buffers in
    place. Eval mode normalises with the running buffers only.
    """
    if x.ndim not in (2, 4):
        raise ShapeError("batch_norm expects a 2-D or 4-D input")
    c = x.shape[1]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ShapeError("batch_norm gamma/beta must have one entry per channel")
    if update_running is None:
        update_running = training
    axes = (0,) if x.ndim == 2 else (0, 2, 3)
    bshape = (1, c) if x.ndim == 2 else (1, c, 1, 1)

    if not training:
        rm = running_mean.reshape(bshape).astype(x.dtype)
        rinv = (1.0 / np.sqrt(running_var.reshape(bshape) + eps)).astype(x.dtype)
        return (x - rm) * rinv * gamma.reshape(bshape) + beta.reshape(bshape)

    if x.shape[0] < 2:
        raise DegenerateBatchError(
            "batch_norm in train mode needs a batch of at least 2")
    mu = x.data.mean(axis=axes, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=axes, keepdims=True)
    if update_running:
        running_mean *= 1.0 - momentum
        running_mean += momentum * mu.reshape(c).astype(running_mean.dtype)
        running_var *= 1.0 - momentum
        running_var += momentum * var.reshape(c).astype(running_var.dtype)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gamma.data.reshape(bshape) + beta.data.reshape(bshape)

    def backward(g):
        dbeta = g.sum(axis=axes)
        dgamma = (g * xhat).sum(axis=axes)
        gh = g * gamma.data.reshape(bshape)
        dx = (gh - gh.mean(axis=axes, keepdims=True)
              - xhat * (gh * xhat).mean(axis=axes, keepdims=True)) * inv
        return dx, dgamma, dbeta

    return _apply("batch_norm", out, (x, gamma, beta), backward)


def softmax(x: Tensor) -> Tensor:
    """Softmax over the trailing axis, stabilised by max subtraction."""
    if x.shape[-1] < 1:
        raise ShapeError("softmax needs at least one class")
    shift = x.data.max(axis=-1, keepdims=True)
    e = (x - shift).exp()
    return e / e.sum(axis=-1, keepdims=True)


def global_avg_pool(x: Tensor) -> Tensor:
    """Spatial mean of a [N, C, H, W] map, returned as [N, C]."""
    if x.ndim != 4:
        raise ShapeError("global_avg_pool expects a 4-D input")
    return x.mean(axis=(2, 3))


def relu(x: Tensor) -> Tensor:
    return clamp_min(x, 0.0)
