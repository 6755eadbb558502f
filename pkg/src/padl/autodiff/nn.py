"""Neural-network primitives: convolutions, batch normalization, activations."""
from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.special import expit

from ..errors import DegenerateStatisticsError, DimensionError
from .tensor import Tensor, as_tensor

BN_MOMENTUM = 0.1
BN_EPS = 1e-5


def _check_nchw(x: Tensor, what: str) -> None:
    if x.ndim != 4:
        raise DimensionError(f"{what} expects an N x C x H x W input, got shape {x.shape}")


def _im2col(x: np.ndarray, k: int, stride: int, padding: int) -> tuple[np.ndarray, int, int]:
    n, c, h, w = x.shape
    if padding:
        x = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    ho = (h + 2 * padding - k) // stride + 1
    wo = (w + 2 * padding - k) // stride + 1
    if k == 1 and stride == 1:
        return x.transpose(0, 2, 3, 1).reshape(n * ho * wo, c), ho, wo
    win = sliding_window_view(x, (k, k), axis=(2, 3))[:, :, ::stride, ::stride][:, :, :ho, :wo]
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(n * ho * wo, c * k * k)
    return cols, ho, wo


def _col2im(dcols: np.ndarray, shape: tuple[int, ...], k: int, stride: int, padding: int, ho: int, wo: int) -> np.ndarray:
    n, c, h, w = shape
    if k == 1 and stride == 1:
        return dcols.reshape(n, ho, wo, c).transpose(0, 3, 1, 2)
    d = dcols.reshape(n, ho, wo, c, k, k).transpose(0, 3, 4, 5, 1, 2)
    dx = np.zeros((n, c, h + 2 * padding, w + 2 * padding), dtype=dcols.dtype)
    for i in range(k):
        for j in range(k):
            dx[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += d[:, :, i, j]
    if padding:
        dx = dx[:, :, padding:padding + h, padding:padding + w]
    return dx


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None, stride: int = 1, padding: int = 0) -> Tensor:
    """2-D cross-correlation with zero padding; ``weight`` is O x I x k x k."""
    _check_nchw(x, "conv2d")
    if weight.ndim != 4 or weight.shape[2] != weight.shape[3]:
        raise DimensionError(f"conv2d weight must be O x I x k x k, got {weight.shape}")
    if x.shape[1] != weight.shape[1]:
        raise DimensionError(
            f"conv2d input channels (axis 1 of input) = {x.shape[1]} "
            f"but weight expects {weight.shape[1]} (axis 1 of weight)"
        )
    if stride < 1 or padding < 0:
        raise ValueError("stride must be >= 1 and padding >= 0")
    o, c, k, _ = weight.shape
    n = x.shape[0]
    if x.shape[2] + 2 * padding < k or x.shape[3] + 2 * padding < k:
        raise DimensionError(f"kernel {k} larger than padded input {x.shape[2:]}")
    cols, ho, wo = _im2col(x.data, k, stride, padding)
    wmat = weight.data.reshape(o, c * k * k)
    out = cols @ wmat.T
    if bias is not None:
        if bias.shape != (o,):
            raise DimensionError(f"conv2d bias must have shape ({o},), got {bias.shape}")
        out += bias.data
    out = np.ascontiguousarray(out.reshape(n, ho, wo, o).transpose(0, 3, 1, 2))

    def backward_fn(g):
        gf = g.transpose(0, 2, 3, 1).reshape(-1, o)
        gx = _col2im(gf @ wmat, x.shape, k, stride, padding, ho, wo) if x.requires_grad else None
        gw = (gf.T @ cols).reshape(weight.shape) if weight.requires_grad else None
        if bias is None:
            return gx, gw
        return gx, gw, gf.sum(axis=0)

    parents = (x, weight) if bias is None else (x, weight, bias)
    return Tensor._from_op(out, parents, backward_fn, "conv2d")


def conv_transpose2d(x: Tensor, weight: Tensor, bias: Tensor | None = None, stride: int = 1) -> Tensor:
    """Transposed convolution without padding; ``weight`` is I x O x k x k."""
    _check_nchw(x, "conv_transpose2d")
    if weight.ndim != 4 or weight.shape[2] != weight.shape[3]:
        raise DimensionError(f"conv_transpose2d weight must be I x O x k x k, got {weight.shape}")
    if x.shape[1] != weight.shape[0]:
        raise DimensionError(
            f"conv_transpose2d input channels (axis 1 of input) = {x.shape[1]} "
            f"but weight expects {weight.shape[0]} (axis 0 of weight)"
        )
    if stride < 1:
        raise ValueError("stride must be >= 1")
    ci, co, k, _ = weight.shape
    n, _, h, w = x.shape
    ho, wo = (h - 1) * stride + k, (w - 1) * stride + k
    xf = x.data.transpose(0, 2, 3, 1).reshape(n * h * w, ci)
    wmat = weight.data.reshape(ci, co * k * k)
    cols = (xf @ wmat).reshape(n, h, w, co, k, k).transpose(0, 3, 4, 5, 1, 2)
    out = np.zeros((n, co, ho, wo), dtype=cols.dtype)
    for i in range(k):
        for j in range(k):
            out[:, :, i:i + stride * h:stride, j:j + stride * w:stride] += cols[:, :, i, j]
    if bias is not None:
        if bias.shape != (co,):
            raise DimensionError(f"conv_transpose2d bias must have shape ({co},), got {bias.shape}")
        out += bias.data[None, :, None, None]

    def backward_fn(g):
        win = sliding_window_view(g, (k, k), axis=(2, 3))[:, :, ::stride, ::stride][:, :, :h, :w]
        gcols = win.transpose(0, 2, 3, 1, 4, 5).reshape(n * h * w, co * k * k)
        gx = (gcols @ wmat.T).reshape(n, h, w, ci).transpose(0, 3, 1, 2) if x.requires_grad else None
        gw = (xf.T @ gcols).reshape(weight.shape) if weight.requires_grad else None
        if bias is None:
            return gx, gw
        return gx, gw, g.sum(axis=(0, 2, 3))

    parents = (x, weight) if bias is None else (x, weight, bias)
    return Tensor._from_op(out, parents, backward_fn, "conv_transpose2d")


def batch_norm(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    running_mean: np.ndarray,
    running_var: np.ndarray,
    training: bool,
    momentum: float = BN_MOMENTUM,
    eps: float = BN_EPS,
) -> Tensor:
    """Per-channel normalization of an NCHW tensor.

    In training mode the batch statistics (biased variance) normalize the input
    and the running buffers are updated in place as
    ``new = (1 - momentum) * old + momentum * batch``. In evaluation mode the
    running buffers are used instead.
    """
    _check_nchw(x, "batch_norm")
    c = x.shape[1]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise DimensionError(f"batch_norm affine parameters must have shape ({c},)")
    axes = (0, 2, 3)
    m = x.shape[0] * x.shape[2] * x.shape[3]
    if training:
        if m < 2:
            raise DegenerateStatisticsError(
                f"batch_norm in train mode needs at least 2 values per channel, got {m}"
            )
        mu = x.data.mean(axis=axes)
        var = x.data.var(axis=axes)
        running_mean *= 1.0 - momentum
        running_mean += momentum * mu
        running_var *= 1.0 - momentum
        running_var += momentum * var
    else:
        mu = running_mean.astype(x.dtype, copy=False)
        var = running_var.astype(x.dtype, copy=False)
    inv_std = (1.0 / np.sqrt(var + eps)).astype(x.dtype)
    xhat = (x.data - mu[None, :, None, None]) * inv_std[None, :, None, None]
    out = xhat * gamma.data[None, :, None, None] + beta.data[None, :, None, None]

    def backward_fn(g):
        ggamma = (g * xhat).sum(axis=axes)
        gbeta = g.sum(axis=axes)
        gxhat = g * gamma.data[None, :, None, None]
        if training:
            gx = (inv_std / m)[None, :, None, None] * (
                m * gxhat
                - gxhat.sum(axis=axes)[None, :, None, None]
                - xhat * (gxhat * xhat).sum(axis=axes)[None, :, None, None]
            )
        else:
            gx = gxhat * inv_std[None, :, None, None]
        return gx, ggamma, gbeta

    return Tensor._from_op(out, (x, gamma, beta), backward_fn, "batch_norm")


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    out = x.data * mask

    def backward_fn(g):
        return (g * mask,)

    return Tensor._from_op(out, (x,), backward_fn, "relu")


def sigmoid(x: Tensor) -> Tensor:
    out = expit(x.data)

    def backward_fn(g):
        return (g * out * (1.0 - out),)

    return Tensor._from_op(out, (x,), backward_fn, "sigmoid")


def softplus(x: Tensor) -> Tensor:
    """``log(1 + exp(x))`` evaluated without overflow."""
    out = np.logaddexp(0.0, x.data).astype(x.dtype, copy=False)

    def backward_fn(g):
        return (g * expit(x.data),)

    return Tensor._from_op(out, (x,), backward_fn, "softplus")


ACTIVATIONS = {"relu": relu, "sigmoid": sigmoid, "softplus": softplus}


def activation(x: Tensor, kind: str) -> Tensor:
    try:
        fn = ACTIVATIONS[kind]
    except KeyError:
        raise ValueError(f"unknown activation {kind!r}; expected one of {sorted(ACTIVATIONS)}") from None
    return fn(as_tensor(x))


def binary_cross_entropy(target, prediction: Tensor, eps: float = 1e-7) -> Tensor:
    """Mean natural-log BCE; predictions are clamped to ``[eps, 1 - eps]``.

    ``target`` may hold soft labels in [0, 1]. The gradient is zero where the
    clamp is active.
    """
    y = target.data if isinstance(target, Tensor) else np.asarray(target)
    if y.shape != prediction.shape:
        raise DimensionError(f"target shape {y.shape} != prediction shape {prediction.shape}")
    y = y.astype(prediction.dtype, copy=False)
    p = np.clip(prediction.data, eps, 1.0 - eps)
    n = p.size
    loss = -(y * np.log(p) + (1.0 - y) * np.log1p(-p)).mean()
    inside = (prediction.data >= eps) & (prediction.data <= 1.0 - eps)

    def backward_fn(g):
        return (g * inside * (p - y) / (p * (1.0 - p)) / n,)

    return Tensor._from_op(np.asarray(loss, dtype=prediction.dtype), (prediction,), backward_fn, "bce")
