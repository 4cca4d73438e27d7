"""Dense NCHW operators with matching layer-local backward passes.

Tensors are plain ``numpy.ndarray`` objects in batch/channel/height/width
layout.  Every forward op here has a ``*_backward`` companion that takes the
saved inputs plus the upstream gradient and returns input and parameter
gradients.  All convolutions are cross-correlations without bias.
"""
from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.special import expit


class ShapeError(ValueError):
    """Raised when a tensor does not have the shape an operator needs."""


ACTIVATIONS = ("swish", "prelu", "relu", "sigmoid", "linear")


def check_tensor(x: np.ndarray, name: str = "input") -> np.ndarray:
    if x.ndim != 4:
        raise ShapeError(f"{name}: expected rank-4 NCHW tensor, got shape {x.shape}")
    if min(x.shape) < 1:
        raise ShapeError(f"{name}: all dimensions must be >= 1, got {x.shape}")
    return x


def conv_output_size(size: int, kernel: int, stride: int, padding: int) -> int:
    return (size + 2 * padding - kernel) // stride + 1


def _pad(x: np.ndarray, padding: int) -> np.ndarray:
    if padding == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))


def _check_conv(x, w, stride, padding, groups):
    check_tensor(x)
    if w.ndim != 4:
        raise ShapeError(f"weights: expected rank 4 (out, in/groups, kh, kw), got {w.shape}")
    if groups < 1 or stride < 1 or padding < 0:
        raise ValueError(f"invalid conv params: groups={groups} stride={stride} padding={padding}")
    c_in, c_out = x.shape[1], w.shape[0]
    if c_in % groups or c_out % groups:
        raise ValueError(
            f"groups={groups} must divide in_channels={c_in} and out_channels={c_out}"
        )
    if w.shape[1] != c_in // groups:
        raise ShapeError(
            f"in_channels: input has {c_in} channels, weights expect "
            f"{w.shape[1] * groups} ({w.shape[1]} per group x {groups} groups)"
        )
    kh, kw = w.shape[2:]
    h_out = conv_output_size(x.shape[2], kh, stride, padding)
    w_out = conv_output_size(x.shape[3], kw, stride, padding)
    if h_out < 1 or w_out < 1:
        raise ShapeError(f"height/width: kernel {kh}x{kw} larger than padded input {x.shape[2:]}")
    return h_out, w_out


def _im2col(x, kh, kw, stride, padding, h_out, w_out):
    """Return patches as (N, C, kh, kw, Ho, Wo)."""
    xp = _pad(x, padding)
    if kh == 1 and kw == 1:
        return xp[:, :, ::stride, ::stride][:, :, None, None, :h_out, :w_out]
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
    return win.transpose(0, 1, 4, 5, 2, 3)


def conv2d_forward(
    x: np.ndarray, w: np.ndarray, stride: int = 1, padding: int = 0, groups: int = 1
) -> np.ndarray:
    """Grouped 2-D cross-correlation via im2col + batched matmul."""
    h_out, w_out = _check_conv(x, w, stride, padding, groups)
    n, c_in = x.shape[:2]
    c_out, cg, kh, kw = w.shape
    cols = _im2col(x, kh, kw, stride, padding, h_out, w_out)
    cols = cols.reshape(n, groups, cg * kh * kw, h_out * w_out)
    wm = w.reshape(groups, c_out // groups, cg * kh * kw)
    out = np.matmul(wm, cols)
    return out.reshape(n, c_out, h_out, w_out)


def conv2d_backward(x, w, grad_out, stride=1, padding=0, groups=1):
    """Return ``(grad_input, grad_weights)`` for :func:`conv2d_forward`."""
    h_out, w_out = _check_conv(x, w, stride, padding, groups)
    n, c_in, h, wd = x.shape
    c_out, cg, kh, kw = w.shape
    og = c_out // groups
    g = grad_out.reshape(n, groups, og, h_out * w_out)
    cols = _im2col(x, kh, kw, stride, padding, h_out, w_out)
    cols = cols.reshape(n, groups, cg * kh * kw, h_out * w_out)
    dw = np.einsum("ngok,ngck->goc", g, cols, optimize=True).reshape(w.shape)
    wm = w.reshape(groups, og, cg * kh * kw)
    dcols = np.matmul(wm.transpose(0, 2, 1), g).reshape(n, c_in, kh, kw, h_out, w_out)
    dxp = np.zeros((n, c_in, h + 2 * padding, wd + 2 * padding), dtype=grad_out.dtype)
    for i in range(kh):
        for j in range(kw):
            dxp[:, :, i : i + stride * (h_out - 1) + 1 : stride,
                j : j + stride * (w_out - 1) + 1 : stride] += dcols[:, :, i, j]
    if padding:
        dxp = dxp[:, :, padding:-padding, padding:-padding]
    return dxp, dw


def _check_depthwise(x, w, stride, padding):
    check_tensor(x)
    if w.ndim != 4 or w.shape[1] != 1:
        raise ShapeError(f"weights: depthwise weights must be (C, 1, kh, kw), got {w.shape}")
    if w.shape[0] != x.shape[1]:
        raise ShapeError(
            f"channels: depthwise weights have {w.shape[0]} filters, input has {x.shape[1]} channels"
        )
    kh, kw = w.shape[2:]
    h_out = conv_output_size(x.shape[2], kh, stride, padding)
    w_out = conv_output_size(x.shape[3], kw, stride, padding)
    if h_out < 1 or w_out < 1:
        raise ShapeError(f"height/width: kernel {kh}x{kw} larger than padded input {x.shape[2:]}")
    return h_out, w_out


def depthwise_conv2d_forward(
    x: np.ndarray, w: np.ndarray, stride: int = 1, padding: int = 0
) -> np.ndarray:
    """One filter per channel, accumulated as shifted multiply-adds."""
    h_out, w_out = _check_depthwise(x, w, stride, padding)
    xp = _pad(x, padding)
    kh, kw = w.shape[2:]
    out = np.zeros((x.shape[0], x.shape[1], h_out, w_out), dtype=np.result_type(x, w))
    for i in range(kh):
        for j in range(kw):
            patch = xp[:, :, i : i + stride * (h_out - 1) + 1 : stride,
                       j : j + stride * (w_out - 1) + 1 : stride]
            out += patch * w[None, :, 0, i, j, None, None]
    return out


def depthwise_conv2d_backward(x, w, grad_out, stride=1, padding=0):
    h_out, w_out = _check_depthwise(x, w, stride, padding)
    xp = _pad(x, padding)
    kh, kw = w.shape[2:]
    dxp = np.zeros_like(xp, dtype=grad_out.dtype)
    dw = np.zeros_like(w, dtype=grad_out.dtype)
    for i in range(kh):
        for j in range(kw):
            sl = (slice(None), slice(None),
                  slice(i, i + stride * (h_out - 1) + 1, stride),
                  slice(j, j + stride * (w_out - 1) + 1, stride))
            dw[:, 0, i, j] = np.einsum("nchw,nchw->c", grad_out, xp[sl])
            dxp[sl] += grad_out * w[None, :, 0, i, j, None, None]
    if padding:
        dxp = dxp[:, :, padding:-padding, padding:-padding]
    return dxp, dw


def global_depthwise_conv(x: np.ndarray, w: np.ndarray) -> np.ndarray:
    """Linear GDConv: kernel spans the full spatial extent, output is (N, C, 1, 1)."""
    check_tensor(x)
    if w.ndim != 4 or w.shape[1] != 1 or w.shape[0] != x.shape[1]:
        raise ShapeError(f"weights: expected ({x.shape[1]}, 1, kh, kw), got {w.shape}")
    if x.shape[2:] != w.shape[2:]:
        raise ShapeError(
            f"height/width: input spatial size {x.shape[2:]} must equal kernel size {w.shape[2:]}"
        )
    return np.einsum("nchw,chw->nc", x, w[:, 0])[:, :, None, None]


def global_depthwise_conv_backward(x, w, grad_out):
    g = grad_out[:, :, 0, 0]
    dx = g[:, :, None, None] * w[None, :, 0]
    dw = np.einsum("nc,nchw->chw", g, x)[:, None]
    return dx, dw


def _bn_axes(x):
    return (0,) + tuple(range(2, x.ndim))


def _bn_shape(x):
    return (1, -1) + (1,) * (x.ndim - 2)


def batchnorm_forward(x, gamma, beta, running_mean, running_var, *, train,
                      eps=1e-5, momentum=0.1):
    """Batch norm over every axis except channels.

    In train mode the running statistics are updated in place and the
    returned cache is ``(x_hat, inv_std)``; infer mode leaves them untouched.
    """
    if x.shape[1] != gamma.shape[0]:
        raise ShapeError(f"channels: input has {x.shape[1]}, batch norm has {gamma.shape[0]}")
    axes = _bn_axes(x)
    shape = _bn_shape(x)
    if train:
        count = x.size // x.shape[1]
        if count == 0:
            raise ValueError("batch norm in train mode needs a non-empty batch")
        mean = x.mean(axis=axes)
        var = x.var(axis=axes)
        unbiased = var * count / max(count - 1, 1)
        running_mean *= 1 - momentum
        running_mean += momentum * mean
        running_var *= 1 - momentum
        running_var += momentum * unbiased
    else:
        mean, var = running_mean, running_var
    inv_std = 1.0 / np.sqrt(var + eps)
    x_hat = (x - mean.reshape(shape)) * inv_std.reshape(shape)
    out = x_hat * gamma.reshape(shape) + beta.reshape(shape)
    return out.astype(x.dtype, copy=False), (x_hat, inv_std)


def batchnorm_backward(grad_out, cache, gamma, *, train):
    x_hat, inv_std = cache
    axes = _bn_axes(grad_out)
    shape = _bn_shape(grad_out)
    dgamma = (grad_out * x_hat).sum(axis=axes)
    dbeta = grad_out.sum(axis=axes)
    dxhat = grad_out * gamma.reshape(shape)
    if not train:
        return dxhat * inv_std.reshape(shape), dgamma, dbeta
    m = grad_out.size // grad_out.shape[1]
    dx = (inv_std.reshape(shape) / m) * (
        m * dxhat
        - dxhat.sum(axis=axes).reshape(shape)
        - x_hat * (dxhat * x_hat).sum(axis=axes).reshape(shape)
    )
    return dx, dgamma, dbeta


def sigmoid(x: np.ndarray) -> np.ndarray:
    return expit(x)


def swish(x: np.ndarray) -> np.ndarray:
    return x * expit(x)


def activation(x: np.ndarray, kind: str, slope: np.ndarray | None = None) -> np.ndarray:
    if kind == "swish":
        return swish(x)
    if kind == "sigmoid":
        return expit(x)
    if kind == "relu":
        return np.maximum(x, 0)
    if kind == "prelu":
        if slope is None:
            raise ValueError("prelu needs a per-channel slope")
        a = slope.reshape(_bn_shape(x))
        return np.where(x > 0, x, a * x)
    if kind == "linear":
        return x
    raise ValueError(f"unknown activation {kind!r}; expected one of {ACTIVATIONS}")


def activation_backward(x, grad_out, kind, slope=None):
    """Return ``(grad_input, grad_slope)``; ``grad_slope`` is None except for prelu."""
    if kind == "swish":
        s = expit(x)
        return grad_out * (s + x * s * (1 - s)), None
    if kind == "sigmoid":
        s = expit(x)
        return grad_out * s * (1 - s), None
    if kind == "relu":
        return grad_out * (x > 0), None
    if kind == "prelu":
        a = slope.reshape(_bn_shape(x))
        dx = np.where(x > 0, grad_out, a * grad_out)
        dslope = np.where(x > 0, 0, x * grad_out).sum(axis=_bn_axes(x))
        return dx, dslope
    if kind == "linear":
        return grad_out, None
    raise ValueError(f"unknown activation {kind!r}; expected one of {ACTIVATIONS}")


def max_pool2d(x: np.ndarray, kernel: int = 2, stride: int = 2) -> np.ndarray:
    """Non-overlapping max pool; trailing odd rows/columns are dropped."""
    check_tensor(x)
    if kernel != stride:
        raise ValueError("only non-overlapping pooling (kernel == stride) is supported")
    n, c, h, w = x.shape
    ho, wo = h // kernel, w // kernel
    if ho < 1 or wo < 1:
        raise ShapeError(f"height/width: input {h}x{w} smaller than pool window {kernel}")
    win = x[:, :, : ho * kernel, : wo * kernel].reshape(n, c, ho, kernel, wo, kernel)
    return win.max(axis=(3, 5))


def max_pool2d_backward(x, grad_out, kernel=2, stride=2):
    n, c, h, w = x.shape
    ho, wo = h // kernel, w // kernel
    win = x[:, :, : ho * kernel, : wo * kernel].reshape(n, c, ho, kernel, wo, kernel)
    win = win.transpose(0, 1, 2, 4, 3, 5).reshape(n, c, ho, wo, kernel * kernel)
    # Ties route the gradient to the first maximum only.
    idx = win.argmax(axis=-1)
    mask = np.zeros_like(win, dtype=grad_out.dtype)
    np.put_along_axis(mask, idx[..., None], 1, axis=-1)
    dwin = mask * grad_out[..., None]
    dwin = dwin.reshape(n, c, ho, wo, kernel, kernel).transpose(0, 1, 2, 4, 3, 5)
    dx = np.zeros_like(x, dtype=grad_out.dtype)
    dx[:, :, : ho * kernel, : wo * kernel] = dwin.reshape(n, c, ho * kernel, wo * kernel)
    return dx


def linear_forward(x: np.ndarray, w: np.ndarray, b: np.ndarray | None = None) -> np.ndarray:
    """Affine map ``x @ w.T + b`` with ``w`` shaped (out_features, in_features)."""
    if x.ndim != 2 or w.ndim != 2:
        raise ShapeError(f"linear expects 2-D input and weights, got {x.shape} and {w.shape}")
    if x.shape[1] != w.shape[1]:
        raise ShapeError(f"in_features: input has {x.shape[1]}, weights expect {w.shape[1]}")
    out = x @ w.T
    if b is not None:
        if b.shape != (w.shape[0],):
            raise ShapeError(f"bias: expected ({w.shape[0]},), got {b.shape}")
        out = out + b
    return out


def linear_backward(x, w, grad_out):
    """Return ``(grad_input, grad_weights, grad_bias)``."""
    return grad_out @ w, grad_out.T @ x, grad_out.sum(axis=0)
