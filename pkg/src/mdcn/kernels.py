"""Differentiable layer kernels on [N, C, H, W] float64 arrays.

All kernels are pure functions.  Reductions run in a fixed order so that
repeated calls on identical inputs are bit-identical.
"""

import math
from dataclasses import dataclass

import numpy as np

from .tensor import ShapeError, Tensor

L2NORM_EPS = 1e-10


@dataclass(frozen=True)
class ConvParams:
    weights: Tensor  # [out_ch, in_ch, kh, kw]
    bias: Tensor  # [out_ch]
    stride: int = 1
    padding: int = 0
    dilation: int = 1

    def __post_init__(self):
        if self.weights.ndim != 4:
            raise ShapeError(f"weights must be rank 4, got shape {self.weights.shape}")
        if self.bias.shape != (self.weights.shape[0],):
            raise ShapeError(
                f"bias length {self.bias.shape} does not match out_ch {self.weights.shape[0]}"
            )
        if self.stride < 1 or self.dilation < 1 or self.padding < 0:
            raise ValueError("stride and dilation must be >= 1, padding >= 0")


def conv_output_size(size, kernel, stride=1, pad=0, dilation=1):
    return (size + 2 * pad - dilation * (kernel - 1) - 1) // stride + 1


def _conv_geometry(x, p):
    if x.ndim != 4:
        raise ShapeError(f"input must be rank 4 [N,C,H,W], got shape {x.shape}")
    n, c, h, w = x.shape
    k, cin, kh, kw = p.weights.shape
    if c != cin:
        raise ShapeError(f"channel dim C={c} does not match weights in_ch={cin}")
    ho = conv_output_size(h, kh, p.stride, p.padding, p.dilation)
    wo = conv_output_size(w, kw, p.stride, p.padding, p.dilation)
    if ho < 1:
        raise ShapeError(f"height H={h} too small for kernel {kh} (output {ho})")
    if wo < 1:
        raise ShapeError(f"width W={w} too small for kernel {kw} (output {wo})")
    return n, c, h, w, k, kh, kw, ho, wo


def _is_pointwise(p, kh, kw):
    return kh == 1 and kw == 1 and p.stride == 1 and p.padding == 0


def im2col(x, p):
    """Unfold ``x`` into a [C*kh*kw, N*H'*W'] matrix for convolution ``p``."""
    n, c, h, w, _, kh, kw, ho, wo = _conv_geometry(x, p)
    if _is_pointwise(p, kh, kw):
        return x.transpose(1, 0, 2, 3).reshape(c, n * h * w)
    pad, s, d = p.padding, p.stride, p.dilation
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x
    xp = xp.transpose(1, 0, 2, 3)
    cols = np.empty((c, kh, kw, n, ho, wo))
    for i in range(kh):
        r0 = i * d
        for j in range(kw):
            c0 = j * d
            cols[:, i, j] = xp[:, :, r0 : r0 + s * (ho - 1) + 1 : s, c0 : c0 + s * (wo - 1) + 1 : s]
    return cols.reshape(c * kh * kw, n * ho * wo)


def conv2d_forward(x, p, cols=None):
    """Cross-correlation of ``x`` with ``p.weights`` plus bias."""
    n, c, h, w, k, kh, kw, ho, wo = _conv_geometry(x, p)
    if cols is None:
        cols = im2col(x, p)
    out = p.weights.reshape(k, -1) @ cols
    out += p.bias[:, None]
    return np.ascontiguousarray(out.reshape(k, n, ho, wo).transpose(1, 0, 2, 3))


def conv2d_backward(x, p, grad_out, cols=None, need_input_grad=True):
    """Gradients of ``conv2d_forward`` w.r.t. input, weights and bias.

    ``cols`` may carry the unfolded input from the forward pass to skip
    recomputing it.
    """
    n, c, h, w, k, kh, kw, ho, wo = _conv_geometry(x, p)
    if grad_out.shape != (n, k, ho, wo):
        raise ShapeError(
            f"grad_out shape {grad_out.shape} does not match conv output {(n, k, ho, wo)}"
        )
    if cols is None:
        cols = im2col(x, p)
    go = grad_out.transpose(1, 0, 2, 3).reshape(k, n * ho * wo)
    grad_w = (go @ cols.T).reshape(p.weights.shape)
    grad_b = go.sum(axis=1)
    if not need_input_grad:
        return None, grad_w, grad_b
    dcols = p.weights.reshape(k, -1).T @ go
    if _is_pointwise(p, kh, kw):
        grad_x = np.ascontiguousarray(dcols.reshape(c, n, h, w).transpose(1, 0, 2, 3))
        return grad_x, grad_w, grad_b
    dcols = dcols.reshape(c, kh, kw, n, ho, wo)
    pad, s, d = p.padding, p.stride, p.dilation
    dxp = np.zeros((c, n, h + 2 * pad, w + 2 * pad))
    for i in range(kh):
        r0 = i * d
        for j in range(kw):
            c0 = j * d
            dxp[:, :, r0 : r0 + s * (ho - 1) + 1 : s, c0 : c0 + s * (wo - 1) + 1 : s] += dcols[:, i, j]
    grad_x = np.ascontiguousarray(dxp[:, :, pad : pad + h, pad : pad + w].transpose(1, 0, 2, 3))
    return grad_x, grad_w, grad_b


def pool_output_size(size, window, stride, pad=0, ceil_mode=False):
    span = size + 2 * pad - window
    if ceil_mode:
        out = -(-span // stride) + 1
        # last window must start inside the input or left padding
        if (out - 1) * stride >= size + pad:
            out -= 1
    else:
        out = span // stride + 1
    return out


def maxpool2d(x, window, stride, pad=0, ceil_mode=False):
    """Max pooling.  Returns ``(output, argmax)``.

    ``argmax`` holds, for every output element, the flat index (row*W + col)
    of the selected input element within its [H, W] plane.  Ties go to the
    lowest flat index.
    """
    if window < 1 or stride < 1:
        raise ValueError("window and stride must be positive")
    if x.ndim != 4:
        raise ShapeError(f"input must be rank 4 [N,C,H,W], got shape {x.shape}")
    n, c, h, w = x.shape
    if window > h + 2 * pad or window > w + 2 * pad:
        raise ShapeError(f"window {window} larger than padded input {h + 2 * pad}x{w + 2 * pad}")
    ho = pool_output_size(h, window, stride, pad, ceil_mode)
    wo = pool_output_size(w, window, stride, pad, ceil_mode)
    need_h = (ho - 1) * stride + window
    need_w = (wo - 1) * stride + window
    xp = np.full((n, c, need_h, need_w), -np.inf)
    hh = min(h, need_h - pad)
    ww = min(w, need_w - pad)
    xp[:, :, pad : pad + hh, pad : pad + ww] = x[:, :, :hh, :ww]
    best = None
    best_pos = np.zeros((n, c, ho, wo), dtype=np.int64)
    for i in range(window):
        for j in range(window):
            v = xp[:, :, i : i + stride * (ho - 1) + 1 : stride, j : j + stride * (wo - 1) + 1 : stride]
            if best is None:
                best = v.copy()
                continue
            better = v > best
            best = np.where(better, v, best)
            best_pos = np.where(better, i * window + j, best_pos)
    di, dj = np.divmod(best_pos, window)
    rows = np.arange(ho)[:, None] * stride + di - pad
    cols = np.arange(wo)[None, :] * stride + dj - pad
    argmax = rows * w + cols
    return np.ascontiguousarray(best), argmax


def maxpool2d_backward(grad_out, argmax, input_shape):
    """Route ``grad_out`` to the argmax positions; collisions are summed in order."""
    n, c, h, w = input_shape
    if grad_out.shape != argmax.shape:
        raise ShapeError(f"grad_out shape {grad_out.shape} does not match argmax {argmax.shape}")
    plane = np.arange(n * c, dtype=np.int64).reshape(n, c, 1, 1) * (h * w)
    flat = (argmax + plane).ravel()
    grad = np.bincount(flat, weights=grad_out.ravel(), minlength=n * c * h * w)
    return grad.reshape(n, c, h, w)


def relu(x):
    return np.maximum(x, 0.0)


def relu_backward(x, grad_out):
    return grad_out * (x > 0)


def _check_axis(x, axis):
    if not -x.ndim <= axis < x.ndim:
        raise ValueError(f"axis {axis} invalid for rank-{x.ndim} input")


def softmax(x, axis=-1):
    _check_axis(x, axis)
    z = x - x.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


def log_softmax(x, axis=-1):
    _check_axis(x, axis)
    z = x - x.max(axis=axis, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=axis, keepdims=True))


def softmax_backward(y, grad_out, axis=-1):
    """Backward of softmax given its output ``y``."""
    return y * (grad_out - (grad_out * y).sum(axis=axis, keepdims=True))


def l2_normalize_scale(x, scale):
    """Normalize each spatial position's channel vector, then scale per channel."""
    if x.ndim != 4:
        raise ShapeError(f"input must be rank 4 [N,C,H,W], got shape {x.shape}")
    if scale.shape != (x.shape[1],):
        raise ShapeError(f"scale length {scale.shape} does not match channel count {x.shape[1]}")
    norm = np.sqrt((x * x).sum(axis=1, keepdims=True) + L2NORM_EPS**2)
    return x / norm * scale[None, :, None, None]


def l2_normalize_scale_backward(x, scale, grad_out):
    norm = np.sqrt((x * x).sum(axis=1, keepdims=True) + L2NORM_EPS**2)
    u = x / norm
    grad_scale = (grad_out * u).sum(axis=(0, 2, 3))
    gu = grad_out * scale[None, :, None, None]
    grad_x = (gu - u * (gu * u).sum(axis=1, keepdims=True)) / norm
    return grad_x, grad_scale


def he_std(fan_in):
    return math.sqrt(2.0 / fan_in)
