"""Forward and backward passes for every layer kind the networks use.

All functions operate on single samples laid out as (channels, height,
width).  Backward functions are pure: they recompute whatever they need
from the forward inputs instead of relying on hidden caches.
"""
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from .errors import InvalidArgumentError, ShapeError
from .tensor import DTYPE

BN_EPSILON = 1e-5
BN_MOMENTUM = 0.1
PROB_CLAMP = 1e-7


@dataclass
class ConvParams:
    kernel: np.ndarray
    bias: np.ndarray
    stride: int = 1
    padding: int = 0

    def __post_init__(self):
        if self.kernel.ndim != 4:
            raise ShapeError(f"kernel must be 4-D, got shape {self.kernel.shape}")
        if self.stride < 1 or self.padding < 0:
            raise InvalidArgumentError(f"bad stride/padding {self.stride}/{self.padding}")


@dataclass
class BatchNormParams:
    gamma: np.ndarray
    beta: np.ndarray
    running_mean: np.ndarray
    running_var: np.ndarray
    epsilon: float = BN_EPSILON
    momentum_stat: float = BN_MOMENTUM

    @classmethod
    def identity(cls, channels):
        return cls(
            gamma=np.ones(channels, DTYPE),
            beta=np.zeros(channels, DTYPE),
            running_mean=np.zeros(channels, DTYPE),
            running_var=np.ones(channels, DTYPE),
        )


# ---------------------------------------------------------------- convolution


def conv_output_size(n, k, stride, padding):
    return (n + 2 * padding - k) // stride + 1


def _im2col(xp, kh, kw, stride, ho, wo):
    c = xp.shape[0]
    cols = np.empty((c, kh, kw, ho, wo), dtype=xp.dtype)
    hspan = stride * (ho - 1) + 1
    wspan = stride * (wo - 1) + 1
    for di in range(kh):
        for dj in range(kw):
            cols[:, di, dj] = xp[:, di:di + hspan:stride, dj:dj + wspan:stride]
    return cols.reshape(c * kh * kw, ho * wo)


def _col2im(cols, shape_padded, kh, kw, stride, ho, wo):
    c = shape_padded[0]
    cols = cols.reshape(c, kh, kw, ho, wo)
    out = np.zeros(shape_padded, dtype=cols.dtype)
    hspan = stride * (ho - 1) + 1
    wspan = stride * (wo - 1) + 1
    for di in range(kh):
        for dj in range(kw):
            out[:, di:di + hspan:stride, dj:dj + wspan:stride] += cols[:, di, dj]
    return out


def _pad(x, p):
    if p == 0:
        return x
    return np.pad(x, ((0, 0), (p, p), (p, p)))


def _unpad(x, p):
    if p == 0:
        return x
    return x[:, p:-p, p:-p]


def _conv_geometry(x, p):
    if x.ndim != 3:
        raise ShapeError(f"expected (C,H,W) input, got shape {x.shape}")
    o, c, kh, kw = p.kernel.shape
    if x.shape[0] != c:
        raise ShapeError(f"input has {x.shape[0]} channels, kernel expects {c}")
    ho = conv_output_size(x.shape[1], kh, p.stride, p.padding)
    wo = conv_output_size(x.shape[2], kw, p.stride, p.padding)
    if ho < 1 or wo < 1:
        raise ShapeError(f"conv output would be {ho}x{wo} for input {x.shape} and kernel {p.kernel.shape}")
    return o, c, kh, kw, ho, wo


def _cols(x, p, kh, kw, ho, wo):
    if kh == 1 and kw == 1 and p.stride == 1 and p.padding == 0:
        return x.reshape(x.shape[0], -1)
    return _im2col(_pad(x, p.padding), kh, kw, p.stride, ho, wo)


def conv2d_forward(x, p):
    """2-D cross-correlation with zero padding, plus a per-channel bias."""
    o, c, kh, kw, ho, wo = _conv_geometry(x, p)
    if p.bias.shape != (o,):
        raise ShapeError(f"bias shape {p.bias.shape} != ({o},)")
    y = p.kernel.reshape(o, -1) @ _cols(x, p, kh, kw, ho, wo)
    y += p.bias[:, None]
    return y.reshape(o, ho, wo)


def _conv_input_grad(grad_out, kernel, stride, padding, in_shape):
    o, c, kh, kw = kernel.shape
    _, ho, wo = grad_out.shape
    dcols = kernel.reshape(o, -1).T @ grad_out.reshape(o, -1)
    if kh == 1 and kw == 1 and stride == 1 and padding == 0:
        return dcols.reshape(in_shape)
    hp, wp = in_shape[1] + 2 * padding, in_shape[2] + 2 * padding
    return _unpad(_col2im(dcols, (c, hp, wp), kh, kw, stride, ho, wo), padding)


def _conv_kernel_grad(x, p, grad_out):
    o, c, kh, kw, ho, wo = _conv_geometry(x, p)
    g = grad_out.reshape(o, -1)
    return (g @ _cols(x, p, kh, kw, ho, wo).T).reshape(p.kernel.shape)


def _channel_sum(g):
    # float64 accumulation: these sums often nearly cancel
    return g.reshape(g.shape[0], -1).sum(axis=1, dtype=np.float64).astype(g.dtype)


def conv2d_backward(x, p, grad_out):
    """Return ``(grad_x, grad_kernel, grad_bias)`` for :func:`conv2d_forward`."""
    o, c, kh, kw, ho, wo = _conv_geometry(x, p)
    if grad_out.shape != (o, ho, wo):
        raise ShapeError(f"grad_out shape {grad_out.shape} != forward output {(o, ho, wo)}")
    grad_x = _conv_input_grad(grad_out, p.kernel, p.stride, p.padding, x.shape)
    grad_k = _conv_kernel_grad(x, p, grad_out)
    grad_b = _channel_sum(grad_out)
    return grad_x, grad_k, grad_b


def transposed_output_size(n, k, stride, padding):
    return (n - 1) * stride - 2 * padding + k


def transposed_conv2d_forward(x, p):
    """Adjoint of :func:`conv2d_forward` for the same kernel, plus bias.

    The kernel keeps the convolution layout (conv_out, conv_in, kh, kw), so
    this layer maps ``kernel.shape[0]`` channels to ``kernel.shape[1]``
    channels and its bias has length ``kernel.shape[1]``.
    """
    if x.ndim != 3:
        raise ShapeError(f"expected (C,H,W) input, got shape {x.shape}")
    cin, cout, kh, kw = p.kernel.shape
    if x.shape[0] != cin:
        raise ShapeError(f"input has {x.shape[0]} channels, transposed kernel expects {cin}")
    if p.bias.shape != (cout,):
        raise ShapeError(f"bias shape {p.bias.shape} != ({cout},)")
    h = transposed_output_size(x.shape[1], kh, p.stride, p.padding)
    w = transposed_output_size(x.shape[2], kw, p.stride, p.padding)
    if h < 1 or w < 1:
        raise ShapeError(f"transposed conv output would be {h}x{w}")
    y = _conv_input_grad(x, p.kernel, p.stride, p.padding, (cout, h, w))
    return y + p.bias[:, None, None]


def transposed_conv2d_backward(x, p, grad_out):
    """Return ``(grad_x, grad_kernel, grad_bias)`` for the transposed conv."""
    cin, cout, kh, kw = p.kernel.shape
    h = transposed_output_size(x.shape[1], kh, p.stride, p.padding)
    w = transposed_output_size(x.shape[2], kw, p.stride, p.padding)
    if grad_out.shape != (cout, h, w):
        raise ShapeError(f"grad_out shape {grad_out.shape} != forward output {(cout, h, w)}")
    nobias = ConvParams(p.kernel, np.zeros(cin, p.kernel.dtype), p.stride, p.padding)
    grad_x = conv2d_forward(grad_out, nobias)
    # <convT_K(x), g> = <x, conv_K(g)>, so the kernel gradient is that of a
    # conv whose input is g and whose upstream gradient is x.
    grad_k = _conv_kernel_grad(grad_out, nobias, x)
    grad_b = _channel_sum(grad_out)
    return grad_x, grad_k, grad_b


# ---------------------------------------------------------------- batch norm


def batch_stats(x):
    flat = x.reshape(x.shape[0], -1)
    return flat.mean(axis=1), flat.var(axis=1)


def batchnorm_forward(x, p, mode="train"):
    """Normalise each channel, then scale by gamma and shift by beta.

    In ``train`` mode the statistics come from ``x`` itself (its spatial
    positions, since mini-batches hold a single sample); in ``infer`` mode
    the running statistics are used.  Running statistics are not touched
    here, see :func:`updated_running_stats`.
    """
    c = x.shape[0]
    if p.gamma.shape != (c,) or p.beta.shape != (c,):
        raise ShapeError(f"batch-norm parameters do not match {c} channels")
    if mode == "train":
        mean, var = batch_stats(x)
    elif mode == "infer":
        mean, var = p.running_mean, p.running_var
    else:
        raise InvalidArgumentError(f"unknown mode {mode!r}")
    scale = (p.gamma / np.sqrt(var + p.epsilon)).astype(x.dtype)
    shift = (p.beta - mean * scale).astype(x.dtype)
    return x * scale[:, None, None] + shift[:, None, None]


def updated_running_stats(p, x):
    mean, var = batch_stats(x)
    m = p.momentum_stat
    new_mean = ((1 - m) * p.running_mean + m * mean).astype(p.running_mean.dtype)
    new_var = ((1 - m) * p.running_var + m * var).astype(p.running_var.dtype)
    return new_mean, new_var


def batchnorm_backward(x, p, grad_out):
    """Train-mode backward; returns ``(grad_x, grad_gamma, grad_beta)``."""
    c = x.shape[0]
    # computed in float64: the per-channel sums nearly cancel
    flat = x.reshape(c, -1).astype(np.float64)
    g = grad_out.reshape(c, -1).astype(np.float64)
    n = flat.shape[1]
    mean = flat.mean(axis=1, keepdims=True)
    inv_std = 1.0 / np.sqrt(flat.var(axis=1, keepdims=True) + p.epsilon)
    xhat = (flat - mean) * inv_std
    grad_beta = g.sum(axis=1)
    grad_gamma = (g * xhat).sum(axis=1)
    grad_x = (p.gamma[:, None] * inv_std / n) * (
        n * g - grad_beta[:, None] - xhat * grad_gamma[:, None]
    )
    dt = x.dtype
    return grad_x.reshape(x.shape).astype(dt), grad_gamma.astype(dt), grad_beta.astype(dt)


# ---------------------------------------------------------------- activations


def relu(x):
    return np.maximum(x, 0)


def relu_backward(x, grad_out):
    return grad_out * (x > 0)


def sigmoid(x):
    # split by sign so exp never overflows
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid_backward(x, grad_out):
    s = sigmoid(x)
    return grad_out * s * (1 - s)


# ---------------------------------------------------------------- pooling


def maxpool2d(x, window=2, stride=2):
    """Max pooling over non-overlapping windows.

    Returns ``(y, index_map)`` where ``index_map`` holds, per output element,
    the flat index into ``x`` of the winning input.  Ties go to the first
    element in row-major window order.  Extents that are not a multiple of
    the stride are padded at the bottom/right with -inf.
    """
    if window != stride:
        raise InvalidArgumentError("only non-overlapping pooling (window == stride) is supported")
    c, h, w = x.shape
    ho, wo = -(-h // stride), -(-w // stride)
    hp, wp = ho * stride, wo * stride
    if (hp, wp) != (h, w):
        xp = np.full((c, hp, wp), -np.inf, dtype=x.dtype)
        xp[:, :h, :w] = x
    else:
        xp = x
    win = xp.reshape(c, ho, stride, wo, stride).transpose(0, 1, 3, 2, 4).reshape(c, ho, wo, -1)
    arg = win.argmax(axis=-1)
    y = np.take_along_axis(win, arg[..., None], axis=-1)[..., 0]
    di, dj = np.divmod(arg, stride)
    rows = np.arange(ho)[None, :, None] * stride + di
    colsi = np.arange(wo)[None, None, :] * stride + dj
    chan = np.arange(c)[:, None, None]
    index_map = (chan * h + rows) * w + colsi
    return y, index_map


def maxpool2d_backward(x_shape, index_map, grad_out):
    grad_x = np.zeros(int(np.prod(x_shape)), dtype=grad_out.dtype)
    # windows do not overlap, so every index appears at most once
    grad_x[index_map.ravel()] = grad_out.ravel()
    return grad_x.reshape(x_shape)


# ---------------------------------------------------------------- upsampling


def interp_matrix(n_in, n_out):
    """Linear interpolation matrix (n_out x n_in) with align-corners positions."""
    a = np.zeros((n_out, n_in), dtype=np.float64)
    if n_in == 1 or n_out == 1:
        a[:, 0] = 1.0
        return a
    pos = np.arange(n_out) * (n_in - 1) / (n_out - 1)
    lo = np.minimum(np.floor(pos).astype(int), n_in - 2)
    frac = pos - lo
    a[np.arange(n_out), lo] = 1 - frac
    a[np.arange(n_out), lo + 1] += frac
    return a


def resize_bilinear(x, out_h, out_w):
    """Align-corners bilinear resampling of a (C,H,W) array."""
    ah = interp_matrix(x.shape[1], out_h).astype(x.dtype)
    aw = interp_matrix(x.shape[2], out_w).astype(x.dtype)
    return np.einsum("ih,chw,jw->cij", ah, x, aw, optimize=True)


def resize_nearest(x, out_h, out_w):
    """Nearest-neighbour resampling of the trailing two axes."""
    h, w = x.shape[-2:]
    ri = np.minimum((np.arange(out_h) * h) // out_h, h - 1)
    ci = np.minimum((np.arange(out_w) * w) // out_w, w - 1)
    return x[..., ri[:, None], ci[None, :]]


def upsample(x, factor=2, algo="nearest"):
    if factor < 1:
        raise InvalidArgumentError(f"factor must be >= 1, got {factor}")
    if factor == 1:
        return x.copy()
    if algo == "nearest":
        return x.repeat(factor, axis=1).repeat(factor, axis=2)
    if algo == "bilinear":
        return resize_bilinear(x, x.shape[1] * factor, x.shape[2] * factor)
    raise InvalidArgumentError(f"unknown upsampling algorithm {algo!r}")


def upsample_backward(x_shape, grad_out, factor=2, algo="nearest"):
    if factor == 1:
        return grad_out.copy()
    c, h, w = x_shape
    if algo == "nearest":
        return grad_out.reshape(c, h, factor, w, factor).sum(axis=(2, 4))
    ah = interp_matrix(h, h * factor).astype(grad_out.dtype)
    aw = interp_matrix(w, w * factor).astype(grad_out.dtype)
    return np.einsum("ih,cij,jw->chw", ah, grad_out, aw, optimize=True)


# ---------------------------------------------------------------- merging


def concat_channels(a, b):
    if a.shape[1:] != b.shape[1:]:
        raise ShapeError(f"cannot concatenate {a.shape} and {b.shape}: spatial extents differ")
    return np.concatenate([a, b], axis=0)


def split_channels(grad, first):
    return grad[:first], grad[first:]


def crop_to(x, h, w):
    """Keep the top-left ``h`` x ``w`` block (undoes bottom/right pool padding)."""
    if x.shape[1] < h or x.shape[2] < w:
        raise ShapeError(f"cannot crop {x.shape} to {h}x{w}")
    return x[:, :h, :w]


def crop_backward(x_shape, grad_out):
    if grad_out.shape == tuple(x_shape):
        return grad_out
    g = np.zeros(x_shape, dtype=grad_out.dtype)
    g[:, :grad_out.shape[1], :grad_out.shape[2]] = grad_out
    return g


# ---------------------------------------------------------------- dropout


def dropout(x, rate, rng=None, mode="train"):
    """Inverted dropout.  Returns ``(y, mask)``; the mask is None when inactive."""
    if not 0 <= rate < 1:
        raise InvalidArgumentError(f"dropout rate must be in [0, 1), got {rate}")
    if mode == "infer" or rate == 0:
        return x.copy(), None
    keep = rng.random(x.shape) >= rate
    mask = keep.astype(x.dtype) / x.dtype.type(1 - rate)
    return x * mask, mask


def dropout_backward(mask, grad_out):
    return grad_out if mask is None else grad_out * mask


# ---------------------------------------------------------------- loss


class LossResult(NamedTuple):
    loss: float
    grad: np.ndarray
    empty: bool


def softmax_channels(logits):
    z = logits - logits.max(axis=0, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=0, keepdims=True)


def weighted_pixel_cross_entropy(logits, labels, class_weights):
    """Class-weighted softmax cross-entropy over Skin/Lesion pixels.

    ``logits`` is (2,H,W) with channel 0 = Skin and channel 1 = Lesion;
    ``labels`` uses 0 = Background, 1 = Skin, 2 = Lesion.  Background pixels
    contribute neither loss nor gradient, and the sum is divided by the
    number of non-background pixels.
    """
    if logits.ndim != 3 or logits.shape[0] != 2:
        raise ShapeError(f"logits must be (2,H,W), got {logits.shape}")
    if labels.shape != logits.shape[1:]:
        raise ShapeError(f"labels {labels.shape} do not match logits {logits.shape}")
    weights = np.asarray(class_weights, dtype=np.float64)
    if weights.shape != (2,) or np.any(weights < 0):
        raise InvalidArgumentError(f"need two non-negative class weights, got {class_weights}")
    valid = labels > 0
    n_valid = int(valid.sum())
    if n_valid == 0:
        return LossResult(0.0, np.zeros_like(logits), True)
    probs = softmax_channels(logits.astype(np.float64))
    cls = np.clip(labels.astype(np.int64) - 1, 0, 1)
    w_px = np.where(valid, weights[cls], 0.0)
    p_true = np.take_along_axis(probs, cls[None], axis=0)[0]
    p_true = np.clip(p_true, PROB_CLAMP, 1 - PROB_CLAMP)
    loss = -float((w_px * np.log(p_true)).sum()) / n_valid
    onehot = np.stack([cls == 0, cls == 1]).astype(np.float64)
    grad = (probs - onehot) * (w_px / n_valid)[None]
    return LossResult(loss, grad.astype(logits.dtype), False)
