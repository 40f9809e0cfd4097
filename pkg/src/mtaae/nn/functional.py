"""Forward/backward kernels for the layers of the network.

Every ``*_forward`` returns ``(output, cache)`` and the matching ``*_backward``
consumes the upstream gradient plus that cache.  Activations use the NCHW
layout; convolution weights are ``(C_out, C_in, kh, kw)`` and transposed
convolution weights ``(C_in, C_out, kh, kw)``.
"""
from __future__ import annotations

import numpy as np

from . import _kernels
from .tensor import ConfigError

BN_EPS = 1e-5
LOG_CLAMP = 1e-12


def _pair(v) -> tuple[int, int]:
    if isinstance(v, (tuple, list)):
        return int(v[0]), int(v[1])
    return int(v), int(v)


def conv_output_size(size: int, kernel: int, stride: int, pad: int) -> int:
    return (size + 2 * pad - kernel) // stride + 1


def tconv_output_size(size: int, kernel: int, stride: int, pad: int) -> int:
    return (size - 1) * stride - 2 * pad + kernel


# ---------------------------------------------------------------- convolution
# Columns are laid out per sample, (B, C*kh*kw, ho*wo), so every product is a
# batched matmul straight into NCHW without transposes.

def _im2col(x: np.ndarray, kh: int, kw: int, sh: int, sw: int, ph: int, pw: int):
    b, c, h, w = x.shape
    ho = conv_output_size(h, kh, sh, ph)
    wo = conv_output_size(w, kw, sw, pw)
    if ph or pw:
        xp = np.zeros((b, c, h + 2 * ph, w + 2 * pw), dtype=x.dtype)
        xp[:, :, ph:ph + h, pw:pw + w] = x
    else:
        xp = x
    cols = np.empty((b, c, kh, kw, ho, wo), dtype=x.dtype)
    for i in range(kh):
        for j in range(kw):
            cols[:, :, i, j] = xp[:, :, i:i + sh * ho:sh, j:j + sw * wo:sw]
    return cols.reshape(b, c * kh * kw, ho * wo), ho, wo


def _col2im(cols: np.ndarray, shape, kh, kw, sh, sw, ph, pw, ho, wo) -> np.ndarray:
    """Scatter-add columns ``(B, C*kh*kw, ho*wo)`` back onto an NCHW tensor."""
    b, c, h, w = shape
    cols = cols.reshape(b, c, kh, kw, ho, wo)
    if kh == sh and kw == sw and not (ph or pw) and ho * sh == h and wo * sw == w:
        # non-overlapping windows tile the output exactly: a pure reshuffle
        return np.ascontiguousarray(cols.transpose(0, 1, 4, 2, 5, 3)).reshape(b, c, h, w)
    xp = np.zeros((b, c, h + 2 * ph, w + 2 * pw), dtype=cols.dtype)
    for i in range(kh):
        for j in range(kw):
            xp[:, :, i:i + sh * ho:sh, j:j + sw * wo:sw] += cols[:, :, i, j]
    if ph or pw:
        return np.ascontiguousarray(xp[:, :, ph:ph + h, pw:pw + w])
    return xp


def conv2d_forward(x, weight, bias, stride=1, padding=0):
    if x.ndim != 4:
        raise ConfigError(f"conv2d expects a rank-4 input, got shape {x.shape}")
    cout, cin, kh, kw = weight.shape
    if x.shape[1] != cin:
        raise ConfigError(f"conv2d: input has {x.shape[1]} channels, kernel expects {cin}")
    sh, sw = _pair(stride)
    ph, pw = _pair(padding)
    if x.shape[2] + 2 * ph < kh or x.shape[3] + 2 * pw < kw:
        raise ConfigError(f"conv2d: kernel {kh}x{kw} larger than padded input {x.shape[2:]}")
    cols, ho, wo = _im2col(x, kh, kw, sh, sw, ph, pw)
    out = np.matmul(weight.reshape(cout, -1), cols)
    out += bias.reshape(1, -1, 1)
    cache = (x.shape, cols, weight, (kh, kw, sh, sw, ph, pw, ho, wo))
    return out.reshape(x.shape[0], cout, ho, wo), cache


def conv2d_backward(gout, cache):
    xshape, cols, weight, (kh, kw, sh, sw, ph, pw, ho, wo) = cache
    b, cout = gout.shape[:2]
    g2 = gout.reshape(b, cout, -1)
    gw = np.matmul(g2, cols.transpose(0, 2, 1)).sum(axis=0).reshape(weight.shape)
    gb = g2.sum(axis=(0, 2))
    gcols = np.matmul(weight.reshape(cout, -1).T, g2)
    gx = _col2im(gcols, xshape, kh, kw, sh, sw, ph, pw, ho, wo)
    return gx, gw, gb


def tconv2d_forward(x, weight, bias, stride=1, padding=0):
    """Transposed convolution: the adjoint of ``conv2d`` with the same geometry."""
    if x.ndim != 4:
        raise ConfigError(f"transposed_conv2d expects a rank-4 input, got shape {x.shape}")
    cin, cout, kh, kw = weight.shape
    if x.shape[1] != cin:
        raise ConfigError(f"transposed_conv2d: input has {x.shape[1]} channels, kernel expects {cin}")
    sh, sw = _pair(stride)
    ph, pw = _pair(padding)
    b, _, h, w = x.shape
    ho = tconv_output_size(h, kh, sh, ph)
    wo = tconv_output_size(w, kw, sw, pw)
    if ho < 1 or wo < 1:
        raise ConfigError("transposed_conv2d: configuration yields an empty output")
    x2 = x.reshape(b, cin, h * w)
    cols = np.matmul(weight.reshape(cin, -1).T, x2)
    out = _col2im(cols, (b, cout, ho, wo), kh, kw, sh, sw, ph, pw, h, w)
    out += bias.reshape(1, -1, 1, 1)
    cache = (x2, x.shape, weight, (kh, kw, sh, sw, ph, pw))
    return out, cache


def tconv2d_backward(gout, cache):
    x2, xshape, weight, (kh, kw, sh, sw, ph, pw) = cache
    cin = weight.shape[0]
    b, _, h, w = xshape
    # gathering gout with the forward geometry yields exactly one window per input cell
    gcols, _, _ = _im2col(gout, kh, kw, sh, sw, ph, pw)
    gx = np.matmul(weight.reshape(cin, -1), gcols).reshape(b, cin, h, w)
    gw = np.matmul(x2, gcols.transpose(0, 2, 1)).sum(axis=0).reshape(weight.shape)
    gb = gout.sum(axis=(0, 2, 3))
    return gx, gw, gb


# ---------------------------------------------------------------- pooling

def maxpool2d_forward(x, kernel, stride=None):
    if x.ndim != 4:
        raise ConfigError(f"maxpool2d expects a rank-4 input, got shape {x.shape}")
    kh, kw = _pair(kernel)
    sh, sw = _pair(stride if stride is not None else kernel)
    b, c, h, w = x.shape
    if kh > h or kw > w:
        raise ConfigError(f"maxpool2d: kernel {kh}x{kw} larger than input {h}x{w}")
    out, arg = _kernels.maxpool_forward(np.ascontiguousarray(x), kh, kw, sh, sw)
    return out, (x.shape, arg, (kh, kw, sh, sw))


def maxpool2d_backward(gout, cache):
    xshape, arg, (kh, kw, sh, sw) = cache
    return _kernels.maxpool_backward(np.ascontiguousarray(gout), arg, xshape[2], xshape[3],
                                     kh, kw, sh, sw)


# ---------------------------------------------------------------- dense

def dense_forward(x, weight, bias):
    if x.ndim != 2 or x.shape[1] != weight.shape[0]:
        raise ConfigError(f"dense: input {x.shape} incompatible with weight {weight.shape}")
    return x @ weight + bias, (x, weight)


def dense_backward(gout, cache):
    x, weight = cache
    return gout @ weight.T, x.T @ gout, gout.sum(axis=0)


# ---------------------------------------------------------------- batch norm

def batchnorm_forward(x, gamma, beta, running_mean, running_var, train, momentum=0.1,
                      track=True):
    """Per-channel normalisation over (B, H, W).

    In train mode the running statistics are updated in place unless ``track``
    is false.
    """
    if x.ndim != 4 or x.shape[1] != gamma.shape[0]:
        raise ConfigError(f"batchnorm: input {x.shape} does not match {gamma.shape[0]} channels")
    shp = (1, -1, 1, 1)
    if train:
        mean = x.mean(axis=(0, 2, 3))
        xc = x - mean.reshape(shp)
        xc *= xc
        var = xc.mean(axis=(0, 2, 3))
        del xc
        if track:
            running_mean *= 1 - momentum
            running_mean += momentum * mean
            running_var *= 1 - momentum
            running_var += momentum * var
    else:
        mean, var = running_mean, running_var
    inv = (1.0 / np.sqrt(var + BN_EPS)).astype(x.dtype)
    scale = gamma * inv
    out = x * scale.reshape(shp)
    out += (beta - mean * scale).reshape(shp)
    return out, (x, mean.astype(x.dtype), inv, gamma, train)


def batchnorm_backward(gout, cache):
    x, mean, inv, gamma, train = cache
    shp = (1, -1, 1, 1)
    xhat = x - mean.reshape(shp)
    xhat *= inv.reshape(shp)
    gbeta = gout.sum(axis=(0, 2, 3))
    ggamma = np.einsum("bchw,bchw->c", gout, xhat)
    scale = (gamma * inv).reshape(shp)
    if not train:
        return gout * scale, ggamma, gbeta
    n = x.shape[0] * x.shape[2] * x.shape[3]
    # gx = gamma*inv * (g - mean(g) - xhat * mean(g * xhat))
    xhat *= (ggamma / n).reshape(shp)
    gx = gout - (gbeta / n).reshape(shp)
    gx -= xhat
    gx *= scale
    return gx, ggamma, gbeta


# ---------------------------------------------------------------- pointwise

def relu_forward(x):
    mask = x > 0
    return x * mask, mask


def relu_backward(gout, mask):
    return gout * mask


def dropout_mask(shape, rate, rng, dtype):
    if not 0 <= rate < 1:
        raise ConfigError(f"dropout rate must lie in [0, 1), got {rate}")
    keep = rng.random(shape) >= rate
    return keep.astype(dtype) / (1.0 - rate)


def softmax(x):
    z = x - x.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def flush_subnormal(a: np.ndarray) -> np.ndarray:
    """Zero out subnormal entries in place.

    A saturated softmax yields gradients far below the normal range; left in,
    they slow every downstream BLAS call by an order of magnitude.
    """
    a[np.abs(a) < np.finfo(a.dtype).tiny] = 0
    return a


def softmax_backward(gout, probs):
    dot = (gout * probs).sum(axis=1, keepdims=True)
    return flush_subnormal(probs * (gout - dot))


# ---------------------------------------------------------------- losses

def cross_entropy(probs, targets, mask=None):
    """Masked mean of ``-log p[target]`` and its gradient w.r.t. ``probs``.

    Masked-out samples contribute neither loss nor gradient; a batch with no
    active sample has loss 0.
    """
    probs = np.asarray(probs)
    n = probs.shape[0]
    targets = np.asarray(targets, dtype=np.int64)
    active = np.ones(n, dtype=bool) if mask is None else np.asarray(mask, dtype=bool)
    grad = np.zeros_like(probs)
    count = int(active.sum())
    if count == 0:
        return 0.0, grad
    rows = np.flatnonzero(active)
    picked = np.maximum(probs[rows, targets[rows]], LOG_CLAMP)
    loss = float(-np.log(picked).sum() / count)
    grad[rows, targets[rows]] = -1.0 / (picked * count)
    return loss, grad


def squared_error(xhat, x):
    """Batch mean of the per-sample summed squared error, with its gradient."""
    diff = xhat - x
    b = x.shape[0]
    loss = float((diff.astype(np.float64) ** 2).sum() / b)
    return loss, (2.0 / b) * diff
